//! Stability-weighted test-time ensembling over perturbed replay weights.
//!
//! For one instance, `v_S` is swept over `1 + j * delta`, `j = -n..=n`, with `v_T`
//! fixed. Each grid point `j > -n` is scored by the cosine similarity between its
//! prediction and its left neighbour's; a softmax over those scores weights the
//! matching predictions.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::adapt::{compose_t, Pipeline, ScalingFactors};
use crate::datamodel::{image_to_series_tensor, series_to_image_tensor, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::losses::ProbVector;
use crate::models::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Neighbour cosine similarity.
    Cosine,
    /// Negative prediction entropy.
    Entropy,
    /// No ensembling: the unperturbed prediction.
    Off,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "entropy" => Ok(Self::Entropy),
            "off" | "none" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown weighting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub delta: f64,
    pub n: usize,
    pub weighting: Weighting,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self::mfd()
    }
}

impl TtaConfig {
    const fn with_n(n: usize) -> Self {
        Self {
            delta: 1e-3,
            n,
            weighting: Weighting::Cosine,
        }
    }

    pub const fn mfd() -> Self {
        Self::with_n(10)
    }

    pub const fn ssc() -> Self {
        Self::with_n(8)
    }

    pub const fn ucihar() -> Self {
        Self::with_n(3)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.n == 0 {
            return Err(Error::Config("grid half-width n must be at least 1".into()));
        }
        if self.n as f64 * self.delta >= 1.0 {
            return Err(Error::Config("n * delta must stay below 1".into()));
        }
        Ok(())
    }
}

/// `[1 - n*delta, ..., 1, ..., 1 + n*delta]`.
pub fn perturbation_grid(cfg: &TtaConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n as i64;
    Ok((-n..=n).map(|j| 1.0 + j as f64 * cfg.delta).collect())
}

/// Cosine of the angle between two arbitrary vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("length {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidData("cosine of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

pub fn cosine_similarity(p: &ProbVector, r: &ProbVector) -> Result<f64> {
    cosine(p.as_slice(), r.as_slice())
}

fn softmax(sims: &[f64]) -> Vec<f64> {
    let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn stability_weights(similarities: &[f64]) -> Result<Vec<f64>> {
    if similarities.is_empty() || similarities.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidData(format!("bad similarity scores {similarities:?}")));
    }
    Ok(softmax(similarities))
}

fn entropy(p: &ProbVector) -> f64 {
    -p.as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Every intermediate of one ensembled prediction.
#[derive(Debug, Clone)]
pub struct StabilityEnsemble {
    pub grid: Vec<f64>,
    pub probs: Vec<ProbVector>,
    /// One score per ensembled grid point (`j = -n+1..=n`).
    pub sims: Vec<f64>,
    pub weights: Vec<f64>,
    pub output: ProbVector,
}

impl StabilityEnsemble {
    /// Combines the `2n + 1` grid predictions, ordered by `j`.
    pub fn from_predictions(grid: Vec<f64>, probs: Vec<ProbVector>, weighting: Weighting) -> Result<Self> {
        if probs.len() != grid.len() || grid.len() < 3 || grid.len() % 2 == 0 {
            return Err(Error::Shape(format!(
                "{} predictions for a grid of {}",
                probs.len(),
                grid.len()
            )));
        }
        let k = probs[0].as_slice().len();
        let mid = grid.len() / 2;
        let (sims, weights, output) = match weighting {
            Weighting::Off => (vec![], vec![1.0], probs[mid].clone()),
            Weighting::Cosine | Weighting::Entropy => {
                let sims = (1..probs.len())
                    .map(|j| match weighting {
                        Weighting::Cosine => cosine_similarity(&probs[j - 1], &probs[j]),
                        _ => Ok(-entropy(&probs[j])),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let weights = stability_weights(&sims)?;
                let mut out = vec![0.0; k];
                for (w, p) in weights.iter().zip(&probs[1..]) {
                    for (o, v) in out.iter_mut().zip(p.as_slice()) {
                        *o += w * v;
                    }
                }
                let z: f64 = out.iter().sum();
                out.iter_mut().for_each(|v| *v /= z);
                (sims, weights, ProbVector::new(out)?)
            }
        };
        Ok(Self {
            grid,
            probs,
            sims,
            weights,
            output,
        })
    }
}

/// Frozen parameters of an adapted pipeline.
#[derive(Debug)]
pub struct AdaptedModel {
    pub pipeline: Pipeline,
    pub theta: ModelParams,
    pub backbone: ModelParams,
    pub phi: ModelParams,
    pub scales: ScalingFactors,
}

impl AdaptedModel {
    /// Grid probs for one instance `[1, d, L]`, batched over the grid.
    pub fn grid_predictions(&self, x: &Tensor, grid: &[f64]) -> Result<Vec<ProbVector>> {
        let p = &self.pipeline;
        let img = series_to_image_tensor(&x.to_dtype(DType::F32)?, &p.spec)?;
        let u_img = p.reconstructor.forward(&self.theta, &img)?.output.detach();
        let u = image_to_series_tensor(&u_img, &p.spec)?;
        let w = image_to_series_tensor(&p.warp.forward(&self.phi, &u_img)?.output, &p.spec)?.detach();
        let v_t = Tensor::new(self.scales.v_t as f32, x.device())?;
        let mut stacked = Vec::with_capacity(grid.len());
        for &v_s in grid {
            stacked.push(compose_t(&u, &w, v_s * self.scales.v_s, &v_t)?);
        }
        let batch = Tensor::cat(&stacked, 0)?;
        let logits = p.backbone.forward(&self.backbone, &batch, crate::models::Mode::Eval)?;
        ProbVector::rows(&candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    /// Ensembled prediction for every instance, each computed independently.
    pub fn ensemble_predict(&self, x: &TimeSeriesBatch, cfg: &TtaConfig) -> Result<Vec<ProbVector>> {
        Ok(self.ensemble_details(x, cfg)?.into_iter().map(|e| e.output).collect())
    }

    pub fn ensemble_details(&self, x: &TimeSeriesBatch, cfg: &TtaConfig) -> Result<Vec<StabilityEnsemble>> {
        let grid = perturbation_grid(cfg)?;
        let t = x.tensor();
        (0..x.batch_size())
            .map(|i| {
                let preds = self.grid_predictions(&t.narrow(0, i, 1)?, &grid)?;
                StabilityEnsemble::from_predictions(grid.clone(), preds, cfg.weighting)
            })
            .collect()
    }

    /// Plain probs at the learned scaling factors, no ensembling.
    pub fn predict(&self, x: &TimeSeriesBatch) -> Result<Vec<ProbVector>> {
        ProbVector::rows(&self.pipeline.probs(&self.backbone, &self.reconstruct(x)?)?)
    }

    /// `x_hat` at the learned scaling factors.
    pub fn reconstruct(&self, x: &TimeSeriesBatch) -> Result<Tensor> {
        let p = &self.pipeline;
        let xt = x.tensor().to_dtype(DType::F32)?;
        let u_img = p.replay_images(&self.theta, &xt)?;
        let u = image_to_series_tensor(&u_img, &p.spec)?;
        let w = p.warp_series(&self.phi, &u_img)?;
        let v_t = Tensor::new(self.scales.v_t as f32, xt.device())?;
        compose_t(&u, &w, self.scales.v_s, &v_t)
    }
}

pub fn ensemble_predict(x: &TimeSeriesBatch, model: &AdaptedModel, cfg: &TtaConfig) -> Result<Vec<ProbVector>> {
    model.ensemble_predict(x, cfg)
}
