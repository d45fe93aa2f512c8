//! Three training stages and the dual-branch composition.
//!
//! 1. reconstructor on source images (MSE), then frozen;
//! 2. backbone on reconstructed source series (cross-entropy), then frozen;
//! 3. warp block and `v_T` on unlabeled target series, everything else frozen.
//!
//! Stage 3 sees only a [`TargetView`]; nothing reachable from its arguments carries
//! source data.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{image_to_series_tensor, series_to_image_tensor, ReshapeSpec, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::ingest::{DomainDataset, DomainRole};
use crate::losses::{cross_entropy_t, mse_t, tsallis_t, AdaptConfig};
use crate::models::{Backbone, Mode, ModelParams, Reconstructor};

/// Instances per forward pass when no gradient is needed.
pub const EVAL_CHUNK: usize = 64;

/// Branch weights: `x_hat = v_T * warp + v_S * replay`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFactors {
    pub v_s: f64,
    pub v_t: f64,
}

impl Default for ScalingFactors {
    fn default() -> Self {
        Self { v_s: 1.0, v_t: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSetting {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub stage1: StageSetting,
    pub stage2: StageSetting,
    pub stage3: StageSetting,
    pub batch_size: usize,
}

impl StageSchedule {
    const fn table(s1: (f64, usize), s2: (f64, usize), s3: (f64, usize)) -> Self {
        Self {
            stage1: StageSetting { lr: s1.0, epochs: s1.1 },
            stage2: StageSetting { lr: s2.0, epochs: s2.1 },
            stage3: StageSetting { lr: s3.0, epochs: s3.1 },
            batch_size: 32,
        }
    }

    pub const fn mfd() -> Self {
        Self::table((5e-3, 8), (2e-3, 20), (5e-3, 8))
    }

    pub const fn ssc() -> Self {
        Self::table((5e-3, 8), (2e-3, 15), (5e-3, 15))
    }

    pub const fn ucihar() -> Self {
        Self::table((5e-4, 15), (5e-3, 15), (5e-3, 8))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in [self.stage1, self.stage2, self.stage3].iter().enumerate() {
            if !(s.lr > 0.0 && s.lr.is_finite()) || s.epochs == 0 {
                return Err(Error::Config(format!(
                    "stage {} needs a positive learning rate and epoch count, got {s:?}",
                    i + 1
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::mfd()
    }
}

/// Which branches take part in stage 3 and at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    Full,
    /// `v_S` pinned to 0: the warp branch alone.
    WithoutSourceReplay,
    /// `v_T` pinned to 0: pure source replay.
    WithoutOffset,
}

/// Per-epoch training record, written one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ur: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_t: Option<f64>,
}

impl EpochRecord {
    fn emit(&self) {
        log::info!("{}", serde_json::to_string(self).unwrap_or_default());
    }
}

/// The fixed architectures of one run.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline {
    pub spec: ReshapeSpec,
    pub reconstructor: Reconstructor,
    pub warp: Reconstructor,
    pub backbone: Backbone,
}

/// Unlabeled target data for stage 3. Implemented by [`DomainDataset`]; tests use it to
/// audit what the adaptation stage touches.
pub trait TargetView {
    fn role(&self) -> DomainRole;
    fn target_series(&self) -> &TimeSeriesBatch;
}

impl TargetView for DomainDataset {
    fn role(&self) -> DomainRole {
        self.role
    }

    fn target_series(&self) -> &TimeSeriesBatch {
        &self.series
    }
}

pub(crate) fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut idx: Vec<u32> = (0..n as u32).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size)
        .map(|c| Tensor::from_vec(c.to_vec(), c.len(), &Device::Cpu).expect("index tensor"))
        .collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(stage: &str, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: stage.into(),
            epoch,
            loss,
        })
    }
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// Applies `f` to consecutive chunks along dim 0 and concatenates the results.
pub(crate) fn map_chunks(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = x.dim(0)?;
    let mut parts = Vec::with_capacity(n.div_ceil(EVAL_CHUNK));
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        parts.push(f(&x.narrow(0, start, len)?)?.detach());
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Elementwise `v_T * w + v_S * u`.
pub fn compose_reconstruction(u: &TimeSeriesBatch, w: &TimeSeriesBatch, s: &ScalingFactors) -> Result<TimeSeriesBatch> {
    if u.dims() != w.dims() {
        return Err(Error::Shape(format!("replay {:?} vs warp {:?}", u.dims(), w.dims())));
    }
    let w = w.tensor().to_dtype(u.dtype())?;
    let out = ((w * s.v_t)? + (u.tensor() * s.v_s)?)?;
    Ok(TimeSeriesBatch::from_tensor_unchecked(out))
}

/// Tensor form with a (possibly trainable) `v_T` scalar tensor.
pub fn compose_t(u: &Tensor, w: &Tensor, v_s: f64, v_t: &Tensor) -> Result<Tensor> {
    if u.dims() != w.dims() {
        return Err(Error::Shape(format!("replay {:?} vs warp {:?}", u.dims(), w.dims())));
    }
    Ok((w.broadcast_mul(v_t)? + (u * v_s)?)?)
}

impl Pipeline {
    pub fn dims_check(&self, series: &TimeSeriesBatch) -> Result<()> {
        let (_, d, l) = series.dims();
        if d != self.spec.d || l != self.spec.l {
            return Err(Error::Shape(format!(
                "dataset series [*, {d}, {l}] do not match the pipeline's [*, {}, {}]",
                self.spec.d, self.spec.l
            )));
        }
        Ok(())
    }

    /// Source replay `j(x)` in image space, no gradient.
    pub fn replay_images(&self, theta: &ModelParams, series: &Tensor) -> Result<Tensor> {
        map_chunks(series, |x| {
            let img = series_to_image_tensor(x, &self.spec)?;
            Ok(self.reconstructor.forward(theta, &img)?.output)
        })
    }

    /// Source replay `j(x)` mapped back to series.
    pub fn replay_series(&self, theta: &ModelParams, series: &Tensor) -> Result<Tensor> {
        image_to_series_tensor(&self.replay_images(theta, series)?, &self.spec)
    }

    /// Warp branch `h(j(x))` as series, given replay images, no gradient.
    pub fn warp_series(&self, phi: &ModelParams, replay_images: &Tensor) -> Result<Tensor> {
        map_chunks(replay_images, |u| {
            image_to_series_tensor(&self.warp.forward(phi, u)?.output, &self.spec)
        })
    }

    pub fn logits(&self, backbone: &ModelParams, series: &Tensor) -> Result<Tensor> {
        map_chunks(series, |x| self.backbone.forward(backbone, x, Mode::Eval))
    }

    pub fn probs(&self, backbone: &ModelParams, series: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits(backbone, series)?, D::Minus1)?)
    }

    pub fn features(&self, backbone: &ModelParams, series: &Tensor) -> Result<Tensor> {
        map_chunks(series, |x| self.backbone.features(backbone, x, Mode::Eval))
    }

    /// Warp-block parameters as stage 3 initializes them for `seed`.
    pub fn init_warp(&self, seed: u64) -> Result<ModelParams> {
        self.warp.init(sub_seed(seed, 3), DType::F32, &Device::Cpu)
    }

    /// Stage 1: fit the reconstructor to source images, then freeze it.
    pub fn pretrain_reconstructor(
        &self,
        source: &DomainDataset,
        sched: &StageSchedule,
        seed: u64,
    ) -> Result<(ModelParams, Vec<EpochRecord>)> {
        sched.validate()?;
        self.dims_check(&source.series)?;
        let images = series_to_image_tensor(&source.series.tensor().to_dtype(DType::F32)?, &self.spec)?;
        self.reconstructor.check_input(images.dims())?;
        let theta = self.reconstructor.init(sub_seed(seed, 1), DType::F32, &Device::Cpu)?;
        let mut opt = adam(theta.trainable_vars(), sched.stage1.lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 11));
        let mut log = Vec::with_capacity(sched.stage1.epochs);
        for epoch in 0..sched.stage1.epochs {
            let (mut total, mut mse_sum, mut count) = (0.0, 0.0, 0usize);
            for idx in shuffled_batches(images.dim(0)?, sched.batch_size, &mut rng) {
                let x = images.index_select(&idx, 0)?;
                let out = self.reconstructor.forward(&theta, &x)?;
                let mse = mse_t(&out.output, &x)?;
                let loss = match &out.aux_loss {
                    Some(aux) => (&mse + aux)?,
                    None => mse.clone(),
                };
                let lv = scalar(&loss)?;
                check_finite("stage1", epoch, lv)?;
                opt.backward_step(&loss)?;
                let b = idx.dim(0)?;
                total += lv * b as f64;
                mse_sum += scalar(&mse)? * b as f64;
                count += b;
            }
            let rec = EpochRecord {
                stage: "stage1".into(),
                epoch,
                loss: total / count as f64,
                mse: Some(mse_sum / count as f64),
                ur: None,
                vq: None,
                v_t: None,
            };
            rec.emit();
            log.push(rec);
        }
        Ok((theta.freeze()?, log))
    }

    /// Stage 2: train the backbone on `j(X_S)` with cross-entropy, then freeze it.
    pub fn pretrain_backbone(
        &self,
        source: &DomainDataset,
        theta: &ModelParams,
        sched: &StageSchedule,
        seed: u64,
    ) -> Result<(ModelParams, Vec<EpochRecord>)> {
        sched.validate()?;
        theta.ensure_frozen("reconstructor")?;
        self.dims_check(&source.series)?;
        let labels = source.require_labels()?;
        if labels.num_classes() != self.backbone.cfg.num_classes {
            return Err(Error::Config(format!(
                "dataset has K = {} but the backbone is built for {}",
                labels.num_classes(),
                self.backbone.cfg.num_classes
            )));
        }
        let labels = labels.to_tensor(&Device::Cpu)?;
        let inputs = self.replay_series(theta, &source.series.tensor().to_dtype(DType::F32)?)?;
        let params = self.backbone.init(sub_seed(seed, 2), DType::F32, &Device::Cpu)?;
        let mut opt = adam(params.trainable_vars(), sched.stage2.lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 12));
        let mut log = Vec::with_capacity(sched.stage2.epochs);
        let mut step = 0u64;
        for epoch in 0..sched.stage2.epochs {
            let (mut total, mut count) = (0.0, 0usize);
            for idx in shuffled_batches(inputs.dim(0)?, sched.batch_size, &mut rng) {
                let x = inputs.index_select(&idx, 0)?;
                let y = labels.index_select(&idx, 0)?;
                step += 1;
                let logits = self.backbone.forward(
                    &params,
                    &x,
                    Mode::Train {
                        seed: sub_seed(seed, 1000 + step),
                    },
                )?;
                let loss = cross_entropy_t(&logits, &y)?;
                let lv = scalar(&loss)?;
                check_finite("stage2", epoch, lv)?;
                opt.backward_step(&loss)?;
                total += lv * idx.dim(0)? as f64;
                count += idx.dim(0)?;
            }
            let rec = EpochRecord {
                stage: "stage2".into(),
                epoch,
                loss: total / count as f64,
                mse: None,
                ur: None,
                vq: None,
                v_t: None,
            };
            rec.emit();
            log.push(rec);
        }
        theta.ensure_frozen("reconstructor")?;
        Ok((params.freeze()?, log))
    }

    /// Stage 3: train the warp block and `v_T` on unlabeled target data with the
    /// reconstructor and backbone frozen. Returns the frozen warp parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn adapt_group(
        &self,
        target: &dyn TargetView,
        theta: &ModelParams,
        backbone: &ModelParams,
        cfg: &AdaptConfig,
        sched: &StageSchedule,
        branches: BranchMode,
        seed: u64,
    ) -> Result<(ModelParams, ScalingFactors, Vec<EpochRecord>)> {
        if target.role() == DomainRole::Source {
            return Err(Error::SourceAccess(
                "adaptation was handed a source-tagged dataset".into(),
            ));
        }
        cfg.validate()?;
        sched.validate()?;
        theta.ensure_frozen("reconstructor")?;
        backbone.ensure_frozen("backbone")?;
        let series = target.target_series();
        self.dims_check(series)?;

        let x_t = series.tensor().to_dtype(DType::F32)?;
        let replay_img = self.replay_images(theta, &x_t)?;
        let replay = image_to_series_tensor(&replay_img, &self.spec)?;
        let phi = self.init_warp(seed)?;
        self.warp.check_input(replay_img.dims())?;

        let v_s = match branches {
            BranchMode::WithoutSourceReplay => 0.0,
            _ => 1.0,
        };
        let v_t = Var::from_tensor(&Tensor::zeros((), DType::F32, &Device::Cpu)?)?;
        let mut vars = phi.trainable_vars();
        if branches != BranchMode::WithoutOffset {
            vars.push(v_t.clone());
        }
        let v_t_input = |branches: BranchMode| -> Tensor {
            if branches == BranchMode::WithoutOffset {
                v_t.as_tensor().detach()
            } else {
                v_t.as_tensor().clone()
            }
        };
        let mut opt = adam(vars, sched.stage3.lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 13));
        let mut log = Vec::with_capacity(sched.stage3.epochs);
        for epoch in 0..sched.stage3.epochs {
            let mut sums = [0.0f64; 4];
            let mut count = 0usize;
            for idx in shuffled_batches(x_t.dim(0)?, sched.batch_size, &mut rng) {
                let x = x_t.index_select(&idx, 0)?;
                let u = replay.index_select(&idx, 0)?;
                let u_img = replay_img.index_select(&idx, 0)?;
                let warped = self.warp.forward(&phi, &u_img)?;
                let w = image_to_series_tensor(&warped.output, &self.spec)?;
                let x_hat = compose_t(&u, &w, v_s, &v_t_input(branches))?;
                let logits = self.backbone.forward(backbone, &x_hat, Mode::Eval)?;
                let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;

                let mse = mse_t(&x, &x_hat)?;
                let ur = tsallis_t(&probs, cfg.q)?;
                let mut loss = mse.clone();
                if cfg.lambda != 0.0 {
                    loss = (loss + (&ur * cfg.lambda)?)?;
                }
                if let (Some(aux), true) = (&warped.aux_loss, cfg.vq_weight != 0.0) {
                    loss = (loss + (aux * cfg.vq_weight)?)?;
                }
                let lv = scalar(&loss)?;
                check_finite("stage3", epoch, lv)?;
                opt.backward_step(&loss)?;

                let b = idx.dim(0)? as f64;
                sums[0] += lv * b;
                sums[1] += scalar(&mse)? * b;
                sums[2] += scalar(&ur)? * b;
                if let Some(aux) = &warped.aux_loss {
                    sums[3] += scalar(aux)? * b;
                }
                count += idx.dim(0)?;
            }
            let n = count as f64;
            let rec = EpochRecord {
                stage: "stage3".into(),
                epoch,
                loss: sums[0] / n,
                mse: Some(sums[1] / n),
                ur: Some(sums[2] / n),
                vq: warped_has_aux(&self.warp).then_some(sums[3] / n),
                v_t: Some(scalar(v_t.as_tensor())?),
            };
            rec.emit();
            log.push(rec);
        }
        theta.ensure_frozen("reconstructor")?;
        backbone.ensure_frozen("backbone")?;
        let scales = ScalingFactors {
            v_s,
            v_t: scalar(v_t.as_tensor())?,
        };
        Ok((phi.freeze()?, scales, log))
    }
}

fn warped_has_aux(r: &Reconstructor) -> bool {
    matches!(r, Reconstructor::Ae(_))
}
