//! Scalar objectives. Each comes in a differentiable tensor form (`*_t`) used by the
//! training loops and a plain-value form over the domain types.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::datamodel::{LabelBatch, TimeSeriesBatch};
use crate::error::{Error, Result};

pub const SIMPLEX_TOL: f64 = 1e-6;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidData("empty probability vector".into()));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidData(format!(
                "negative or non-finite probability in {p:?}"
            )));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidData(format!("probabilities sum to {s}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            )
            .0
    }

    /// Rows of a `[B, K]` probability tensor.
    pub fn rows(probs: &Tensor) -> Result<Vec<Self>> {
        probs
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .into_iter()
            .map(Self::new)
            .collect()
    }
}

/// Weights of the group-level adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Weight of the uncertainty-reduction term.
    pub lambda: f64,
    /// Tsallis exponent, `> 1`.
    pub q: f64,
    /// Weight of the warp block's vector-quantization terms.
    pub vq_weight: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            q: 2.0,
            vq_weight: 1.0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.q > 1.0) || !self.q.is_finite() {
            return Err(Error::Config(format!("Tsallis q must be > 1, got {}", self.q)));
        }
        if !(self.vq_weight >= 0.0) {
            return Err(Error::Config("vq_weight must be >= 0".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn to_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean over the batch of each sample's mean squared error. With equal-sized
/// samples this is the plain per-element mean.
pub fn mse_t(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    same_shape(x, x_hat)?;
    Ok((x - x_hat)?.sqr()?.mean_all()?)
}

pub fn mse_loss(x: &TimeSeriesBatch, x_hat: &TimeSeriesBatch) -> Result<f64> {
    to_f64(&mse_t(x.tensor(), &x_hat.tensor().to_dtype(x.dtype())?)?)
}

/// Mean negative log-softmax of the true class. `labels` is a `u32` vector.
pub fn cross_entropy_t(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if labels.dims() != [b] {
        return Err(Error::Shape(format!("{b} logit rows but labels {:?}", labels.dims())));
    }
    let max_label = labels.max(0)?.to_scalar::<u32>()? as usize;
    if max_label >= k {
        return Err(Error::InvalidData(format!(
            "label {max_label} out of range for K = {k}"
        )));
    }
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = logp.gather(&labels.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

pub fn cross_entropy(logits: &Tensor, labels: &LabelBatch) -> Result<f64> {
    to_f64(&cross_entropy_t(logits, &labels.to_tensor(logits.device())?)?)
}

/// `mean_i (1 - sum_k p_ik^q) / (q - 1)` over a `[B, K]` probability tensor.
pub fn tsallis_t(probs: &Tensor, q: f64) -> Result<Tensor> {
    if !(q > 1.0) {
        return Err(Error::Config(format!("Tsallis q must be > 1, got {q}")));
    }
    let powered = if q == 2.0 {
        probs.sqr()?
    } else {
        probs.clamp(1e-30, 1.0)?.powf(q)?
    };
    let mass = powered.sum(D::Minus1)?;
    Ok(((mass.neg()? + 1.0)? / (q - 1.0))?.mean_all()?)
}

pub fn tsallis_ur_loss(probs: &[ProbVector], q: f64) -> Result<f64> {
    if !(q > 1.0) {
        return Err(Error::Config(format!("Tsallis q must be > 1, got {q}")));
    }
    if probs.is_empty() {
        return Err(Error::InvalidData("empty probability batch".into()));
    }
    let total: f64 = probs
        .iter()
        .map(|p| (1.0 - p.as_slice().iter().map(|v| v.powf(q)).sum::<f64>()) / (q - 1.0))
        .sum();
    Ok(total / probs.len() as f64)
}

/// `mse + lambda * ur (+ vq_weight * vq_aux)`.
pub fn overall_adapt_loss_t(
    x_t: &Tensor,
    x_hat_t: &Tensor,
    probs: &Tensor,
    vq_aux: Option<&Tensor>,
    cfg: &AdaptConfig,
) -> Result<Tensor> {
    let mut loss = mse_t(x_t, x_hat_t)?;
    if cfg.lambda != 0.0 {
        loss = (loss + (tsallis_t(probs, cfg.q)? * cfg.lambda)?)?;
    }
    if let Some(aux) = vq_aux {
        if cfg.vq_weight != 0.0 {
            loss = (loss + (aux * cfg.vq_weight)?)?;
        }
    }
    Ok(loss)
}

/// Plain-value objective without the VQ terms.
pub fn overall_adapt_loss(
    x_t: &TimeSeriesBatch,
    x_hat_t: &TimeSeriesBatch,
    probs: &[ProbVector],
    cfg: &AdaptConfig,
) -> Result<f64> {
    cfg.validate()?;
    let mse = mse_loss(x_t, x_hat_t)?;
    if cfg.lambda == 0.0 {
        return Ok(mse);
    }
    Ok(mse + cfg.lambda * tsallis_ur_loss(probs, cfg.q)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn series(v: &[f32], b: usize, d: usize, l: usize) -> TimeSeriesBatch {
        TimeSeriesBatch::from_vec(v.to_vec(), b, d, l).unwrap()
    }

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn mse_hand_values() {
        let x = series(&[1., 2.], 1, 1, 2);
        let z = series(&[0., 0.], 1, 1, 2);
        assert_eq!(mse_loss(&x, &z).unwrap(), 2.5);
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
        let z2 = series(&[1. - 2., 2. - 4.], 1, 1, 2);
        let base = mse_loss(&x, &series(&[0., 0.], 1, 1, 2)).unwrap();
        // error [2, 4] is twice [1, 2]
        assert_eq!(mse_loss(&x, &z2).unwrap(), 4.0 * base);
    }

    #[test]
    fn mse_shape_mismatch() {
        assert!(mse_loss(&series(&[1., 2.], 1, 1, 2), &series(&[1., 2., 3.], 1, 1, 3)).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_peaked() {
        let dev = Device::Cpu;
        let uniform = Tensor::zeros((4, 3), DType::F64, &dev).unwrap();
        let labels = LabelBatch::new(vec![0, 1, 2, 1], 3).unwrap();
        assert!((cross_entropy(&uniform, &labels).unwrap() - 3f64.ln()).abs() < 1e-12);

        let peaked = Tensor::new(&[[60f64, 0., 0.], [0., 60., 0.]], &dev).unwrap();
        let labels = LabelBatch::new(vec![0, 1], 3).unwrap();
        assert!(cross_entropy(&peaked, &labels).unwrap() < 1e-20);
    }

    #[test]
    fn cross_entropy_permutation_invariant() {
        let dev = Device::Cpu;
        let logits = Tensor::new(&[[0.3f64, -1.0, 2.0], [1.5, 0.2, -0.7], [0.0, 0.9, 0.1]], &dev).unwrap();
        let labels = LabelBatch::new(vec![2, 0, 1], 3).unwrap();
        let perm = [2usize, 0, 1];
        let idx = Tensor::new(&[2u32, 0, 1], &dev).unwrap();
        let a = cross_entropy(&logits, &labels).unwrap();
        let b = cross_entropy(&logits.index_select(&idx, 0).unwrap(), &labels.select(&perm).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range() {
        let dev = Device::Cpu;
        let logits = Tensor::zeros((1, 3), DType::F64, &dev).unwrap();
        let labels = Tensor::new(&[3u32], &dev).unwrap();
        assert!(cross_entropy_t(&logits, &labels).is_err());
    }

    #[test]
    fn tsallis_closed_forms() {
        assert_eq!(tsallis_ur_loss(&[pv(&[0., 1., 0.])], 2.0).unwrap(), 0.0);
        assert_eq!(tsallis_ur_loss(&[pv(&[0., 0., 0., 1.])], 3.5).unwrap(), 0.0);
        assert!((tsallis_ur_loss(&[pv(&[0.2; 5])], 2.0).unwrap() - 0.8).abs() < 1e-12);
        assert!((tsallis_ur_loss(&[pv(&[0.5, 0.5])], 2.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tsallis_tensor_matches_value_form() {
        let rows = [[0.1f64, 0.7, 0.2], [0.3, 0.3, 0.4]];
        let t = Tensor::new(&rows, &Device::Cpu).unwrap();
        for q in [2.0, 1.5, 3.0] {
            let a = to_f64(&tsallis_t(&t, q).unwrap()).unwrap();
            let b = tsallis_ur_loss(&[pv(&rows[0]), pv(&rows[1])], q).unwrap();
            assert!((a - b).abs() < 1e-12, "q={q}: {a} vs {b}");
        }
    }

    #[test]
    fn invalid_simplex_rows_rejected() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(tsallis_ur_loss(&[pv(&[0.5, 0.5])], 1.0).is_err());
    }

    #[test]
    fn overall_loss_combinations() {
        let x = series(&[1., 2.], 1, 1, 2);
        let z = series(&[0., 0.], 1, 1, 2);
        let p = [pv(&[0.5, 0.5])];
        let zero = AdaptConfig {
            lambda: 0.0,
            ..AdaptConfig::default()
        };
        assert_eq!(overall_adapt_loss(&x, &z, &p, &zero).unwrap(), 2.5);
        let l = overall_adapt_loss(&x, &z, &p, &AdaptConfig::default()).unwrap();
        assert!((l - 2.55).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tsallis_never_exceeds_uniform(k in 2usize..8, seed in any::<u64>(), q in 1.1f64..4.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
            let s: f64 = raw.iter().sum();
            let p = pv(&raw.iter().map(|v| v / s).collect::<Vec<_>>());
            let uni = pv(&vec![1.0 / k as f64; k]);
            let v = tsallis_ur_loss(&[p], q).unwrap();
            let u = tsallis_ur_loss(&[uni], q).unwrap();
            prop_assert!(v <= u + 1e-12);
            prop_assert!(v >= -1e-12);
        }

        #[test]
        fn mse_is_symmetric(vals in proptest::collection::vec(-10f32..10., 12)) {
            let a = series(&vals[..6], 2, 1, 3);
            let b = series(&vals[6..], 2, 1, 3);
            prop_assert_eq!(mse_loss(&a, &b).unwrap(), mse_loss(&b, &a).unwrap());
        }

        #[test]
        fn overall_monotone_in_lambda(l1 in 0f64..2., l2 in 0f64..2., p0 in 0.05f64..0.95) {
            let x = series(&[1., 2.], 1, 1, 2);
            let z = series(&[0.5, 0.], 1, 1, 2);
            let p = [pv(&[p0, 1.0 - p0])];
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let f = |lambda| overall_adapt_loss(&x, &z, &p, &AdaptConfig { lambda, ..AdaptConfig::default() }).unwrap();
            prop_assert!(f(lo) <= f(hi));
        }
    }
}
