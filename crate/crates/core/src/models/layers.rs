//! Stateless layer helpers. Weights live in a [`ModelParams`] under `<prefix>.<name>`.

use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ModelParams, ParamKind};
use crate::error::Result;

/// Forward-pass mode. `Train` carries the seed for dropout masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

fn insert_uniform(
    params: &mut ModelParams,
    name: String,
    shape: &[usize],
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = shape.iter().product();
    let t = Tensor::from_vec(uniform(rng, n, bound), shape, params.device())?;
    params.insert(name, t, ParamKind::Weight)
}

/// Weight `[out, in, k, k]` (+ bias `[out]`), uniform in `±1/sqrt(fan_in)`.
pub fn init_conv2d(
    params: &mut ModelParams,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    insert_uniform(params, format!("{prefix}.weight"), &[c_out, c_in, k, k], bound, rng)?;
    if bias {
        insert_uniform(params, format!("{prefix}.bias"), &[c_out], bound, rng)?;
    }
    Ok(())
}

pub fn conv2d(params: &ModelParams, prefix: &str, x: &Tensor, padding: usize) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let x = x
        .pad_with_zeros(2, padding, padding)?
        .pad_with_zeros(3, padding, padding)?;
    let y = x.conv2d(&w, 0, 1, 1, 1)?;
    let bias = format!("{prefix}.bias");
    if params.contains(&bias) {
        let b = params.get(&bias)?;
        Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
    } else {
        Ok(y)
    }
}

pub fn init_conv1d(
    params: &mut ModelParams,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = 1.0 / ((c_in * k) as f64).sqrt();
    insert_uniform(params, format!("{prefix}.weight"), &[c_out, c_in, k], bound, rng)?;
    if bias {
        insert_uniform(params, format!("{prefix}.bias"), &[c_out], bound, rng)?;
    }
    Ok(())
}

/// Unit-height 2-D convolution at stride 1, then every `stride`-th position.
pub fn conv1d(params: &ModelParams, prefix: &str, x: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let x = x.pad_with_zeros(2, padding, padding)?;
    let y = x.unsqueeze(2)?.conv2d(&w.unsqueeze(2)?, 0, 1, 1, 1)?.squeeze(2)?;
    let y = subsample(&y, stride)?;
    let bias = format!("{prefix}.bias");
    if params.contains(&bias) {
        let b = params.get(&bias)?;
        Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1))?)?)
    } else {
        Ok(y)
    }
}

/// Positions `0, s, 2s, ..` of the last axis of `[B, C, L]`.
fn subsample(y: &Tensor, s: usize) -> Result<Tensor> {
    if s <= 1 {
        return Ok(y.clone());
    }
    let (b, c, l) = y.dims3()?;
    let lo = (l - 1) / s + 1;
    Ok(y.narrow(2, 0, s * (lo - 1) + 1)?
        .pad_with_zeros(2, 0, s - 1)?
        .reshape((b, c, lo, s))?
        .narrow(3, 0, 1)?
        .squeeze(3)?)
}

pub fn init_linear(
    params: &mut ModelParams,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = 1.0 / (d_in as f64).sqrt();
    insert_uniform(params, format!("{prefix}.weight"), &[d_out, d_in], bound, rng)?;
    insert_uniform(params, format!("{prefix}.bias"), &[d_out], bound, rng)
}

pub fn linear(params: &ModelParams, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
}

pub fn init_batch_norm(params: &mut ModelParams, prefix: &str, channels: usize) -> Result<()> {
    let dev = params.device().clone();
    let dt = params.dtype();
    params.insert(
        format!("{prefix}.gamma"),
        Tensor::ones(channels, dt, &dev)?,
        ParamKind::Weight,
    )?;
    params.insert(
        format!("{prefix}.beta"),
        Tensor::zeros(channels, dt, &dev)?,
        ParamKind::Weight,
    )?;
    params.insert(
        format!("{prefix}.running_mean"),
        Tensor::zeros(channels, dt, &dev)?,
        ParamKind::Buffer,
    )?;
    params.insert(
        format!("{prefix}.running_var"),
        Tensor::ones(channels, dt, &dev)?,
        ParamKind::Buffer,
    )
}

/// Batch normalization over `[B, C, L]`. Training mode normalizes with batch
/// statistics and, unless the collection is frozen, updates the running estimates.
pub fn batch_norm1d(params: &ModelParams, prefix: &str, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let c = x.dim(1)?;
    let gamma = params.get(&format!("{prefix}.gamma"))?.reshape((1, c, 1))?;
    let beta = params.get(&format!("{prefix}.beta"))?.reshape((1, c, 1))?;
    let rm_name = format!("{prefix}.running_mean");
    let rv_name = format!("{prefix}.running_var");
    let (mean, var) = if mode.is_train() {
        let count = x.dim(0)? * x.dim(2)?;
        let mean = x.mean_keepdim(2)?.mean_keepdim(0)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?.mean_keepdim(0)?;
        if !params.is_array_frozen(&rm_name)? {
            let unbiased = if count > 1 {
                (var.detach().flatten_all()? * (count as f64 / (count - 1) as f64))?
            } else {
                var.detach().flatten_all()?
            };
            let rm = params.get(&rm_name)?;
            let rv = params.get(&rv_name)?;
            params.set(
                &rm_name,
                &((rm * (1.0 - BN_MOMENTUM))? + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?,
            )?;
            params.set(&rv_name, &((rv * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?)?;
        }
        (mean, var)
    } else {
        (
            params.get(&rm_name)?.reshape((1, c, 1))?,
            params.get(&rv_name)?.reshape((1, c, 1))?,
        )
    };
    let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
}

/// Inverted dropout with a mask drawn from `seed ^ salt`. Identity in eval mode or for `p == 0`.
pub fn dropout(x: &Tensor, p: f64, mode: Mode, salt: u64) -> Result<Tensor> {
    let Mode::Train { seed } = mode else {
        return Ok(x.clone());
    };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Non-overlapping max pooling by 2 along the last axis of `[B, C, L]` (odd tail dropped).
pub fn max_pool1d_2(x: &Tensor) -> Result<Tensor> {
    let (b, c, l) = x.dims3()?;
    let half = l / 2;
    Ok(x.narrow(2, 0, 2 * half)?.reshape((b, c, half, 2))?.max(D::Minus1)?)
}

/// 2x2 max pooling of `[B, C, H, W]` with even `H` and `W`.
pub fn max_pool2d_2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

/// Mean over all positions: adaptive average pooling to length 1, flattened to `[B, C]`.
pub fn global_avg_pool1d(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?)
}
