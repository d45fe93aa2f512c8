//! 1D-CNN classification backbone: three conv blocks (conv, batch norm, ReLU,
//! 2x max-pool, dropout), global average pooling and a linear classifier.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    batch_norm1d, conv1d, dropout, global_avg_pool1d, init_batch_norm, init_conv1d, init_linear, linear, max_pool1d_2,
    Mode,
};
use super::params::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_len: usize,
    pub num_classes: usize,
    /// Kernel size and stride of the first block; later blocks use kernel 8, stride 1.
    pub kernel_size: usize,
    pub stride: usize,
    pub channels: [usize; 3],
    pub dropout: f64,
}

const INNER_KERNEL: usize = 8;

impl BackboneConfig {
    pub fn new(in_channels: usize, input_len: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            input_len,
            num_classes,
            kernel_size: 8,
            stride: 1,
            channels: [64, 128, 128],
            dropout: 0.5,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels[2]
    }

    /// Sequence length after each block, or `None` if some pooling stage would leave nothing.
    fn block_lengths(&self) -> Option<[usize; 3]> {
        let conv = |len: usize, k: usize, s: usize| (len + 2 * (k / 2)).checked_sub(k).map(|v| v / s + 1);
        let mut out = [0; 3];
        let mut len = self.input_len;
        for (i, slot) in out.iter_mut().enumerate() {
            let (k, s) = if i == 0 {
                (self.kernel_size, self.stride)
            } else {
                (INNER_KERNEL, 1)
            };
            len = conv(len, k, s)?;
            len /= 2;
            if len == 0 {
                return None;
            }
            *slot = len;
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Backbone {
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        if cfg.in_channels == 0
            || cfg.num_classes < 2
            || cfg.kernel_size == 0
            || cfg.stride == 0
            || cfg.channels.contains(&0)
            || !(0.0..1.0).contains(&cfg.dropout)
        {
            return Err(Error::Config(format!("invalid backbone config {cfg:?}")));
        }
        if cfg.block_lengths().is_none() {
            return Err(Error::Config(format!(
                "input length {} is too short for the backbone's three pooling stages",
                cfg.input_len
            )));
        }
        Ok(Self { cfg })
    }

    pub fn init(&self, seed: u64, dtype: DType, device: &Device) -> Result<ModelParams> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new(dtype, device);
        let mut c_in = c.in_channels;
        for (i, &w) in c.channels.iter().enumerate() {
            let k = if i == 0 { c.kernel_size } else { INNER_KERNEL };
            init_conv1d(&mut p, &format!("block{i}.conv"), c_in, w, k, false, &mut rng)?;
            init_batch_norm(&mut p, &format!("block{i}.bn"), w)?;
            c_in = w;
        }
        init_linear(&mut p, "classifier", c.feature_dim(), c.num_classes, &mut rng)?;
        Ok(p)
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 3 || dims[1] != self.cfg.in_channels || dims[2] != self.cfg.input_len {
            return Err(Error::Shape(format!(
                "backbone expects [B, {}, {}], got {dims:?}",
                self.cfg.in_channels, self.cfg.input_len
            )));
        }
        Ok(())
    }

    /// Encoder output before the classifier, `[B, feature_dim]`.
    pub fn features(&self, params: &ModelParams, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x.dims())?;
        let mut h = x.clone();
        for i in 0..3 {
            let (k, s) = if i == 0 {
                (self.cfg.kernel_size, self.cfg.stride)
            } else {
                (INNER_KERNEL, 1)
            };
            h = conv1d(params, &format!("block{i}.conv"), &h, k / 2, s)?;
            h = batch_norm1d(params, &format!("block{i}.bn"), &h, mode)?.relu()?;
            h = max_pool1d_2(&h)?;
            h = dropout(&h, self.cfg.dropout, mode, i as u64 + 1)?;
        }
        global_avg_pool1d(&h)
    }

    pub fn classify(&self, params: &ModelParams, features: &Tensor) -> Result<Tensor> {
        linear(params, "classifier", features)
    }

    /// Logits `[B, K]`.
    pub fn forward(&self, params: &ModelParams, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let f = self.features(params, x, mode)?;
        self.classify(params, &f)
    }
}
