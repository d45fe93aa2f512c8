//! U-net reconstructor: double 3x3 convolutions, 2x max-pool down, nearest
//! up-sampling + 3x3 convolution up, skip concatenation, 1x1 output head.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv2d, init_conv2d, max_pool2d_2};
use super::params::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl UNetConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_channels: 16,
            depth: 3,
        }
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UNet {
    pub cfg: UNetConfig,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.base_channels == 0 || cfg.depth == 0 {
            return Err(Error::Config(format!("degenerate U-net config {cfg:?}")));
        }
        Ok(Self { cfg })
    }

    pub fn init(&self, seed: u64, dtype: DType, device: &Device) -> Result<ModelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new(dtype, device);
        let c = &self.cfg;
        let mut c_in = c.in_channels;
        for level in 0..=c.depth {
            let w = c.width(level);
            init_conv2d(&mut p, &format!("down{level}.conv1"), c_in, w, 3, true, &mut rng)?;
            init_conv2d(&mut p, &format!("down{level}.conv2"), w, w, 3, true, &mut rng)?;
            c_in = w;
        }
        for level in (0..c.depth).rev() {
            let w = c.width(level);
            init_conv2d(
                &mut p,
                &format!("up{level}.reduce"),
                c.width(level + 1),
                w,
                3,
                true,
                &mut rng,
            )?;
            init_conv2d(&mut p, &format!("up{level}.conv1"), 2 * w, w, 3, true, &mut rng)?;
            init_conv2d(&mut p, &format!("up{level}.conv2"), w, w, 3, true, &mut rng)?;
        }
        init_conv2d(&mut p, "head", c.width(0), c.in_channels, 1, true, &mut rng)?;
        Ok(p)
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let f = 1usize << self.cfg.depth;
        if dims.len() != 4 || dims[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "U-net expects [B, {}, H, W], got {dims:?}",
                self.cfg.in_channels
            )));
        }
        if dims[2] % f != 0 || dims[3] % f != 0 {
            return Err(Error::Shape(format!(
                "U-net of depth {} needs H and W divisible by {f}, got {}x{}",
                self.cfg.depth, dims[2], dims[3]
            )));
        }
        Ok(())
    }

    fn double_conv(p: &ModelParams, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let x = conv2d(p, &format!("{prefix}.conv1"), x, 1)?.relu()?;
        Ok(conv2d(p, &format!("{prefix}.conv2"), &x, 1)?.relu()?)
    }

    pub fn forward(&self, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.dims())?;
        let depth = self.cfg.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for level in 0..depth {
            h = Self::double_conv(params, &format!("down{level}"), &h)?;
            skips.push(h.clone());
            h = max_pool2d_2(&h)?;
        }
        h = Self::double_conv(params, &format!("down{depth}"), &h)?;
        for level in (0..depth).rev() {
            let (_, _, hh, ww) = h.dims4()?;
            let up = h.upsample_nearest2d(hh * 2, ww * 2)?;
            let up = conv2d(params, &format!("up{level}.reduce"), &up, 1)?.relu()?;
            let cat = Tensor::cat(&[&skips[level], &up], 1)?;
            h = Self::double_conv(params, &format!("up{level}"), &cat)?;
        }
        conv2d(params, "head", &h, 0)
    }
}
