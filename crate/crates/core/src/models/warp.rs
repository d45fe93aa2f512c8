//! Warp block: a small vector-quantized autoencoder.
//!
//! encoder: conv3x3(c -> hidden), ReLU, 2x avg-pool, conv3x3(hidden -> hidden), ReLU,
//! conv3x3(hidden -> code_dim); nearest-codebook quantization per spatial position with a
//! straight-through estimator; decoder: conv3x3(code_dim -> hidden), ReLU, 2x nearest
//! up-sampling, conv3x3(hidden -> hidden), ReLU, conv3x3(hidden -> c).

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv2d, init_conv2d};
use super::params::{ModelParams, ParamKind};
use crate::datamodel::ImageTensor;
use crate::error::{Error, Result};

pub const CODEBOOK: &str = "quantizer.codebook";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub commitment: f64,
}

impl WarpConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            hidden: 16,
            code_dim: 8,
            codebook_size: 32,
            commitment: 0.25,
        }
    }
}

/// Tensors produced by one warp-block pass; losses are scalar tensors on the graph.
#[derive(Debug, Clone)]
pub struct VqForward {
    pub output: Tensor,
    pub codebook_loss: Tensor,
    pub commitment_loss: Tensor,
    pub codes: Tensor,
}

impl VqForward {
    /// `codebook + commitment_coefficient * commitment`.
    pub fn aux_loss(&self, commitment: f64) -> Result<Tensor> {
        Ok((&self.codebook_loss + (&self.commitment_loss * commitment)?)?)
    }
}

/// Plain-value view of a warp-block pass.
#[derive(Debug, Clone)]
pub struct VQOutput {
    pub reconstructed: ImageTensor,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
    pub code_indices: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
pub struct WarpBlock {
    pub cfg: WarpConfig,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl WarpBlock {
    pub fn new(cfg: WarpConfig) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.hidden == 0 || cfg.code_dim == 0 || cfg.codebook_size == 0 {
            return Err(Error::Config(format!("degenerate warp config {cfg:?}")));
        }
        if !(cfg.commitment >= 0.0) {
            return Err(Error::Config("commitment coefficient must be >= 0".into()));
        }
        Ok(Self { cfg })
    }

    pub fn init(&self, seed: u64, dtype: DType, device: &Device) -> Result<ModelParams> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new(dtype, device);
        init_conv2d(&mut p, "enc.conv1", c.in_channels, c.hidden, 3, true, &mut rng)?;
        init_conv2d(&mut p, "enc.conv2", c.hidden, c.hidden, 3, true, &mut rng)?;
        init_conv2d(&mut p, "enc.conv3", c.hidden, c.code_dim, 3, true, &mut rng)?;
        let bound = 1.0 / c.codebook_size as f64;
        let book: Vec<f64> = (0..c.codebook_size * c.code_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        p.insert(
            CODEBOOK,
            Tensor::from_vec(book, (c.codebook_size, c.code_dim), device)?,
            ParamKind::Weight,
        )?;
        init_conv2d(&mut p, "dec.conv1", c.code_dim, c.hidden, 3, true, &mut rng)?;
        init_conv2d(&mut p, "dec.conv2", c.hidden, c.hidden, 3, true, &mut rng)?;
        init_conv2d(&mut p, "dec.conv3", c.hidden, c.in_channels, 3, true, &mut rng)?;
        Ok(p)
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 4 || dims[1] != self.cfg.in_channels || dims[2] % 2 != 0 || dims[3] % 2 != 0 {
            return Err(Error::Shape(format!(
                "warp block expects [B, {}, H, W] with even H and W, got {dims:?}",
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Continuous encoder output `z_e`, shape `[B, code_dim, H/2, W/2]`.
    pub fn encode(&self, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.dims())?;
        let h = conv2d(params, "enc.conv1", x, 1)?.relu()?.avg_pool2d(2)?;
        let h = conv2d(params, "enc.conv2", &h, 1)?.relu()?;
        conv2d(params, "enc.conv3", &h, 1)
    }

    pub fn decode(&self, params: &ModelParams, z: &Tensor) -> Result<Tensor> {
        let h = conv2d(params, "dec.conv1", z, 1)?.relu()?;
        let (_, _, hh, ww) = h.dims4()?;
        let h = h.upsample_nearest2d(hh * 2, ww * 2)?;
        let h = conv2d(params, "dec.conv2", &h, 1)?.relu()?;
        conv2d(params, "dec.conv3", &h, 1)
    }

    /// Index of the nearest codebook row (squared Euclidean) for every spatial
    /// position of `z_e`, flattened in `[B, h, w]` order.
    pub fn nearest_codes(&self, params: &ModelParams, z_e: &Tensor) -> Result<Tensor> {
        let flat = Self::flatten_positions(z_e)?.detach();
        let book = params.get(CODEBOOK)?.detach();
        let z2 = flat.sqr()?.sum_keepdim(1)?;
        let e2 = book.sqr()?.sum(1)?.unsqueeze(0)?;
        let cross = flat.matmul(&book.t()?)?;
        let dist = z2.broadcast_add(&e2)?.broadcast_sub(&(cross * 2.0)?)?;
        Ok(dist.argmin(D::Minus1)?)
    }

    fn flatten_positions(z: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        Ok(z.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, c))?)
    }

    /// Codebook rows for `codes`, laid out like `z_e`.
    pub fn lookup(&self, params: &ModelParams, codes: &Tensor, like: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = like.dims4()?;
        let rows = params.get(CODEBOOK)?.index_select(codes, 0)?;
        Ok(rows.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn forward(&self, params: &ModelParams, x: &Tensor) -> Result<VqForward> {
        let z_e = self.encode(params, x)?;
        let codes = self.nearest_codes(params, &z_e)?;
        let z_q = self.lookup(params, &codes, &z_e)?;
        let codebook_loss = (&z_q - z_e.detach())?.sqr()?.mean_all()?;
        let commitment_loss = (&z_e - z_q.detach())?.sqr()?.mean_all()?;
        // straight-through: forward value z_q, gradient routed to z_e
        let z_st = (&z_e + (&z_q - &z_e)?.detach())?;
        let output = self.decode(params, &z_st)?;
        Ok(VqForward {
            output,
            codebook_loss,
            commitment_loss,
            codes,
        })
    }
}

pub fn warp_forward(block: &WarpBlock, phi: &ModelParams, img: &ImageTensor) -> Result<VQOutput> {
    let f = block.forward(phi, img.tensor())?;
    Ok(VQOutput {
        reconstructed: ImageTensor::from_tensor_unchecked(f.output.detach()),
        codebook_loss: scalar(&f.codebook_loss)?,
        commitment_loss: scalar(&f.commitment_loss)?,
        code_indices: f.codes.to_vec1::<u32>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block() -> WarpBlock {
        WarpBlock::new(WarpConfig::new(1)).unwrap()
    }

    #[test]
    fn shape_and_codes_on_mfd_image() {
        let b = block();
        let p = b.init(1, DType::F32, &Device::Cpu).unwrap();
        let img = ImageTensor::new(Tensor::randn(0f32, 1., (4, 1, 64, 80), &Device::Cpu).unwrap()).unwrap();
        let out = warp_forward(&b, &p, &img).unwrap();
        assert_eq!(out.reconstructed.dims(), (4, 1, 64, 80));
        assert_eq!(out.code_indices.len(), 4 * 32 * 40);
        assert!(out.code_indices.iter().all(|&k| (k as usize) < 32));
        assert!(out.codebook_loss >= 0.0 && out.commitment_loss >= 0.0);
    }

    #[test]
    fn parameter_budget_is_near_eight_thousand() {
        let p = block().init(0, DType::F32, &Device::Cpu).unwrap();
        let n = p.num_weights();
        assert!((6_000..=10_000).contains(&n), "{n} weights");
    }

    #[test]
    fn odd_spatial_dims_rejected() {
        let b = block();
        let p = b.init(0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 1, 5, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(b.forward(&p, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn codebook_initialized_within_bound() {
        let p = block().init(0, DType::F64, &Device::Cpu).unwrap();
        let book = p
            .get(CODEBOOK)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(book.iter().all(|v| v.abs() <= 1.0 / 32.0));
    }
}
