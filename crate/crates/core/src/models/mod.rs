//! The trainable components: U-net reconstructor, VQ warp block and 1D-CNN backbone.

pub mod backbone;
pub mod layers;
pub mod params;
pub mod unet;
pub mod warp;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneConfig};
pub use layers::Mode;
pub use params::{Fingerprint, ModelParams, ParamKind};
pub use unet::{UNet, UNetConfig};
pub use warp::{warp_forward, VQOutput, VqForward, WarpBlock, WarpConfig};

use crate::datamodel::{ImageTensor, TimeSeriesBatch};
use crate::error::{Error, Result};

/// Architecture used for either reconstruction slot (source reconstructor or warp block).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructorKind {
    Unet,
    Ae,
}

impl std::str::FromStr for ReconstructorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unet" | "u-net" => Ok(Self::Unet),
            "ae" | "vq" | "warp" => Ok(Self::Ae),
            other => Err(Error::Config(format!("unknown reconstructor '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Reconstructor {
    UNet(UNet),
    Ae(WarpBlock),
}

/// Output image plus, for the VQ autoencoder, `codebook + beta * commitment`.
#[derive(Debug, Clone)]
pub struct ReconOutput {
    pub output: Tensor,
    pub aux_loss: Option<Tensor>,
}

impl Reconstructor {
    pub fn build(kind: ReconstructorKind, unet: UNetConfig, warp: WarpConfig) -> Result<Self> {
        Ok(match kind {
            ReconstructorKind::Unet => Self::UNet(UNet::new(unet)?),
            ReconstructorKind::Ae => Self::Ae(WarpBlock::new(warp)?),
        })
    }

    pub fn kind(&self) -> ReconstructorKind {
        match self {
            Self::UNet(_) => ReconstructorKind::Unet,
            Self::Ae(_) => ReconstructorKind::Ae,
        }
    }

    pub fn init(&self, seed: u64, dtype: DType, device: &Device) -> Result<ModelParams> {
        match self {
            Self::UNet(n) => n.init(seed, dtype, device),
            Self::Ae(n) => n.init(seed, dtype, device),
        }
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        match self {
            Self::UNet(n) => n.check_input(dims),
            Self::Ae(n) => n.check_input(dims),
        }
    }

    pub fn forward(&self, params: &ModelParams, x: &Tensor) -> Result<ReconOutput> {
        match self {
            Self::UNet(n) => Ok(ReconOutput {
                output: n.forward(params, x)?,
                aux_loss: None,
            }),
            Self::Ae(n) => {
                let f = n.forward(params, x)?;
                Ok(ReconOutput {
                    aux_loss: Some(f.aux_loss(n.cfg.commitment)?),
                    output: f.output,
                })
            }
        }
    }
}

pub fn unet_forward(net: &UNet, theta: &ModelParams, img: &ImageTensor) -> Result<ImageTensor> {
    Ok(ImageTensor::from_tensor_unchecked(
        net.forward(theta, img.tensor())?.detach(),
    ))
}

/// Eval-mode logits `[B, K]`.
pub fn backbone_forward(net: &Backbone, params: &ModelParams, x: &TimeSeriesBatch) -> Result<Tensor> {
    Ok(net.forward(params, x.tensor(), Mode::Eval)?.detach())
}

pub fn freeze(params: ModelParams) -> Result<ModelParams> {
    params.freeze()
}

pub fn assert_frozen(params: &ModelParams) -> bool {
    params.assert_frozen()
}
