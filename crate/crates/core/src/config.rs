//! Run configuration: flat dotted keys (`tta.n = 10`), every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{Pipeline, StageSchedule};
use crate::datamodel::make_reshape_spec;
use crate::error::{Error, Result};
use crate::ingest::ShiftConfig;
use crate::losses::AdaptConfig;
use crate::models::{Backbone, BackboneConfig, Reconstructor, ReconstructorKind, UNetConfig, WarpConfig};
use crate::tta::TtaConfig;

pub const SEED_ENV: &str = "CT_SFDA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Source domain container; with `target`, replaces the synthetic pair.
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Directory holding one container per domain, used with `scenarios`.
    pub root: Option<PathBuf>,
    /// `"src->tgt"` pairs of domain directory names under `root`.
    pub scenarios: Vec<String>,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            root: None,
            scenarios: Vec::new(),
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub n_per_class: usize,
    pub channels: usize,
    pub length: usize,
    pub shift: ShiftConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            n_per_class: 300,
            channels: 1,
            length: 128,
            shift: ShiftConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReshapeConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for ReshapeConfig {
    fn default() -> Self {
        Self { height: 16, width: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub reconstructor: ReconstructorKind,
    pub warp: ReconstructorKind,
    pub unet_base: usize,
    pub unet_depth: usize,
    pub warp_hidden: usize,
    pub warp_code_dim: usize,
    pub warp_codebook: usize,
    pub warp_commitment: f64,
    pub backbone_kernel: usize,
    pub backbone_stride: usize,
    pub backbone_channels: [usize; 3],
    pub backbone_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            reconstructor: ReconstructorKind::Unet,
            warp: ReconstructorKind::Ae,
            unet_base: 8,
            unet_depth: 2,
            warp_hidden: 16,
            warp_code_dim: 8,
            warp_codebook: 32,
            warp_commitment: 0.25,
            backbone_kernel: 8,
            backbone_stride: 1,
            backbone_channels: [16, 32, 32],
            backbone_dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Defaults to a prefix of the config hash.
    pub run_id: Option<String>,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub reshape: ReshapeConfig,
    pub model: ModelConfig,
    pub schedule: StageSchedule,
    pub adapt: AdaptConfig,
    pub tta: TtaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("results"),
            run_id: None,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            reshape: ReshapeConfig::default(),
            model: ModelConfig::default(),
            schedule: StageSchedule::default(),
            adapt: AdaptConfig::default(),
            tta: TtaConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.adapt.validate()?;
        self.tta.validate()?;
        self.synth.shift.validate()?;
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config("data.test_fraction must lie in (0, 1)".into()));
        }
        if self.data.source.is_some() != self.data.target.is_some() {
            return Err(Error::Config(
                "data.source and data.target must be given together".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, ignoring where results are written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.run_id = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| self.hash()[..12].to_string())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.synth.shift.seed = seed;
        c
    }

    /// Builds the architectures for `d` channels of length `l` and `k` classes.
    pub fn pipeline(&self, d: usize, l: usize, k: usize) -> Result<Pipeline> {
        self.pipeline_with(d, l, k, self.model.reconstructor, self.model.warp)
    }

    pub fn pipeline_with(
        &self,
        d: usize,
        l: usize,
        k: usize,
        reconstructor: ReconstructorKind,
        warp: ReconstructorKind,
    ) -> Result<Pipeline> {
        let spec = make_reshape_spec(d, l, self.reshape.height, self.reshape.width)?;
        let m = &self.model;
        let unet = UNetConfig {
            in_channels: spec.c,
            base_channels: m.unet_base,
            depth: m.unet_depth,
        };
        let warp_cfg = WarpConfig {
            in_channels: spec.c,
            hidden: m.warp_hidden,
            code_dim: m.warp_code_dim,
            codebook_size: m.warp_codebook,
            commitment: m.warp_commitment,
        };
        let backbone = Backbone::new(BackboneConfig {
            kernel_size: m.backbone_kernel,
            stride: m.backbone_stride,
            channels: m.backbone_channels,
            dropout: m.backbone_dropout,
            ..BackboneConfig::new(d, l, k)
        })?;
        let p = Pipeline {
            spec,
            reconstructor: Reconstructor::build(reconstructor, unet, warp_cfg)?,
            warp: Reconstructor::build(warp, unet, warp_cfg)?,
            backbone,
        };
        let img = [1, spec.c, spec.h, spec.w];
        p.reconstructor.check_input(&img)?;
        p.warp.check_input(&img)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg = RunConfig::from_toml_str(
            "seed = 5\ntta.n = 3\nschedule.stage3 = { lr = 1e-3, epochs = 2 }\nsynth.shift.noise_sigma = 0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.tta.n, 3);
        assert_eq!(cfg.schedule.stage3.epochs, 2);
        assert_eq!(cfg.synth.shift.noise_sigma, 0.1);
        assert_eq!(cfg.adapt, AdaptConfig::default());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_toml_str("tta.m = 3"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml_str("tta.delta = 0.0"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hash_tracks_content_not_output_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.tta.n = 4;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn serialized_config_parses_back() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml_str(&a.to_toml_string().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_pipeline_builds() {
        let p = RunConfig::default().pipeline(1, 128, 3).unwrap();
        assert_eq!((p.spec.h, p.spec.w, p.spec.pad_len), (16, 8, 0));
    }
}
