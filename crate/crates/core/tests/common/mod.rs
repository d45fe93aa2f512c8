#![allow(dead_code)]

pub mod grad;

use std::path::Path;

use ct_sfda::adapt::{StageSchedule, StageSetting};
use ct_sfda::config::RunConfig;
use ct_sfda::ingest::{generate_synthetic_pair, DomainDataset};

/// A configuration small enough for a few seconds of training.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 3;
    c.synth.classes = 3;
    c.synth.n_per_class = 12;
    c.synth.length = 64;
    c.synth.shift.seed = 3;
    c.reshape.height = 8;
    c.reshape.width = 8;
    c.model.unet_base = 4;
    c.model.backbone_channels = [4, 8, 8];
    c.model.warp_hidden = 4;
    c.model.warp_code_dim = 2;
    c.model.warp_codebook = 8;
    let s = StageSetting { lr: 5e-3, epochs: 2 };
    c.schedule = StageSchedule {
        stage1: s,
        stage2: s,
        stage3: s,
        batch_size: 16,
    };
    c.tta.n = 2;
    c
}

pub fn tiny_pair(cfg: &RunConfig) -> (DomainDataset, DomainDataset) {
    let s = &cfg.synth;
    generate_synthetic_pair(s.classes, s.n_per_class, s.channels, s.length, &s.shift).unwrap()
}

/// `tiny_config` as dotted-key text writing results under `out`.
pub fn tiny_config_text(out: &Path) -> String {
    format!(
        r#"seed = 3
output_dir = "{}"
run_id = "tiny"
synth.n_per_class = 12
synth.length = 64
synth.shift.seed = 3
reshape.height = 8
reshape.width = 8
model.unet_base = 4
model.backbone_channels = [4, 8, 8]
model.warp_hidden = 4
model.warp_code_dim = 2
model.warp_codebook = 8
schedule.stage1 = {{ lr = 5e-3, epochs = 2 }}
schedule.stage2 = {{ lr = 5e-3, epochs = 2 }}
schedule.stage3 = {{ lr = 5e-3, epochs = 2 }}
schedule.batch_size = 16
tta.n = 2
"#,
        out.display()
    )
}
