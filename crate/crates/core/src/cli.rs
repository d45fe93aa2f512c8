//! The `ct-sfda` command line.
//!
//! Layout of a run directory (`<output_dir>/<run_id>`):
//!
//! ```text
//! run.json                 config hash, seed and per-epoch losses of every stage run
//! <command>.epochs.jsonl   one JSON object per epoch
//! data/{source,target}     the synthetic pair, when no dataset paths are configured
//! checkpoints/{reconstructor,backbone,warp}
//! scales.json              learned v_S, v_T
//! adapt.access.json        every file the adapt command opened
//! scenario.json, table.csv, nn_distance.csv
//! ablation-<suite>.{json,csv}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adapt::{BranchMode, EpochRecord, ScalingFactors};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{run_ablation, run_scenario, write_scenario_outputs, AblationSuite, ScenarioReport};
use crate::ingest::{
    generate_synthetic_pair, load_dataset, load_dataset_logged, save_dataset, AccessLog, DomainDataset, DomainRole,
    ShiftConfig,
};
use crate::models::ModelParams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::MissingArtifact(_) => EXIT_CONFIG,
        Error::FrozenViolation(_)
        | Error::SourceAccess(_)
        | Error::Shape(_)
        | Error::InvalidData(_)
        | Error::Format { .. } => EXIT_INVARIANT,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Io { .. } | Error::Json(_) | Error::Tensor(_) => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ct-sfda", version, about = "Source-free domain adaptation for time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic source/target pair in the container format.
    Synth(SynthArgs),
    /// Stages 1 and 2: reconstructor and backbone on the source domain.
    Pretrain(ConfigArgs),
    /// Stage 3 on the unlabeled target domain.
    Adapt(ConfigArgs),
    /// All stages plus evaluation; writes scenario results.
    Eval(ConfigArgs),
    /// Run one ablation suite.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Instances per class.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 128)]
    pub length: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = ShiftConfig::default().amplitude_scale)]
    pub shift_amplitude: f64,
    /// Off unless given, so amplitude 1 and noise 0 reproduce the source exactly.
    #[arg(long, default_value_t = 0.0)]
    pub shift_warp: f64,
    #[arg(long, default_value_t = ShiftConfig::default().noise_sigma)]
    pub shift_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub shift_offset: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Receives `source/` and `target/`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub suite: String,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(&a),
        Command::Pretrain(a) => pretrain(&RunConfig::load(&a.config)?),
        Command::Adapt(a) => adapt(&RunConfig::load(&a.config)?),
        Command::Eval(a) => eval(&RunConfig::load(&a.config)?),
        Command::Ablate(a) => {
            let suite: AblationSuite = a.suite.parse()?;
            ablate(&RunConfig::load(&a.config)?, suite)
        }
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let shift = ShiftConfig {
        amplitude_scale: a.shift_amplitude,
        time_warp_strength: a.shift_warp,
        noise_sigma: a.shift_noise,
        channel_offset: a.shift_offset,
        seed: a.seed,
    };
    let (src, tgt) = generate_synthetic_pair(a.classes, a.n, a.channels, a.length, &shift)?;
    save_dataset(&src, &a.out.join("source"))?;
    save_dataset(&tgt, &a.out.join("target"))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RunLog {
    config_hash: String,
    seed: u64,
    stages: BTreeMap<String, Vec<EpochRecord>>,
}

fn record_run(cfg: &RunConfig, command: &str, epochs: &[EpochRecord]) -> Result<()> {
    let dir = cfg.run_dir();
    let path = dir.join("run.json");
    let hash = cfg.hash();
    let mut log = match read_json::<RunLog>(&path) {
        Ok(l) if l.config_hash == hash => l,
        _ => RunLog {
            config_hash: hash,
            seed: cfg.seed,
            stages: BTreeMap::new(),
        },
    };
    log.stages.insert(command.into(), epochs.to_vec());
    write_json(&path, &log)?;
    let mut lines = String::new();
    for e in epochs {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    let jsonl = dir.join(format!("{command}.epochs.jsonl"));
    fs::write(&jsonl, lines).map_err(|e| Error::io(&jsonl, e))
}

/// Refuses to continue from artifacts produced under a different configuration.
fn check_run_hash(cfg: &RunConfig) -> Result<()> {
    let path = cfg.run_dir().join("run.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let log: RunLog = read_json(&path)?;
    if log.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "{} was written by config {} but this config hashes to {}",
            path.display(),
            log.config_hash,
            cfg.hash()
        )));
    }
    Ok(())
}

fn source_path(cfg: &RunConfig) -> PathBuf {
    cfg.data
        .source
        .clone()
        .unwrap_or_else(|| cfg.run_dir().join("data").join("source"))
}

fn target_path(cfg: &RunConfig) -> PathBuf {
    cfg.data
        .target
        .clone()
        .unwrap_or_else(|| cfg.run_dir().join("data").join("target"))
}

fn synthetic_pair(cfg: &RunConfig) -> Result<(DomainDataset, DomainDataset)> {
    let s = &cfg.synth;
    generate_synthetic_pair(s.classes, s.n_per_class, s.channels, s.length, &s.shift)
}

/// The configured pair; the synthetic one is written under the run directory so
/// later stages read it from disk like any other dataset.
fn load_pair(cfg: &RunConfig) -> Result<(DomainDataset, DomainDataset)> {
    if cfg.data.source.is_some() {
        let src = load_dataset(&source_path(cfg))?.with_role(DomainRole::Source);
        let tgt = load_dataset(&target_path(cfg))?.with_role(DomainRole::Target);
        return Ok((src, tgt));
    }
    let (src, tgt) = synthetic_pair(cfg)?;
    save_dataset(&src, &source_path(cfg))?;
    save_dataset(&tgt, &target_path(cfg))?;
    Ok((src, tgt))
}

fn checkpoint(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.run_dir().join("checkpoints").join(name)
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let (src, _) = load_pair(cfg)?;
    let (_, d, l) = src.series.dims();
    let pipeline = cfg.pipeline(d, l, src.num_classes)?;
    let (train, _) = src.split(cfg.data.test_fraction, cfg.seed)?;
    let (theta, mut epochs) = pipeline.pretrain_reconstructor(&train, &cfg.schedule, cfg.seed)?;
    let (backbone, e2) = pipeline.pretrain_backbone(&train, &theta, &cfg.schedule, cfg.seed)?;
    epochs.extend(e2);
    theta.save(&checkpoint(cfg, "reconstructor"))?;
    backbone.save(&checkpoint(cfg, "backbone"))?;
    record_run(cfg, "pretrain", &epochs)
}

#[derive(Debug, Serialize, Deserialize)]
struct AccessReport {
    files: Vec<PathBuf>,
}

fn adapt(cfg: &RunConfig) -> Result<()> {
    for name in ["reconstructor", "backbone"] {
        let dir = checkpoint(cfg, name);
        if !dir.exists() {
            return Err(Error::MissingArtifact(dir));
        }
    }
    check_run_hash(cfg)?;
    let log = AccessLog::new();
    let tgt = load_dataset_logged(&target_path(cfg), &log)?.with_role(DomainRole::Target);
    let theta = ModelParams::load_logged(&checkpoint(cfg, "reconstructor"), DType::F32, &Device::Cpu, &log)?;
    let backbone = ModelParams::load_logged(&checkpoint(cfg, "backbone"), DType::F32, &Device::Cpu, &log)?;
    let (_, d, l) = tgt.series.dims();
    let pipeline = cfg.pipeline(d, l, tgt.num_classes)?;
    let (train, _) = tgt.split(cfg.data.test_fraction, cfg.seed)?;
    let unlabeled = DomainDataset { labels: None, ..train };
    let (phi, scales, epochs) = pipeline.adapt_group(
        &unlabeled,
        &theta,
        &backbone,
        &cfg.adapt,
        &cfg.schedule,
        BranchMode::Full,
        cfg.seed,
    )?;
    let src = source_path(cfg);
    if log.touched(&src) {
        return Err(Error::SourceAccess(format!(
            "adapt opened files under {}",
            src.display()
        )));
    }
    phi.save(&checkpoint(cfg, "warp"))?;
    write_json(&cfg.run_dir().join("scales.json"), &scales)?;
    write_json(
        &cfg.run_dir().join("adapt.access.json"),
        &AccessReport { files: log.paths() },
    )?;
    record_run(cfg, "adapt", &epochs)
}

pub fn load_scales(cfg: &RunConfig) -> Result<ScalingFactors> {
    read_json(&cfg.run_dir().join("scales.json"))
}

/// `(source, target)` domain pairs for a multi-scenario run.
fn scenario_pairs(cfg: &RunConfig) -> Result<Vec<(DomainDataset, DomainDataset)>> {
    let Some(root) = &cfg.data.root else {
        return Ok(vec![load_pair(cfg)?]);
    };
    if cfg.data.scenarios.is_empty() {
        return Err(Error::Config("data.root needs data.scenarios".into()));
    }
    cfg.data
        .scenarios
        .iter()
        .map(|s| {
            let (a, b) = s
                .split_once("->")
                .ok_or_else(|| Error::Config(format!("scenario '{s}' is not of the form src->tgt")))?;
            let mut src = load_dataset(&root.join(a.trim()))?.with_role(DomainRole::Source);
            let mut tgt = load_dataset(&root.join(b.trim()))?.with_role(DomainRole::Target);
            src.domain_id = a.trim().into();
            tgt.domain_id = b.trim().into();
            Ok((src, tgt))
        })
        .collect()
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let mut reports: Vec<ScenarioReport> = Vec::new();
    for (src, tgt) in scenario_pairs(cfg)? {
        reports.push(run_scenario(&src, &tgt, cfg)?);
    }
    let epochs: Vec<EpochRecord> = reports.iter().flat_map(|r| r.epochs.clone()).collect();
    write_scenario_outputs(&cfg.run_dir(), &reports)?;
    write_json(&cfg.run_dir().join("reports.json"), &reports)?;
    record_run(cfg, "eval", &epochs)
}

fn suite_name(s: AblationSuite) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn ablate(cfg: &RunConfig, suite: AblationSuite) -> Result<()> {
    let (src, tgt) = load_pair(cfg)?;
    let table = run_ablation(suite, &src, &tgt, cfg)?;
    let name = suite_name(suite);
    write_json(&cfg.run_dir().join(format!("ablation-{name}.json")), &table)?;
    let csv = cfg.run_dir().join(format!("ablation-{name}.csv"));
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    record_run(cfg, &format!("ablate-{name}"), &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::FrozenViolation("x".into())), EXIT_INVARIANT);
        assert_eq!(
            exit_code(&Error::Divergence {
                stage: "stage1".into(),
                epoch: 0,
                loss: f64::NAN
            }),
            EXIT_DIVERGENCE
        );
    }

    #[test]
    fn unknown_command_is_a_config_error() {
        assert_eq!(run_from_args(["ct-sfda", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run_from_args(["ct-sfda", "ablate", "--config", "x.toml"]), EXIT_CONFIG);
    }

    #[test]
    fn suite_names_round_trip() {
        for s in ["reconstructor-config", "branch", "loss", "ia-weighting"] {
            assert_eq!(suite_name(s.parse().unwrap()), s);
        }
    }
}
