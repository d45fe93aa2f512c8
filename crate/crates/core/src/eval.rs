//! Metrics and the experiment harness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapt::{BranchMode, EpochRecord, Pipeline, ScalingFactors};
use crate::config::RunConfig;
use crate::datamodel::LabelBatch;
use crate::error::{Error, Result};
use crate::ingest::{DomainDataset, DomainRole};
use crate::losses::{AdaptConfig, ProbVector};
use crate::models::{ModelParams, ReconstructorKind};
use crate::tta::{AdaptedModel, TtaConfig, Weighting};

/// Macro-averaged F1 over the `K` classes of `labels`. Classes with an empty
/// precision + recall denominator contribute 0.
pub fn mf1(predictions: &[usize], labels: &LabelBatch) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let k = labels.num_classes();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&p, &y) in predictions.iter().zip(labels.labels()) {
        if p >= k {
            return Err(Error::InvalidData(format!("prediction {p} outside [0, {k})")));
        }
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let total: f64 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / k as f64)
}

/// Mean Euclidean distance from each target row to its nearest source row.
pub fn nn_distance_stat(target: &Tensor, source: &Tensor) -> Result<f64> {
    let t = target.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let s = source.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    nn_distance_rows(&t, &s)
}

pub fn nn_distance_rows(target: &[Vec<f64>], source: &[Vec<f64>]) -> Result<f64> {
    if target.is_empty() || source.is_empty() {
        return Err(Error::InvalidData("nearest-neighbour distance of an empty set".into()));
    }
    let f = source[0].len();
    if target.iter().chain(source).any(|r| r.len() != f) {
        return Err(Error::Shape("feature dimensions differ".into()));
    }
    let sum: f64 = target
        .iter()
        .map(|t| {
            source
                .iter()
                .map(|s| t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    Ok(sum / target.len() as f64)
}

pub fn argmax_all(probs: &[ProbVector]) -> Vec<usize> {
    probs.iter().map(ProbVector::argmax).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario_id: String,
    pub mf1_no_adapt: f64,
    pub mf1_source_replay: f64,
    pub mf1_full: f64,
    pub mf1_full_with_ia: f64,
    /// No adaptation, source replay, full adaptation.
    pub nn_distance: [f64; 3],
}

/// A scenario result plus diagnostics gathered along the way.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub result: ScenarioResult,
    pub source_heldout_mf1: f64,
    pub scales: ScalingFactors,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

/// Frozen source-side models.
#[derive(Debug)]
pub struct SourceModels {
    pub theta: ModelParams,
    pub backbone: ModelParams,
    pub epochs: Vec<EpochRecord>,
}

/// Splits, architectures and pretrained source models shared by every variant of
/// one scenario under one seed.
#[derive(Debug)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub scenario_id: String,
    pub pipeline: Pipeline,
    pub source_train: DomainDataset,
    pub source_test: DomainDataset,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
    pub source: SourceModels,
}

fn strip_labels(ds: &DomainDataset) -> DomainDataset {
    DomainDataset {
        labels: None,
        role: DomainRole::Target,
        ..ds.clone()
    }
}

impl Experiment {
    /// Splits both domains and runs stages 1 and 2.
    pub fn prepare(source: &DomainDataset, target: &DomainDataset, cfg: &RunConfig) -> Result<Self> {
        Self::prepare_with(source, target, cfg, cfg.model.reconstructor, cfg.model.warp)
    }

    pub fn prepare_with(
        source: &DomainDataset,
        target: &DomainDataset,
        cfg: &RunConfig,
        reconstructor: ReconstructorKind,
        warp: ReconstructorKind,
    ) -> Result<Self> {
        cfg.validate()?;
        if source.series.dims().1 != target.series.dims().1
            || source.series.dims().2 != target.series.dims().2
            || source.num_classes != target.num_classes
        {
            return Err(Error::Shape(format!(
                "source {:?} / K={} and target {:?} / K={} are incompatible",
                source.series.dims(),
                source.num_classes,
                target.series.dims(),
                target.num_classes
            )));
        }
        target.require_labels()?;
        let (_, d, l) = source.series.dims();
        let pipeline = cfg.pipeline_with(d, l, source.num_classes, reconstructor, warp)?;
        let (source_train, source_test) = source.split(cfg.data.test_fraction, cfg.seed)?;
        let (target_train, target_test) = target.split(cfg.data.test_fraction, cfg.seed)?;
        let source_train = source_train.with_role(DomainRole::Source);
        let (theta, mut epochs) = pipeline.pretrain_reconstructor(&source_train, &cfg.schedule, cfg.seed)?;
        let (backbone, e2) = pipeline.pretrain_backbone(&source_train, &theta, &cfg.schedule, cfg.seed)?;
        epochs.extend(e2);
        Ok(Self {
            cfg: cfg.clone(),
            scenario_id: format!("{}->{}", source.domain_id, target.domain_id),
            pipeline,
            source_train,
            source_test,
            target_train,
            target_test,
            source: SourceModels {
                theta,
                backbone,
                epochs,
            },
        })
    }

    /// The same source models facing another target domain of the same shape.
    pub fn retarget(&self, target: &DomainDataset) -> Result<Self> {
        let (_, d, l) = self.source_train.series.dims();
        let (_, td, tl) = target.series.dims();
        if (d, l, self.source_train.num_classes) != (td, tl, target.num_classes) {
            return Err(Error::Shape(format!(
                "target {:?} / K={} does not match the source models",
                target.series.dims(),
                target.num_classes
            )));
        }
        target.require_labels()?;
        let (target_train, target_test) = target.split(self.cfg.data.test_fraction, self.cfg.seed)?;
        let source_id = self.scenario_id.split("->").next().unwrap_or_default();
        Ok(Self {
            cfg: self.cfg.clone(),
            scenario_id: format!("{source_id}->{}", target.domain_id),
            pipeline: self.pipeline,
            source_train: self.source_train.clone(),
            source_test: self.source_test.clone(),
            target_train,
            target_test,
            source: SourceModels {
                theta: self.source.theta.duplicate()?,
                backbone: self.source.backbone.duplicate()?,
                epochs: self.source.epochs.clone(),
            },
        })
    }

    /// Runs stage 3 on the unlabeled target training split.
    pub fn adapt(&self, adapt: &AdaptConfig, branches: BranchMode) -> Result<(AdaptedModel, Vec<EpochRecord>)> {
        let view = strip_labels(&self.target_train);
        let (phi, scales, epochs) = self.pipeline.adapt_group(
            &view,
            &self.source.theta,
            &self.source.backbone,
            adapt,
            &self.cfg.schedule,
            branches,
            self.cfg.seed,
        )?;
        Ok((
            AdaptedModel {
                pipeline: self.pipeline,
                theta: self.source.theta.duplicate()?,
                backbone: self.source.backbone.duplicate()?,
                phi,
                scales,
            },
            epochs,
        ))
    }

    fn target_labels(&self) -> Result<&LabelBatch> {
        self.target_test.require_labels()
    }

    fn probs_mf1(&self, probs: &Tensor) -> Result<f64> {
        mf1(&argmax_all(&ProbVector::rows(probs)?), self.target_labels()?)
    }

    pub fn mf1_no_adapt(&self) -> Result<f64> {
        let x = self.target_test.series.tensor().to_dtype(DType::F32)?;
        self.probs_mf1(&self.pipeline.probs(&self.source.backbone, &x)?)
    }

    pub fn mf1_source_replay(&self) -> Result<f64> {
        let x = self.target_test.series.tensor().to_dtype(DType::F32)?;
        let u = self.pipeline.replay_series(&self.source.theta, &x)?;
        self.probs_mf1(&self.pipeline.probs(&self.source.backbone, &u)?)
    }

    pub fn source_heldout_mf1(&self) -> Result<f64> {
        let x = self.source_test.series.tensor().to_dtype(DType::F32)?;
        let u = self.pipeline.replay_series(&self.source.theta, &x)?;
        let preds = argmax_all(&ProbVector::rows(&self.pipeline.probs(&self.source.backbone, &u)?)?);
        mf1(&preds, self.source_test.require_labels()?)
    }

    /// Group-level MF1 of an adapted model, optionally with test-time ensembling.
    pub fn mf1_adapted(&self, model: &AdaptedModel, weighting: Weighting) -> Result<f64> {
        let probs = match weighting {
            Weighting::Off => model.predict(&self.target_test.series)?,
            w => model.ensemble_predict(
                &self.target_test.series,
                &TtaConfig {
                    weighting: w,
                    ..self.cfg.tta
                },
            )?,
        };
        mf1(&argmax_all(&probs), self.target_labels()?)
    }

    /// Backbone features of `j(X_S)` on the source training split.
    pub fn source_features(&self) -> Result<Tensor> {
        let x = self.source_train.series.tensor().to_dtype(DType::F32)?;
        let u = self.pipeline.replay_series(&self.source.theta, &x)?;
        self.pipeline.features(&self.source.backbone, &u)
    }

    /// Nearest-source-neighbour distances of the target test split for the raw
    /// input, the source replay and the full reconstruction.
    pub fn nn_distances(&self, model: &AdaptedModel) -> Result<[f64; 3]> {
        let src = self.source_features()?;
        let bb = &self.source.backbone;
        let x = self.target_test.series.tensor().to_dtype(DType::F32)?;
        let raw = self.pipeline.features(bb, &x)?;
        let replay = self
            .pipeline
            .features(bb, &self.pipeline.replay_series(&self.source.theta, &x)?)?;
        let full = self
            .pipeline
            .features(bb, &model.reconstruct(&self.target_test.series)?)?;
        Ok([
            nn_distance_stat(&raw, &src)?,
            nn_distance_stat(&replay, &src)?,
            nn_distance_stat(&full, &src)?,
        ])
    }

    /// Full method: stage 3, then every scenario metric.
    pub fn run(&self) -> Result<ScenarioReport> {
        let (model, e3) = self.adapt(&self.cfg.adapt, BranchMode::Full)?;
        let result = ScenarioResult {
            scenario_id: self.scenario_id.clone(),
            mf1_no_adapt: self.mf1_no_adapt()?,
            mf1_source_replay: self.mf1_source_replay()?,
            mf1_full: self.mf1_adapted(&model, Weighting::Off)?,
            mf1_full_with_ia: self.mf1_adapted(&model, self.cfg.tta.weighting)?,
            nn_distance: self.nn_distances(&model)?,
        };
        let mut epochs = self.source.epochs.clone();
        epochs.extend(e3);
        Ok(ScenarioReport {
            result,
            source_heldout_mf1: self.source_heldout_mf1()?,
            scales: model.scales,
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            epochs,
        })
    }
}

/// Stages 1 to 3 plus evaluation on one source/target pair.
pub fn run_scenario(source: &DomainDataset, target: &DomainDataset, cfg: &RunConfig) -> Result<ScenarioReport> {
    Experiment::prepare(source, target, cfg)?.run()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// CSV with one row per algorithm and one column per scenario plus `AVG`.
pub fn scenario_table(results: &[ScenarioResult]) -> String {
    let mut out = String::from("Algorithm");
    for r in results {
        let _ = write!(out, ",{}", r.scenario_id);
    }
    out.push_str(",AVG\n");
    let rows: [(&str, fn(&ScenarioResult) -> f64); 4] = [
        ("No adaptation", |r| r.mf1_no_adapt),
        ("Source replay", |r| r.mf1_source_replay),
        ("CT", |r| r.mf1_full),
        ("CT + IA", |r| r.mf1_full_with_ia),
    ];
    for (name, get) in rows {
        out.push_str(name);
        let mut sum = 0.0;
        for r in results {
            sum += get(r);
            let _ = write!(out, ",{}", pct(get(r)));
        }
        let _ = writeln!(out, ",{}", pct(sum / results.len().max(1) as f64));
    }
    out
}

/// Distance-versus-stage series, one block per scenario.
pub fn nn_distance_csv(results: &[ScenarioResult]) -> String {
    let mut out = String::from("scenario,stage,distance\n");
    for r in results {
        for (stage, v) in ["no_adapt", "source_replay", "full"].iter().zip(r.nn_distance) {
            let _ = writeln!(out, "{},{stage},{v}", r.scenario_id);
        }
    }
    out
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `scenario.json`, `table.csv` and `nn_distance.csv` into `dir`.
pub fn write_scenario_outputs(dir: &Path, reports: &[ScenarioReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let results: Vec<ScenarioResult> = reports.iter().map(|r| r.result.clone()).collect();
    let json = if results.len() == 1 {
        serde_json::to_vec_pretty(&results[0])?
    } else {
        serde_json::to_vec_pretty(&results)?
    };
    write_file(&dir.join("scenario.json"), &json)?;
    write_file(&dir.join("table.csv"), scenario_table(&results).as_bytes())?;
    write_file(&dir.join("nn_distance.csv"), nn_distance_csv(&results).as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationSuite {
    ReconstructorConfig,
    Branch,
    Loss,
    IaWeighting,
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstructor-config" => Ok(Self::ReconstructorConfig),
            "branch" => Ok(Self::Branch),
            "loss" => Ok(Self::Loss),
            "ia-weighting" => Ok(Self::IaWeighting),
            other => Err(Error::Config(format!(
                "unknown ablation suite '{other}' (expected reconstructor-config, branch, loss or ia-weighting)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mf1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: AblationSuite,
    pub scenario_id: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.mf1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("Variant,{}\n", self.scenario_id);
        for r in &self.rows {
            let _ = writeln!(out, "{},{}", r.variant, pct(r.mf1));
        }
        out
    }
}

fn row(variant: &str, mf1: f64) -> AblationRow {
    AblationRow {
        variant: variant.into(),
        mf1,
    }
}

impl Experiment {
    /// Variants sharing this experiment's pretrained source models.
    pub fn ablate(&self, suite: AblationSuite) -> Result<AblationTable> {
        let cfg = &self.cfg;
        let rows = match suite {
            AblationSuite::ReconstructorConfig => {
                return Err(Error::Config(
                    "the reconstructor-config suite retrains the source models; use run_ablation".into(),
                ))
            }
            AblationSuite::Branch => {
                let mut rows = Vec::new();
                for (name, mode) in [
                    ("w/o SR", BranchMode::WithoutSourceReplay),
                    ("w/o OC", BranchMode::WithoutOffset),
                    ("full", BranchMode::Full),
                ] {
                    let (m, _) = self.adapt(&cfg.adapt, mode)?;
                    rows.push(row(name, self.mf1_adapted(&m, Weighting::Off)?));
                }
                rows
            }
            AblationSuite::Loss => {
                let mse_only = AdaptConfig {
                    lambda: 0.0,
                    ..cfg.adapt
                };
                let (a, _) = self.adapt(&mse_only, BranchMode::Full)?;
                let (b, _) = self.adapt(&cfg.adapt, BranchMode::Full)?;
                vec![
                    row("MSE only", self.mf1_adapted(&a, Weighting::Off)?),
                    row("MSE + UR", self.mf1_adapted(&b, Weighting::Off)?),
                ]
            }
            AblationSuite::IaWeighting => {
                let (m, _) = self.adapt(&cfg.adapt, BranchMode::Full)?;
                vec![
                    row("no IA", self.mf1_adapted(&m, Weighting::Off)?),
                    row("entropy IA", self.mf1_adapted(&m, Weighting::Entropy)?),
                    row("cosine IA", self.mf1_adapted(&m, Weighting::Cosine)?),
                ]
            }
        };
        Ok(AblationTable {
            suite,
            scenario_id: self.scenario_id.clone(),
            rows,
        })
    }
}

fn kind_name(k: ReconstructorKind) -> &'static str {
    match k {
        ReconstructorKind::Unet => "U-net",
        ReconstructorKind::Ae => "AE",
    }
}

pub fn run_ablation(
    suite: AblationSuite,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &RunConfig,
) -> Result<AblationTable> {
    if suite != AblationSuite::ReconstructorConfig {
        return Experiment::prepare(source, target, cfg)?.ablate(suite);
    }
    use ReconstructorKind::{Ae, Unet};
    let mut rows = Vec::new();
    let mut scenario_id = String::new();
    for (r, w) in [(Ae, Ae), (Ae, Unet), (Unet, Unet), (Unet, Ae)] {
        let exp = Experiment::prepare_with(source, target, cfg, r, w)?;
        let (m, _) = exp.adapt(&cfg.adapt, BranchMode::Full)?;
        rows.push(row(
            &format!("{} + {}", kind_name(r), kind_name(w)),
            exp.mf1_adapted(&m, Weighting::Off)?,
        ));
        scenario_id = exp.scenario_id;
    }
    Ok(AblationTable {
        suite,
        scenario_id,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle(pred: &[usize], y: &[usize], k: usize) -> f64 {
        let mut cm = vec![vec![0usize; k]; k];
        for (&p, &t) in pred.iter().zip(y) {
            cm[t][p] += 1;
        }
        let mut acc = 0.0;
        for c in 0..k {
            let tp = cm[c][c] as f64;
            let predicted: usize = (0..k).map(|t| cm[t][c]).sum();
            let actual: usize = cm[c].iter().sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            acc += if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
        }
        acc / k as f64
    }

    #[test]
    fn hand_cases() {
        let y = LabelBatch::new(vec![0, 0, 1, 1], 2).unwrap();
        assert_eq!(mf1(&[0, 0, 1, 1], &y).unwrap(), 1.0);
        assert!((mf1(&[0, 0, 0, 0], &y).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(mf1(&[0, 0], &y).is_err());
    }

    #[test]
    fn nn_distance_hand_cases() {
        let s = vec![vec![3.0, 4.0], vec![6.0, 8.0]];
        assert_eq!(nn_distance_rows(&[vec![0.0, 0.0]], &s).unwrap(), 5.0);
        assert_eq!(nn_distance_rows(&s, &s).unwrap(), 0.0);
        assert!(nn_distance_rows(&[], &s).is_err());
    }

    #[test]
    fn table_layout() {
        let r = ScenarioResult {
            scenario_id: "0->1".into(),
            mf1_no_adapt: 0.5,
            mf1_source_replay: 0.6,
            mf1_full: 0.7,
            mf1_full_with_ia: 0.75,
            nn_distance: [3.0, 2.0, 1.0],
        };
        let t = scenario_table(&[r]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "Algorithm,0->1,AVG");
        assert_eq!(lines[4], "CT + IA,75.00,75.00");
    }

    #[test]
    fn unknown_suite_rejected() {
        assert!("branches".parse::<AblationSuite>().is_err());
        assert_eq!(
            "ia-weighting".parse::<AblationSuite>().unwrap(),
            AblationSuite::IaWeighting
        );
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..6).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 1..40)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn matches_confusion_matrix_oracle((k, pairs) in instance()) {
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let got = mf1(&pred, &LabelBatch::new(y.clone(), k).unwrap()).unwrap();
            prop_assert!((got - oracle(&pred, &y, k)).abs() < 1e-12);
        }

        #[test]
        fn invariant_to_order_and_relabeling((k, pairs) in instance(), shift in 0usize..5) {
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let base = mf1(&pred, &LabelBatch::new(y.clone(), k).unwrap()).unwrap();
            let rev_p: Vec<usize> = pred.iter().rev().cloned().collect();
            let rev_y: Vec<usize> = y.iter().rev().cloned().collect();
            prop_assert!((base - mf1(&rev_p, &LabelBatch::new(rev_y, k).unwrap()).unwrap()).abs() < 1e-12);
            let relabel = |c: &usize| (c + shift) % k;
            let rp: Vec<usize> = pred.iter().map(relabel).collect();
            let ry: Vec<usize> = y.iter().map(relabel).collect();
            prop_assert!((base - mf1(&rp, &LabelBatch::new(ry, k).unwrap()).unwrap()).abs() < 1e-12);
        }
    }
}
