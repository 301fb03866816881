//! Experiment orchestration: data, pretraining, adaptation, evaluation and
//! the results tables, each phase reusing artifacts that are already on disk.
//!
//! Layout under the output directory:
//! `pretrain/{checkpoint, summary.json}`,
//! `<strategy>/<seed>/{checkpoint, train_log.json, ap_report.json,
//! retention.json, record.json, pr_<category>.png, overlay_<id>.png}`,
//! `report.md`, `report.csv`.

mod config;
mod plot;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{DataSection, ExperimentConfig, OptimSection, PretrainSection, StrategySection, SEED_ENV};
pub use plot::{overlay_detections, plot_pr, pr_curve, PrCurve, DET_COLOR, GT_COLOR};
pub use report::{emit_report, format_cell, mean_std, ExperimentRecord, FrozenAudit};

use crate::checkpoint::{load_model, save_model};
use crate::data::{
    default_vocab, load_split, read_manifest, write_dataset, GenerationConfig, Modality, Sample, SceneLimits,
};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::{
    category_flags, collect_results, evaluate, evaluate_results, match_detections, retention_against, ApReport,
};
use crate::model::Model;
use crate::params::{Group, ParamStore};
use crate::scalar::Scalar;
use crate::train::{adapt, loss_trend, pretrain, StrategySpec};

pub const PRETRAIN_SPLIT: &str = "pretrain";
pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";
/// Number of test images drawn as overlays per run.
pub const OVERLAYS: usize = 3;

pub fn source_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data.root.join(Modality::Rgb.as_str())
}

pub fn target_root(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data.root.join(cfg.data.modality.as_str())
}

pub fn pretrain_dir(out: &Path) -> PathBuf {
    out.join("pretrain")
}

pub fn run_dir(out: &Path, spec: &StrategySpec) -> PathBuf {
    out.join(spec.label()).join(spec.optim.seed.to_string())
}

/// Package version plus `git describe` of the working directory when available.
pub fn code_version() -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match git {
        Some(g) => format!("{} ({g})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn stale(path: &Path, reason: impl Into<String>) -> Error {
    Error::Stale {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn generation_configs(cfg: &ExperimentConfig) -> [GenerationConfig; 2] {
    let gen = |root, modality, splits: [(&str, usize); 2]| GenerationConfig {
        root,
        modality,
        splits: splits.iter().map(|(n, s)| (n.to_string(), *s)).collect(),
        vocab: default_vocab(),
        seed: cfg.data.seed,
        limits: SceneLimits::default(),
    };
    [
        gen(
            source_root(cfg),
            Modality::Rgb,
            [(PRETRAIN_SPLIT, cfg.data.pretrain_size), (TEST_SPLIT, cfg.data.test_size)],
        ),
        gen(
            target_root(cfg),
            cfg.data.modality,
            [(TRAIN_SPLIT, cfg.data.train_size), (TEST_SPLIT, cfg.data.test_size)],
        ),
    ]
}

/// Writes the source and target datasets unless an identical one exists.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<()> {
    for gen in generation_configs(cfg) {
        let manifest_path = gen.root.join("manifest.json");
        if manifest_path.exists() {
            let m = read_manifest(&gen.root)?;
            let sizes: Vec<(String, usize)> = m.splits.iter().map(|(k, v)| (k.clone(), v.size)).collect();
            let mut want = gen.splits.clone();
            want.sort();
            if m.modality != gen.modality || m.vocab != gen.vocab || m.seed != gen.seed || sizes != want {
                return Err(stale(&manifest_path, "dataset seed, modality or split sizes differ"));
            }
            log::info!("reusing {}", gen.root.display());
            continue;
        }
        log::info!("writing {} to {}", gen.modality, gen.root.display());
        write_dataset(&gen)?;
    }
    Ok(())
}

fn pretrain_extra(cfg: &ExperimentConfig) -> serde_json::Value {
    json!({
        "optim": cfg.pretrain_optim(),
        "data_seed": cfg.data.seed,
        "pretrain_size": cfg.data.pretrain_size,
    })
}

/// Metrics of the pretrained detector, written next to its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    /// Held-out source test split.
    pub source: ApReport,
    /// Target test split, zero-shot.
    pub target: ApReport,
    pub epoch_losses: Vec<f64>,
    pub loss_trend: Option<(f64, f64)>,
    pub train_seconds: f64,
}

/// Loads the pretrained detector, failing if it is missing or was trained
/// with different settings.
pub fn load_pretrained<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<Model<T>> {
    let path = pretrain_dir(out).join("checkpoint");
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "{} does not exist; run the pretrain phase first",
            path.display()
        )));
    }
    let (model, extra) = load_model::<T>(&path)?;
    if extra != pretrain_extra(cfg) {
        return Err(stale(&path, "pretraining settings differ"));
    }
    Ok(model)
}

/// Pretrains on the source modality unless a matching checkpoint exists.
pub fn pretrain_phase<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<Model<T>> {
    let dir = pretrain_dir(out);
    if dir.join("checkpoint").exists() {
        log::info!("reusing {}", dir.display());
        return load_pretrained(cfg, out);
    }
    let source = load_split(&source_root(cfg), PRETRAIN_SPLIT)?;
    log::info!("pretraining on {} source images", source.len());
    let t = Instant::now();
    let (model, state) = pretrain::<T>(DetectorConfig::default(), &default_vocab(), &source, &cfg.pretrain_optim())?;
    let seconds = t.elapsed().as_secs_f64();
    let summary = PretrainSummary {
        source: evaluate(&model, &load_split(&source_root(cfg), TEST_SPLIT)?, &cfg.eval)?,
        target: evaluate(&model, &load_split(&target_root(cfg), TEST_SPLIT)?, &cfg.eval)?,
        loss_trend: loss_trend(&state.losses),
        epoch_losses: state.epoch_losses,
        train_seconds: seconds,
    };
    log::info!(
        "pretrained in {seconds:.1}s: source AP50 {:.3}, target zero-shot AP50 {:.3}",
        summary.source.ap50,
        summary.target.ap50
    );
    write_json(&dir.join("summary.json"), &summary)?;
    save_model(&model, &dir.join("checkpoint"), pretrain_extra(cfg))?;
    Ok(model)
}

fn adapt_extra<T: Scalar>(spec: &StrategySpec, base: &Model<T>) -> serde_json::Value {
    json!({ "spec": spec, "base_digest": base.params.digest(|_| true) })
}

/// Losses and timing of one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub loss_trend: Option<(f64, f64)>,
    pub train_seconds: f64,
}

fn load_adapted<T: Scalar>(spec: &StrategySpec, base: &Model<T>, out: &Path) -> Result<Model<T>> {
    let path = run_dir(out, spec).join("checkpoint");
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "{} does not exist; run the adapt phase first",
            path.display()
        )));
    }
    let (model, extra) = load_model::<T>(&path)?;
    if extra != adapt_extra(spec, base) {
        return Err(stale(&path, "strategy settings or base detector differ"));
    }
    Ok(model)
}

/// Adapts the pretrained detector with every configured strategy and seed,
/// skipping runs whose checkpoint already exists.
pub fn adapt_phase<T: Scalar>(cfg: &ExperimentConfig, out: &Path, base: &Model<T>) -> Result<()> {
    let mut train: Option<Vec<Sample>> = None;
    for spec in cfg.specs() {
        let dir = run_dir(out, &spec);
        if dir.join("checkpoint").exists() {
            load_adapted(&spec, base, out)?;
            log::info!("reusing {}", dir.display());
            continue;
        }
        let samples = match &train {
            Some(s) => s,
            None => train.insert(load_split(&target_root(cfg), TRAIN_SPLIT)?),
        };
        let t = Instant::now();
        let adapted = adapt(base, samples, &spec)?;
        let log = TrainLog {
            loss_trend: loss_trend(&adapted.state.losses),
            losses: adapted.state.losses,
            epoch_losses: adapted.state.epoch_losses,
            train_seconds: t.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} seed {}: {} trainable tensors, {:.1}s",
            spec.label(),
            spec.optim.seed,
            adapted.trainable.len(),
            log.train_seconds
        );
        write_json(&dir.join("train_log.json"), &log)?;
        save_model(&adapted.model, &dir.join("checkpoint"), adapt_extra(&spec, base))?;
    }
    Ok(())
}

fn frozen_audit<T: Scalar>(base: &ParamStore<T>, adapted: &ParamStore<T>) -> FrozenAudit {
    let detector = |k: &str| matches!(Group::of(k), Some(Group::Backbone | Group::Head));
    let embeddings = |k: &str| Group::of(k) == Some(Group::EmbedBase);
    FrozenAudit {
        detector_before: base.digest(detector),
        detector_after: adapted.digest(detector),
        base_embeddings_before: base.digest(embeddings),
        base_embeddings_after: adapted.digest(embeddings),
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn evaluate_run<T: Scalar>(
    cfg: &ExperimentConfig,
    spec: &StrategySpec,
    model: &Model<T>,
    base: &Model<T>,
    target: &[Sample],
    source: &[Sample],
    zero_shot: &ApReport,
    dir: &Path,
) -> Result<ExperimentRecord> {
    let results = collect_results(model, target, &cfg.eval, true)?;
    let report = evaluate_results(&results, &model.vocab)?;
    let matched: Vec<_> = results.iter().map(|r| match_detections(&r.detections, &r.gts, 0.5)).collect();
    for (c, name) in model.vocab.iter().enumerate() {
        let num_gt = results.iter().flat_map(|r| &r.gts).filter(|g| g.category == c).count();
        if num_gt > 0 {
            plot_pr(&category_flags(&matched, c), num_gt, &dir.join(format!("pr_{}.png", file_stem(name))))?;
        }
    }
    for (s, r) in target.iter().zip(&results).take(OVERLAYS) {
        let gts: Vec<_> = r.gts.iter().map(|g| g.bbox).collect();
        overlay_detections(&s.image, &r.detections, &gts, &dir.join(format!("overlay_{}.png", file_stem(&s.id))))?;
    }
    let retention = retention_against(model, zero_shot.clone(), source, &cfg.eval)?;
    let log: TrainLog = read_json(&dir.join("train_log.json"))?;
    let record = ExperimentRecord {
        config: cfg.clone(),
        code_version: code_version(),
        kind: spec.kind,
        with_task_residuals: spec.with_task_residuals,
        seed: spec.optim.seed,
        checkpoint_digest: model.params.digest(|_| true),
        target: report,
        retention,
        frozen: frozen_audit(&base.params, &model.params),
        loss_trend: log.loss_trend,
        train_seconds: log.train_seconds,
    };
    write_json(&dir.join("ap_report.json"), &record.target)?;
    write_json(&dir.join("retention.json"), &record.retention)?;
    write_json(&dir.join("record.json"), &record)?;
    Ok(record)
}

fn reusable(record: &ExperimentRecord, cfg: &ExperimentConfig, spec: &StrategySpec, digest: &str) -> bool {
    record.config.table_fingerprint() == cfg.table_fingerprint()
        && record.kind == spec.kind
        && record.with_task_residuals == spec.with_task_residuals
        && record.seed == spec.optim.seed
        && record.checkpoint_digest == digest
}

/// Evaluates every adapted checkpoint on the target test split and its
/// retention on the source test split, writing one record per run.
pub fn evaluate_phase<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ExperimentRecord>> {
    let base = load_pretrained::<T>(cfg, out)?;
    let mut splits: Option<(Vec<Sample>, Vec<Sample>, ApReport)> = None;
    let mut records = Vec::new();
    for spec in cfg.specs() {
        let dir = run_dir(out, &spec);
        let model = load_adapted(&spec, &base, out)?;
        let record_path = dir.join("record.json");
        if record_path.exists() {
            let r: ExperimentRecord = read_json(&record_path)?;
            if reusable(&r, cfg, &spec, &model.params.digest(|_| true)) {
                log::info!("reusing {}", record_path.display());
                records.push(r);
                continue;
            }
        }
        let (target, source, zero_shot) = match &splits {
            Some(s) => s,
            None => {
                let source = load_split(&source_root(cfg), TEST_SPLIT)?;
                let zs = evaluate(&base, &source, &cfg.eval)?;
                splits.insert((load_split(&target_root(cfg), TEST_SPLIT)?, source, zs))
            }
        };
        let r = evaluate_run(cfg, &spec, &model, &base, target, source, zero_shot, &dir)?;
        log::info!(
            "{} seed {}: target AP50 {:.3}, source AP50 {:.3}",
            spec.label(),
            spec.optim.seed,
            r.target.ap50,
            r.retention.adapted.ap50
        );
        records.push(r);
    }
    Ok(records)
}

/// Rebuilds `report.md` and `report.csv` from the stored records.
pub fn report_phase(cfg: &ExperimentConfig, out: &Path) -> Result<(String, String)> {
    let records = cfg
        .specs()
        .iter()
        .map(|spec| read_json::<ExperimentRecord>(&run_dir(out, spec).join("record.json")))
        .collect::<Result<Vec<_>>>()?;
    let (md, csv) = emit_report(&records)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("report.md"), &md).map_err(|e| Error::io(out.join("report.md"), e))?;
    fs::write(out.join("report.csv"), &csv).map_err(|e| Error::io(out.join("report.csv"), e))?;
    Ok((md, csv))
}

/// Every phase in order; finished phases are reused.
pub fn run_config<T: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ExperimentRecord>> {
    generate_data(cfg)?;
    let base = pretrain_phase::<T>(cfg, out)?;
    adapt_phase(cfg, out, &base)?;
    let records = evaluate_phase::<T>(cfg, out)?;
    report_phase(cfg, out)?;
    Ok(records)
}

/// Loads the config at `config_path` (honouring the seed override) and runs
/// every phase into `out`.
pub fn run_experiment<T: Scalar>(config_path: &Path, out: &Path) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    run_config::<T>(&cfg, out)?;
    Ok(out.to_path_buf())
}
