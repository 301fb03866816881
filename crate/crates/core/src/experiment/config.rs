//! TOML experiment configuration. Every error is collected so one run reports
//! all bad keys at once.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::Modality;
use crate::detector::DecodeConfig;
use crate::error::{Error, Result};
use crate::train::{OptimConfig, StrategyKind, StrategySpec, PRETRAIN_EPOCHS, PRETRAIN_LR, RESIDUAL_LR};

pub const SEED_ENV: &str = "MODPROMPT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub root: PathBuf,
    pub modality: Modality,
    pub seed: u64,
    pub pretrain_size: usize,
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySection {
    pub kind: Vec<StrategyKind>,
    pub with_task_residuals: Vec<bool>,
    pub patch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSection {
    pub lr: f64,
    pub residual_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub strategy: StrategySection,
    pub optim: OptimSection,
    pub pretrain: PretrainSection,
    pub eval: DecodeConfig,
}

/// Walks a parsed table, recording problems instead of stopping at the first.
struct Reader<'a> {
    root: &'a Table,
    errors: Vec<String>,
    seen: BTreeSet<String>,
}

enum Need {
    Required,
    Optional,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, section: &str, key: &str, need: Need) -> Option<&'a Value> {
        let path = format!("{section}.{key}");
        self.seen.insert(path.clone());
        let v = self.root.get(section).and_then(|s| s.as_table()).and_then(|t| t.get(key));
        if v.is_none() && matches!(need, Need::Required) {
            self.errors.push(format!("missing key `{path}`"));
        }
        v
    }

    fn bad(&mut self, section: &str, key: &str, what: &str) {
        self.errors.push(format!("`{section}.{key}`: expected {what}"));
    }

    fn float(&mut self, section: &str, key: &str, need: Need, default: f64) -> f64 {
        match self.raw(section, key, need) {
            None => default,
            Some(Value::Float(f)) => *f,
            Some(Value::Integer(i)) => *i as f64,
            Some(_) => {
                self.bad(section, key, "a number");
                default
            }
        }
    }

    fn uint(&mut self, section: &str, key: &str, need: Need, default: u64) -> u64 {
        match self.raw(section, key, need) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => {
                self.bad(section, key, "a non-negative integer");
                default
            }
        }
    }

    fn string(&mut self, section: &str, key: &str, need: Need) -> Option<String> {
        match self.raw(section, key, need)? {
            Value::String(s) => Some(s.clone()),
            _ => {
                self.bad(section, key, "a string");
                None
            }
        }
    }

    /// A scalar or an array of scalars.
    fn list<T>(&mut self, section: &str, key: &str, what: &str, conv: impl Fn(&Value) -> Option<T>) -> Vec<T> {
        let Some(v) = self.raw(section, key, Need::Required) else {
            return Vec::new();
        };
        let items: Vec<&Value> = match v {
            Value::Array(a) => a.iter().collect(),
            other => vec![other],
        };
        let out: Option<Vec<T>> = items.into_iter().map(conv).collect();
        match out {
            Some(v) if !v.is_empty() => v,
            _ => {
                self.bad(section, key, what);
                Vec::new()
            }
        }
    }

    fn unknown_keys(&mut self) {
        for (section, v) in self.root {
            match v.as_table() {
                Some(t) => {
                    for key in t.keys() {
                        let path = format!("{section}.{key}");
                        if !self.seen.contains(&path) {
                            self.errors.push(format!("unknown key `{path}`"));
                        }
                    }
                }
                None => self.errors.push(format!("unknown key `{section}`")),
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses `text`; relative data roots are resolved against `base_dir`.
    /// `seed_override` replaces the adaptation seeds.
    pub fn parse(text: &str, base_dir: &Path, seed_override: Option<u64>) -> Result<Self> {
        let table: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut r = Reader {
            root: &table,
            errors: Vec::new(),
            seen: BTreeSet::new(),
        };
        for section in ["data", "strategy", "optim", "pretrain", "eval"] {
            r.seen.insert(section.to_string());
        }

        let root = r.string("data", "root", Need::Required).map(PathBuf::from).unwrap_or_default();
        let root = if root.is_relative() { base_dir.join(root) } else { root };
        let modality = match r.string("data", "modality", Need::Required) {
            Some(m) => match m.parse::<Modality>() {
                Ok(Modality::Rgb) => {
                    r.errors.push("`data.modality`: the target modality must differ from rgb".into());
                    Modality::PseudoIr
                }
                Ok(m) => m,
                Err(e) => {
                    r.errors.push(format!("`data.modality`: {e}"));
                    Modality::PseudoIr
                }
            },
            None => Modality::PseudoIr,
        };
        let data = DataSection {
            root,
            modality,
            seed: r.uint("data", "seed", Need::Optional, 0),
            pretrain_size: r.uint("data", "pretrain_size", Need::Optional, 256) as usize,
            train_size: r.uint("data", "train_size", Need::Optional, 64) as usize,
            test_size: r.uint("data", "test_size", Need::Optional, 128) as usize,
        };

        let kind = r.list("strategy", "kind", "a strategy name or a list of them", |v| {
            v.as_str().and_then(|s| s.parse().ok())
        });
        let with_task_residuals = r.list("strategy", "with_task_residuals", "a boolean or a list of them", |v| v.as_bool());
        let patch_size = r.uint("strategy", "patch_size", Need::Required, 0) as usize;
        let strategy = StrategySection {
            kind,
            with_task_residuals,
            patch_size,
        };

        let mut seed = r.list("optim", "seed", "a non-negative integer or a list of them", |v| {
            v.as_integer().filter(|i| *i >= 0).map(|i| i as u64)
        });
        if let Some(s) = seed_override {
            seed = vec![s];
        }
        let optim = OptimSection {
            lr: r.float("optim", "lr", Need::Required, 0.0),
            residual_lr: r.float("optim", "residual_lr", Need::Optional, RESIDUAL_LR),
            weight_decay: r.float("optim", "weight_decay", Need::Required, 0.0),
            epochs: r.uint("optim", "epochs", Need::Required, 0) as usize,
            batch_size: r.uint("optim", "batch_size", Need::Required, 0) as usize,
            seed,
        };
        let pretrain = PretrainSection {
            lr: r.float("pretrain", "lr", Need::Optional, PRETRAIN_LR),
            epochs: r.uint("pretrain", "epochs", Need::Optional, PRETRAIN_EPOCHS as u64) as usize,
            seed: r.uint("pretrain", "seed", Need::Optional, 0),
        };
        let eval = DecodeConfig {
            score_threshold: r.float("eval", "score_threshold", Need::Required, 0.0),
            nms_iou: r.float("eval", "nms_iou", Need::Required, 0.0),
            max_detections: r.uint("eval", "max_detections", Need::Optional, 100) as usize,
        };
        r.unknown_keys();
        let mut errors = r.errors;

        let cfg = ExperimentConfig {
            data,
            strategy,
            optim,
            pretrain,
            eval,
        };
        cfg.check_values(&mut errors);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::ConfigKeys(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not a non-negative integer")))?,
            ),
            Err(_) => None,
        };
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), seed)
    }

    fn check_values(&self, errors: &mut Vec<String>) {
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errors.push(msg.to_string());
            }
        };
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        need(positive(self.optim.lr), "`optim.lr`: must be positive");
        need(positive(self.optim.residual_lr), "`optim.residual_lr`: must be positive");
        need(
            self.optim.weight_decay.is_finite() && self.optim.weight_decay >= 0.0,
            "`optim.weight_decay`: must be non-negative",
        );
        need(self.optim.batch_size > 0, "`optim.batch_size`: must be positive");
        need(positive(self.pretrain.lr), "`pretrain.lr`: must be positive");
        need(self.pretrain.epochs > 0, "`pretrain.epochs`: must be positive");
        need(unit(self.eval.score_threshold), "`eval.score_threshold`: must lie in [0, 1]");
        need(unit(self.eval.nms_iou), "`eval.nms_iou`: must lie in [0, 1]");
        need(self.eval.max_detections > 0, "`eval.max_detections`: must be positive");
        need(self.data.pretrain_size > 0, "`data.pretrain_size`: must be positive");
        need(self.data.train_size > 0, "`data.train_size`: must be positive");
        need(self.data.test_size > 0, "`data.test_size`: must be positive");
        let uses_patch = self
            .strategy
            .kind
            .iter()
            .any(|k| matches!(k, StrategyKind::Visual(p) if p.uses_patch_size()));
        if uses_patch {
            need(
                self.strategy.patch_size > 0 && self.strategy.patch_size <= 96,
                "`strategy.patch_size`: must lie in 1..=96 for patch prompts",
            );
        }
        need(
            self.strategy.kind.len() == self.strategy.kind.iter().collect::<BTreeSet<_>>().len(),
            "`strategy.kind`: duplicate strategy",
        );
        need(
            !(self.strategy.kind.contains(&StrategyKind::FullFinetune) && !self.strategy.with_task_residuals.contains(&false)),
            "`strategy.with_task_residuals`: full fine-tuning cannot take task residuals",
        );
        need(!self.specs().is_empty(), "`strategy`: no valid strategy/residual combination");
    }

    /// Every (strategy, residual flag) pair to run, skipping full fine-tuning
    /// with residuals.
    pub fn strategies(&self) -> Vec<(StrategyKind, bool)> {
        let mut out = Vec::new();
        for &k in &self.strategy.kind {
            for &tr in &self.strategy.with_task_residuals {
                if !(k == StrategyKind::FullFinetune && tr) && !out.contains(&(k, tr)) {
                    out.push((k, tr));
                }
            }
        }
        out
    }

    pub fn spec(&self, kind: StrategyKind, with_task_residuals: bool, seed: u64) -> StrategySpec {
        StrategySpec {
            kind,
            with_task_residuals,
            patch_size: self.strategy.patch_size,
            optim: OptimConfig {
                lr: self.optim.lr,
                residual_lr: self.optim.residual_lr,
                weight_decay: self.optim.weight_decay,
                epochs: self.optim.epochs,
                batch_size: self.optim.batch_size,
                seed,
            },
        }
    }

    /// All specs, strategy-major then seed.
    pub fn specs(&self) -> Vec<StrategySpec> {
        let mut out = Vec::new();
        for (k, tr) in self.strategies() {
            for &s in &self.optim.seed {
                out.push(self.spec(k, tr, s));
            }
        }
        out
    }

    pub fn pretrain_optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.pretrain.lr,
            residual_lr: self.optim.residual_lr,
            weight_decay: self.optim.weight_decay,
            epochs: self.pretrain.epochs,
            batch_size: self.optim.batch_size,
            seed: self.pretrain.seed,
        }
    }

    /// Everything that must agree between records sharing a table: the
    /// config without the strategy list and the seeds.
    pub fn table_fingerprint(&self) -> String {
        let mut c = self.clone();
        c.strategy.kind.clear();
        c.strategy.with_task_residuals.clear();
        c.optim.seed.clear();
        serde_json::to_string(&c).expect("config serializes")
    }
}
