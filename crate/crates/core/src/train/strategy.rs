use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};
use crate::prompts::{PromptKind, TranslatorVariant};
use crate::scalar::Scalar;

pub const PROMPT_LR: f64 = 1e-3;
pub const FINETUNE_LR: f64 = 1e-3;
pub const RESIDUAL_LR: f64 = 3e-4;
pub const WEIGHT_DECAY: f64 = 0.01;
pub const BATCH_SIZE: usize = 8;
pub const PRETRAIN_EPOCHS: usize = 30;
pub const ADAPT_EPOCHS: usize = 20;
pub const PATCH_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    ZeroShot,
    HeadFinetune,
    FullFinetune,
    Visual(PromptKind),
    ModPrompt(TranslatorVariant),
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 10] = [
        StrategyKind::ZeroShot,
        StrategyKind::HeadFinetune,
        StrategyKind::FullFinetune,
        StrategyKind::Visual(PromptKind::Fixed),
        StrategyKind::Visual(PromptKind::Random),
        StrategyKind::Visual(PromptKind::Padding),
        StrategyKind::Visual(PromptKind::WeightMap),
        StrategyKind::Visual(PromptKind::WeightMapV2),
        StrategyKind::ModPrompt(TranslatorVariant::Mb),
        StrategyKind::ModPrompt(TranslatorVariant::Res),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "zs",
            StrategyKind::HeadFinetune => "hft",
            StrategyKind::FullFinetune => "ft",
            StrategyKind::Visual(PromptKind::Fixed) => "vp-fixed",
            StrategyKind::Visual(PromptKind::Random) => "vp-random",
            StrategyKind::Visual(PromptKind::Padding) => "vp-padding",
            StrategyKind::Visual(PromptKind::WeightMap) => "vp-wm",
            StrategyKind::Visual(PromptKind::WeightMapV2) => "vp-wm2",
            StrategyKind::ModPrompt(TranslatorVariant::Mb) => "modprompt-mb",
            StrategyKind::ModPrompt(TranslatorVariant::Res) => "modprompt-res",
        }
    }

    /// Strategies that leave the detector untouched.
    pub fn is_prompt(self) -> bool {
        matches!(self, StrategyKind::Visual(_) | StrategyKind::ModPrompt(_))
    }

    pub fn default_lr(self) -> f64 {
        match self {
            StrategyKind::HeadFinetune | StrategyKind::FullFinetune => FINETUNE_LR,
            _ => PROMPT_LR,
        }
    }

    fn groups(self) -> &'static [Group] {
        match self {
            StrategyKind::ZeroShot => &[],
            StrategyKind::HeadFinetune => &[Group::Head],
            StrategyKind::FullFinetune => &[Group::Backbone, Group::Head],
            StrategyKind::Visual(_) => &[Group::Prompt],
            StrategyKind::ModPrompt(_) => &[Group::Translator],
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "strategy kind",
                name: s.to_string(),
            })
    }
}

impl Serialize for StrategyKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for StrategyKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate of `embed.residual`, which is tuned alongside whatever
    /// group the strategy selects.
    pub residual_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl OptimConfig {
    pub fn for_kind(kind: StrategyKind, seed: u64) -> Self {
        OptimConfig {
            lr: kind.default_lr(),
            residual_lr: RESIDUAL_LR,
            weight_decay: WEIGHT_DECAY,
            epochs: ADAPT_EPOCHS,
            batch_size: BATCH_SIZE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bad.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.residual_lr.is_finite() && self.residual_lr > 0.0) {
            bad.push(format!("residual_lr must be positive, got {}", self.residual_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bad.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigKeys(bad))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub with_task_residuals: bool,
    pub patch_size: usize,
    pub optim: OptimConfig,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, with_task_residuals: bool, seed: u64) -> Self {
        StrategySpec {
            kind,
            with_task_residuals,
            patch_size: PATCH_SIZE,
            optim: OptimConfig::for_kind(kind, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == StrategyKind::FullFinetune && self.with_task_residuals {
            return Err(Error::Config(
                "task residuals cannot be combined with full fine-tuning".into(),
            ));
        }
        if let StrategyKind::Visual(k) = self.kind {
            if k.uses_patch_size() && self.patch_size == 0 {
                return Err(Error::Config("patch_size must be positive".into()));
            }
        }
        self.optim.validate()
    }

    /// Directory-safe label, e.g. `modprompt-res+tr`.
    pub fn label(&self) -> String {
        if self.with_task_residuals {
            format!("{}+tr", self.kind)
        } else {
            self.kind.to_string()
        }
    }

    pub fn lr_for(&self, key: &str) -> f64 {
        if Group::of(key) == Some(Group::EmbedResidual) {
            self.optim.residual_lr
        } else {
            self.optim.lr
        }
    }
}

/// Keys of `params` that `spec` optimizes. The base embeddings are never
/// selected.
pub fn trainable_parameters<T: Scalar>(spec: &StrategySpec, params: &ParamStore<T>) -> Result<BTreeSet<String>> {
    spec.validate()?;
    let mut groups = spec.kind.groups().to_vec();
    if spec.with_task_residuals {
        groups.push(Group::EmbedResidual);
    }
    let mut out = BTreeSet::new();
    for key in params.keys() {
        match Group::of(key) {
            Some(Group::EmbedBase) => {}
            Some(g) if groups.contains(&g) => {
                out.insert(key.clone());
            }
            Some(_) => {}
            None => {
                return Err(Error::Unknown {
                    what: "parameter group",
                    name: key.clone(),
                })
            }
        }
    }
    Ok(out)
}
