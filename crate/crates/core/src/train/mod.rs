//! Pretraining on the source modality and the adaptation strategies.

mod gradcheck;
mod optim;
mod strategy;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{gradient_check, gradient_check_at, rel_error, sample_coordinates, GradCheck, ProbeResult, ABS_FLOOR};
pub use optim::{adamw_step, Moments, BETA1, BETA2, EPS};
pub use strategy::{
    trainable_parameters, OptimConfig, StrategyKind, StrategySpec, ADAPT_EPOCHS, BATCH_SIZE, FINETUNE_LR, PATCH_SIZE,
    PRETRAIN_EPOCHS, PROMPT_LR, RESIDUAL_LR, WEIGHT_DECAY,
};

use crate::data::Sample;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::model::{Adapter, Model, PassOptions};
use crate::params::{rng_for, Group};
use crate::prompts::{init_prompt, init_translator, Mode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PRETRAIN_LR: f64 = 2e-3;

/// Everything needed to continue an interrupted run at an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct TrainState<T> {
    pub step: u64,
    pub epoch: usize,
    pub moments: BTreeMap<String, Moments<T>>,
    /// Mean loss of every optimizer step.
    pub losses: Vec<f64>,
    /// Mean loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(seed: u64) -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            moments: BTreeMap::new(),
            losses: Vec::new(),
            epoch_losses: Vec::new(),
            rng: rng_for(seed, "train-order"),
        }
    }
}

/// Runs epochs `state.epoch..optim.epochs` of minibatch AdamW on `trainable`.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample],
    trainable: &BTreeSet<String>,
    optim: &OptimConfig,
    lr: &dyn Fn(&str) -> f64,
    state: &mut TrainState<T>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    optim.validate()?;
    if trainable.is_empty() {
        return Ok(());
    }
    while state.epoch < optim.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut state.rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(optim.batch_size) {
            let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let origin = match &model.adapter {
                    Adapter::Static(p) => p.origin(Mode::Train, &mut state.rng),
                    _ => (0, 0),
                };
                let opts = PassOptions {
                    origin,
                    ..PassOptions::default()
                };
                let (loss, grads) = model.loss_and_grads(&samples[i], trainable, opts)?;
                batch_loss += loss.total;
                for (k, g) in grads {
                    match acc.get_mut(&k) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(k, g);
                        }
                    }
                }
            }
            let inv = T::lit(1.0 / batch.len() as f64);
            for g in acc.values_mut() {
                g.scale(inv);
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {} step {}",
                    state.epoch, state.step
                )));
            }
            state.step += 1;
            adamw_step(&mut model.params, &acc, &mut state.moments, state.step, lr, optim.weight_decay)?;
            state.losses.push(batch_loss);
            epoch_sum += batch_loss * batch.len() as f64;
        }
        let mean = epoch_sum / samples.len() as f64;
        state.epoch_losses.push(mean);
        state.epoch += 1;
        log::debug!("epoch {}/{} loss {mean:.5}", state.epoch, optim.epochs);
    }
    Ok(())
}

/// Medians of the first and last tenth of `losses` (at least one step each).
pub fn loss_trend(losses: &[f64]) -> Option<(f64, f64)> {
    if losses.is_empty() {
        return None;
    }
    let k = (losses.len() / 10).max(1);
    let median = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    Some((median(&losses[..k]), median(&losses[losses.len() - k..])))
}

/// Trains backbone and head on the source modality with the offline
/// embeddings frozen and zero residuals.
pub fn pretrain<T: Scalar>(
    detector: DetectorConfig,
    vocab: &[String],
    samples: &[Sample],
    optim: &OptimConfig,
) -> Result<(Model<T>, TrainState<T>)> {
    detector.validate()?;
    let mut model = Model::init(detector, vocab, optim.seed)?;
    let trainable: BTreeSet<String> = model
        .params
        .keys()
        .filter(|k| matches!(Group::of(k), Some(Group::Backbone | Group::Head)))
        .cloned()
        .collect();
    let mut state = TrainState::new(optim.seed);
    let lr = optim.lr;
    fit(&mut model, samples, &trainable, optim, &|_| lr, &mut state)?;
    Ok((model, state))
}

/// The step-0 model of `spec`: `base` plus a freshly initialised adapter.
pub fn attach_adapter<T: Scalar>(base: &Model<T>, spec: &StrategySpec) -> Result<Model<T>> {
    spec.validate()?;
    let seed = spec.optim.seed;
    Ok(match spec.kind {
        StrategyKind::Visual(kind) => {
            let (p, store) = init_prompt(kind, spec.patch_size, base.detector.image_size, seed)?;
            base.clone().with_adapter(Adapter::Static(p), store)
        }
        StrategyKind::ModPrompt(variant) => {
            let (t, store) = init_translator(variant, seed)?;
            base.clone().with_adapter(Adapter::Translator(t), store)
        }
        _ => base.clone().with_adapter(Adapter::None, Default::default()),
    })
}

#[derive(Clone, Debug)]
pub struct Adapted<T> {
    pub spec: StrategySpec,
    pub model: Model<T>,
    pub state: TrainState<T>,
    pub trainable: BTreeSet<String>,
    /// Digest of every non-trainable parameter, equal before and after.
    pub frozen_digest: String,
}

/// Optimizes exactly `trainable_parameters(spec)` on `samples` and verifies
/// that everything else is bitwise unchanged.
pub fn adapt<T: Scalar>(base: &Model<T>, samples: &[Sample], spec: &StrategySpec) -> Result<Adapted<T>> {
    let mut model = attach_adapter(base, spec)?;
    let trainable = trainable_parameters(spec, &model.params)?;
    let frozen = |k: &str| !trainable.contains(k);
    let before = model.params.digest(frozen);
    let mut state = TrainState::new(spec.optim.seed);
    fit(&mut model, samples, &trainable, &spec.optim, &|k| spec.lr_for(k), &mut state)?;
    let after = model.params.digest(frozen);
    if before != after {
        return Err(Error::FrozenMutated(format!(
            "{}: digest {before} became {after}",
            spec.label()
        )));
    }
    Ok(Adapted {
        spec: spec.clone(),
        model,
        state,
        trainable,
        frozen_digest: before,
    })
}
