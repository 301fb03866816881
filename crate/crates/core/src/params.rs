//! Named parameter storage shared by the detector, prompts and embeddings.
//!
//! Keys are stable dotted paths (`backbone.block0.conv.weight`); the first
//! path component names the parameter group used for trainable-set selection.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Backbone,
    Head,
    Prompt,
    Translator,
    EmbedResidual,
    EmbedBase,
}

impl Group {
    pub fn of(key: &str) -> Option<Group> {
        let first = key.split('.').next()?;
        Some(match first {
            "backbone" => Group::Backbone,
            "head" => Group::Head,
            "prompt" => Group::Prompt,
            "translator" => Group::Translator,
            "embed" if key == "embed.residual" => Group::EmbedResidual,
            "embed" if key == "embed.base" => Group::EmbedBase,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor<T>) {
        self.map.insert(key.into(), t);
    }

    pub fn get(&self, key: &str) -> Result<&Tensor<T>> {
        self.map.get(key).ok_or_else(|| Error::Unknown {
            what: "parameter",
            name: key.to_string(),
        })
    }

    pub fn get_mut(&mut self, key: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(key).ok_or_else(|| Error::Unknown {
            what: "parameter",
            name: key.to_string(),
        })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Tensor<T>> {
        self.map.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Merges `other` in, overwriting clashing keys.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.map.extend(other.map);
    }

    /// Keeps only keys for which `keep` holds.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore<T> {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// SHA-256 over keys, shapes and little-endian element bytes, in key order.
    pub fn digest(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (k, t) in self.map.iter().filter(|(k, _)| keep(k)) {
            h.update(k.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// He-normal initialisation for a conv weight of shape `[o, c, k, k]`.
pub(crate) fn he_normal<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::lit(normal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub(crate) fn rng_for(seed: u64, salt: &str) -> ChaCha8Rng {
    let mut s = seed ^ 0x6d6f_6470_726f_6d70;
    for b in salt.bytes() {
        s = s.rotate_left(5) ^ b as u64;
        s = s.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// Lazily binds stored parameters as graph leaves, marking the trainable ones.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    trainable: &'a BTreeSet<String>,
    vars: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: &'a BTreeSet<String>) -> Self {
        Binder {
            store,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn var(&mut self, g: &mut Graph<T>, key: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(key) {
            return Ok(*v);
        }
        let t = self.store.get(key)?.clone();
        let v = g.leaf(t, self.trainable.contains(key));
        self.vars.insert(key.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Gradients for trainable keys; keys that did not take part in the
    /// forward pass get zeros.
    pub fn collect(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.trainable
            .iter()
            .filter_map(|k| {
                let shape = self.store.get(k).ok()?.shape().to_vec();
                let g = self
                    .vars
                    .get(k)
                    .and_then(|v| grads.get(*v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(&shape));
                Some((k.clone(), g))
            })
            .collect()
    }
}
