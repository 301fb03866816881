//! Offline category embeddings with learnable task residuals.
//!
//! Category names are embedded once by a toy encoder (character-trigram
//! hashing followed by a fixed random projection). Adaptation never touches
//! these base rows; it learns an additive residual per category, and the
//! detector consumes the row-normalized sum.

use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{rng_for, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BASE_KEY: &str = "embed.base";
pub const RESIDUAL_KEY: &str = "embed.residual";

const TRIGRAM_BUCKETS: usize = 512;

fn trigram_counts(name: &str) -> Vec<f64> {
    let padded: Vec<char> = std::iter::once('^')
        .chain(name.chars())
        .chain(std::iter::once('$'))
        .collect();
    let mut counts = vec![0.0; TRIGRAM_BUCKETS];
    for w in padded.windows(3) {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for c in w {
            for b in c.to_string().bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        counts[(h % TRIGRAM_BUCKETS as u64) as usize] += 1.0;
    }
    counts
}

fn normalize_rows<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let v = g.constant(t);
    let n = g.l2_normalize(v, 1);
    g.value(n).clone()
}

/// Embeds `vocab` into `[K, dim]` unit rows that are a fixed point of the
/// normalization used at inference time, so a zero residual reproduces them
/// bit for bit.
pub fn embed_offline<T: Scalar>(vocab: &[String], dim: usize, seed: u64) -> Result<Tensor<T>> {
    if vocab.is_empty() {
        return Err(Error::Config("vocabulary is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for name in vocab {
        if !seen.insert(name.as_str()) {
            return Err(Error::Config(format!("duplicate category name {name:?}")));
        }
    }
    let mut rng = rng_for(seed, "text-projection");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let proj: Vec<f64> = (0..dim * TRIGRAM_BUCKETS).map(|_| normal.sample(&mut rng)).collect();
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for name in vocab {
        let counts = trigram_counts(name);
        for d in 0..dim {
            let row = &proj[d * TRIGRAM_BUCKETS..(d + 1) * TRIGRAM_BUCKETS];
            let v: f64 = row.iter().zip(&counts).map(|(a, b)| a * b).sum();
            data.push(T::lit(v));
        }
    }
    // normalization snaps near-unit norms to exactly one, so a second pass is the identity
    let e = normalize_rows(Tensor::from_vec(&[vocab.len(), dim], data)?);
    Ok(normalize_rows(e))
}

/// Frozen base rows, learnable residual rows, and the category order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank<T> {
    pub vocab: Vec<String>,
    pub base: Tensor<T>,
    pub residual: Tensor<T>,
}

impl<T: Scalar> EmbeddingBank<T> {
    pub fn new(vocab: &[String], dim: usize, seed: u64) -> Result<Self> {
        let base = embed_offline(vocab, dim, seed)?;
        let residual = Tensor::zeros(base.shape());
        Ok(EmbeddingBank {
            vocab: vocab.to_vec(),
            base,
            residual,
        })
    }

    pub fn dim(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn into_store(self) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.insert(BASE_KEY, self.base);
        s.insert(RESIDUAL_KEY, self.residual);
        s
    }

    pub fn from_store(store: &ParamStore<T>, vocab: &[String]) -> Result<Self> {
        let base = store.get(BASE_KEY)?.clone();
        let residual = store.get(RESIDUAL_KEY)?.clone();
        if base.shape() != residual.shape() || base.shape()[0] != vocab.len() {
            return Err(Error::Shape(format!(
                "embedding base {:?} / residual {:?} for {} categories",
                base.shape(),
                residual.shape(),
                vocab.len()
            )));
        }
        Ok(EmbeddingBank {
            vocab: vocab.to_vec(),
            base,
            residual,
        })
    }

    /// Row-normalized `base + residual`.
    pub fn effective(&self) -> Tensor<T> {
        let mut sum = self.base.clone();
        sum.add_assign(&self.residual);
        normalize_rows(sum)
    }
}

/// Records `normalize(base + residual)` on `g`.
pub fn effective_embeddings<T: Scalar>(g: &mut Graph<T>, params: &mut Binder<T>) -> Result<Var> {
    let base = params.var(g, BASE_KEY)?;
    let residual = params.var(g, RESIDUAL_KEY)?;
    let sum = g.add(base, residual);
    Ok(g.l2_normalize(sum, 1))
}

/// True iff the base embeddings are bitwise identical.
pub fn freeze_check<T: Scalar>(before: &EmbeddingBank<T>, after: &EmbeddingBank<T>) -> bool {
    before.base.bitwise_eq(&after.base)
}
