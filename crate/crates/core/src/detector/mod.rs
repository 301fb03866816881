//! Minimal open-vocabulary dense detector.
//!
//! A strided conv backbone feeds a head that projects every grid cell into
//! the text-embedding space and scores it against each category embedding by
//! scaled cosine similarity, alongside a box branch that regresses distances
//! from the cell centre to the four box sides.

mod assign;
mod decode;
mod loss;

use serde::{Deserialize, Serialize};

pub use assign::{assign_targets, Assignment, CellTarget};
pub use decode::{decode, nms, DecodeConfig};
pub use loss::{detection_loss, detection_loss_values, LossBreakdown, LossConfig};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{he_normal, rng_for, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: (usize, usize),
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub norm_groups: usize,
    pub embed_dim: usize,
    pub logit_scale_init: f64,
    /// Initial classification bias, `-ln((1 - p) / p)` for prior `p = 0.01`.
    pub logit_bias_init: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: (96, 96),
            widths: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            norm_groups: 8,
            embed_dim: 32,
            logit_scale_init: 10.0,
            logit_bias_init: -(99.0f64).ln(),
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.stride();
        (self.image_size.0 / s, self.image_size.1 / s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.strides.len() || self.widths.is_empty() {
            return Err(Error::Config("backbone widths and strides must pair up".into()));
        }
        let s = self.stride();
        if self.image_size.0 % s != 0 || self.image_size.1 % s != 0 {
            return Err(Error::Config(format!(
                "image size {:?} not divisible by total stride {s}",
                self.image_size
            )));
        }
        if self.widths.iter().any(|w| w % self.norm_groups != 0) {
            return Err(Error::Config("widths must be divisible by norm groups".into()));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Fresh detector parameters under the `backbone.` and `head.` prefixes.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = rng_for(seed, "detector");
        let mut p = ParamStore::new();
        let mut c_in = 3;
        for (i, &w) in self.widths.iter().enumerate() {
            let pre = format!("backbone.block{i}");
            p.insert(format!("{pre}.conv.weight"), he_normal(&[w, c_in, 3, 3], &mut rng));
            p.insert(format!("{pre}.conv.bias"), Tensor::zeros(&[w]));
            p.insert(format!("{pre}.norm.weight"), Tensor::full(&[w], T::one()));
            p.insert(format!("{pre}.norm.bias"), Tensor::zeros(&[w]));
            c_in = w;
        }
        let hw = self.head_width();
        p.insert("head.stem.conv.weight", he_normal(&[hw, hw, 3, 3], &mut rng));
        p.insert("head.stem.conv.bias", Tensor::zeros(&[hw]));
        p.insert("head.stem.norm.weight", Tensor::full(&[hw], T::one()));
        p.insert("head.stem.norm.bias", Tensor::zeros(&[hw]));
        p.insert("head.cls_proj.weight", he_normal(&[self.embed_dim, hw, 1, 1], &mut rng));
        p.insert("head.cls_proj.bias", Tensor::zeros(&[self.embed_dim]));
        let mut box_w: Tensor<T> = he_normal(&[4, hw, 1, 1], &mut rng);
        box_w.scale(T::lit(0.1));
        p.insert("head.box.weight", box_w);
        // initial side distance of two cells
        p.insert("head.box.bias", Tensor::full(&[4], T::lit(2.0f64.ln())));
        p.insert("head.logit_scale", Tensor::scalar(T::lit(self.logit_scale_init)));
        p.insert("head.logit_bias", Tensor::scalar(T::lit(self.logit_bias_init)));
        Ok(p)
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RawVars {
    /// `[K, G]` category logits.
    pub logits: Var,
    /// `[4, G]` side distances `(left, top, right, bottom)` in pixels.
    pub offsets: Var,
}

/// Dense head outputs for one image, cells in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPredictions<T> {
    pub logits: Tensor<T>,
    pub offsets: Tensor<T>,
    pub grid: (usize, usize),
    pub stride: usize,
}

impl<T: Scalar> RawPredictions<T> {
    pub fn from_graph(g: &Graph<T>, raw: RawVars, cfg: &DetectorConfig) -> Self {
        RawPredictions {
            logits: g.value(raw.logits).clone(),
            offsets: g.value(raw.offsets).clone(),
            grid: cfg.grid(),
            stride: cfg.stride(),
        }
    }

    pub fn num_categories(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Centre of cell `i` in pixels, `(x, y)`.
    pub fn cell_center(&self, i: usize) -> (f64, f64) {
        cell_center(i, self.grid, self.stride)
    }
}

pub(crate) fn cell_center(i: usize, grid: (usize, usize), stride: usize) -> (f64, f64) {
    let (gy, gx) = (i / grid.1, i % grid.1);
    let s = stride as f64;
    ((gx as f64 + 0.5) * s, (gy as f64 + 0.5) * s)
}

fn conv_block<T: Scalar>(
    g: &mut Graph<T>,
    b: &mut Binder<T>,
    x: Var,
    pre: &str,
    stride: usize,
    groups: usize,
) -> Result<Var> {
    let w = b.var(g, &format!("{pre}.conv.weight"))?;
    let bias = b.var(g, &format!("{pre}.conv.bias"))?;
    let gamma = b.var(g, &format!("{pre}.norm.weight"))?;
    let beta = b.var(g, &format!("{pre}.norm.bias"))?;
    let y = g.conv2d(x, w, Some(bias), stride, 1);
    let y = g.group_norm(y, gamma, beta, groups);
    Ok(g.silu(y))
}

/// Records the detector on `g` for an image `[3, H, W]` and row-normalized
/// category embeddings `[K, D]`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<T>,
    cfg: &DetectorConfig,
    image: Var,
    embeddings: Var,
) -> Result<RawVars> {
    let (c, h, w) = g.value(image).dims3();
    if c != 3 || (h, w) != cfg.image_size {
        return Err(Error::Shape(format!(
            "detector expects [3, {}, {}], got [{c}, {h}, {w}]",
            cfg.image_size.0, cfg.image_size.1
        )));
    }
    let es = g.value(embeddings).shape().to_vec();
    if es.len() != 2 || es[1] != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "embeddings {es:?} do not match projection dim {}",
            cfg.embed_dim
        )));
    }
    let mut x = image;
    for (i, &s) in cfg.strides.iter().enumerate() {
        x = conv_block(g, params, x, &format!("backbone.block{i}"), s, cfg.norm_groups)?;
    }
    let h = conv_block(g, params, x, "head.stem", 1, cfg.norm_groups)?;
    let (gh, gw) = cfg.grid();
    let cells = gh * gw;

    let pw = params.var(g, "head.cls_proj.weight")?;
    let pb = params.var(g, "head.cls_proj.bias")?;
    let feat = g.conv2d(h, pw, Some(pb), 1, 0);
    let feat = g.reshape(feat, &[cfg.embed_dim, cells]);
    let feat = g.l2_normalize(feat, 0);
    let sim = g.matmul(embeddings, feat);
    let scale = params.var(g, "head.logit_scale")?;
    let bias = params.var(g, "head.logit_bias")?;
    let logits = g.mul_scalar(sim, scale);
    let logits = g.add_scalar(logits, bias);

    let bw = params.var(g, "head.box.weight")?;
    let bb = params.var(g, "head.box.bias")?;
    let raw = g.conv2d(h, bw, Some(bb), 1, 0);
    let raw = g.reshape(raw, &[4, cells]);
    let dist = g.exp_clamped(raw, T::lit(-6.0), T::lit(6.0));
    let offsets = g.scale(dist, T::from_usize(cfg.stride()).unwrap());
    Ok(RawVars { logits, offsets })
}
