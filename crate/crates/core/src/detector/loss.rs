//! Dense detection objective: per-category sigmoid BCE over every cell plus
//! `1 - IoU` box regression on positive cells.

use serde::{Deserialize, Serialize};

use super::assign::Assignment;
use super::RawVars;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub box_weight: f64,
    pub center_radius: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            box_weight: 2.0,
            center_radius: super::assign::CENTER_RADIUS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub box_loss: f64,
    pub total: f64,
}

/// Loss value and local gradients w.r.t. `logits` `[K, G]` and `offsets` `[4, G]`.
pub fn detection_loss_values<T: Scalar>(
    logits: &Tensor<T>,
    offsets: &Tensor<T>,
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor<T>, Tensor<T>)> {
    let (k, cells) = (logits.shape()[0], logits.shape()[1]);
    if cells != assignment.cells.len() || offsets.shape() != [4, cells] {
        return Err(Error::Shape(format!(
            "logits {:?} / offsets {:?} vs {} assigned cells",
            logits.shape(),
            offsets.shape(),
            assignment.cells.len()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("classification logits".into()));
    }
    if !offsets.all_finite() {
        return Err(Error::NonFinite("box offsets".into()));
    }
    let zero = T::zero();
    let one = T::one();
    let n = T::from_usize(k * cells).unwrap();
    let z = logits.data();
    let mut cls = zero;
    let mut dz = vec![zero; k * cells];
    for cat in 0..k {
        for c in 0..cells {
            let y = match &assignment.cells[c] {
                Some(t) if t.category == cat => one,
                _ => zero,
            };
            let v = z[cat * cells + c];
            cls += v.max(zero) - v * y + (one + (-v.abs()).exp()).ln();
            let s = one / (one + (-v).exp());
            dz[cat * cells + c] = (s - y) / n;
        }
    }
    cls /= n;

    let lambda = T::lit(cfg.box_weight);
    let npos = assignment.num_positive();
    let o = offsets.data();
    let mut doff = vec![zero; 4 * cells];
    let mut box_sum = zero;
    if npos > 0 {
        let np = T::from_usize(npos).unwrap();
        for (c, target) in assignment.cells.iter().enumerate() {
            let Some(t) = target else { continue };
            let p = [o[c], o[cells + c], o[2 * cells + c], o[3 * cells + c]];
            let g = t.sides.map(T::lit);
            let iw = p[0].min(g[0]) + p[2].min(g[2]);
            let ih = p[1].min(g[1]) + p[3].min(g[3]);
            let inter = iw * ih;
            let ap = (p[0] + p[2]) * (p[1] + p[3]);
            let ag = (g[0] + g[2]) * (g[1] + g[3]);
            let union = ap + ag - inter;
            box_sum += one - inter / union;
            let di = [
                if p[0] < g[0] { ih } else { zero },
                if p[1] < g[1] { iw } else { zero },
                if p[2] < g[2] { ih } else { zero },
                if p[3] < g[3] { iw } else { zero },
            ];
            let dap = [p[1] + p[3], p[0] + p[2], p[1] + p[3], p[0] + p[2]];
            for s in 0..4 {
                let du = dap[s] - di[s];
                let diou = (di[s] * union - inter * du) / (union * union);
                doff[s * cells + c] = -lambda * diou / np;
            }
        }
        box_sum /= np;
    }
    let total = cls + lambda * box_sum;
    let breakdown = LossBreakdown {
        classification: cls.to_f64_lossy(),
        box_loss: box_sum.to_f64_lossy(),
        total: total.to_f64_lossy(),
    };
    Ok((
        breakdown,
        Tensor::from_vec(&[k, cells], dz)?,
        Tensor::from_vec(&[4, cells], doff)?,
    ))
}

/// Records the detection loss on `g`; the returned variable is the scalar total.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    raw: RawVars,
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let (b, dl, doff) = detection_loss_values(g.value(raw.logits), g.value(raw.offsets), assignment, cfg)?;
    let v = g.fused_loss(T::lit(b.total), vec![(raw.logits, dl), (raw.offsets, doff)]);
    Ok((v, b))
}
