use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{rng_for, ParamStore};
use crate::tensor::Tensor;

/// Below this magnitude gradients are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub key: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub probes: Vec<ProbeResult>,
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

/// Draws `n_samples` scalars uniformly from the parameters named in `keys`.
pub fn sample_coordinates(
    params: &ParamStore<f64>,
    keys: &[String],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(String, usize)>> {
    let sizes: Vec<usize> = keys.iter().map(|k| params.get(k).map(|t| t.len())).collect::<Result<_>>()?;
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Invalid("no scalars to probe".into()));
    }
    let mut rng = rng_for(seed, "gradient-check");
    Ok((0..n_samples)
        .map(|_| {
            let mut r = rng.gen_range(0..total);
            let mut ki = 0;
            while r >= sizes[ki] {
                r -= sizes[ki];
                ki += 1;
            }
            (keys[ki].clone(), r)
        })
        .collect())
}

/// Compares reverse-mode gradients at `coords` with central differences of
/// step `eps`.
pub fn gradient_check_at<F>(loss_fn: F, params: &ParamStore<f64>, coords: &[(String, usize)], eps: f64) -> Result<GradCheck>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, BTreeMap<String, Tensor<f64>>)>,
{
    let (loss, grads) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at gradient-check point".into()));
    }
    let mut probes = Vec::with_capacity(coords.len());
    let mut work = params.clone();
    for (key, index) in coords {
        let analytic = grads
            .get(key)
            .ok_or_else(|| Error::Unknown {
                what: "gradient",
                name: key.clone(),
            })?
            .data()[*index];
        let orig = params.get(key)?.data()[*index];
        work.get_mut(key)?.data_mut()[*index] = orig + eps;
        let up = loss_fn(&work)?.0;
        work.get_mut(key)?.data_mut()[*index] = orig - eps;
        let down = loss_fn(&work)?.0;
        work.get_mut(key)?.data_mut()[*index] = orig;
        let numeric = (up - down) / (2.0 * eps);
        probes.push(ProbeResult {
            key: key.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheck { max_rel_error, probes })
}

/// [`gradient_check_at`] on `n_samples` random scalars of `keys`.
pub fn gradient_check<F>(
    loss_fn: F,
    params: &ParamStore<f64>,
    keys: &[String],
    n_samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&ParamStore<f64>) -> Result<(f64, BTreeMap<String, Tensor<f64>>)>,
{
    let coords = sample_coordinates(params, keys, n_samples, seed)?;
    gradient_check_at(loss_fn, params, &coords, eps)
}
