use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam with decoupled weight decay. `step` is the 1-based update count used
/// for bias correction.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    moments: &mut BTreeMap<String, Moments<T>>,
    step: u64,
    lr: impl Fn(&str) -> f64,
    weight_decay: f64,
) -> Result<()> {
    let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(EPS));
    let bc1 = T::lit(1.0 - BETA1.powf(step as f64));
    let bc2 = T::lit(1.0 - BETA2.powf(step as f64));
    for (key, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {key}")));
        }
        let p = params.get_mut(key)?;
        let st = moments.entry(key.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
        });
        let step_lr = T::lit(lr(key));
        let decay = T::one() - step_lr * T::lit(weight_decay);
        let (m, v) = (st.m.data_mut(), st.v.data_mut());
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * gv;
            v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *pv = *pv * decay - step_lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
