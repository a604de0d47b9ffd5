//! AdamW with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn for_params(params: &[(String, Tensor<T>)]) -> Self {
        Self::new(params.iter().map(|(_, t)| t.shape()))
    }
}

/// One update `p ← p − lr·(m̂/(√v̂+ε) + wd·p)`. Parameters are untouched
/// when any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut [(String, Tensor<T>)],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (((name, p), g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::invalid(
                "adamw_step",
                format!(
                    "{name}: parameter {:?}, gradient {:?}, moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                ),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                op: "adamw_step",
                detail: format!("gradient of {name}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let c1 = T::one() - T::c(cfg.beta1.powi(t));
    let c2 = T::one() - T::c(cfg.beta2.powi(t));
    let (lr, eps, wd) = (T::c(lr), T::c(cfg.eps), T::c(cfg.weight_decay));
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *pv -= lr * (mh / (vh.sqrt() + eps) + wd * *pv);
        }
    }
    Ok(())
}
