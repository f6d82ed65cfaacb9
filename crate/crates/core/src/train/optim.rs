//! AdamW with decoupled weight decay.

use indexmap::IndexMap;

use crate::autograd::{Gradients, ParamStore};
use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

/// AdamW hyper-parameters (the learning rate is passed per step).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Clone, Debug, Default)]
pub struct AdamWState<T: Scalar> {
    pub step: u64,
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: IndexMap::new(),
        }
    }
}

/// One AdamW update of `param` in place:
///
/// ```text
/// p ← p − lr·wd·p
/// m ← β1·m + (1 − β1)·g          v ← β2·v + (1 − β2)·g²
/// p ← p − lr · (m / (1 − β1ᵗ)) / (√(v / (1 − β2ᵗ)) + eps)
/// ```
///
/// `t` is the step number after incrementing, starting at 1.
pub fn adamw_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    hp: &AdamWConfig,
) -> Result<()> {
    if grad.shape() != param.shape() || m.len() != param.len() || v.len() != param.len() {
        return Err(invalid(format!(
            "adamw: parameter {} does not match gradient {} or optimizer state",
            param.shape(),
            grad.shape()
        )));
    }
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    let decay = 1.0 - lr * hp.weight_decay;
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        let g = g.to_f64().unwrap_or(f64::NAN);
        let mi = hp.beta1 * m.to_f64().unwrap_or(0.0) + (1.0 - hp.beta1) * g;
        let vi = hp.beta2 * v.to_f64().unwrap_or(0.0) + (1.0 - hp.beta2) * g * g;
        *m = T::c(mi);
        *v = T::c(vi);
        let pi = p.to_f64().unwrap_or(f64::NAN) * decay;
        *p = T::c(pi - lr * (mi / bc1) / ((vi / bc2).sqrt() + hp.eps));
    }
    Ok(())
}

/// Applies one AdamW step to every trainable tensor in `store`. Tensors
/// without a gradient are treated as having a zero gradient.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamWState<T>,
    lr: f64,
    hp: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let param = store.get_mut(&name).expect("listed above");
        let zero;
        let grad = match grads.param(&name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(param.shape());
                &zero
            }
        };
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (vec![T::zero(); param.len()], vec![T::zero(); param.len()]));
        adamw_update(param, grad, m, v, state.step, lr, hp)?;
    }
    Ok(())
}
