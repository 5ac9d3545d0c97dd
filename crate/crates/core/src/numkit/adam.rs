use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.m[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &[f64] {
        &self.v[id.index()]
    }
}

/// Applies one Adam update to every trainable parameter, then zeroes gradients.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    for id in store.ids() {
        let t = store.get(id);
        if t.requires_grad && t.grad.is_none() {
            return Err(Error::Contract(format!(
                "parameter {} has no gradient",
                store.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for id in store.ids() {
        let p = store.get_mut(id);
        if !p.requires_grad {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
        let mut grad = grad;
        grad.iter_mut().for_each(|g| *g = 0.0);
        p.grad = Some(grad);
    }
    Ok(())
}
