//! Adam with decoupled weight decay and per-group learning rates.

use crate::tensor::Tensor;

use super::{ModuleGroup, ParamStore};

/// First and second moments plus a per-parameter step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub steps: Vec<u64>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { steps: vec![0; store.len()], m: zeros.clone(), v: zeros }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    /// Updates every parameter that has a gradient and a positive rate in
    /// `lrs` (indexed by [`ModuleGroup::index`]). Others are left untouched,
    /// moments included.
    pub fn step(&self, store: &mut ParamStore, state: &mut AdamState, grads: &[Option<Tensor>], lrs: &[f64; 9]) {
        for (i, p) in store.params.iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            let lr = lrs[p.group.index()];
            if lr <= 0.0 {
                continue;
            }
            state.steps[i] += 1;
            let t = state.steps[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w[j]);
            }
        }
    }
}

/// Learning rate per group, zero for groups not listed.
pub fn lr_table(entries: &[(ModuleGroup, f64)]) -> [f64; 9] {
    let mut t = [0.0; 9];
    for &(g, lr) in entries {
        t[g.index()] = lr;
    }
    t
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
