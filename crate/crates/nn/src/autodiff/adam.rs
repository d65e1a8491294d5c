//! Adam optimizer with bias correction.

use super::{AutodiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, params: &[Tensor]) -> Self {
        AdamState {
            hyper,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

impl AdamState {
    /// Restores a state saved from [`AdamState::moments`].
    pub fn from_moments(hyper: AdamHyper, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<Self, AutodiffError> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(AutodiffError::Shape { op: "adam", detail: "moment buffers differ in shape".into() });
        }
        Ok(AdamState { hyper, step, m, v })
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }
}

/// One update of every parameter from its gradient.
pub fn adam_step(state: &mut AdamState, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<(), AutodiffError> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(AutodiffError::Shape { op: "adam", detail: "parameter count changed".into() });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(AutodiffError::Shape {
                op: "adam",
                detail: format!("gradient of length {} for parameter of length {}", g.len(), p.len()),
            });
        }
    }
    state.step += 1;
    let AdamHyper { lr, beta1, beta2, eps } = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..g.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
