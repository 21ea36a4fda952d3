use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay, applied only where the state's decay
    /// mask allows it.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`; `decay[i]` opts tensor `i` into
    /// weight decay.
    pub fn new(params: &[&Matrix], decay: Vec<bool>) -> Self {
        assert_eq!(params.len(), decay.len(), "one decay flag per tensor");
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            decay,
            t: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut AdamState, hyper: &AdamHyper) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "gradient {i} does not match its tensor");
        let decay = if state.decay[i] { hyper.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = hyper.beta1 * *mj + (1.0 - hyper.beta1) * gj;
            *vj = hyper.beta2 * *vj + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *w -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + decay * *w);
        }
    }
}
