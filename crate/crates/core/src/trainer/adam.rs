//! Adam with bias correction. Dense tensors update every step; embedding
//! tables update lazily, touching only rows present in the sparse gradient.

use crate::error::{Error, Result};
use crate::towers::{Gradients, ModelParams, ParamTensor, SparseRows};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, stored in parameter-shaped tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let mut zeros = params.clone();
        for t in ParamTensor::ALL {
            if let Some(s) = zeros.slice_mut(t) {
                s.fill(0.0);
            }
        }
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

struct Step {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

impl Step {
    #[inline]
    fn apply(&self, p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]) {
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / self.bc1;
            let v_hat = *v / self.bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    fn apply_rows(&self, p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &SparseRows) {
        let d = g.values.ncols();
        for (k, &r) in g.rows.iter().enumerate() {
            let span = r * d..(r + 1) * d;
            let gr = g.values.row(k);
            self.apply(
                &mut p[span.clone()],
                &mut m[span.clone()],
                &mut v[span],
                gr.as_slice().unwrap(),
            );
        }
    }
}

/// One Adam update at learning rate `lr`. Fails without touching anything if
/// any gradient entry is non-finite.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if let Some(t) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: t.name().to_string(),
        });
    }
    state.t += 1;
    let c = state.config;
    let step = Step {
        lr,
        beta1: c.beta1,
        beta2: c.beta2,
        eps: c.eps,
        bc1: 1.0 - c.beta1.powi(state.t as i32),
        bc2: 1.0 - c.beta2.powi(state.t as i32),
    };
    for t in ParamTensor::ALL {
        let Some(p) = params.slice_mut(t) else {
            continue;
        };
        let m = state.m.slice_mut(t).expect("moment shapes mirror params");
        let v = state.v.slice_mut(t).expect("moment shapes mirror params");
        if let Some(sparse) = grads.sparse(t) {
            step.apply_rows(p, m, v, sparse);
        } else if let Some(g) = grads.dense(t) {
            step.apply(p, m, v, g);
        }
    }
    Ok(())
}
