//! Adam with per-tensor adaptive gradient clipping.

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Floor on the parameter norm in the clipping ratio.
pub const AGC_PARAM_FLOOR: f64 = 1e-3;

/// Rescales each gradient tensor so `|g| <= threshold * max(|p|, 1e-3)`.
/// Returns the number of tensors that were rescaled.
pub fn clip_gradients(grads: &mut [Tensor], params: &[Tensor], threshold: f64) -> usize {
    assert_eq!(grads.len(), params.len());
    let mut clipped = 0;
    for (g, p) in grads.iter_mut().zip(params) {
        let gn = g.norm();
        let limit = threshold * p.norm().max(AGC_PARAM_FLOOR);
        if gn > limit {
            g.scale_assign(limit / gn);
            clipped += 1;
        }
    }
    clipped
}

#[derive(Clone, Debug, Default)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: usize,
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, store: &ParamStore) -> Self {
        let zeros = || store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { cfg: cfg.clone(), m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Clips, then applies one update. Non-finite gradients abort without touching parameters.
    pub fn step(&mut self, store: &mut ParamStore, mut grads: Vec<Tensor>) -> Result<StepStats> {
        assert_eq!(grads.len(), store.len());
        let grad_norm = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            let bad: Vec<&str> = grads.iter().zip(store.ids()).filter(|(g, _)| !g.all_finite()).map(|(_, id)| store.name(id)).collect();
            return Err(Error::NonFinite(format!("gradient of {}", bad.join(", "))));
        }
        let clipped = clip_gradients(&mut grads, store.values(), self.cfg.agc);
        self.steps += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let lr = self.cfg.lr;
        let eps = self.cfg.eps;
        let mut work: Vec<_> = store.values_mut().iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut().zip(grads.iter()))).collect();
        crate::par::for_each_mut(&mut work, |_, (p, (m, (v, g)))| {
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        });
        Ok(StepStats { grad_norm, clipped })
    }
}
