//! Symlog-spaced discrete distribution codec for scalar regression heads.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

pub fn symexp(x: f64) -> f64 {
    x.signum() * x.abs().exp_m1()
}

/// Bin centres uniformly spaced in symlog space over `[-limit, limit]`.
#[derive(Clone, Debug)]
pub struct TwoHot {
    bins: Vec<f64>,
}

impl TwoHot {
    pub fn new(num_bins: usize, limit: f64) -> Self {
        assert!(num_bins >= 2 && limit > 0.0);
        let step = 2.0 * limit / (num_bins - 1) as f64;
        Self { bins: (0..num_bins).map(|i| -limit + i as f64 * step).collect() }
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Weights on at most two adjacent bins, summing to one, whose mean is `symlog(value)`.
    pub fn encode(&self, value: f64) -> Vec<(usize, f64)> {
        let n = self.bins.len();
        let y = symlog(value).clamp(self.bins[0], self.bins[n - 1]);
        let step = self.bins[1] - self.bins[0];
        let k = (((y - self.bins[0]) / step).floor() as usize).min(n - 2);
        let (lo, hi) = (self.bins[k], self.bins[k + 1]);
        let w_hi = ((y - lo) / (hi - lo)).clamp(0.0, 1.0);
        if w_hi == 0.0 {
            vec![(k, 1.0)]
        } else if w_hi == 1.0 {
            vec![(k + 1, 1.0)]
        } else {
            vec![(k, 1.0 - w_hi), (k + 1, w_hi)]
        }
    }

    /// Dense `[values.len(), bins]` target matrix.
    pub fn encode_batch(&self, values: &[f64]) -> Tensor {
        let n = self.bins.len();
        let mut t = Tensor::zeros(&[values.len(), n]);
        for (r, &v) in values.iter().enumerate() {
            for (k, w) in self.encode(v) {
                t.data_mut()[r * n + k] = w;
            }
        }
        t
    }

    /// Expected value of one probability row, mapped back through `symexp`.
    pub fn decode(&self, probs: &[f64]) -> f64 {
        symexp(probs.iter().zip(&self.bins).map(|(p, b)| p * b).sum())
    }

    /// Means of every row of a `[n, bins]` logit matrix.
    pub fn decode_logits(&self, logits: &Tensor) -> Vec<f64> {
        let n = self.bins.len();
        let probs = crate::kernels::softmax_rows(logits.data(), n, false);
        probs.chunks(n).map(|p| self.decode(p)).collect()
    }

    /// Per-row negative log-likelihood `[n, 1]` of twohot-encoded targets.
    pub fn nll(&self, tape: &mut Tape, logits: Var, targets: &[f64]) -> Var {
        assert_eq!(tape.value(logits).rows(), targets.len());
        let logp = tape.log_softmax(logits);
        let t = tape.constant(self.encode_batch(targets));
        let prod = tape.mul(logp, t);
        let s = tape.sum_cols(prod);
        tape.neg(s)
    }
}
