use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Adam moment accumulators for a list of parameter arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<DMatrix<f64>>,
    second: Vec<DMatrix<f64>>,
}

impl AdamState {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPS: f64 = 1e-8;

    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[&DMatrix<f64>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| DMatrix::zeros(p.nrows(), p.ncols())).collect();
        Self {
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            eps: Self::DEFAULT_EPS,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// One descent step `p ← p − lr·m̂/(√v̂ + ε)` per array; `lrs[k] = 0`
    /// freezes array `k` (its moments still advance).
    ///
    /// Panics if the shapes of `grads` and `params` disagree with each other
    /// or with the accumulators.
    pub fn step(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[DMatrix<f64>], lrs: &[f64]) {
        assert_eq!(params.len(), self.first.len(), "adam: parameter count mismatch");
        assert_eq!(grads.len(), self.first.len(), "adam: gradient count mismatch");
        assert_eq!(lrs.len(), self.first.len(), "adam: learning-rate count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k];
            assert_eq!(g.shape(), p.shape(), "adam: gradient shape mismatch at array {k}");
            assert_eq!(g.shape(), self.first[k].shape(), "adam: moment shape mismatch at array {k}");
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for ((mi, vi), (pi, gi)) in m.iter_mut().zip(v.iter_mut()).zip(p.iter_mut().zip(g.iter())) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                if lrs[k] != 0.0 {
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *pi -= lrs[k] * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}
