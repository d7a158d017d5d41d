//! Adam with per-range learning rates.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], steps: 0 }
    }

    /// One bias-corrected update. Each `(range, lr)` pair sets the step size
    /// for a contiguous block; indices outside every range are left alone.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], groups: &[(Range<usize>, f64)]) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length");
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powf(self.steps as f64);
        let c2 = 1.0 - self.beta2.powf(self.steps as f64);
        for (range, lr) in groups {
            for i in range.clone() {
                let g = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                params[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, 2.0, 3.0];
        adam.step(&mut p, &[0.5, -4.0, 0.0], &[(0..3, 0.1)]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 2.1).abs() < 1e-6);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..3000 {
            let g = [2.0 * (p[0] - 1.0), 8.0 * (p[1] + 0.5)];
            adam.step(&mut p, &g, &[(0..2, 0.01)]);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
    }

    #[test]
    fn separate_groups_use_their_own_rates() {
        let mut adam = Adam::new(2);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[1.0, 1.0], &[(0..1, 0.1), (1..2, 0.0)]);
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert_eq!(p[1], 0.0);
    }
}
