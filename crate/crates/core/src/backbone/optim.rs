use serde::{Deserialize, Serialize};

use crate::linalg::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Momentum-free gradient descent.
    #[default]
    Sgd,
    Adam,
}

/// Per-parameter optimizer state for a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update. `params[i]` and `grads[i]` must keep their shapes
    /// across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * gi;
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * gi * gi;
                        *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_plain_descent() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![0.5, -1.0]);
        Optimizer::new(OptimizerKind::Sgd, 0.1).step(&mut [&mut p], &[g]);
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Bias correction makes the first step lr·sign(g) up to eps.
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let g = Tensor::vector(vec![3.0, -0.2]);
        Optimizer::new(OptimizerKind::Adam, 0.01).step(&mut [&mut p], &[g]);
        assert!((p.data()[0] + 0.01).abs() < 1e-9);
        assert!((p.data()[1] - 0.01).abs() < 1e-9);
    }
}
