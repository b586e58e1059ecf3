//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum.
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Half cosine from the initial rate to 0 over the run.
    Cosine,
    /// ×0.1 at 50% and again at 75% of the run.
    Step,
    Constant,
}

impl Schedule {
    /// Rate at `step` of `total` steps.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        let t = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        match self {
            Schedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * t).cos()),
            Schedule::Step if t >= 0.75 => base * 0.01,
            Schedule::Step if t >= 0.5 => base * 0.1,
            Schedule::Step | Schedule::Constant => base,
        }
    }
}

/// Per-slot optimizer state; slots are parameter buffers in a fixed order.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    momentum: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Optimizer {
            kind,
            momentum: T::lit(momentum),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Starts a new step; call before the `update` calls of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, lr: T, param: &mut [T], grad: &[T]) {
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[slot].len() != param.len() {
            self.m[slot] = vec![T::zero(); param.len()];
            self.v[slot] = vec![T::zero(); param.len()];
        }
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, &g), b) in param.iter_mut().zip(grad).zip(m.iter_mut()) {
                    *b = self.momentum * *b + g;
                    *p -= lr * *b;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = T::one() - self.beta1.powi(self.t.max(1));
                let bc2 = T::one() - self.beta2.powi(self.t.max(1));
                for (((p, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = self.beta1 * *mi + (T::one() - self.beta1) * g;
                    *vi = self.beta2 * *vi + (T::one() - self.beta2) * g * g;
                    *p -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(Schedule::Cosine.rate(1.0, 0, 10), 1.0);
        assert!((Schedule::Cosine.rate(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(Schedule::Cosine.rate(1.0, 10, 10).abs() < 1e-12);
        assert_eq!(Schedule::Step.rate(1.0, 4, 10), 1.0);
        assert!((Schedule::Step.rate(1.0, 5, 10) - 0.1).abs() < 1e-12);
        assert!((Schedule::Step.rate(1.0, 8, 10) - 0.01).abs() < 1e-12);
        assert_eq!(Schedule::Constant.rate(0.3, 9, 10), 0.3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut o = Optimizer::<f64>::new(OptimizerKind::Adam, 0.0);
        let mut p = [1.0, -1.0];
        o.begin_step();
        o.update(0, 0.1, &mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut o = Optimizer::<f64>::new(OptimizerKind::Sgd, 0.9);
        let mut p = [0.0];
        for _ in 0..2 {
            o.begin_step();
            o.update(0, 1.0, &mut p, &[1.0]);
        }
        assert!((p[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut o = Optimizer::<f64>::new(kind, 0.9);
            let mut p = [3.0, -2.0];
            for _ in 0..2000 {
                let g = [2.0 * p[0], 2.0 * p[1]];
                o.begin_step();
                o.update(0, 0.01, &mut p, &g);
            }
            assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{kind:?} {p:?}");
        }
    }
}
