use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParameterSet;
use super::tensor::Real;

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
        }
    }
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            clip_norm,
            step: 0,
        }
    }

    /// Global L2 norm of the trainable gradients across `sets`.
    pub fn grad_norm<F: Real>(sets: &[&mut ParameterSet<F>]) -> f64 {
        sets.iter()
            .flat_map(|s| s.iter())
            .filter(|p| p.trainable)
            .map(|p| p.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// One update over the union of `sets`, using their gradient slots.
    pub fn step<F: Real>(&mut self, sets: &mut [&mut ParameterSet<F>]) -> Result<()> {
        for p in sets.iter().flat_map(|s| s.iter()).filter(|p| p.trainable) {
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let norm = Self::grad_norm(sets);
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for set in sets.iter_mut() {
            for p in set.iter_mut().filter(|p| p.trainable) {
                let n = p.value.len();
                for i in 0..n {
                    let g = p.grad.data()[i].f64() * clip;
                    let m = self.beta1 * p.m.data()[i].f64() + (1.0 - self.beta1) * g;
                    let v = self.beta2 * p.v.data()[i].f64() + (1.0 - self.beta2) * g * g;
                    p.m.data_mut()[i] = F::of(m);
                    p.v.data_mut()[i] = F::of(v);
                    let update = self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                    if update != 0.0 {
                        let x = p.value.data()[i].f64() - update;
                        p.value.data_mut()[i] = F::of(x);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup followed by step decay on validation plateaus.
///
/// The rate is multiplied by `factor` whenever the monitored metric has not
/// improved for `patience` consecutive observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    scale: f64,
    best: Option<f64>,
    stale: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_steps,
            factor,
            patience,
            min_lr,
            scale: 1.0,
            best: None,
            stale: 0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        if self.base_lr == 0.0 {
            return 0.0;
        }
        (self.base_lr * self.scale).max(self.min_lr) * warm
    }

    /// Records a validation metric (lower is better). Returns `true` when the
    /// rate was just decayed.
    pub fn observe(&mut self, metric: f64) -> bool {
        match self.best {
            Some(b) if metric >= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.stale = 0;
                    self.scale *= self.factor;
                    return true;
                }
                false
            }
            _ => {
                self.best = Some(metric);
                self.stale = 0;
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(value: f64, grad: f64) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        let id = ps.add("x", Tensor::scalar(value)).unwrap();
        ps.param_mut(id).grad = Tensor::scalar(grad);
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = single(0.25, 0.0);
        let mut adam = Adam::default();
        adam.step(&mut [&mut ps]).unwrap();
        assert_eq!(ps.flat_values(), vec![0.25]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = single(0.0, 1.0);
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8, None);
        adam.step(&mut [&mut ps]).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction.
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((ps.flat_values()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_global_norm() {
        let mut a = single(0.0, 6.0);
        let mut b = single(0.0, 8.0);
        let mut adam = Adam::new(1.0, 0.0, 0.0, 0.0, Some(1.0));
        // beta = 0 makes the update sign(g) so inspect the clipped moment instead.
        adam.step(&mut [&mut a, &mut b]).unwrap();
        let m = (a.iter().next().unwrap().m.item(), b.iter().next().unwrap().m.item());
        assert!(((m.0 * m.0 + m.1 * m.1).sqrt() - 1.0).abs() < 1e-12);
        assert!((m.0 - 0.6).abs() < 1e-12 && (m.1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = single(0.0, f64::NAN);
        match Adam::default().step(&mut [&mut ps]) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let mut s = LrSchedule::new(1e-3, 10, 0.5, 2, 1e-6);
        assert!((s.lr_at(0) - 1e-4).abs() < 1e-15);
        assert_eq!(s.lr_at(50), 1e-3);
        assert!(!s.observe(0.5));
        assert!(!s.observe(0.5));
        assert!(s.observe(0.6));
        assert_eq!(s.lr_at(50), 5e-4);
        assert!(!s.observe(0.1));
    }
}
