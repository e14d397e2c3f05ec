use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Array2<f64>,
    second: Array2<f64>,
}

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Moments are keyed by parameter name and created on first use.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update and zeroes the gradients. Nothing is modified if
    /// any parameter is frozen or carries a non-finite gradient.
    pub fn step(&mut self, params: Vec<&mut Param>) -> Result<()> {
        for p in &params {
            if p.is_frozen() {
                return Err(Error::FrozenParameter(p.name.clone()));
            }
            if !p.grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
            if let Some(m) = self.moments.get(&p.name) {
                if m.first.dim() != p.value.dim() {
                    return Err(Error::dims(
                        format!("optimizer moments for `{}`", p.name),
                        m.first.len(),
                        p.value.len(),
                    ));
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for p in params {
            let m = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                first: Array2::zeros(p.value.raw_dim()),
                second: Array2::zeros(p.value.raw_dim()),
            });
            Zip::from(&mut p.value)
                .and(&mut p.grad)
                .and(&mut m.first)
                .and(&mut m.second)
                .for_each(|w, g, m1, m2| {
                    *m1 = beta1 * *m1 + (1.0 - beta1) * *g;
                    *m2 = beta2 * *m2 + (1.0 - beta2) * *g * *g;
                    let update = (*m1 / bias1) / ((*m2 / bias2).sqrt() + eps);
                    *w -= lr * (update + weight_decay * *w);
                    *g = 0.0;
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Param::new("w", array![[1.5, -2.0]]);
        let mut opt = AdamW::new(AdamWConfig::new(1e-2, 0.0));
        opt.step(vec![&mut p]).unwrap();
        assert_eq!(p.value, array![[1.5, -2.0]]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_each_weight_by_about_lr() {
        let mut p = Param::new("w", array![[0.0, 0.0, 0.0]]);
        p.grad = array![[3.0, -0.01, 250.0]];
        let mut opt = AdamW::new(AdamWConfig::new(1e-3, 0.0));
        opt.step(vec![&mut p]).unwrap();
        for (w, sign) in p.value.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - sign * 1e-3).abs() < 1e-8, "{w}");
        }
        assert!(p.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = Param::new("w", array![[0.3, 0.7]]);
        p.grad = array![[1.0, -1.0]];
        let mut opt = AdamW::new(AdamWConfig::new(0.0, 1e-4));
        opt.step(vec![&mut p]).unwrap();
        assert_eq!(p.value, array![[0.3, 0.7]]);
    }

    #[test]
    fn converges_on_a_quadratic_bowl() {
        let target = array![[1.0, -2.0]];
        let mut p = Param::new("theta", array![[0.0, 0.0]]);
        let mut opt = AdamW::new(AdamWConfig::new(0.05, 0.0));
        for _ in 0..200 {
            p.grad = (&p.value - &target) * array![[2.0, 6.0]];
            opt.step(vec![&mut p]).unwrap();
        }
        let err = (&p.value - &target).mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-2, "distance to minimum {err}");
    }

    #[test]
    fn frozen_and_non_finite_steps_are_refused() {
        let mut p = Param::new("w", array![[1.0]]);
        p.grad = array![[f64::NAN]];
        let mut opt = AdamW::new(AdamWConfig::new(1e-3, 0.0));
        assert!(matches!(opt.step(vec![&mut p]), Err(Error::NonFiniteGradient(_))));
        assert_eq!(opt.step_count(), 0);
        p.grad = array![[1.0]];
        p.freeze();
        assert!(matches!(opt.step(vec![&mut p]), Err(Error::FrozenParameter(_))));
        assert_eq!(p.value, array![[1.0]]);
    }
}
