//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Optimizer state for one [`ParamStore`]. Moments are kept per parameter in
/// store order; buffers have empty moments and are never touched.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = |e: &crate::params::ParamEntry<T>| {
            if e.trainable {
                vec![T::zero(); e.value.len()]
            } else {
                Vec::new()
            }
        };
        Ok(AdamState {
            config,
            step_count: 0,
            first_moment: store.entries().iter().map(zeros).collect(),
            second_moment: store.entries().iter().map(zeros).collect(),
        })
    }

    /// One update. `grads` is aligned with the store; `None` entries (unused
    /// parameters) are skipped. A non-finite gradient aborts before any
    /// parameter is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.first_moment.len() != store.len() {
            return Err(NnError::Shape(format!("adam: {} gradients for {} parameters", grads.len(), store.len())));
        }
        let next_step = self.step_count + 1;
        for (id, g) in store.ids().zip(grads) {
            let Some(g) = g else { continue };
            let entry = store.entry(id);
            if g.shape() != entry.value.shape() {
                return Err(NnError::Shape(format!("adam: gradient for {} has shape {:?}", entry.name, g.shape())));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(format!(
                    "gradient of parameter '{}' (element {i}) at optimizer step {next_step}",
                    entry.name
                )));
            }
        }
        self.step_count = next_step;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(next_step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(next_step as i32));
        let (lr, eps) = (T::of(c.learning_rate), T::of(c.epsilon));
        for (idx, (id, g)) in store.ids().zip(grads).enumerate().collect::<Vec<_>>() {
            let Some(g) = g else { continue };
            if !store.entry(id).trainable {
                continue;
            }
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        s
    }

    fn grad(values: &[f64]) -> Vec<Option<Tensor<f64>>> {
        vec![Some(Tensor::new(&[values.len()], values.to_vec()).unwrap())]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[1.0, -2.0]);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-3), &s).unwrap();
        adam.step(&mut s, &grad(&[0.0, 0.0])).unwrap();
        assert_eq!(s.get(s.find("p").unwrap()).data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[1.0]);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-3), &s).unwrap();
        adam.step(&mut s, &grad(&[0.37])).unwrap();
        // m_hat / sqrt(v_hat) = g / |g| = 1, up to epsilon.
        let expected = 1.0 - 1e-3 * 0.37 / (0.37 + 1e-8);
        assert_abs_diff_eq!(s.get(s.find("p").unwrap()).data()[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn two_step_moments_match_recurrence() {
        let g = 0.25;
        let mut s = store(&[0.0]);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-2), &s).unwrap();
        adam.step(&mut s, &grad(&[g])).unwrap();
        adam.step(&mut s, &grad(&[-g])).unwrap();
        let m1 = 0.1 * g;
        let v1 = 0.001 * g * g;
        let m2 = 0.9 * m1 + 0.1 * (-g);
        let v2 = 0.999 * v1 + 0.001 * g * g;
        assert_abs_diff_eq!(adam.first_moment[0][0], m2, epsilon = 1e-12);
        assert_abs_diff_eq!(adam.second_moment[0][0], v2, epsilon = 1e-12);
        let p1 = -1e-2 * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
        let p2 = p1 - 1e-2 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert_abs_diff_eq!(s.get(s.find("p").unwrap()).data()[0], p2, epsilon = 1e-12);
        assert_eq!(adam.step_count, 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_step() {
        let mut s = store(&[1.0]);
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-3), &s).unwrap();
        let bad = vec![Some(Tensor::from_parts(vec![1], vec![f64::NAN]))];
        let err = adam.step(&mut s, &bad).unwrap_err().to_string();
        assert!(err.contains("'p'") && err.contains("step 1"), "{err}");
        assert_eq!(adam.step_count, 0);
        assert_eq!(s.get(s.find("p").unwrap()).data(), &[1.0]);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = ParamStore::<f64>::new();
        s.add_buffer("running", Tensor::full(&[1], 3.0));
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-1), &s).unwrap();
        adam.step(&mut s, &grad(&[1.0])).unwrap();
        assert_eq!(s.get(s.find("running").unwrap()).data(), &[3.0]);
    }
}
