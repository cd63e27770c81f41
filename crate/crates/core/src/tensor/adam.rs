use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.values.len()]).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for (p, g) in store.iter().zip(grads) {
            if g.len() != p.values.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient of {} has {} entries, expected {}", p.name, g.len(), p.values.len()),
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: p.name.clone(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.values.len() {
                let g = grads[i][j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p.values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", &[3], vec![1.0, -2.0, 0.5]);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let mut adam = AdamState::new(&s, AdamConfig::default());
        adam.step(&mut s, &[vec![0.0; 3]]).unwrap();
        assert_eq!(s.get("w").unwrap().values, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
        let mut s = store();
        let config = AdamConfig::default();
        let mut adam = AdamState::new(&s, config);
        let g = vec![0.3, -5.0, 1e-3];
        adam.step(&mut s, &[g.clone()]).unwrap();
        let before = [1.0, -2.0, 0.5];
        for j in 0..3 {
            let expected = before[j] - config.lr * g[j] / (g[j].abs() + config.eps);
            let got = s.get("w").unwrap().values[j];
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
            assert!((before[j] - got - config.lr * g[j].signum()).abs() < 1e-9);
        }
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store();
        let mut adam = AdamState::new(&s, AdamConfig::default());
        let err = adam.step(&mut s, &[vec![0.0, f64::NAN, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "w"));
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store();
            let mut adam = AdamState::new(&s, AdamConfig::default());
            for k in 0..10 {
                let g: Vec<f64> = (0..3).map(|j| ((k * 3 + j) as f64).sin()).collect();
                adam.step(&mut s, &[g]).unwrap();
            }
            s.get("w").unwrap().values.clone()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
