//! Adam with bias correction over named parameters.

use serde::{Deserialize, Serialize};

use super::{Params, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Params,
    second: Params,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Params::new(),
            second: Params::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient; parameters without one are
    /// left alone (frozen).
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.dims() != g.dims() {
                return Err(Error::shape(format!(
                    "gradient `{name}` {:?} vs parameter {:?}",
                    g.dims(),
                    p.dims()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            if !self.first.contains(name) {
                self.first.insert(name, Tensor::zeros(g.dims()));
                self.second.insert(name, Tensor::zeros(g.dims()));
            }
            let m = self.first.get_mut(name)?.data_mut();
            let v = self.second.get_mut(name)?.data_mut();
            let p = params.get_mut(name)?.data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, values: Vec<f64>) -> Params {
        let mut p = Params::new();
        p.insert(name, Tensor::from_vec(values));
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let grads = [3.0, -0.02, 1e-3];
        let mut params = single("w", vec![0.0; 3]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &single("w", grads.to_vec())).unwrap();
        for (&p, &g) in params.get("w").unwrap().data().iter().zip(&grads) {
            let tol = 1e-3 * 1e-8 / g.abs();
            assert!((p + 1e-3 * g.signum()).abs() <= tol * 1.0001, "{p} for {g}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = single("w", vec![1.5, -2.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &single("w", vec![0.0, 0.0])).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn two_steps_match_scalar_trace() {
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let g = 0.5;
        let mut x = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut params = single("w", vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2 {
            adam.step(&mut params, &single("w", vec![g])).unwrap();
        }
        assert_eq!(adam.steps(), 2);
        assert!((params.get("w").unwrap().data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn parameters_without_gradients_are_untouched() {
        let mut params = single("w", vec![1.0]);
        params.insert("frozen", Tensor::from_vec(vec![7.0]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &single("w", vec![1.0])).unwrap();
        assert_eq!(params.get("frozen").unwrap().data(), &[7.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = single("w", vec![1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut params, &single("w", vec![1.0])).is_err());
        assert!(adam.step(&mut params, &single("missing", vec![1.0])).is_err());
        assert_eq!(adam.steps(), 0);
    }
}
