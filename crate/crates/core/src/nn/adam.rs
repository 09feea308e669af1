use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{Parameterized, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam moments for one model. Updates are gradient *ascent*: every
/// objective in this crate is maximized.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(String, Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one ascent step using the gradients stored in `model`.
    /// Returns the pre-clipping global gradient norm.
    pub fn update<M: Parameterized + ?Sized>(&mut self, model: &mut M) -> Result<f64> {
        let mut params = model.params_mut();
        for p in params.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (p.name.clone(), Tensor::zeros(p.value.raw_dim()), Tensor::zeros(p.value.raw_dim())))
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::LengthMismatch {
                context: "optimizer parameter blocks",
                left: self.moments.len(),
                right: params.len(),
            });
        }

        let norm = params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (p, (name, m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            if *name != p.name || m.dim() != p.value.dim() {
                return Err(Error::Shape {
                    context: "optimizer moments",
                    expected: m.shape().to_vec(),
                    found: p.value.shape().to_vec(),
                });
            }
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = g * scale;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w += learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + epsilon);
                });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::ParamBlock;

    struct Scalar(ParamBlock);

    impl Parameterized for Scalar {
        fn params(&self) -> Vec<&ParamBlock> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
            vec![&mut self.0]
        }
    }

    fn scalar(v: f64) -> Scalar {
        let mut p = ParamBlock::zeros("w", 1, 1);
        p.value[[0, 0]] = v;
        Scalar(p)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut model = scalar(0.25);
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..10 {
            adam.update(&mut model).unwrap();
        }
        assert_eq!(model.0.value[[0, 0]], 0.25);
    }

    #[test]
    fn constant_gradient_moves_uphill() {
        for g in [2.0, -0.5] {
            let mut model = scalar(0.0);
            let mut adam = AdamState::new(AdamConfig::default());
            for _ in 0..50 {
                model.0.grad[[0, 0]] = g;
                adam.update(&mut model).unwrap();
            }
            assert_eq!(model.0.value[[0, 0]].signum(), f64::signum(g));
        }
    }

    #[test]
    fn climbs_to_quadratic_maximum() {
        // maximize -(w - 3)^2
        let mut model = scalar(0.0);
        let mut adam = AdamState::new(AdamConfig { learning_rate: 1e-2, ..Default::default() });
        for _ in 0..2000 {
            let w = model.0.value[[0, 0]];
            model.0.grad[[0, 0]] = -2.0 * (w - 3.0);
            adam.update(&mut model).unwrap();
        }
        assert!((model.0.value[[0, 0]] - 3.0).abs() < 1e-3, "{}", model.0.value[[0, 0]]);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut model = scalar(0.0);
        model.0.grad[[0, 0]] = f64::NAN;
        let err = AdamState::new(AdamConfig::default()).update(&mut model).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn clipping_bounds_effective_gradient() {
        let mut a = scalar(0.0);
        let mut b = scalar(0.0);
        let mut clipped = AdamState::new(AdamConfig { clip_norm: Some(1.0), ..Default::default() });
        let mut raw = AdamState::new(AdamConfig { clip_norm: None, ..Default::default() });
        a.0.grad[[0, 0]] = 100.0;
        b.0.grad[[0, 0]] = 100.0;
        let norm = clipped.update(&mut a).unwrap();
        raw.update(&mut b).unwrap();
        assert_eq!(norm, 100.0);
        // Adam's first step is scale-invariant, so both move by ~lr.
        assert!((a.0.value[[0, 0]] - b.0.value[[0, 0]]).abs() < 1e-9);
    }
}
