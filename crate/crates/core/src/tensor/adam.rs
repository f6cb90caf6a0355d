use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for a fixed list of parameters.
///
/// Moments are allocated on the first step, after which every step must
/// pass parameters and gradients with the same shapes in the same order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one bias-corrected Adam update. On a non-finite gradient the
    /// step is aborted before anything is modified.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::Invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    context: "adam gradient",
                    tensor: i,
                    index: bad,
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(TensorError::Invalid(
                "parameter list changed between optimizer steps".into(),
            ));
        }

        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, g) = (p.data_mut(), g.data());
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = vec![Tensor::from_rows(&[[0.3, -1.2]]).unwrap()];
        let before = params.clone();
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.step(&mut params, &[Tensor::zeros(&[1, 2])]).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.step(&mut params, &[Tensor::scalar(2.0)]).unwrap();
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g|+ε)
        let expected = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut opt = OptimizerState::new(AdamConfig::default());
        let err = opt.step(&mut params, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { tensor: 0, .. }));
        assert_eq!(params[0].item(), 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn moment_shapes_track_parameters() {
        let mut params = vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[1, 4])];
        let grads = vec![Tensor::ones(&[2, 3]), Tensor::ones(&[1, 4])];
        let mut opt = OptimizerState::new(AdamConfig::default());
        opt.step(&mut params, &grads).unwrap();
        for (m, p) in opt.first_moments().iter().zip(&params) {
            assert_eq!(m.shape(), p.shape());
        }
        let mut wrong = vec![Tensor::zeros(&[2, 3])];
        assert!(opt.step(&mut wrong, &grads[..1]).is_err());
    }
}
