use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        let zeros: Vec<Tensor> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (id, g) in grads.iter().enumerate() {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "gradient of `{}` has shape {:?}, parameter has {:?}",
                        params.name(id),
                        g.shape(),
                        params.get(id).shape()
                    ),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter `{}`", params.name(id))));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.3);
        let mut opt = Adam::new(&s, AdamConfig::default()).unwrap();
        opt.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(s.get(0).data()[0], 0.3);
    }

    #[test]
    fn first_step_matches_bias_corrected_formula() {
        let mut s = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(&s, cfg).unwrap();
        opt.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1 after correction
        let want = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(0).data()[0] - want).abs() < 1e-15);
        opt.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        let want = want - 0.01 / (1.0 + 1e-8);
        assert!((s.get(0).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(&s, cfg).unwrap();
        for _ in 0..100 {
            let w = s.get(0).data()[0];
            opt.step(&mut s, &[Tensor::scalar(2.0 * w)]).unwrap();
        }
        assert!(s.get(0).data()[0].abs() < 0.05);
        assert_eq!(opt.steps(), 100);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut opt = Adam::new(&s, AdamConfig::default()).unwrap();
        let err = opt.step(&mut s, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.get(0).data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let s = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        assert!(Adam::new(&s, cfg).is_err());
    }
}
