//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Hyperparameters for [`AdamW`].
#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamW<E: Element> {
    cfg: AdamWConfig,
    m: BTreeMap<String, Vec<E>>,
    v: BTreeMap<String, Vec<E>>,
    step: u64,
}

impl<E: Element> AdamW<E> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// One decoupled-weight-decay update over all parameters, in place.
    ///
    /// `grads` must provide a finite gradient for every parameter; moments are
    /// lazily zero-initialized to the parameter's shape on first use.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<E>>,
        grads: &BTreeMap<String, Tensor<E>>,
        lr: f64,
    ) -> Result<()> {
        for name in params.keys() {
            if !grads.contains_key(name) {
                return Err(Error::Optim(format!("missing gradient for '{name}'")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.cfg.beta2);
        let bias1 = E::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bias2 = E::from_f64(1.0 - self.cfg.beta2.powi(t));
        let eps = E::from_f64(self.cfg.eps);
        let lr_e = E::from_f64(lr);
        let decay = E::from_f64(1.0 - lr * self.cfg.weight_decay);

        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            if g.shape() != p.shape() {
                return Err(Error::Optim(format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Optim(format!("non-finite gradient for '{name}'")));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![E::ZERO; p.numel()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![E::ZERO; p.numel()]);
            debug_assert_eq!(m.len(), p.numel(), "moment shape matches parameter");
            let pd = p.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                m[i] = b1 * m[i] + one_m_b1 * gd[i];
                v[i] = b2 * v[i] + one_m_b2 * gd[i] * gd[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                pd[i] = pd[i] * decay - lr_e * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing without warmup:
/// `lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi * epoch / (total_epochs - 1)))`.
///
/// Monotone non-increasing in `epoch`; reaches `lr_max` at epoch 0 and
/// `lr_min` at the final epoch.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_epochs < 2 {
        return Err(Error::Optim(format!(
            "cosine schedule needs at least 2 epochs, got {total_epochs}"
        )));
    }
    if epoch >= total_epochs {
        return Err(Error::Optim(format!(
            "epoch {epoch} out of range for {total_epochs} epochs"
        )));
    }
    let phase = std::f64::consts::PI * epoch as f64 / (total_epochs - 1) as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> BTreeMap<String, Tensor<f64>> {
        [("w".to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut params = one_param(1.234);
        let grads = one_param(0.0);
        opt.step(&mut params, &grads, 1e-3).unwrap();
        assert_eq!(params["w"].data()[0], 1.234);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // param 1.0, grad 1.0, lr 1e-4, betas (0.9, 0.999), eps 1e-8, wd 0:
        // m_hat = 1, v_hat = 1, so the update is -lr / (1 + eps) ~ -1e-4.
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut params = one_param(1.0);
        let grads = one_param(1.0);
        opt.step(&mut params, &grads, 1e-4).unwrap();
        let expected = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((params["w"].data()[0] - expected).abs() < 1e-15);
        assert!((params["w"].data()[0] - (1.0 - 1e-4)).abs() < 1e-10);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn decoupled_decay_shrinks_by_exact_factor() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        });
        let lr = 1e-2;
        let mut params = one_param(2.0);
        let grads = one_param(0.0);
        opt.step(&mut params, &grads, lr).unwrap();
        assert_eq!(params["w"].data()[0], 2.0 * (1.0 - lr * 0.01));
    }

    #[test]
    fn missing_and_non_finite_gradients_error() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        let mut params = one_param(1.0);
        assert!(opt.step(&mut params, &BTreeMap::new(), 1e-4).is_err());
        let grads = one_param(f64::NAN);
        assert!(opt.step(&mut params, &grads, 1e-4).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 60, 1e-4, 0.0).unwrap(), 1e-4);
        let last = cosine_lr(59, 60, 1e-4, 0.0).unwrap();
        assert!(last.abs() < 1e-19, "endpoint {last}");
        // Odd epoch count has an exact midpoint: cos(pi/2) = 0.
        let mid = cosine_lr(5, 11, 2e-3, 0.0).unwrap();
        assert!((mid - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn cosine_schedule_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for e in 0..300 {
            let lr = cosine_lr(e, 300, 1e-4, 0.0).unwrap();
            assert!(lr <= prev + 1e-20);
            prev = lr;
        }
    }

    #[test]
    fn cosine_schedule_rejects_degenerate_spans() {
        assert!(cosine_lr(0, 1, 1e-4, 0.0).is_err());
        assert!(cosine_lr(5, 5, 1e-4, 0.0).is_err());
    }
}
