//! ADAM with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{Array, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub step: u64,
    m: BTreeMap<String, Array<T>>,
    v: BTreeMap<String, Array<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One update. Parameters without an entry in `grads` see a zero gradient.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Array<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient of {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array::zeros(p.shape()));
        let zero;
        let g = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Array::zeros(p.shape());
                &zero
            }
        };
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = mi.as_f64() / bc1;
            let v_hat = vi.as_f64() / bc2;
            let update = cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *pi -= T::from_f64_lossy(update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        p.insert("w", Array::scalar(v)).unwrap();
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Array<f64>> {
        BTreeMap::from([("w".to_string(), Array::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.3);
        let mut s = AdamState::new();
        adam_step(&mut p, &grad(0.0), &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.3]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = single(0.0);
        let mut s = AdamState::new();
        let cfg = AdamConfig::default();
        adam_step(&mut p, &grad(1.0), &mut s, &cfg).unwrap();
        let expected = -cfg.lr / (1.0 + cfg.eps);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_recurrence() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let gs = [0.7, -1.3, 0.25];
        let mut p = single(1.0);
        let mut s = AdamState::new();
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (i, &g) in gs.iter().enumerate() {
            adam_step(&mut p, &grad(g), &mut s, &cfg).unwrap();
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= cfg.lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + cfg.eps);
            assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(0.0);
        let mut s = AdamState::new();
        let err = adam_step(&mut p, &grad(f64::NAN), &mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("parameter w"));
        assert_eq!(s.step, 0);
    }
}
