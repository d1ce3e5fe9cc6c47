use serde::{Deserialize, Serialize};

use super::param::ParamVector;
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    cfg: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, cfg: AdamConfig) -> Result<Self> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !(cfg.lr > 0.0 && cfg.eps > 0.0 && ok(cfg.beta1) && ok(cfg.beta2)) {
            return Err(Error::Config(format!("invalid Adam hyperparameters {cfg:?}")));
        }
        Ok(Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            cfg,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Overrides the learning rate for subsequent steps (schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies one update in place. Nothing is modified when the gradient
    /// contains a non-finite entry.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if !params.same_layout(grad) || params.len() != self.first_moment.len() {
            return Err(Error::Dimension {
                layer: "adam".into(),
                expected: self.first_moment.len(),
                got: grad.len(),
            });
        }
        if let Some(index) = grad.values().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                index,
            });
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step_count as i32);
        let c2 = 1.0 - beta2.powi(self.step_count as i32);
        let iter = params
            .values_mut()
            .iter_mut()
            .zip(grad.values())
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()));
        for ((p, &g), (m, v)) in iter {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamVector {
        let mut p = ParamVector::zeros(&[("w".into(), vec![1])]);
        p.values_mut()[0] = v;
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(1.5);
        let mut s = AdamState::new(1, AdamConfig::default()).unwrap();
        s.step(&mut p, &scalar(0.0)).unwrap();
        assert_eq!(p.values()[0], 1.5);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², step = lr·g/(|g|+eps)
        let mut p = scalar(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(1, cfg).unwrap();
        s.step(&mut p, &scalar(1.0)).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_index() {
        let mut p = ParamVector::zeros(&[("w".into(), vec![3])]);
        let mut g = p.zeros_like();
        g.values_mut()[2] = f64::INFINITY;
        let mut s = AdamState::new(3, AdamConfig::default()).unwrap();
        match s.step(&mut p, &g) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn quadratic_loss_decreases() {
        // loss = Σ (w - c)²
        let c = [3.0, -2.0];
        let loss = |p: &ParamVector| p.values().iter().zip(c).map(|(w, c)| (w - c).powi(2)).sum::<f64>();
        let mut p = ParamVector::zeros(&[("w".into(), vec![2])]);
        let mut s = AdamState::new(
            2,
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        let mut prev = loss(&p);
        for _ in 0..2 {
            let mut g = p.zeros_like();
            for (i, gv) in g.values_mut().iter_mut().enumerate() {
                *gv = 2.0 * (p.values()[i] - c[i]);
            }
            s.step(&mut p, &g).unwrap();
            let l = loss(&p);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(AdamState::new(
            1,
            AdamConfig {
                beta1: 1.0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
