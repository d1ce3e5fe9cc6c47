use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

/// Largest admissible terminal `ᾱ_T`: the final marginal has to be close to N(0, I).
pub const MAX_TERMINAL_ALPHA_BAR: f64 = 0.01;

/// Per-step noise levels `β_t` and their cumulative products
/// `ᾱ_t = Π_{s≤t} (1 − β_s)` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `1e-4` to `0.02` at `T = 1000`. For other `T` both
    /// endpoints are scaled by `1000 / T` so the total noise injected stays
    /// the same and `ᾱ_T` remains tiny.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (1e-4 * scale, (0.02 * scale).min(0.999));
        let betas = (0..steps)
            .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::build(ScheduleKind::Linear, betas)
    }

    /// Cosine schedule with offset `s = 0.008`, betas clipped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        let s = 0.008;
        let f = |t: f64| {
            (((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let betas = (1..=steps)
            .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999))
            .collect();
        Self::build(ScheduleKind::Cosine, betas)
    }

    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(steps),
            ScheduleKind::Cosine => Self::cosine(steps),
        }
    }

    /// Validates an explicit beta table.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        Self::build(kind, betas)
    }

    fn build(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta table".into()));
        }
        if let Some(i) = betas.iter().position(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config(format!("beta[{i}] = {} is outside (0, 1)", betas[i])));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let last = *alpha_bars.last().unwrap();
        if last >= MAX_TERMINAL_ALPHA_BAR {
            return Err(Error::Config(format!(
                "terminal alpha_bar {last:.4} is not below {MAX_TERMINAL_ALPHA_BAR}"
            )));
        }
        Ok(Self {
            kind,
            betas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t` for `t` in `0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_default_endpoints() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert!((s.betas()[0] - 1e-4).abs() < 1e-15);
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn alpha_bars_strictly_decrease() {
        for s in [NoiseSchedule::linear(200).unwrap(), NoiseSchedule::cosine(100).unwrap()] {
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar(s.len()) < MAX_TERMINAL_ALPHA_BAR);
        }
    }

    #[test]
    fn rejects_insufficient_noise() {
        assert!(NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.01; 10]).is_err());
        assert!(NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn alpha_bar_is_cumulative_product() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.5, 0.9, 0.9]).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(2) - 0.05).abs() < 1e-15);
        assert!((s.alpha_bar(3) - 0.005).abs() < 1e-15);
    }
}
