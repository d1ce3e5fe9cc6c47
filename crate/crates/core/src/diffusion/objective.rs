//! Training objectives: ε-prediction denoising and flow-matching velocity
//! regression. Both reduce to a squared-error regression of the network
//! output onto a target built from the data and a noise draw.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Mlp, ParamVector};
use crate::rng::RngState;

/// Flow-matching time `t ∈ [0, 1]` is multiplied by this before the
/// sinusoidal embedding so both objectives see the same frequency range.
pub const FLOW_TIME_SCALE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Predict the injected noise ε from `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`.
    EpsilonPrediction,
    /// Predict `x_1 − x_0` along `x_t = (1−t) x_0 + t x_1`, with `x_0` noise
    /// and `x_1` data.
    FlowVelocity,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::EpsilonPrediction => "epsilon-prediction",
            Objective::FlowVelocity => "flow-velocity",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon-prediction" | "epsilon" => Ok(Objective::EpsilonPrediction),
            "flow-velocity" | "flow" => Ok(Objective::FlowVelocity),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// `x_t = √ᾱ·x0 + √(1−ᾱ)·eps` for an explicit `ᾱ`.
pub fn forward_noise_with_alpha_bar(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// Corrupts `x0` to diffusion step `t ∈ 1..=T`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.len() {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside 1..={}",
            schedule.len()
        )));
    }
    if x0.len() != eps.len() {
        return Err(Error::Dimension {
            layer: "noise".into(),
            expected: x0.len(),
            got: eps.len(),
        });
    }
    Ok(forward_noise_with_alpha_bar(x0, schedule.alpha_bar(t), eps))
}

/// Time and noise draws for one regression batch, kept explicit so a loss can
/// be re-evaluated at fixed randomness (finite differences, Fisher fits).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDraws {
    /// Diffusion step (integer valued) or flow time in `[0, 1]`.
    pub t: Vec<f64>,
    pub noise: Matrix,
}

impl TrainingDraws {
    pub fn draw(objective: Objective, schedule: &NoiseSchedule, n: usize, dim: usize, rng: &mut RngState) -> Self {
        let mut t = Vec::with_capacity(n);
        let mut noise = Matrix::zeros(n, dim);
        for r in 0..n {
            t.push(match objective {
                Objective::EpsilonPrediction => (1 + rng.below(schedule.len())) as f64,
                Objective::FlowVelocity => rng.uniform(),
            });
            for v in noise.row_mut(r) {
                *v = rng.standard_normal();
            }
        }
        Self { t, noise }
    }
}

/// Network inputs, network times and regression targets for a batch.
pub struct RegressionBatch {
    pub inputs: Matrix,
    pub net_time: Vec<f64>,
    pub targets: Matrix,
}

pub fn regression_batch(
    objective: Objective,
    schedule: &NoiseSchedule,
    data: &Matrix,
    draws: &TrainingDraws,
) -> Result<RegressionBatch> {
    if draws.noise.rows() != data.rows() || draws.noise.cols() != data.cols() || draws.t.len() != data.rows() {
        return Err(Error::Dimension {
            layer: "training draws".into(),
            expected: data.rows() * data.cols(),
            got: draws.noise.rows() * draws.noise.cols(),
        });
    }
    let mut inputs = Matrix::zeros(data.rows(), data.cols());
    let mut targets = Matrix::zeros(data.rows(), data.cols());
    let mut net_time = Vec::with_capacity(data.rows());
    for r in 0..data.rows() {
        let (x, eps, t) = (data.row(r), draws.noise.row(r), draws.t[r]);
        match objective {
            Objective::EpsilonPrediction => {
                let step = t as usize;
                let xt = forward_noise(schedule, x, step, eps)?;
                inputs.row_mut(r).copy_from_slice(&xt);
                targets.row_mut(r).copy_from_slice(eps);
                net_time.push(t);
            }
            Objective::FlowVelocity => {
                for (((i, tg), &x1), &x0) in inputs
                    .row_mut(r)
                    .iter_mut()
                    .zip(targets.row_mut(r).iter_mut())
                    .zip(x)
                    .zip(eps)
                {
                    *i = (1.0 - t) * x0 + t * x1;
                    *tg = x1 - x0;
                }
                net_time.push(t * FLOW_TIME_SCALE);
            }
        }
    }
    Ok(RegressionBatch {
        inputs,
        net_time,
        targets,
    })
}

/// Mean over rows of `‖pred − target‖²` and its gradient with respect to `pred`.
pub fn squared_error(pred: &Matrix, target: &Matrix) -> (f64, Matrix) {
    let n = pred.rows().max(1) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, p), t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(pred.as_slice())
        .zip(target.as_slice())
    {
        let r = p - t;
        loss += r * r;
        *g = 2.0 * r / n;
    }
    (loss / n, grad)
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: ParamVector,
}

/// Loss and gradient at fixed draws.
pub fn loss_at_draws(
    mlp: &Mlp,
    params: &ParamVector,
    objective: Objective,
    schedule: &NoiseSchedule,
    data: &Matrix,
    cond: Option<&[usize]>,
    draws: &TrainingDraws,
) -> Result<LossOutput> {
    if data.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let batch = regression_batch(objective, schedule, data, draws)?;
    let (pred, cache) = mlp.forward_batch(params, &batch.inputs, &batch.net_time, cond)?;
    let (loss, dpred) = squared_error(&pred, &batch.targets);
    if !loss.is_finite() {
        let worst = pred
            .as_slice()
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| i / pred.cols().max(1));
        return Err(Error::Numeric(format!(
            "non-finite loss on a batch of {} (first bad row {:?}, times {:?})",
            data.rows(),
            worst,
            &batch.net_time[..batch.net_time.len().min(4)]
        )));
    }
    let grad = mlp.backward(params, &cache, &dpred)?;
    Ok(LossOutput { loss, grad })
}

/// Denoising loss with `t ~ U{1..T}` and `ε ~ N(0, I)` drawn from `rng`.
pub fn diffusion_loss(
    mlp: &Mlp,
    params: &ParamVector,
    schedule: &NoiseSchedule,
    data: &Matrix,
    cond: Option<&[usize]>,
    rng: &mut RngState,
) -> Result<LossOutput> {
    let draws = TrainingDraws::draw(Objective::EpsilonPrediction, schedule, data.rows(), data.cols(), rng);
    loss_at_draws(mlp, params, Objective::EpsilonPrediction, schedule, data, cond, &draws)
}

/// Flow-matching loss with `t ~ U[0, 1]` and noise endpoints drawn from `rng`.
pub fn flow_matching_loss(
    mlp: &Mlp,
    params: &ParamVector,
    schedule: &NoiseSchedule,
    data: &Matrix,
    cond: Option<&[usize]>,
    rng: &mut RngState,
) -> Result<LossOutput> {
    let draws = TrainingDraws::draw(Objective::FlowVelocity, schedule, data.rows(), data.cols(), rng);
    loss_at_draws(mlp, params, Objective::FlowVelocity, schedule, data, cond, &draws)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_noise_limits() {
        assert_eq!(
            forward_noise_with_alpha_bar(&[1.0, 2.0], 1.0, &[5.0, 6.0]),
            vec![1.0, 2.0]
        );
        assert_eq!(
            forward_noise_with_alpha_bar(&[1.0, 2.0], 0.0, &[5.0, 6.0]),
            vec![5.0, 6.0]
        );
    }

    #[test]
    fn forward_noise_hand_value() {
        let x = forward_noise_with_alpha_bar(&[1.0, 0.0], 0.25, &[0.0, 1.0]);
        assert!((x[0] - 0.5).abs() < 1e-15);
        assert!((x[1] - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn forward_noise_rejects_bad_step() {
        let s = NoiseSchedule::linear(10).unwrap();
        assert!(forward_noise(&s, &[0.0], 0, &[0.0]).is_err());
        assert!(forward_noise(&s, &[0.0], 11, &[0.0]).is_err());
        assert!(forward_noise(&s, &[0.0], 10, &[0.0]).is_ok());
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let target = Matrix::from_vec(2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let (loss, grad) = squared_error(&target, &target);
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn flow_targets_are_endpoint_differences() {
        let s = NoiseSchedule::linear(10).unwrap();
        let data = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let draws = TrainingDraws {
            t: vec![0.25],
            noise: Matrix::from_vec(1, 2, vec![-1.0, 0.0]).unwrap(),
        };
        let b = regression_batch(Objective::FlowVelocity, &s, &data, &draws).unwrap();
        assert_eq!(b.targets.row(0), &[2.0, 2.0]);
        assert_eq!(b.inputs.row(0), &[-0.5, 0.5]);
        assert_eq!(b.net_time, vec![250.0]);
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [Objective::EpsilonPrediction, Objective::FlowVelocity] {
            assert_eq!(o.to_string().parse::<Objective>().unwrap(), o);
        }
    }
}
