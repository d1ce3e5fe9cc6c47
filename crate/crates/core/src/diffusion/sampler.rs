//! Generators `g_θ(z)`: DDPM and DDIM ancestral samplers with timestep
//! respacing, and an Euler integrator for flow-matching velocity fields.
//!
//! All randomness of one trajectory lives in a [`SeedBundle`], so replaying a
//! bundle through different weights changes only the weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::objective::{Objective, FLOW_TIME_SCALE};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Mlp, ParamVector};
use crate::rng::{splitmix64, streams, RngState};

/// Anything that maps `(x_t, t, cond)` batches to network outputs.
pub trait Denoiser: Sync {
    fn data_dim(&self) -> usize;
    fn predict(&self, x: &Matrix, t: &[f64], cond: Option<&[usize]>) -> Result<Matrix>;
}

/// An MLP bound to one parameter vector.
#[derive(Clone, Copy)]
pub struct Network<'a> {
    pub mlp: &'a Mlp,
    pub params: &'a ParamVector,
}

impl<'a> Network<'a> {
    pub fn new(mlp: &'a Mlp, params: &'a ParamVector) -> Self {
        Self { mlp, params }
    }
}

impl Denoiser for Network<'_> {
    fn data_dim(&self) -> usize {
        self.mlp.config().input_dim
    }

    fn predict(&self, x: &Matrix, t: &[f64], cond: Option<&[usize]>) -> Result<Matrix> {
        self.mlp.predict(self.params, x, t, cond)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    FlowEuler,
}

impl SamplerKind {
    pub fn objective(self) -> Objective {
        match self {
            SamplerKind::Ddpm | SamplerKind::Ddim => Objective::EpsilonPrediction,
            SamplerKind::FlowEuler => Objective::FlowVelocity,
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
            SamplerKind::FlowEuler => "flow-euler",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            "flow-euler" => Ok(SamplerKind::FlowEuler),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

/// `steps` evenly spaced timesteps in `1..=total`, ascending, always
/// including `total`; `total` itself when `steps == 1`.
pub fn respaced_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!("cannot respace {total} steps into {steps}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    Ok((0..steps).map(|i| 1 + i * (total - 1) / (steps - 1)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// DDIM stochasticity; ignored by the other kinds.
    pub eta: f64,
    /// Ascending diffusion timesteps visited (for flow-euler, `1..=steps`).
    timesteps: Vec<usize>,
}

impl SamplerSpec {
    pub fn ddpm(schedule: &NoiseSchedule) -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            eta: 1.0,
            timesteps: (1..=schedule.len()).collect(),
        }
    }

    pub fn ddpm_respaced(schedule: &NoiseSchedule, steps: usize) -> Result<Self> {
        Ok(Self {
            kind: SamplerKind::Ddpm,
            eta: 1.0,
            timesteps: respaced_timesteps(schedule.len(), steps)?,
        })
    }

    pub fn ddim(schedule: &NoiseSchedule, steps: usize, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("eta {eta} outside [0, 1]")));
        }
        Ok(Self {
            kind: SamplerKind::Ddim,
            eta,
            timesteps: respaced_timesteps(schedule.len(), steps)?,
        })
    }

    pub fn flow_euler(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("flow-euler needs at least one step".into()));
        }
        Ok(Self {
            kind: SamplerKind::FlowEuler,
            eta: 0.0,
            timesteps: (1..=steps).collect(),
        })
    }

    /// Builds a spec of the given kind, respacing diffusion kinds to `steps`.
    pub fn new(kind: SamplerKind, schedule: &NoiseSchedule, steps: usize, eta: f64) -> Result<Self> {
        match kind {
            SamplerKind::Ddpm => Self::ddpm_respaced(schedule, steps),
            SamplerKind::Ddim => Self::ddim(schedule, steps, eta),
            SamplerKind::FlowEuler => Self::flow_euler(steps),
        }
    }

    /// Explicit timestep subsequence for a diffusion sampler.
    pub fn with_timesteps(
        kind: SamplerKind,
        eta: f64,
        timesteps: Vec<usize>,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        let spec = Self { kind, eta, timesteps };
        spec.validate(schedule)?;
        Ok(spec)
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    /// Denoiser evaluations per trajectory.
    pub fn nfe(&self) -> usize {
        self.steps()
    }

    fn stochastic(&self) -> bool {
        match self.kind {
            SamplerKind::Ddpm => true,
            SamplerKind::Ddim => self.eta > 0.0,
            SamplerKind::FlowEuler => false,
        }
    }

    /// Rows of per-step noise a bundle must carry for this sampler.
    pub fn noise_rows(&self) -> usize {
        if self.stochastic() {
            self.steps().saturating_sub(1)
        } else {
            0
        }
    }

    /// For every per-step noise row: the timestep the transition leaves and
    /// the standard deviation the row is scaled by.
    pub fn noise_row_scales(&self, schedule: &NoiseSchedule) -> Vec<(usize, f64)> {
        let ts = &self.timesteps;
        (0..self.noise_rows())
            .map(|k| {
                let i = ts.len() - 1 - k;
                let (t, t_prev) = (ts[i], ts[i - 1]);
                let c = StepCoefficients::new(self, schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
                (t, c.noise_std)
            })
            .collect()
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(Error::Config("sampler has no steps".into()));
        }
        if !self.timesteps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("sampler timesteps must be strictly increasing".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.kind != SamplerKind::FlowEuler {
            let (lo, hi) = (self.timesteps[0], *self.timesteps.last().unwrap());
            if lo == 0 || hi > schedule.len() {
                return Err(Error::Config(format!(
                    "sampler timesteps must lie in 1..={}",
                    schedule.len()
                )));
            }
        }
        Ok(())
    }
}

/// All randomness of one trajectory: the initial noise `z_T` and, for
/// stochastic samplers, one noise vector per transition.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedBundle {
    pub seed_id: u64,
    pub initial_noise: Vec<f64>,
    pub step_noises: Option<Matrix>,
}

impl SeedBundle {
    /// Deterministic bundle for `seed_id` under the master `seed`.
    pub fn draw(seed: u64, seed_id: u64, dim: usize, noise_rows: usize) -> Self {
        let mut rng = RngState::with_stream(splitmix64(seed ^ streams::SAMPLING), seed_id);
        let initial_noise = rng.normal_vec(dim);
        let step_noises = (noise_rows > 0).then(|| rng.gaussian_sample(noise_rows, dim));
        Self {
            seed_id,
            initial_noise,
            step_noises,
        }
    }

    pub fn dim(&self) -> usize {
        self.initial_noise.len()
    }

    /// Re-expresses the per-step noises captured for `fine` as the noises of
    /// the coarser sampler `coarse` on the same path: every coarse transition
    /// receives the std-weighted, unit-variance-normalized sum of the fine
    /// noises whose transitions start inside its interval. Samplers that need
    /// no per-step noise get the initial noise only.
    pub fn coarsen(&self, schedule: &NoiseSchedule, fine: &SamplerSpec, coarse: &SamplerSpec) -> Result<SeedBundle> {
        let rows = coarse.noise_rows();
        if rows == 0 {
            return Ok(SeedBundle {
                seed_id: self.seed_id,
                initial_noise: self.initial_noise.clone(),
                step_noises: None,
            });
        }
        if fine.timesteps == coarse.timesteps && fine.eta == coarse.eta && fine.kind == coarse.kind {
            return Ok(self.clone());
        }
        let dim = self.dim();
        let source = match &self.step_noises {
            Some(m) if fine.noise_rows() > 0 && m.rows() >= fine.noise_rows() && m.cols() == dim => m,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "seed {} carries no per-step noises to coarsen",
                    self.seed_id
                )))
            }
        };
        let fine_rows = fine.noise_row_scales(schedule);
        let cts = coarse.timesteps();
        let mut out = Matrix::zeros(rows, dim);
        for j in 0..rows {
            let i = cts.len() - 1 - j;
            let (hi, lo) = (cts[i], cts[i - 1]);
            let mut weight2 = 0.0;
            let target = out.row_mut(j);
            for (k, &(t, std)) in fine_rows.iter().enumerate() {
                if t > lo && t <= hi && std > 0.0 {
                    weight2 += std * std;
                    for (o, z) in target.iter_mut().zip(source.row(k)) {
                        *o += std * z;
                    }
                }
            }
            if weight2 > 0.0 {
                let norm = weight2.sqrt();
                target.iter_mut().for_each(|v| *v /= norm);
            } else {
                // No fine transition starts here; fall back to a fresh draw
                // that is still a function of the seed alone.
                let mut rng = RngState::with_stream(splitmix64(self.seed_id ^ streams::SAMPLING), j as u64 + 1);
                target.copy_from_slice(&rng.normal_vec(dim));
            }
        }
        Ok(SeedBundle {
            seed_id: self.seed_id,
            initial_noise: self.initial_noise.clone(),
            step_noises: Some(out),
        })
    }
}

/// Generates one sample. Deterministic given the arguments.
pub fn sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    bundle: &SeedBundle,
    cond: Option<usize>,
) -> Result<Vec<f64>> {
    let c = cond.map(|c| vec![c]);
    let out = sample_batch(denoiser, schedule, spec, std::slice::from_ref(bundle), c.as_deref())?;
    Ok(out.into_vec())
}

/// Generates one sample per bundle, all trajectories advanced in lockstep.
pub fn sample_batch(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    spec: &SamplerSpec,
    bundles: &[SeedBundle],
    cond: Option<&[usize]>,
) -> Result<Matrix> {
    spec.validate(schedule)?;
    let dim = denoiser.data_dim();
    let n = bundles.len();
    let need = spec.noise_rows();
    for b in bundles {
        if b.dim() != dim {
            return Err(Error::Dimension {
                layer: "seed bundle".into(),
                expected: dim,
                got: b.dim(),
            });
        }
        if need > 0 {
            match &b.step_noises {
                Some(m) if m.rows() >= need && m.cols() == dim => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "seed {} lacks the {need} per-step noise rows a {} sampler needs",
                        b.seed_id, spec.kind
                    )))
                }
            }
        }
    }
    if let Some(c) = cond {
        if c.len() != n {
            return Err(Error::Dimension {
                layer: "conditions".into(),
                expected: n,
                got: c.len(),
            });
        }
    }
    let mut x = Matrix::from_rows(
        &bundles.iter().map(|b| b.initial_noise.as_slice()).collect::<Vec<_>>(),
        dim,
    )?;
    if n == 0 {
        return Ok(x);
    }
    match spec.kind {
        SamplerKind::FlowEuler => {
            let steps = spec.steps();
            let dt = 1.0 / steps as f64;
            for k in 0..steps {
                let t = vec![k as f64 * dt * FLOW_TIME_SCALE; n];
                let v = denoiser.predict(&x, &t, cond)?;
                for (xv, vv) in x.as_mut_slice().iter_mut().zip(v.as_slice()) {
                    *xv += dt * vv;
                }
            }
        }
        SamplerKind::Ddpm | SamplerKind::Ddim => {
            let ts = spec.timesteps();
            let s = ts.len();
            for step in 0..s {
                let i = s - 1 - step;
                let t = ts[i];
                let t_prev = if i == 0 { 0 } else { ts[i - 1] };
                let eps = denoiser.predict(&x, &vec![t as f64; n], cond)?;
                let ab = schedule.alpha_bar(t);
                let ab_prev = schedule.alpha_bar(t_prev);
                let coefs = StepCoefficients::new(spec, ab, ab_prev);
                for (r, bundle) in bundles.iter().enumerate() {
                    let noise = if t_prev > 0 && coefs.noise_std > 0.0 {
                        bundle.step_noises.as_ref().map(|m| m.row(step))
                    } else {
                        None
                    };
                    let (xr, er) = (x.row_mut(r), eps.row(r));
                    for j in 0..dim {
                        let x0 = (xr[j] - (1.0 - ab).sqrt() * er[j]) / ab.sqrt();
                        let mut next = coefs.c_x0 * x0 + coefs.c_eps * er[j] + coefs.c_xt * xr[j];
                        if let Some(z) = noise {
                            next += coefs.noise_std * z[j];
                        }
                        xr[j] = next;
                    }
                }
            }
        }
    }
    if let Some(i) = x.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "generated sample".into(),
            index: i,
        });
    }
    Ok(x)
}

/// `x_prev = c_x0·x̂0 + c_eps·ε̂ + c_xt·x_t + noise_std·z`.
struct StepCoefficients {
    c_x0: f64,
    c_eps: f64,
    c_xt: f64,
    noise_std: f64,
}

impl StepCoefficients {
    fn new(spec: &SamplerSpec, ab: f64, ab_prev: f64) -> Self {
        match spec.kind {
            SamplerKind::Ddpm => {
                // Posterior q(x_prev | x_t, x0) of the (respaced) forward chain.
                let beta = 1.0 - ab / ab_prev;
                Self {
                    c_x0: ab_prev.sqrt() * beta / (1.0 - ab),
                    c_eps: 0.0,
                    c_xt: (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
                    noise_std: (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt(),
                }
            }
            _ => {
                let sigma = spec.eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
                Self {
                    c_x0: ab_prev.sqrt(),
                    c_eps: (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt(),
                    c_xt: 0.0,
                    noise_std: sigma,
                }
            }
        }
    }
}
