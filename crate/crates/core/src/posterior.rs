//! Approximate weight posteriors: deep ensembles and a diagonal last-layer
//! Laplace approximation built from the empirical Fisher.
//!
//! The Laplace posterior over the last layer is
//! `N(θ̂_LL, σ²·diag(F + γ)⁻¹)` with `F_i = Σ_n g_{n,i}²`, where `g_n` is the
//! last-layer gradient of the per-example regression loss `‖f − target‖²`
//! under one seeded `(t, ε)` draw per example.

use std::path::Path;

use crate::dataset::Dataset;
use crate::diffusion::{regression_batch, train, Checkpoint, NoiseSchedule, TrainConfig, TrainingDraws};
use crate::error::{Error, Result};
use crate::io::container::{sha256_hex, Container, ContainerKind, Value};
use crate::numeric::{LayerDesc, Mlp, MlpConfig, ParamVector, OUT_BIAS, OUT_WEIGHT};
use crate::rng::{splitmix64, streams, RngState};

/// Rows per forward pass while accumulating the Fisher.
const FISHER_CHUNK: usize = 1024;

/// Running sum of squared per-example gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherAccumulator {
    sum_sq: Vec<f64>,
    count: usize,
}

impl FisherAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            sum_sq: vec![0.0; len],
            count: 0,
        }
    }

    pub fn add(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.sum_sq.len() {
            return Err(Error::Dimension {
                layer: "fisher gradient".into(),
                expected: self.sum_sq.len(),
                got: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "per-example gradient".into(),
                index: i,
            });
        }
        for (s, g) in self.sum_sq.iter_mut().zip(grad) {
            *s += g * g;
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &FisherAccumulator) -> Result<()> {
        if other.sum_sq.len() != self.sum_sq.len() {
            return Err(Error::Dimension {
                layer: "fisher accumulator".into(),
                expected: self.sum_sq.len(),
                got: other.sum_sq.len(),
            });
        }
        for (s, o) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *s += o;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn diag(&self) -> &[f64] {
        &self.sum_sq
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Gaussian posterior over the last layer, everything else fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceState {
    /// Pretrained last-layer weights (`out.weight` then `out.bias`).
    pub mean: Vec<f64>,
    pub fisher: Vec<f64>,
    pub prior_precision: f64,
    pub sigma: f64,
    /// `σ² / (F + γ)`, elementwise.
    pub variance: Vec<f64>,
    /// Descriptors of the blocks covered by `mean`, offsets into the full vector.
    pub layers: Vec<LayerDesc>,
    /// SHA-256 of the checkpoint the state was fitted on.
    pub source_hash: String,
    pub fit_examples: usize,
}

impl LaplaceState {
    pub fn new(
        mean: Vec<f64>,
        fisher: Vec<f64>,
        prior_precision: f64,
        sigma: f64,
        layers: Vec<LayerDesc>,
        source_hash: String,
        fit_examples: usize,
    ) -> Result<Self> {
        if !(prior_precision > 0.0 && prior_precision.is_finite()) {
            return Err(Error::Config(format!(
                "prior precision {prior_precision} must be positive"
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("observation noise {sigma} must be positive")));
        }
        if fisher.len() != mean.len() {
            return Err(Error::Dimension {
                layer: "laplace fisher".into(),
                expected: mean.len(),
                got: fisher.len(),
            });
        }
        let covered: usize = layers.iter().map(LayerDesc::len).sum();
        if covered != mean.len() {
            return Err(Error::Dimension {
                layer: "laplace layers".into(),
                expected: covered,
                got: mean.len(),
            });
        }
        if let Some(i) = fisher.iter().position(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(Error::NonFinite {
                what: "fisher diagonal".into(),
                index: i,
            });
        }
        let variance: Vec<f64> = fisher.iter().map(|f| sigma * sigma / (f + prior_precision)).collect();
        if let Some(i) = variance.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Numeric(format!(
                "posterior variance {} at index {i}",
                variance[i]
            )));
        }
        Ok(Self {
            mean,
            fisher,
            prior_precision,
            sigma,
            variance,
            layers,
            source_hash,
            fit_examples,
        })
    }

    /// Refit-free change of hyperparameters.
    pub fn with_hyperparameters(&self, prior_precision: f64, sigma: f64) -> Result<Self> {
        Self::new(
            self.mean.clone(),
            self.fisher.clone(),
            prior_precision,
            sigma,
            self.layers.clone(),
            self.source_hash.clone(),
            self.fit_examples,
        )
    }

    /// `mean + √variance ⊙ z` spliced into a copy of `base`.
    pub fn sample(&self, base: &ParamVector, rng: &mut RngState) -> Result<ParamVector> {
        let z: Vec<f64> = (0..self.mean.len()).map(|_| rng.standard_normal()).collect();
        self.splice(base, &z)
    }

    /// `mean + √variance ⊙ z` for an explicit standard-normal vector `z`.
    pub fn splice(&self, base: &ParamVector, z: &[f64]) -> Result<ParamVector> {
        if z.len() != self.mean.len() {
            return Err(Error::Dimension {
                layer: "laplace draw".into(),
                expected: self.mean.len(),
                got: z.len(),
            });
        }
        let mut out = base.clone();
        let mut k = 0;
        for d in &self.layers {
            match base.layer(&d.name) {
                Some(b) if b == d => {}
                _ => {
                    return Err(Error::Dimension {
                        layer: d.name.clone(),
                        expected: d.len(),
                        got: base.layer(&d.name).map_or(0, LayerDesc::len),
                    })
                }
            }
            for v in &mut out.values_mut()[d.range()] {
                *v = self.mean[k] + self.variance[k].sqrt() * z[k];
                k += 1;
            }
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let layers = serde_json::to_string(&self.layers).expect("layout serializes");
        let mut c = Container::new(ContainerKind::Laplace);
        c.insert("mean", Value::F64s(self.mean.clone()))
            .insert("fisher", Value::F64s(self.fisher.clone()))
            .insert("prior_precision", Value::F64(self.prior_precision))
            .insert("sigma", Value::F64(self.sigma))
            .insert("layers", Value::Str(layers))
            .insert("source_hash", Value::Str(self.source_hash.clone()))
            .insert("fit_examples", Value::U64(self.fit_examples as u64));
        c
    }

    pub fn encode(&self) -> Vec<u8> {
        self.to_container().encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = Container::decode(bytes)?.expect_kind(ContainerKind::Laplace)?;
        let layers: Vec<LayerDesc> =
            serde_json::from_str(c.str("layers")?).map_err(|e| Error::Decode(format!("laplace layers: {e}")))?;
        Self::new(
            c.f64s("mean")?.to_vec(),
            c.f64s("fisher")?.to_vec(),
            c.f64("prior_precision")?,
            c.f64("sigma")?,
            layers,
            c.str("source_hash")?.to_string(),
            c.usize("fit_examples")?,
        )
        .map_err(|e| match e {
            Error::Decode(_) => e,
            other => Error::Decode(other.to_string()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads a state and checks it was fitted on `source`.
    pub fn load(path: &Path, source: &Checkpoint) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let state = Self::decode(&bytes)?;
        state.check_source(source)?;
        Ok(state)
    }

    pub fn check_source(&self, source: &Checkpoint) -> Result<()> {
        let found = source.hash();
        if found != self.source_hash {
            return Err(Error::HashMismatch {
                what: "laplace source checkpoint".into(),
                expected: self.source_hash.clone(),
                found,
            });
        }
        Ok(())
    }
}

fn last_layer_descs(params: &ParamVector) -> Vec<LayerDesc> {
    [OUT_WEIGHT, OUT_BIAS]
        .iter()
        .map(|n| params.layer(n).expect("every MLP has an output layer").clone())
        .collect()
}

/// Per-example `(t, ε)` draws for dataset rows `rows`, one stream per row so
/// the Fisher of a union of disjoint subsets is the sum of their Fishers.
pub fn per_example_draws(ck: &Checkpoint, data: &Dataset, rows: &[usize], seed: u64) -> TrainingDraws {
    let base = splitmix64(seed ^ streams::LAPLACE_FIT);
    let mut t = Vec::with_capacity(rows.len());
    let mut noise = crate::numeric::Matrix::zeros(rows.len(), data.dim());
    for (r, &i) in rows.iter().enumerate() {
        let mut rng = RngState::with_stream(base, i as u64);
        let d = TrainingDraws::draw(ck.objective, &ck.schedule, 1, data.dim(), &mut rng);
        t.push(d.t[0]);
        noise.row_mut(r).copy_from_slice(d.noise.row(0));
    }
    TrainingDraws { t, noise }
}

/// Diagonal empirical Fisher of the last layer of `ck.ema` over dataset rows `rows`.
pub fn last_layer_fisher(ck: &Checkpoint, data: &Dataset, rows: &[usize], seed: u64) -> Result<FisherAccumulator> {
    let mlp = ck.mlp()?;
    let params = &ck.ema;
    let (wdesc, bdesc) = {
        let d = last_layer_descs(params);
        (d[0].clone(), d[1].clone())
    };
    let (out_dim, hid) = (wdesc.shape[0], wdesc.shape[1]);
    let labels = if ck.model.condition_count > 0 {
        Some(
            data.dense_labels()
                .ok_or_else(|| Error::Config("a conditional model needs a label on every fit row".into()))?,
        )
    } else {
        None
    };
    if let Some(&bad) = rows.iter().find(|&&i| i >= data.len()) {
        return Err(Error::InvalidArgument(format!("fit row {bad} outside the dataset")));
    }
    let mut acc = FisherAccumulator::new(wdesc.len() + bdesc.len());
    let mut grad = vec![0.0; acc.sum_sq.len()];
    for chunk in rows.chunks(FISHER_CHUNK) {
        let draws = per_example_draws(ck, data, chunk, seed);
        let x = data.points.select_rows(chunk);
        let batch = regression_batch(ck.objective, &ck.schedule, &x, &draws)?;
        let cond: Option<Vec<usize>> = labels.as_ref().map(|l| chunk.iter().map(|&i| l[i]).collect());
        let (pred, cache) = mlp.forward_batch(params, &batch.inputs, &batch.net_time, cond.as_deref())?;
        let h = cache.last_hidden();
        for r in 0..chunk.len() {
            // d/dW ‖W h + b − y‖² = 2 (f − y) hᵀ, d/db = 2 (f − y).
            for o in 0..out_dim {
                let res = 2.0 * (pred.get(r, o) - batch.targets.get(r, o));
                for (j, hv) in h.row(r).iter().enumerate() {
                    grad[o * hid + j] = res * hv;
                }
                grad[out_dim * hid + o] = res;
            }
            acc.add(&grad)?;
        }
    }
    Ok(acc)
}

/// Rows used for a fit on `fraction` of the data: all rows in order at 1,
/// otherwise a seeded subset sorted ascending.
pub fn fit_rows(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fit fraction {fraction} outside (0, 1]")));
    }
    let k = ((n as f64) * fraction).ceil() as usize;
    if k == 0 {
        return Err(Error::InvalidArgument("empty Laplace fit subset".into()));
    }
    if k >= n {
        return Ok((0..n).collect());
    }
    let mut rng = RngState::with_stream(seed, streams::LAPLACE_FIT);
    let mut idx = rng.choose_indices(n, k);
    idx.sort_unstable();
    Ok(idx)
}

/// Post-hoc last-layer Laplace fit around the EMA weights of `ck`.
pub fn fit_laplace(
    ck: &Checkpoint,
    data: &Dataset,
    fraction: f64,
    prior_precision: f64,
    sigma: f64,
    seed: u64,
) -> Result<LaplaceState> {
    let rows = fit_rows(data.len(), fraction, seed)?;
    let acc = last_layer_fisher(ck, data, &rows, seed)?;
    if acc.diag().iter().all(|f| *f == 0.0) {
        return Err(Error::Numeric(
            "all-zero Fisher: the last layer receives no gradient".into(),
        ));
    }
    let layers = last_layer_descs(&ck.ema);
    let mean: Vec<f64> = layers
        .iter()
        .flat_map(|d| ck.ema.values()[d.range()].to_vec())
        .collect();
    LaplaceState::new(
        mean,
        acc.diag().to_vec(),
        prior_precision,
        sigma,
        layers,
        ck.hash(),
        acc.count(),
    )
}

/// `q(θ | D)`: either ensemble members or a Laplace state around a base model.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum PosteriorSpec {
    Ensemble(Vec<Checkpoint>),
    Laplace { base: Checkpoint, state: LaplaceState },
}

impl PosteriorSpec {
    pub fn ensemble(members: Vec<Checkpoint>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config("an ensemble needs at least two members".into()));
        }
        let first = &members[0];
        let mut seeds: Vec<u64> = members.iter().map(|m| m.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != members.len() {
            return Err(Error::Config("ensemble members must come from distinct seeds".into()));
        }
        if members
            .iter()
            .any(|m| m.model != first.model || m.schedule != first.schedule || m.objective != first.objective)
        {
            return Err(Error::Config(
                "ensemble members must share model, schedule and objective".into(),
            ));
        }
        Ok(PosteriorSpec::Ensemble(members))
    }

    pub fn laplace(base: Checkpoint, state: LaplaceState) -> Result<Self> {
        state.check_source(&base)?;
        Ok(PosteriorSpec::Laplace { base, state })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PosteriorSpec::Ensemble(_) => "ensemble",
            PosteriorSpec::Laplace { .. } => "laplace",
        }
    }

    pub fn model(&self) -> &MlpConfig {
        match self {
            PosteriorSpec::Ensemble(m) => &m[0].model,
            PosteriorSpec::Laplace { base, .. } => &base.model,
        }
    }

    /// Member `m` verbatim (ensemble) or one posterior draw from `rng` (Laplace).
    pub fn sample_weights(&self, m: usize, rng: &mut RngState) -> Result<ParamVector> {
        match self {
            PosteriorSpec::Ensemble(members) => members.get(m).map(|c| c.ema.clone()).ok_or_else(|| {
                Error::InvalidArgument(format!("ensemble member {m} out of range 0..{}", members.len()))
            }),
            PosteriorSpec::Laplace { base, state } => state.sample(&base.ema, rng),
        }
    }

    /// `M` weight replicas, reused across every scored seed.
    pub fn draw_replicas(&self, count: usize, seed: u64) -> Result<Vec<ParamVector>> {
        if count == 0 {
            return Err(Error::Config("at least one posterior sample is required".into()));
        }
        if let PosteriorSpec::Ensemble(members) = self {
            if count > members.len() {
                return Err(Error::Config(format!(
                    "{count} posterior samples requested from a {}-member ensemble",
                    members.len()
                )));
            }
        }
        let mut rng = RngState::with_stream(seed, streams::LAPLACE_DRAW);
        (0..count).map(|m| self.sample_weights(m, &mut rng)).collect()
    }
}

/// Seed of ensemble member `m` (zero based) for a base seed.
pub fn member_seed(base_seed: u64, m: usize) -> u64 {
    base_seed.wrapping_add(1 + m as u64)
}

/// Trains `count` independently seeded members.
pub fn train_ensemble(
    cfg: &TrainConfig,
    model: &MlpConfig,
    schedule: &NoiseSchedule,
    data: &Dataset,
    count: usize,
    base_seed: u64,
) -> Result<PosteriorSpec> {
    if count < 2 {
        return Err(Error::Config("an ensemble needs at least two members".into()));
    }
    let members = (0..count)
        .map(|m| {
            let member_cfg = TrainConfig {
                seed: member_seed(base_seed, m),
                ..cfg.clone()
            };
            train(&member_cfg, model, schedule, data)
                .map(|o| o.checkpoint)
                .map_err(|e| Error::Member {
                    member: m,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    PosteriorSpec::ensemble(members)
}

/// Mlp bound to a checkpoint's config; convenience for callers holding a posterior.
pub fn posterior_mlp(p: &PosteriorSpec) -> Result<Mlp> {
    Mlp::new(p.model().clone())
}
