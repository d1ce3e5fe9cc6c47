//! Versioned TOML experiment configuration. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ModeSpec;
use crate::diffusion::{NoiseSchedule, Objective, SamplerKind, SamplerSpec, ScheduleKind, TrainConfig};
use crate::error::{Error, Result};
use crate::numeric::{Activation, MlpConfig};
use crate::uncertainty::{FeatureKind, ScoreRule, DEFAULT_NOISE_VAR};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub posterior: PosteriorConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub filter: FilterConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Modes,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Training CSV when `source = "csv"`.
    pub path: Option<PathBuf>,
    /// Held-out reference CSV when `source = "csv"`; defaults to the training file.
    pub reference_path: Option<PathBuf>,
    pub grid_side: usize,
    pub span: f64,
    pub mode_std: f64,
    pub hallucination_radius: f64,
    pub num_samples: usize,
    pub reference_samples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Modes,
            path: None,
            reference_path: None,
            grid_side: 5,
            span: 2.0,
            mode_std: 0.05,
            hallucination_radius: 3.0,
            num_samples: 10_000,
            reference_samples: 10_000,
        }
    }
}

impl DatasetConfig {
    pub fn modes(&self) -> Result<ModeSpec> {
        ModeSpec::grid(self.grid_side, self.span, self.mode_std)?.with_hallucination_radius(self.hallucination_radius)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    /// Condition on the mode label of each training point.
    pub conditional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = MlpConfig::denoiser(2);
        Self {
            hidden_dims: d.hidden_dims,
            activation: d.activation,
            time_embed_dim: d.time_embed_dim,
            conditional: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub cosine_lr: bool,
    pub objective: Objective,
}

/// Defaults are the desk setting that fits the toy mixture: the library's
/// [`TrainConfig`] defaults underfit it at this model size.
impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: 300,
            batch_size: t.batch_size,
            lr: 3e-3,
            ema_decay: t.ema_decay,
            cosine_lr: true,
            objective: t.objective,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorKind {
    Ensemble,
    Laplace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosteriorConfig {
    pub kind: PosteriorKind,
    /// Ensemble size.
    pub members: usize,
    /// Laplace prior precision γ.
    pub prior_precision: f64,
    /// Laplace observation noise σ.
    pub sigma: f64,
    pub fit_fraction: f64,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            kind: PosteriorKind::Ensemble,
            members: 5,
            prior_precision: 1.0,
            sigma: 1.0,
            fit_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    pub num_samples: usize,
    /// Seed of the noise bundles; the top-level seed when absent.
    pub seed: Option<u64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            steps: 1000,
            eta: 0.0,
            num_samples: 10_000,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Posterior samples M.
    pub mc_samples: usize,
    /// Replica sampler; the generation sampler's kind when absent.
    pub kind: Option<SamplerKind>,
    /// Replica sampler steps (the scoring T).
    pub steps: usize,
    pub eta: f64,
    pub noise_var: f64,
    pub feature_map: FeatureKind,
    pub projection_dim: Option<usize>,
    pub embedding_file: Option<PathBuf>,
    pub rule: ScoreRule,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            mc_samples: 5,
            kind: None,
            steps: 50,
            eta: 0.0,
            noise_var: DEFAULT_NOISE_VAR,
            feature_map: FeatureKind::Identity,
            projection_dim: None,
            embedding_file: None,
            rule: ScoreRule::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Subset sizes n to keep.
    pub keep: Vec<usize>,
    /// Score names: `entropy`, `realism`, `rarity`, or `+`-joined combinations.
    pub scores: Vec<String>,
    pub k: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            keep: vec![5_000],
            scores: vec!["entropy".into()],
            k: crate::metrics::DEFAULT_K,
        }
    }
}

pub const SCORE_NAMES: [&str; 3] = ["entropy", "realism", "rarity"];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form; the output directory is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        hash_json(&c)
    }

    pub fn sampling_seed(&self) -> u64 {
        self.sampling.seed.unwrap_or(self.seed)
    }

    pub fn mlp_config(&self, data_dim: usize, condition_count: usize) -> MlpConfig {
        MlpConfig {
            input_dim: data_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            output_dim: data_dim,
            activation: self.model.activation,
            time_embed_dim: self.model.time_embed_dim,
            condition_count: if self.model.conditional { condition_count } else { 0 },
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            ema_decay: self.train.ema_decay,
            cosine_lr: self.train.cosine_lr,
            objective: self.train.objective,
            seed,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.kind, self.schedule.steps)
    }

    pub fn generation_sampler(&self, schedule: &NoiseSchedule) -> Result<SamplerSpec> {
        SamplerSpec::new(self.sampling.kind, schedule, self.sampling.steps, self.sampling.eta)
    }

    pub fn scoring_sampler(&self, schedule: &NoiseSchedule) -> Result<SamplerSpec> {
        let kind = self.scoring.kind.unwrap_or(self.sampling.kind);
        let eta = match kind {
            SamplerKind::Ddpm => 1.0,
            _ => self.scoring.eta,
        };
        SamplerSpec::new(kind, schedule, self.scoring.steps, eta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        match self.dataset.source {
            DatasetSource::Modes => {
                self.dataset.modes()?;
                if self.dataset.reference_samples < 2 {
                    return bad("dataset.reference_samples must be at least 2".into());
                }
            }
            DatasetSource::Csv => {
                if self.dataset.path.is_none() {
                    return bad("dataset.path is required when source = \"csv\"".into());
                }
            }
        }
        self.mlp_config(2, 1).validate()?;
        let schedule = self.noise_schedule()?;
        self.train_config(self.seed).validate(usize::MAX)?;
        let objective = self.train.objective;
        if self.sampling.kind.objective() != objective {
            return bad(format!(
                "sampler {} cannot sample a model trained with {objective}",
                self.sampling.kind
            ));
        }
        let scoring_kind = self.scoring.kind.unwrap_or(self.sampling.kind);
        if scoring_kind.objective() != objective {
            return bad(format!(
                "scoring sampler {scoring_kind} does not match objective {objective}"
            ));
        }
        let gen = self.generation_sampler(&schedule)?;
        let sc = self.scoring_sampler(&schedule)?;
        if sc.noise_rows() > 0 && gen.noise_rows() == 0 {
            return bad("stochastic replicas need the per-step noises of a stochastic generation sampler".into());
        }
        if sc.noise_rows() > 0 && sc.steps() > gen.steps() {
            return bad("stochastic replicas cannot use more steps than the generation sampler".into());
        }
        if self.sampling.num_samples < 2 {
            return bad("sampling.num_samples must be at least 2".into());
        }
        if self.scoring.mc_samples == 0 {
            return bad("scoring.mc_samples must be at least 1".into());
        }
        if !(self.scoring.noise_var > 0.0) {
            return bad("scoring.noise_var must be positive".into());
        }
        match self.posterior.kind {
            PosteriorKind::Ensemble => {
                if self.posterior.members < 2 {
                    return bad("an ensemble needs posterior.members >= 2".into());
                }
                if self.scoring.mc_samples > self.posterior.members {
                    return bad(format!(
                        "scoring.mc_samples {} exceeds posterior.members {}",
                        self.scoring.mc_samples, self.posterior.members
                    ));
                }
            }
            PosteriorKind::Laplace => {
                if !(self.posterior.prior_precision > 0.0) || !(self.posterior.sigma > 0.0) {
                    return bad("posterior.prior_precision and posterior.sigma must be positive".into());
                }
                if !(self.posterior.fit_fraction > 0.0 && self.posterior.fit_fraction <= 1.0) {
                    return bad("posterior.fit_fraction must lie in (0, 1]".into());
                }
            }
        }
        match self.scoring.feature_map {
            FeatureKind::Identity => {}
            FeatureKind::RandomProjection => {
                if self.scoring.projection_dim.is_none() {
                    return bad("scoring.projection_dim is required for random-projection".into());
                }
            }
            FeatureKind::EmbeddingFile => {
                if self.scoring.embedding_file.is_none() {
                    return bad("scoring.embedding_file is required for embedding-file".into());
                }
            }
        }
        for &n in &self.filter.keep {
            if n == 0 || n > self.sampling.num_samples {
                return bad(format!(
                    "filter.keep entry {n} outside 1..={}",
                    self.sampling.num_samples
                ));
            }
        }
        if self.filter.k == 0 {
            return bad("filter.k must be positive".into());
        }
        for s in &self.filter.scores {
            parse_score_name(s)?;
        }
        Ok(())
    }
}

/// Splits `a+b` into validated component names.
pub fn parse_score_name(s: &str) -> Result<Vec<&str>> {
    let parts: Vec<&str> = s.split('+').map(str::trim).collect();
    if parts.is_empty() || parts.iter().any(|p| !SCORE_NAMES.contains(p)) {
        return Err(Error::Config(format!(
            "unknown score `{s}`; use {} or `+`-joined combinations",
            SCORE_NAMES.join(", ")
        )));
    }
    Ok(parts)
}

/// SHA-256 hex of the canonical JSON form of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("serializable")))
}
