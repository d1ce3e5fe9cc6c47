//! Generative uncertainty: regenerate each seed under posterior weight
//! replicas, map the results to feature space, moment-match a diagonal
//! Gaussian and score the seed by its differential entropy.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_batch, Denoiser, Network, NoiseSchedule, SamplerSpec, SeedBundle};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Mlp, ParamVector};
use crate::rng::RngState;

/// Default semantic observation noise σ².
pub const DEFAULT_NOISE_VAR: f64 = 1e-3;
/// Seeds generated together in one lockstep batch.
pub const SCORE_CHUNK: usize = 256;

/// Identifier of the `m`-th generation of a seed; `m = 0` is the sample from
/// the pretrained weights, `1..=M` the posterior replicas.
pub fn sample_id(seed_id: u64, m: usize) -> String {
    format!("{seed_id}:{m}")
}

/// Feature extractor `c_φ` applied before moment matching.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    Identity {
        dim: usize,
    },
    /// Rows are orthonormal; output is `P x`.
    Projection {
        matrix: Matrix,
    },
    /// Precomputed embeddings keyed by [`sample_id`].
    Embedding {
        dim: usize,
        table: HashMap<String, Vec<f64>>,
    },
}

impl FeatureMap {
    pub fn identity(dim: usize) -> Self {
        FeatureMap::Identity { dim }
    }

    /// Random `out_dim × in_dim` projection with orthonormal rows.
    pub fn random_projection(in_dim: usize, out_dim: usize, rng: &mut RngState) -> Result<Self> {
        if out_dim == 0 || out_dim > in_dim {
            return Err(Error::Config(format!(
                "projection to {out_dim} dims cannot have orthonormal rows in {in_dim} dims"
            )));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
        while rows.len() < out_dim {
            let mut v = rng.normal_vec(in_dim);
            // Modified Gram-Schmidt, applied twice for numerical orthogonality.
            for _ in 0..2 {
                for r in &rows {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                rows.push(v);
            }
        }
        Ok(FeatureMap::Projection {
            matrix: Matrix::from_rows(&rows, in_dim)?,
        })
    }

    pub fn embedding(table: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dim = table.values().next().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Config("embedding table is empty".into()));
        }
        if table.values().any(|v| v.len() != dim) {
            return Err(Error::Decode("embeddings have inconsistent dimensions".into()));
        }
        Ok(FeatureMap::Embedding { dim, table })
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureMap::Identity { .. } => FeatureKind::Identity,
            FeatureMap::Projection { .. } => FeatureKind::RandomProjection,
            FeatureMap::Embedding { .. } => FeatureKind::EmbeddingFile,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } | FeatureMap::Embedding { dim, .. } => *dim,
            FeatureMap::Projection { matrix } => matrix.rows(),
        }
    }

    pub fn apply(&self, id: &str, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Identity { dim } => {
                if x.len() != *dim {
                    return Err(Error::Dimension {
                        layer: "identity features".into(),
                        expected: *dim,
                        got: x.len(),
                    });
                }
                Ok(x.to_vec())
            }
            FeatureMap::Projection { matrix } => {
                if x.len() != matrix.cols() {
                    return Err(Error::Dimension {
                        layer: "projection features".into(),
                        expected: matrix.cols(),
                        got: x.len(),
                    });
                }
                Ok(matrix
                    .iter_rows()
                    .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect())
            }
            FeatureMap::Embedding { table, .. } => table
                .get(id)
                .cloned()
                .ok_or_else(|| Error::MissingFeature(id.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Identity,
    RandomProjection,
    EmbeddingFile,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Identity => "identity",
            FeatureKind::RandomProjection => "random-projection",
            FeatureKind::EmbeddingFile => "embedding-file",
        })
    }
}

/// Diagonal Gaussian obtained by moment matching.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: Vec<f64>,
    /// Population variance of the features plus `noise_var`.
    pub variance: Vec<f64>,
    pub noise_var: f64,
}

/// Mean and diagonal variance of the equal-weight mixture of
/// `N(e_m, σ² I)`, `m = 1..M`.
pub fn moment_match<V: AsRef<[f64]>>(features: &[V], noise_var: f64) -> Result<PredictiveGaussian> {
    let m = features.len();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "moment matching needs at least one feature vector".into(),
        ));
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::Config(format!("observation noise {noise_var} must be positive")));
    }
    let d = features[0].as_ref().len();
    if let Some(bad) = features.iter().find(|f| f.as_ref().len() != d) {
        return Err(Error::Dimension {
            layer: "moment matching".into(),
            expected: d,
            got: bad.as_ref().len(),
        });
    }
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f.as_ref()).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    // Two-pass form of (1/M)Σe² − ē²; identical in exact arithmetic, stabler in floats.
    let mut variance = vec![0.0; d];
    for f in features {
        for ((v, x), mu) in variance.iter_mut().zip(f.as_ref()).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    variance.iter_mut().for_each(|v| *v = *v / m as f64 + noise_var);
    if let Some(i) = variance.iter().chain(&mean).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "predictive moments".into(),
            index: i % d.max(1),
        });
    }
    Ok(PredictiveGaussian {
        mean,
        variance,
        noise_var,
    })
}

/// Differential entropy `½ Σ log(2πe v_i)` of a diagonal Gaussian.
pub fn gaussian_entropy(g: &PredictiveGaussian) -> Result<f64> {
    if let Some(i) = g.variance.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Numeric(format!(
            "variance {} at index {i} is not positive",
            g.variance[i]
        )));
    }
    let c = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    Ok(0.5 * g.variance.iter().map(|v| c + v.ln()).sum::<f64>())
}

/// How a seed's features are reduced to a scalar score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreRule {
    /// Entropy for `M ≥ 2`, squared distance to the pretrained sample for `M = 1`.
    Auto,
    /// Entropy of the moment-matched replicas `e_1..e_M`.
    Entropy,
    /// Entropy of `e_0..e_M`, the pretrained sample included.
    EntropyWithPretrained,
    /// `‖ē − e_0‖²`, the replica mean's distance to the pretrained sample.
    Distance,
}

impl ScoreRule {
    pub fn resolve(self, m: usize) -> ScoreRule {
        match self {
            ScoreRule::Auto if m == 1 => ScoreRule::Distance,
            ScoreRule::Auto => ScoreRule::Entropy,
            other => other,
        }
    }
}

impl fmt::Display for ScoreRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreRule::Auto => "auto",
            ScoreRule::Entropy => "entropy",
            ScoreRule::EntropyWithPretrained => "entropy-with-pretrained",
            ScoreRule::Distance => "distance",
        })
    }
}

impl FromStr for ScoreRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ScoreRule::Auto),
            "entropy" => Ok(ScoreRule::Entropy),
            "entropy-with-pretrained" => Ok(ScoreRule::EntropyWithPretrained),
            "distance" => Ok(ScoreRule::Distance),
            other => Err(Error::Config(format!("unknown score rule `{other}`"))),
        }
    }
}

/// Everything computed for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyRecord {
    pub seed_id: u64,
    pub cond: Option<usize>,
    /// `x̂_0` from the pretrained weights.
    pub sample: Vec<f64>,
    /// One generation per weight replica, same bundle.
    pub replicas: Vec<Vec<f64>>,
    /// `e_0` (pretrained) followed by `e_1..e_M`.
    pub features: Vec<Vec<f64>>,
    /// Per-dimension predictive variance of the replica features.
    pub variance: Vec<f64>,
    pub score: f64,
}

/// Reduces `e_0..e_M` to a score under `rule`.
pub fn score_features(features: &[Vec<f64>], noise_var: f64, rule: ScoreRule) -> Result<(f64, Vec<f64>)> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(
            "scoring needs e_0 and at least one replica".into(),
        ));
    }
    let replicas = &features[1..];
    let g = moment_match(replicas, noise_var)?;
    let score = match rule.resolve(replicas.len()) {
        ScoreRule::Entropy | ScoreRule::Auto => gaussian_entropy(&g)?,
        ScoreRule::EntropyWithPretrained => gaussian_entropy(&moment_match(features, noise_var)?)?,
        ScoreRule::Distance => g.mean.iter().zip(&features[0]).map(|(a, b)| (a - b) * (a - b)).sum(),
    };
    Ok((score, g.variance))
}

/// Per-dimension variance map of one seed's replicas under identity features.
pub fn pixelwise_uncertainty<V: AsRef<[f64]>>(replicas: &[V], noise_var: f64) -> Result<Vec<f64>> {
    Ok(moment_match(replicas, noise_var)?.variance)
}

/// Mean score per condition; records without a condition are skipped.
pub fn aggregate_by_condition(records: &[UncertaintyRecord]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(c) = r.cond {
            let e = acc.entry(c).or_insert((0.0, 0));
            e.0 += r.score;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
}

/// Denoiser evaluations spent per scored seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NfeCount {
    pub generation: u64,
    pub scoring: u64,
}

impl NfeCount {
    pub fn total(&self) -> u64 {
        self.generation + self.scoring
    }
}

/// Frozen state for scoring many seeds with one set of weight replicas.
pub struct Scorer<'a> {
    pub mlp: &'a Mlp,
    pub pretrained: &'a ParamVector,
    pub replicas: &'a [ParamVector],
    pub schedule: &'a NoiseSchedule,
    /// Sampler for `x̂_0`; bundles are drawn for it.
    pub generation: &'a SamplerSpec,
    /// Sampler for the replicas.
    pub scoring: &'a SamplerSpec,
    pub features: &'a FeatureMap,
    pub noise_var: f64,
    pub rule: ScoreRule,
}

impl Scorer<'_> {
    pub fn nfe_per_seed(&self) -> NfeCount {
        NfeCount {
            generation: self.generation.nfe() as u64,
            scoring: (self.replicas.len() * self.scoring.nfe()) as u64,
        }
    }

    pub fn score_seed(&self, bundle: &SeedBundle, cond: Option<usize>) -> Result<UncertaintyRecord> {
        let mut out = self.score_chunk(std::slice::from_ref(bundle), &[cond])?;
        Ok(out.pop().expect("one record per bundle"))
    }

    /// Scores every bundle. Output is ordered by seed id and each record
    /// depends only on its own bundle, so input order never matters.
    pub fn score_batch(&self, bundles: &[SeedBundle], conds: &[Option<usize>]) -> Result<Vec<UncertaintyRecord>> {
        if conds.len() != bundles.len() {
            return Err(Error::Dimension {
                layer: "scoring conditions".into(),
                expected: bundles.len(),
                got: conds.len(),
            });
        }
        let mut order: Vec<usize> = (0..bundles.len()).collect();
        order.sort_by_key(|&i| bundles[i].seed_id);
        if let Some(w) = order
            .windows(2)
            .find(|w| bundles[w[0]].seed_id == bundles[w[1]].seed_id)
        {
            return Err(Error::InvalidArgument(format!(
                "seed {} appears twice",
                bundles[w[0]].seed_id
            )));
        }
        let sorted: Vec<SeedBundle> = order.iter().map(|&i| bundles[i].clone()).collect();
        let sorted_conds: Vec<Option<usize>> = order.iter().map(|&i| conds[i]).collect();
        let chunks: Vec<Vec<UncertaintyRecord>> = sorted
            .par_chunks(SCORE_CHUNK)
            .zip(sorted_conds.par_chunks(SCORE_CHUNK))
            .map(|(b, c)| self.score_chunk(b, c))
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    fn score_chunk(&self, bundles: &[SeedBundle], conds: &[Option<usize>]) -> Result<Vec<UncertaintyRecord>> {
        if self.replicas.is_empty() {
            return Err(Error::Config("scoring needs at least one weight replica".into()));
        }
        let cond: Option<Vec<usize>> = match conds.iter().copied().collect::<Option<Vec<usize>>>() {
            Some(c) if !c.is_empty() => Some(c),
            _ if conds.iter().any(Option::is_some) => {
                return Err(Error::InvalidArgument(
                    "conditions must be given for all seeds or none".into(),
                ))
            }
            _ => None,
        };
        let first_id = bundles.first().map_or(0, |b| b.seed_id);
        let wrap = |e: Error| Error::Seed {
            seed_id: first_id,
            source: Box::new(e),
        };
        let base = sample_batch(
            &Network::new(self.mlp, self.pretrained),
            self.schedule,
            self.generation,
            bundles,
            cond.as_deref(),
        )
        .map_err(wrap)?;
        let replica_bundles: Vec<SeedBundle> = bundles
            .iter()
            .map(|b| b.coarsen(self.schedule, self.generation, self.scoring))
            .collect::<Result<_>>()
            .map_err(wrap)?;
        let mut replica_out = Vec::with_capacity(self.replicas.len());
        for w in self.replicas {
            let net = Network::new(self.mlp, w);
            replica_out.push(
                sample_batch(
                    &net as &dyn Denoiser,
                    self.schedule,
                    self.scoring,
                    &replica_bundles,
                    cond.as_deref(),
                )
                .map_err(wrap)?,
            );
        }
        bundles
            .iter()
            .enumerate()
            .map(|(r, b)| {
                let per_seed = || -> Result<UncertaintyRecord> {
                    let sample = base.row(r).to_vec();
                    let replicas: Vec<Vec<f64>> = replica_out.iter().map(|m| m.row(r).to_vec()).collect();
                    let mut features = Vec::with_capacity(replicas.len() + 1);
                    features.push(self.features.apply(&sample_id(b.seed_id, 0), &sample)?);
                    for (m, x) in replicas.iter().enumerate() {
                        features.push(self.features.apply(&sample_id(b.seed_id, m + 1), x)?);
                    }
                    let (score, variance) = score_features(&features, self.noise_var, self.rule)?;
                    Ok(UncertaintyRecord {
                        seed_id: b.seed_id,
                        cond: conds[r],
                        sample,
                        replicas,
                        features,
                        variance,
                        score,
                    })
                };
                per_seed().map_err(|e| Error::Seed {
                    seed_id: b.seed_id,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_closed_form() {
        let g = moment_match(&[vec![0.0, 0.0], vec![2.0, 0.0]], 0.001).unwrap();
        assert_eq!(g.mean, vec![1.0, 0.0]);
        assert!((g.variance[0] - 1.001).abs() < 1e-15);
        assert!((g.variance[1] - 0.001).abs() < 1e-18);
    }

    #[test]
    fn single_replica_collapses_to_noise() {
        let g = moment_match(&[vec![3.0, -1.0]], 0.01).unwrap();
        assert_eq!(g.variance, vec![0.01, 0.01]);
        assert!(moment_match::<Vec<f64>>(&[], 0.01).is_err());
    }

    #[test]
    fn unit_variance_entropy() {
        let g = PredictiveGaussian {
            mean: vec![0.0; 2],
            variance: vec![1.0, 1.0],
            noise_var: 1e-3,
        };
        let h = gaussian_entropy(&g).unwrap();
        assert!((h - (1.0 + (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((h - 2.837877).abs() < 1e-6);
    }

    #[test]
    fn scaling_variances_shifts_entropy() {
        let mut g = PredictiveGaussian {
            mean: vec![0.0; 3],
            variance: vec![0.3, 2.0, 0.01],
            noise_var: 1e-3,
        };
        let h = gaussian_entropy(&g).unwrap();
        g.variance.iter_mut().for_each(|v| *v *= 4.0);
        let h4 = gaussian_entropy(&g).unwrap();
        assert!((h4 - h - 1.5 * 4f64.ln()).abs() < 1e-12);
        g.variance[0] = 0.0;
        assert!(gaussian_entropy(&g).is_err());
    }

    #[test]
    fn distance_rule_for_single_replica() {
        let f = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(score_features(&f, 1e-3, ScoreRule::Auto).unwrap().0, 25.0);
        let f3 = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        let (h, v) = score_features(&f3, 1e-3, ScoreRule::Auto).unwrap();
        assert!((v[0] - 1.001).abs() < 1e-15);
        assert!(h.is_finite());
    }

    #[test]
    fn projection_rows_are_orthonormal() {
        let p = FeatureMap::random_projection(5, 3, &mut RngState::new(2)).unwrap();
        let FeatureMap::Projection { matrix } = &p else {
            unreachable!()
        };
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = matrix.row(i).iter().zip(matrix.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        assert!(FeatureMap::random_projection(2, 3, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn embedding_miss_is_reported() {
        let mut t = HashMap::new();
        t.insert("1:0".to_string(), vec![1.0, 2.0]);
        let f = FeatureMap::embedding(t).unwrap();
        assert_eq!(f.apply("1:0", &[]).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(f.apply("2:0", &[]), Err(Error::MissingFeature(_))));
    }

    #[test]
    fn aggregation_single_class_is_global_mean() {
        let rec = |id, s| UncertaintyRecord {
            seed_id: id,
            cond: Some(4),
            sample: vec![],
            replicas: vec![],
            features: vec![],
            variance: vec![],
            score: s,
        };
        let a = aggregate_by_condition(&[rec(0, 1.0), rec(1, 2.0), rec(2, 6.0)]);
        assert_eq!(a.len(), 1);
        assert_eq!(a[&4], 3.0);
    }
}
