//! End-to-end experiment: dataset, training, posterior, scoring, filtering,
//! evaluation and figures, with every stage cached by the hash of its inputs.

mod cache;
pub mod config;
mod plot;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use cache::{file_hash, Stamp, STAMP_FILE};
pub use config::{
    hash_json, parse_score_name, DatasetConfig, DatasetSource, ExperimentConfig, FilterConfig, ModelConfig,
    PosteriorConfig, PosteriorKind, SamplingConfig, ScheduleConfig, ScoringConfig, TrainSection, SCHEMA_VERSION,
    SCORE_NAMES,
};
pub use plot::{cmd_plot, PlotFiles};

use crate::dataset::{Dataset, ModeSpec};
use crate::diffusion::{train, Checkpoint, SeedBundle};
use crate::error::{Error, Result};
use crate::io::{
    decode_records, encode_records, read_embeddings_csv, write_ensemble_manifest, write_records_csv, ManifestEntry,
};
use crate::metrics::{
    combine_ranks, evaluate, rank_order, rarity_scores, realism_scores, select_top, Direction, EvalInputs,
    ManifoldIndex, MetricReport,
};
use crate::numeric::Matrix;
use crate::posterior::{fit_laplace, member_seed, LaplaceState, PosteriorSpec};
use crate::rng::{splitmix64, streams, RngState};
use crate::uncertainty::{FeatureKind, FeatureMap, NfeCount, Scorer};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Last stage a command runs; every stage before it runs too.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Dataset,
    Train,
    Laplace,
    Score,
    Filter,
    Eval,
    Plot,
}

/// One executed (or reused) stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub name: String,
    /// Relative to the output directory.
    pub dir: PathBuf,
    pub input_hash: String,
    pub cache_hit: bool,
    pub seconds: f64,
    pub artifacts: BTreeMap<String, String>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NfeSummary {
    pub samples: u64,
    pub generation_per_seed: u64,
    pub scoring_per_seed: u64,
    pub total: u64,
}

impl NfeSummary {
    pub fn new(samples: usize, per_seed: NfeCount) -> Self {
        let samples = samples as u64;
        Self {
            samples,
            generation_per_seed: per_seed.generation,
            scoring_per_seed: per_seed.scoring,
            total: samples * per_seed.total(),
        }
    }
}

/// A metric report written by the evaluation stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportEntry {
    /// Score name, or `all` for the unfiltered set.
    pub score: String,
    pub n: usize,
    /// `all`, `filtered` or `random`.
    pub subset: String,
    /// Relative to the output directory.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub target: Target,
    pub stages: Vec<StageRecord>,
    pub nfe: Option<NfeSummary>,
    pub reports: Vec<ReportEntry>,
    pub failed_stage: Option<String>,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig, target: Target) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            config_hash: cfg.hash(),
            target,
            stages: vec![],
            nfe: None,
            reports: vec![],
            failed_stage: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Decode(format!("run manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Path of `artifact` written by stage `name`, relative to the output directory.
    pub fn artifact(&self, name: &str, artifact: &str) -> Option<PathBuf> {
        self.stage(name)
            .filter(|s| s.artifacts.contains_key(artifact))
            .map(|s| s.dir.join(artifact))
    }

    pub fn cache_hits(&self) -> usize {
        self.stages.iter().filter(|s| s.cache_hit).count()
    }

    /// Checks that every listed artifact exists under `root` with its recorded hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for s in self.stages.iter().filter(|s| s.error.is_none()) {
            cache::verify_artifacts(&root.join(&s.dir), &s.artifacts)?;
        }
        Ok(())
    }
}

/// Samples the configured mode mixture; `n = 0` gives an empty dataset.
pub fn cmd_gen_dataset(cfg: &ExperimentConfig, n: usize) -> Result<Dataset> {
    let modes = cfg.dataset.modes()?;
    Ok(modes.sample(n, &mut RngState::with_stream(cfg.seed, streams::DATASET)))
}

fn held_out_reference(cfg: &ExperimentConfig) -> Result<Dataset> {
    let modes = cfg.dataset.modes()?;
    Ok(modes.sample(
        cfg.dataset.reference_samples,
        &mut RngState::with_stream(cfg.seed, streams::REFERENCE),
    ))
}

fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    data.write_csv(BufWriter::new(f))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::read_csv(f)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn flush<W: std::io::Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// File-name form of a score name.
pub fn score_slug(name: &str) -> String {
    name.replace('+', "-plus-")
}

pub fn report_file(score: &str, n: usize, subset: &str) -> String {
    if score == "all" {
        "report-all.txt".into()
    } else {
        format!("report-{}-{n}-{subset}.txt", score_slug(score))
    }
}

pub fn selection_file(score: &str, n: usize) -> String {
    format!("select-{}-{n}.csv", score_slug(score))
}

/// Per-sample scores of the full generated set, aligned with `seed_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub seed_ids: Vec<u64>,
    pub entropy: Vec<f64>,
    pub realism: Vec<f64>,
    pub rarity: Vec<f64>,
}

impl SampleScores {
    fn get(&self, name: &str) -> (&[f64], Direction) {
        match name {
            "entropy" => (&self.entropy, Direction::Ascending),
            "realism" => (&self.realism, Direction::Descending),
            _ => (&self.rarity, Direction::Ascending),
        }
    }

    /// Best-first order under a (possibly `+`-combined) score name.
    pub fn order(&self, name: &str) -> Result<Vec<usize>> {
        let parts = parse_score_name(name)?;
        if let [single] = parts.as_slice() {
            let (s, d) = self.get(single);
            return rank_order(s, d, &self.seed_ids);
        }
        let cols: Vec<(&[f64], Direction)> = parts.iter().map(|p| self.get(p)).collect();
        combine_ranks(&cols, &self.seed_ids)
    }

    fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["seed_id", "entropy", "realism", "rarity"])?;
        for i in 0..self.seed_ids.len() {
            w.write_record([
                self.seed_ids[i].to_string(),
                format!("{:?}", self.entropy[i]),
                format!("{:?}", self.realism[i]),
                format!("{:?}", self.rarity[i]),
            ])?;
        }
        flush(w, path)
    }
}

/// Deterministic random-baseline stream for subset size `n`, shared by all scores.
fn baseline_rng(seed: u64, n: usize) -> RngState {
    RngState::with_stream(splitmix64(seed ^ streams::BASELINE), n as u64)
}

/// Per-seed condition for conditional models.
fn seed_condition(seed: u64, seed_id: u64, count: usize) -> usize {
    RngState::with_stream(splitmix64(seed ^ streams::CONDITION), seed_id).below(count)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    manifest: RunManifest,
}

/// Result of one stage, with its directory.
struct Done {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Done {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn hash(&self, name: &str) -> &str {
        self.artifacts.get(name).map_or("", String::as_str)
    }
}

impl Runner<'_> {
    /// Runs `body` in the stage directory unless a verified stamp exists.
    /// `body` returns the artifact file names it wrote.
    fn stage<F>(&mut self, name: &str, dir_stem: &str, input_hash: String, body: F) -> Result<Done>
    where
        F: FnOnce(&Path) -> Result<Vec<String>>,
    {
        let rel = PathBuf::from(cache::stage_dir_name(dir_stem, &input_hash));
        let dir = self.out.join(&rel);
        let start = Instant::now();
        let mut record = StageRecord {
            name: name.to_string(),
            dir: rel,
            input_hash: input_hash.clone(),
            cache_hit: false,
            seconds: 0.0,
            artifacts: BTreeMap::new(),
            error: None,
        };
        let outcome = (|| -> Result<(bool, BTreeMap<String, String>)> {
            if let Some(stamp) = cache::read_stamp(&dir, dir_stem, &input_hash)? {
                return Ok((true, stamp.artifacts));
            }
            cache::ensure_dir(&dir)?;
            let written = body(&dir)?;
            Ok((
                false,
                cache::write_stamp(&dir, dir_stem, &input_hash, &written)?.artifacts,
            ))
        })();
        record.seconds = start.elapsed().as_secs_f64();
        match outcome {
            Ok((hit, artifacts)) => {
                record.cache_hit = hit;
                record.artifacts = artifacts.clone();
                self.manifest.stages.push(record);
                Ok(Done { dir, artifacts })
            }
            Err(e) => {
                record.error = Some(e.to_string());
                self.manifest.stages.push(record);
                self.manifest.failed_stage = Some(name.to_string());
                Err(e.in_stage(name))
            }
        }
    }

    fn dataset(&mut self) -> Result<Done> {
        let cfg = self.cfg;
        let ds = &cfg.dataset;
        let sources = match ds.source {
            DatasetSource::Modes => None,
            DatasetSource::Csv => {
                let train_path = ds.path.clone().expect("validated");
                let ref_path = ds.reference_path.clone().unwrap_or_else(|| train_path.clone());
                Some((file_hash(&train_path)?, file_hash(&ref_path)?, train_path, ref_path))
            }
        };
        let key = hash_json(&(
            "dataset",
            cfg.seed,
            ds,
            sources.as_ref().map(|(a, b, _, _)| (a.clone(), b.clone())),
        ));
        self.stage("dataset", "dataset", key, |dir| {
            let (train, reference) = match &sources {
                None => (cmd_gen_dataset(cfg, ds.num_samples)?, held_out_reference(cfg)?),
                Some((_, _, t, r)) => (read_dataset(t)?, read_dataset(r)?),
            };
            write_dataset(&train, &dir.join("train.csv"))?;
            write_dataset(&reference, &dir.join("reference.csv"))?;
            Ok(vec!["train.csv".into(), "reference.csv".into()])
        })
    }

    fn train_model(&mut self, name: &str, data: &Done, seed: u64) -> Result<Done> {
        let cfg = self.cfg;
        let key = hash_json(&(
            "train",
            data.hash("train.csv"),
            &cfg.model,
            &cfg.schedule,
            &cfg.train,
            seed,
        ));
        let train_csv = data.path("train.csv");
        self.stage(name, "model", key, |dir| {
            let data = read_dataset(&train_csv)?;
            let modes = data.dense_labels().map_or(0, |l| l.iter().max().map_or(0, |m| m + 1));
            let model = cfg.mlp_config(data.dim(), modes);
            let schedule = cfg.noise_schedule()?;
            let outcome = train(&cfg.train_config(seed), &model, &schedule, &data)?;
            outcome.checkpoint.save(&dir.join("model.ckpt"))?;
            let trace = dir.join("loss.csv");
            outcome.write_loss_trace(BufWriter::new(File::create(&trace).map_err(|e| Error::io(&trace, e))?))?;
            Ok(vec!["model.ckpt".into(), "loss.csv".into()])
        })
    }

    fn members(&mut self, data: &Done) -> Result<Vec<(u64, Done)>> {
        (0..self.cfg.posterior.members)
            .map(|m| {
                let seed = member_seed(self.cfg.seed, m);
                self.train_model(&format!("train/member-{m}"), data, seed)
                    .map(|d| (seed, d))
            })
            .collect()
    }

    fn laplace(&mut self, data: &Done, base: &Done) -> Result<Done> {
        let cfg = self.cfg;
        let p = &cfg.posterior;
        let key = hash_json(&(
            "laplace",
            base.hash("model.ckpt"),
            data.hash("train.csv"),
            p.prior_precision,
            p.sigma,
            p.fit_fraction,
            cfg.seed,
        ));
        let (train_csv, ckpt) = (data.path("train.csv"), base.path("model.ckpt"));
        self.stage("laplace", "laplace", key, |dir| {
            let data = read_dataset(&train_csv)?;
            let base = Checkpoint::load(&ckpt)?;
            let state = fit_laplace(&base, &data, p.fit_fraction, p.prior_precision, p.sigma, cfg.seed)?;
            state.save(&dir.join("laplace.bin"))?;
            Ok(vec!["laplace.bin".into()])
        })
    }

    fn score(&mut self, base: &Done, members: &[(u64, Done)], laplace: Option<&Done>) -> Result<(Done, NfeSummary)> {
        let cfg = self.cfg;
        let embed_hash = match (&cfg.scoring.feature_map, &cfg.scoring.embedding_file) {
            (FeatureKind::EmbeddingFile, Some(p)) => Some(file_hash(p)?),
            _ => None,
        };
        let posterior_hashes: Vec<&str> = match laplace {
            Some(l) => vec![l.hash("laplace.bin")],
            None => members.iter().map(|(_, d)| d.hash("model.ckpt")).collect(),
        };
        let key = hash_json(&(
            "score",
            base.hash("model.ckpt"),
            &posterior_hashes,
            &cfg.posterior.kind,
            &cfg.sampling,
            cfg.sampling_seed(),
            &cfg.scoring,
            embed_hash,
            cfg.seed,
            &cfg.dataset.grid_side,
        ));
        let schedule = cfg.noise_schedule()?;
        let gen = cfg.generation_sampler(&schedule)?;
        let sc = cfg.scoring_sampler(&schedule)?;
        let per_seed = NfeCount {
            generation: gen.nfe() as u64,
            scoring: (cfg.scoring.mc_samples * sc.nfe()) as u64,
        };
        let nfe = NfeSummary::new(cfg.sampling.num_samples, per_seed);
        let out = self.out.clone();
        let done = self.stage("score", "score", key, |dir| {
            let base_ck = Checkpoint::load(&base.path("model.ckpt"))?;
            let (posterior, ensemble_listing) = match laplace {
                Some(l) => {
                    let state = LaplaceState::load(&l.path("laplace.bin"), &base_ck)?;
                    (PosteriorSpec::laplace(base_ck.clone(), state)?, None)
                }
                None => {
                    let cks = members
                        .iter()
                        .map(|(_, d)| Checkpoint::load(&d.path("model.ckpt")))
                        .collect::<Result<Vec<_>>>()?;
                    let listing: Vec<ManifestEntry> = members
                        .iter()
                        .map(|(seed, d)| ManifestEntry {
                            path: d
                                .path("model.ckpt")
                                .strip_prefix(&out)
                                .map(Path::to_path_buf)
                                .unwrap_or_default(),
                            seed: *seed,
                        })
                        .collect();
                    (PosteriorSpec::ensemble(cks)?, Some(listing))
                }
            };
            let mlp = base_ck.mlp()?;
            let dim = base_ck.model.input_dim;
            let features = match cfg.scoring.feature_map {
                FeatureKind::Identity => FeatureMap::identity(dim),
                FeatureKind::RandomProjection => FeatureMap::random_projection(
                    dim,
                    cfg.scoring.projection_dim.expect("validated"),
                    &mut RngState::with_stream(cfg.seed, streams::PROJECTION),
                )?,
                FeatureKind::EmbeddingFile => {
                    let p = cfg.scoring.embedding_file.as_ref().expect("validated");
                    FeatureMap::embedding(read_embeddings_csv(File::open(p).map_err(|e| Error::io(p, e))?)?)?
                }
            };
            let replicas = posterior.draw_replicas(cfg.scoring.mc_samples, cfg.seed)?;
            let n = cfg.sampling.num_samples as u64;
            let bundles: Vec<SeedBundle> = (0..n)
                .map(|i| SeedBundle::draw(cfg.sampling_seed(), i, dim, gen.noise_rows()))
                .collect();
            let classes = base_ck.model.condition_count;
            let conds: Vec<Option<usize>> = (0..n)
                .map(|i| (classes > 0).then(|| seed_condition(cfg.sampling_seed(), i, classes)))
                .collect();
            let scorer = Scorer {
                mlp: &mlp,
                pretrained: &base_ck.ema,
                replicas: &replicas,
                schedule: &schedule,
                generation: &gen,
                scoring: &sc,
                features: &features,
                noise_var: cfg.scoring.noise_var,
                rule: cfg.scoring.rule,
            };
            let records = scorer.score_batch(&bundles, &conds)?;
            let rule = cfg.scoring.rule.resolve(replicas.len()).to_string();
            let bytes = encode_records(&records, cfg.scoring.noise_var, &rule)?;
            let rec_path = dir.join("records.bin");
            fs::write(&rec_path, bytes).map_err(|e| Error::io(&rec_path, e))?;
            let csv_path = dir.join("entropy.csv");
            write_records_csv(
                &records,
                BufWriter::new(File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?),
            )?;
            let mut written = vec!["records.bin".to_string(), "entropy.csv".to_string()];
            if let Some(listing) = ensemble_listing {
                let p = dir.join("ensemble.csv");
                write_ensemble_manifest(&listing, File::create(&p).map_err(|e| Error::io(&p, e))?)?;
                written.push("ensemble.csv".into());
            }
            Ok(written)
        })?;
        Ok((done, nfe))
    }

    fn filter(&mut self, data: &Done, score: &Done) -> Result<Done> {
        let cfg = self.cfg;
        let key = hash_json(&(
            "filter",
            score.hash("records.bin"),
            data.hash("reference.csv"),
            &cfg.filter,
            cfg.seed,
        ));
        let (rec_path, ref_path) = (score.path("records.bin"), data.path("reference.csv"));
        self.stage("filter", "filter", key, |dir| {
            let set = decode_records(&fs::read(&rec_path).map_err(|e| Error::io(&rec_path, e))?)?;
            let reference = read_dataset(&ref_path)?;
            let index = ManifoldIndex::new(reference.points, cfg.filter.k)?;
            let samples = samples_matrix(&set.records)?;
            let scores = SampleScores {
                seed_ids: set.records.iter().map(|r| r.seed_id).collect(),
                entropy: set.records.iter().map(|r| r.score).collect(),
                realism: realism_scores(&samples, &index)?,
                rarity: rarity_scores(&samples, &index)?,
            };
            scores.write_csv(&dir.join("scores.csv"))?;
            let mut written = vec!["scores.csv".to_string()];
            for name in &cfg.filter.scores {
                let order = scores.order(name)?;
                for &n in &cfg.filter.keep {
                    let sel = select_top(&order, &scores.seed_ids, n, &mut baseline_rng(cfg.seed, n))?;
                    let file = selection_file(name, n);
                    let path = dir.join(&file);
                    let mut w = csv_writer(&path)?;
                    w.write_record(["seed_id", "subset"])?;
                    for id in &sel.kept {
                        w.write_record([id.to_string().as_str(), "filtered"])?;
                    }
                    for id in &sel.baseline {
                        w.write_record([id.to_string().as_str(), "random"])?;
                    }
                    flush(w, &path)?;
                    written.push(file);
                }
            }
            Ok(written)
        })
    }

    fn eval(&mut self, data: &Done, score: &Done, filter: &Done) -> Result<(Done, Vec<ReportEntry>)> {
        let cfg = self.cfg;
        let key = hash_json(&(
            "eval",
            score.hash("records.bin"),
            &filter.artifacts,
            data.hash("reference.csv"),
            &cfg.dataset,
            &cfg.filter,
        ));
        let mut entries = vec![("all".to_string(), 0usize, "all".to_string())];
        for name in &cfg.filter.scores {
            for &n in &cfg.filter.keep {
                for subset in ["filtered", "random"] {
                    entries.push((name.clone(), n, subset.to_string()));
                }
            }
        }
        let modes = match cfg.dataset.source {
            DatasetSource::Modes => Some(cfg.dataset.modes()?),
            DatasetSource::Csv => None,
        };
        let done = self.stage("eval", "eval", key, |dir| {
            let rec_path = score.path("records.bin");
            let set = decode_records(&fs::read(&rec_path).map_err(|e| Error::io(&rec_path, e))?)?;
            let reference = read_dataset(&data.path("reference.csv"))?;
            let index = ManifoldIndex::new(reference.points.clone(), cfg.filter.k)?;
            let samples = samples_matrix(&set.records)?;
            let position: BTreeMap<u64, usize> = set.records.iter().enumerate().map(|(i, r)| (r.seed_id, i)).collect();
            let mut written = Vec::new();
            let mut curves = Vec::new();
            for (name, n, subset) in &entries {
                let ids: Vec<u64> = if name == "all" {
                    set.records.iter().map(|r| r.seed_id).collect()
                } else {
                    read_selection(&filter.path(&selection_file(name, *n)), subset)?
                };
                let rows = ids
                    .iter()
                    .map(|id| {
                        position
                            .get(id)
                            .copied()
                            .ok_or_else(|| Error::Decode(format!("selection names unknown seed {id}")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                let entropy: Vec<f64> = rows.iter().map(|&i| set.records[i].score).collect();
                let report = evaluate(&EvalInputs {
                    label: &format!("{name}/{subset}"),
                    seed_ids: &ids,
                    features: &samples.select_rows(&rows),
                    reference: &reference.points,
                    reference_index: &index,
                    modes: modes.as_ref(),
                    extra_scores: &[("entropy".to_string(), entropy)],
                })?;
                let file = report_file(name, *n, subset);
                write_text(&dir.join(&file), &report.to_text())?;
                curves.push((name.clone(), *n, subset.clone(), report));
                written.push(file);
            }
            write_curves(&dir.join("curves.csv"), &curves)?;
            written.push("curves.csv".into());
            Ok(written)
        })?;
        let rel = done
            .dir
            .strip_prefix(&self.out)
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let reports = entries
            .into_iter()
            .map(|(score, n, subset)| ReportEntry {
                path: rel.join(report_file(&score, n, &subset)),
                score,
                n,
                subset,
            })
            .collect();
        Ok((done, reports))
    }
}

fn samples_matrix(records: &[crate::uncertainty::UncertaintyRecord]) -> Result<Matrix> {
    let dim = records.first().map_or(0, |r| r.sample.len());
    let rows: Vec<&[f64]> = records.iter().map(|r| r.sample.as_slice()).collect();
    Matrix::from_rows(&rows, dim)
}

fn read_selection(path: &Path, subset: &str) -> Result<Vec<u64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.get(1) == Some(subset) {
            let id = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Decode(format!("{}: bad seed id", path.display())))?;
            out.push(id);
        }
    }
    Ok(out)
}

/// Header of the metric-versus-n table.
pub const CURVE_COLUMNS: [&str; 7] = [
    "score",
    "n",
    "subset",
    "fid",
    "precision",
    "recall",
    "hallucination_rate",
];

/// `(score, n, subset, report)` for one evaluated subset.
pub(crate) type CurveRow = (String, usize, String, MetricReport);

fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(CURVE_COLUMNS)?;
    for (name, _, subset, r) in rows {
        w.write_record([
            name.clone(),
            r.n.to_string(),
            subset.clone(),
            format!("{:?}", r.fid),
            format!("{:?}", r.precision),
            format!("{:?}", r.recall),
            r.hallucination_rate.map(|h| format!("{h:?}")).unwrap_or_default(),
        ])?;
    }
    flush(w, path)
}

/// Runs the pipeline up to `target` under `out`, writing `manifest.json`
/// there even when a stage fails.
pub fn cmd_run_to(cfg: &ExperimentConfig, out: &Path, target: Target) -> Result<RunManifest> {
    cfg.validate()?;
    cache::ensure_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let mut runner = Runner {
        cfg,
        out: out.to_path_buf(),
        manifest: RunManifest::new(cfg, target),
    };
    let result = run_stages(&mut runner, target);
    runner.manifest.save(&out.join(MANIFEST_FILE))?;
    result.map(|()| runner.manifest)
}

/// The full pipeline under the configured output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("output_dir is not set".into()))?;
    cmd_run_to(cfg, &out, Target::Plot)
}

fn run_stages(r: &mut Runner<'_>, target: Target) -> Result<()> {
    let data = r.dataset()?;
    if target == Target::Dataset {
        return Ok(());
    }
    let base = r.train_model("train/base", &data, r.cfg.seed)?;
    let laplace_run = target == Target::Laplace || r.cfg.posterior.kind == PosteriorKind::Laplace;
    let members = if r.cfg.posterior.kind == PosteriorKind::Ensemble && target != Target::Laplace {
        r.members(&data)?
    } else {
        vec![]
    };
    let laplace = if laplace_run && target >= Target::Laplace {
        Some(r.laplace(&data, &base)?)
    } else {
        None
    };
    if target <= Target::Laplace {
        return Ok(());
    }
    let (score, nfe) = r.score(&base, &members, laplace.as_ref())?;
    r.manifest.nfe = Some(nfe);
    if target == Target::Score {
        return Ok(());
    }
    let filter = r.filter(&data, &score)?;
    if target == Target::Filter {
        return Ok(());
    }
    let (eval, reports) = r.eval(&data, &score, &filter)?;
    r.manifest.reports = reports;
    if target == Target::Eval {
        return Ok(());
    }
    let key = hash_json(&(
        "plot",
        data.hash("train.csv"),
        score.hash("records.bin"),
        &filter.artifacts,
        &eval.artifacts,
    ));
    let manifest = r.manifest.clone();
    let out = r.out.clone();
    r.stage("plot", "plot", key, |dir| {
        let files = cmd_plot(&manifest, &out, dir)?;
        Ok(files.names())
    })?;
    Ok(())
}

/// Loads the mode spec a run was evaluated against, if any.
pub fn run_modes(cfg: &ExperimentConfig) -> Result<Option<ModeSpec>> {
    match cfg.dataset.source {
        DatasetSource::Modes => cfg.dataset.modes().map(Some),
        DatasetSource::Csv => Ok(None),
    }
}

/// Reads the per-sample scores written by the filter stage.
pub fn read_sample_scores(path: &Path) -> Result<SampleScores> {
    let mut r = csv::Reader::from_path(path)?;
    let mut s = SampleScores {
        seed_ids: vec![],
        entropy: vec![],
        realism: vec![],
        rarity: vec![],
    };
    for rec in r.records() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Decode(format!("{}: bad score cell", path.display())))
        };
        s.seed_ids.push(
            rec.get(0)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Decode(format!("{}: bad seed id", path.display())))?,
        );
        s.entropy.push(num(1)?);
        s.realism.push(num(2)?);
        s.rarity.push(num(3)?);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig::parse(
            r#"
schema_version = 1
seed = 3
[dataset]
grid_side = 2
num_samples = 64
reference_samples = 40
[model]
hidden_dims = [8]
time_embed_dim = 4
[schedule]
steps = 20
[train]
epochs = 2
batch_size = 32
[posterior]
members = 2
[sampling]
steps = 10
num_samples = 24
[scoring]
mc_samples = 2
steps = 5
[filter]
keep = [12]
scores = ["entropy", "entropy+realism"]
"#,
        )
        .unwrap()
    }

    #[test]
    fn run_is_cached_and_deterministic() {
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m1 = cmd_run_to(&cfg, a.path(), Target::Plot).unwrap();
        assert_eq!(m1.cache_hits(), 0);
        m1.verify(a.path()).unwrap();
        let m2 = cmd_run_to(&cfg, a.path(), Target::Plot).unwrap();
        assert_eq!(m2.cache_hits(), m2.stages.len());
        let m3 = cmd_run_to(&cfg, b.path(), Target::Plot).unwrap();
        let entropy =
            |root: &Path, m: &RunManifest| fs::read(root.join(m.artifact("score", "entropy.csv").unwrap())).unwrap();
        assert_eq!(entropy(a.path(), &m1), entropy(b.path(), &m3));
        let strip = |m: &RunManifest| {
            let mut m = m.clone();
            m.stages.iter_mut().for_each(|s| {
                s.seconds = 0.0;
                s.cache_hit = false;
            });
            m
        };
        assert_eq!(strip(&m1), strip(&m3));
        assert_eq!(m1.nfe.unwrap().generation_per_seed, 10);
        assert_eq!(m1.nfe.unwrap().scoring_per_seed, 10);
        assert_eq!(m1.nfe.unwrap().total, 24 * 20);
        assert_eq!(RunManifest::parse(&m1.to_json()).unwrap(), m1);
    }

    #[test]
    fn corrupted_artifact_is_a_hash_mismatch() {
        let cfg = tiny_config();
        let tmp = tempfile::tempdir().unwrap();
        let m = cmd_run_to(&cfg, tmp.path(), Target::Score).unwrap();
        let ck = tmp.path().join(m.artifact("train/base", "model.ckpt").unwrap());
        let mut bytes = fs::read(&ck).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&ck, bytes).unwrap();
        let err = cmd_run_to(&cfg, tmp.path(), Target::Score).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
        let manifest = RunManifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.failed_stage.as_deref(), Some("train/base"));
    }

    #[test]
    fn stage_failure_is_recorded_with_its_name() {
        let mut cfg = tiny_config();
        cfg.train.lr = 1e9;
        cfg.train.epochs = 20;
        let tmp = tempfile::tempdir().unwrap();
        let err = cmd_run_to(&cfg, tmp.path(), Target::Train).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
        let manifest = RunManifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.failed_stage.as_deref(), Some("train/base"));
        assert!(manifest.stage("train/base").unwrap().error.is_some());
        assert!(manifest.stage("dataset").unwrap().error.is_none());
    }

    #[test]
    fn laplace_run_and_members_share_cache() {
        let mut cfg = tiny_config();
        let tmp = tempfile::tempdir().unwrap();
        let ens = cmd_run_to(&cfg, tmp.path(), Target::Score).unwrap();
        cfg.posterior.kind = PosteriorKind::Laplace;
        let lap = cmd_run_to(&cfg, tmp.path(), Target::Score).unwrap();
        assert!(lap.stage("train/base").unwrap().cache_hit);
        assert!(!lap.stage("laplace").unwrap().cache_hit);
        assert_ne!(
            ens.stage("score").unwrap().input_hash,
            lap.stage("score").unwrap().input_hash
        );
        cfg.posterior.kind = PosteriorKind::Ensemble;
        cfg.scoring.mc_samples = 1;
        let one = cmd_run_to(&cfg, tmp.path(), Target::Score).unwrap();
        assert!(one.stage("train/member-1").unwrap().cache_hit);
        assert_eq!(one.nfe.unwrap().scoring_per_seed, 5);
    }

    #[test]
    fn gen_dataset_counts_and_empty() {
        let cfg = ExperimentConfig::parse("schema_version = 1\n").unwrap();
        let empty = cmd_gen_dataset(&cfg, 0).unwrap();
        let mut buf = Vec::new();
        empty.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x0,x1,cond\n");
        let n = 10_000;
        let data = cmd_gen_dataset(&cfg, n).unwrap();
        let mut counts = [0usize; 25];
        data.labels.iter().for_each(|l| counts[l.unwrap()] += 1);
        // Multinomial: each count has mean N/K and sd sqrt(N p (1 - p)).
        let p = 1.0 / 25.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
        let modes = cfg.dataset.modes().unwrap();
        assert_eq!(modes.len(), 25);
        let again = cmd_gen_dataset(&cfg, n).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        data.write_csv(&mut a).unwrap();
        again.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
    }
}
