//! Distribution- and sample-level evaluation of generated sets.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ModeSpec;
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::rng::RngState;

/// Default neighbour count for k-NN manifolds.
pub const DEFAULT_K: usize = 3;
/// Covariance regularization threshold and ridge for the Fréchet distance.
const EIG_FLOOR: f64 = 1e-10;
const RIDGE: f64 = 1e-6;
/// Lower clamp on distances in the realism score.
const MIN_DISTANCE: f64 = 1e-12;

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn mean_and_covariance(x: &Matrix) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let mean = x.column_means();
    let mut cov = DMatrix::zeros(d, d);
    for r in x.iter_rows() {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov))
}

fn regularized(mut c: DMatrix<f64>) -> DMatrix<f64> {
    let min = SymmetricEigen::new(c.clone()).eigenvalues.min();
    if min < EIG_FLOOR {
        for i in 0..c.nrows() {
            c[(i, i)] += RIDGE;
        }
    }
    c
}

fn sym_sqrt(c: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(c.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`.
///
/// The trace of the square root is taken through the symmetric matrix
/// `Σ_a^{1/2} Σ_b Σ_a^{1/2}`, which has the same spectrum as `Σ_a Σ_b`.
pub fn frechet_from_moments(mu_a: &[f64], cov_a: &DMatrix<f64>, mu_b: &[f64], cov_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Dimension {
            layer: "frechet moments".into(),
            expected: d,
            got: mu_b.len(),
        });
    }
    let ca = regularized(cov_a.clone());
    let cb = regularized(cov_b.clone());
    let ra = sym_sqrt(&ca);
    let mut p = &ra * &cb * &ra;
    p = (&p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(p).eigenvalues;
    let scale = eig.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(v) = eig.iter().find(|v| **v < -1e-8 * scale) {
        return Err(Error::Numeric(format!(
            "covariance product has negative eigenvalue {v}"
        )));
    }
    let tr_sqrt: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let fd = mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if !fd.is_finite() {
        return Err(Error::Numeric("non-finite Fréchet distance".into()));
    }
    Ok(fd.max(0.0))
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            layer: "frechet features".into(),
            expected: a.cols(),
            got: b.cols(),
        });
    }
    let (ma, ca) = mean_and_covariance(a)?;
    let (mb, cb) = mean_and_covariance(b)?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Reference points with their k-th nearest-neighbour radii.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldIndex {
    points: Matrix,
    k: usize,
    radii: Vec<f64>,
}

impl ManifoldIndex {
    pub fn new(points: Matrix, k: usize) -> Result<Self> {
        let n = points.rows();
        if k == 0 || k >= n {
            return Err(Error::InvalidArgument(format!(
                "k = {k} needs 1 <= k < {n} reference points"
            )));
        }
        let radii = (0..n)
            .into_par_iter()
            .map(|i| {
                let p = points.row(i);
                let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist(p, points.row(j))).collect();
                let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
                *kth
            })
            .collect();
        Ok(Self { points, k, radii })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.points.cols() {
            return Err(Error::Dimension {
                layer: "manifold query".into(),
                expected: self.points.cols(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Whether `x` lies in some reference ball.
    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        self.check_dim(x)?;
        Ok(self.points.iter_rows().zip(&self.radii).any(|(s, r)| dist(x, s) <= *r))
    }

    /// `max_s r_s / max(‖x − s‖, 1e-12)`.
    pub fn realism(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self
            .points
            .iter_rows()
            .zip(&self.radii)
            .map(|(s, r)| r / dist(x, s).max(MIN_DISTANCE))
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Smallest radius among balls containing `x`, `+∞` if none does.
    pub fn rarity(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self
            .points
            .iter_rows()
            .zip(&self.radii)
            .filter(|(s, r)| dist(x, s) <= **r)
            .map(|(_, r)| *r)
            .fold(f64::INFINITY, f64::min))
    }

    /// Fraction of rows of `x` inside the manifold.
    pub fn coverage_of(&self, x: &Matrix) -> Result<f64> {
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("empty query set".into()));
        }
        let inside: Vec<bool> = (0..x.rows())
            .into_par_iter()
            .map(|i| self.contains(x.row(i)))
            .collect::<Result<_>>()?;
        Ok(inside.iter().filter(|b| **b).count() as f64 / x.rows() as f64)
    }
}

/// `(precision, recall)`: generated points in the reference manifold, and
/// reference points in the generated manifold.
pub fn precision_recall(generated: &Matrix, reference: &Matrix, k: usize) -> Result<(f64, f64)> {
    let ref_index = ManifoldIndex::new(reference.clone(), k)?;
    let gen_index = ManifoldIndex::new(generated.clone(), k)?;
    Ok((ref_index.coverage_of(generated)?, gen_index.coverage_of(reference)?))
}

pub fn realism_scores(x: &Matrix, index: &ManifoldIndex) -> Result<Vec<f64>> {
    (0..x.rows()).into_par_iter().map(|i| index.realism(x.row(i))).collect()
}

pub fn rarity_scores(x: &Matrix, index: &ManifoldIndex) -> Result<Vec<f64>> {
    (0..x.rows()).into_par_iter().map(|i| index.rarity(x.row(i))).collect()
}

/// 1-based ranks, ties receiving the average of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = x.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            what: "ranked scores".into(),
            index: i,
        });
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    Ok(ranks)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation; 0 when either array is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Dimension {
            layer: "spearman inputs".into(),
            expected: a.len().max(2),
            got: b.len(),
        });
    }
    Ok(pearson(&average_ranks(a)?, &average_ranks(b)?))
}

/// Symmetric correlation matrix with unit diagonal.
pub fn spearman_matrix(scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = scores.len();
    if let Some(s) = scores.iter().find(|s| s.len() != scores[0].len() || s.len() < 2) {
        return Err(Error::Dimension {
            layer: "spearman inputs".into(),
            expected: scores[0].len().max(2),
            got: s.len(),
        });
    }
    let ranks: Vec<Vec<f64>> = scores.iter().map(|s| average_ranks(s)).collect::<Result<_>>()?;
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        m[i][i] = 1.0;
        for j in i + 1..k {
            let c = pearson(&ranks[i], &ranks[j]);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Which end of a score is best.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Lower is better (entropy, rarity).
    Ascending,
    /// Higher is better (realism).
    Descending,
}

/// Best-first order of `scores`, ties broken by ascending seed id.
pub fn rank_order(scores: &[f64], direction: Direction, seed_ids: &[u64]) -> Result<Vec<usize>> {
    if scores.len() != seed_ids.len() {
        return Err(Error::Dimension {
            layer: "ranked seeds".into(),
            expected: seed_ids.len(),
            got: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            what: "ranked scores".into(),
            index: i,
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let c = scores[a].total_cmp(&scores[b]);
        let c = if direction == Direction::Descending {
            c.reverse()
        } else {
            c
        };
        c.then(seed_ids[a].cmp(&seed_ids[b]))
    });
    Ok(idx)
}

/// Sums each score's ordinal best-first rank and re-ranks by the sum.
/// Returns indices best-first; ties go to the smaller seed id.
pub fn combine_ranks(scores: &[(&[f64], Direction)], seed_ids: &[u64]) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores to combine".into()));
    }
    let mut total = vec![0u64; seed_ids.len()];
    for (s, dir) in scores {
        for (rank, i) in rank_order(s, *dir, seed_ids)?.into_iter().enumerate() {
            total[i] += rank as u64;
        }
    }
    let mut idx: Vec<usize> = (0..seed_ids.len()).collect();
    idx.sort_by(|&a, &b| total[a].cmp(&total[b]).then(seed_ids[a].cmp(&seed_ids[b])));
    Ok(idx)
}

/// Per-mode coverage and the fraction of hallucinated samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeStats {
    /// Non-hallucinated samples assigned to each mode, as a fraction of all
    /// non-hallucinated samples.
    pub coverage: Vec<f64>,
    pub counts: Vec<usize>,
    pub hallucination_rate: f64,
    /// Per sample: nearest mode and whether it is hallucinated.
    pub assignments: Vec<(usize, bool)>,
}

pub fn mode_stats(samples: &Matrix, modes: &ModeSpec) -> Result<ModeStats> {
    modes.validate()?;
    if samples.cols() != modes.dim() {
        return Err(Error::Dimension {
            layer: "mode statistics".into(),
            expected: modes.dim(),
            got: samples.cols(),
        });
    }
    let threshold = modes.hallucination_radius * modes.mode_std;
    let assignments: Vec<(usize, bool)> = samples
        .iter_rows()
        .map(|x| {
            let (k, d) = modes
                .centers
                .iter()
                .enumerate()
                .map(|(k, c)| (k, dist(x, c)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
            (k, d > threshold)
        })
        .collect();
    let mut counts = vec![0usize; modes.len()];
    let mut hallucinated = 0;
    for &(k, h) in &assignments {
        if h {
            hallucinated += 1;
        } else {
            counts[k] += 1;
        }
    }
    let good = samples.rows() - hallucinated;
    let coverage = counts
        .iter()
        .map(|&c| if good == 0 { 0.0 } else { c as f64 / good as f64 })
        .collect();
    let hallucination_rate = if samples.rows() == 0 {
        0.0
    } else {
        hallucinated as f64 / samples.rows() as f64
    };
    Ok(ModeStats {
        coverage,
        counts,
        hallucination_rate,
        assignments,
    })
}

/// Filtered subset and its same-size random baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Kept seed ids, best first.
    pub kept: Vec<u64>,
    /// Uniformly random seed ids, ascending.
    pub baseline: Vec<u64>,
}

/// Keeps the `n` best seeds under `order` (best-first indices into `seed_ids`)
/// and draws a size-`n` uniform baseline from `rng`.
pub fn select_top(order: &[usize], seed_ids: &[u64], n: usize, rng: &mut RngState) -> Result<Selection> {
    if n == 0 || n > seed_ids.len() {
        return Err(Error::Config(format!("cannot keep {n} of {} samples", seed_ids.len())));
    }
    let kept = order[..n].iter().map(|&i| seed_ids[i]).collect();
    let mut baseline: Vec<u64> = rng
        .choose_indices(seed_ids.len(), n)
        .into_iter()
        .map(|i| seed_ids[i])
        .collect();
    baseline.sort_unstable();
    Ok(Selection { kept, baseline })
}

/// Keeps the `n` lowest (or highest, per `direction`) scores.
pub fn filter_by_score(
    seed_ids: &[u64],
    scores: &[f64],
    direction: Direction,
    n: usize,
    rng: &mut RngState,
) -> Result<Selection> {
    let order = rank_order(scores, direction, seed_ids)?;
    select_top(&order, seed_ids, n, rng)
}

/// Metrics of one sample set against a reference set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub n: usize,
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub hallucination_rate: Option<f64>,
    pub mode_coverage: Vec<f64>,
    pub seed_ids: Vec<u64>,
    pub realism: Vec<f64>,
    pub rarity: Vec<f64>,
    pub spearman_names: Vec<String>,
    pub spearman: Vec<Vec<f64>>,
}

const REPORT_HEADER: &str = "# genunc metric report";
const REPORT_VERSION: u32 = 1;

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Decode(format!("{what}: bad number `{s}`")))
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        let _ = writeln!(s, "version={REPORT_VERSION}");
        let _ = writeln!(s, "label={}", self.label);
        let _ = writeln!(s, "n={}", self.n);
        let _ = writeln!(s, "fid={}", fmt_f64(self.fid));
        let _ = writeln!(s, "precision={}", fmt_f64(self.precision));
        let _ = writeln!(s, "recall={}", fmt_f64(self.recall));
        if let Some(h) = self.hallucination_rate {
            let _ = writeln!(s, "hallucination_rate={}", fmt_f64(h));
        }
        if !self.mode_coverage.is_empty() {
            let _ = writeln!(s, "[mode_coverage]\nmode,coverage");
            for (k, c) in self.mode_coverage.iter().enumerate() {
                let _ = writeln!(s, "{k},{}", fmt_f64(*c));
            }
        }
        let _ = writeln!(s, "[samples]\nseed_id,realism,rarity");
        for ((id, r), q) in self.seed_ids.iter().zip(&self.realism).zip(&self.rarity) {
            let _ = writeln!(s, "{id},{},{}", fmt_f64(*r), fmt_f64(*q));
        }
        if !self.spearman_names.is_empty() {
            let _ = writeln!(s, "[spearman]\nname,{}", self.spearman_names.join(","));
            for (name, row) in self.spearman_names.iter().zip(&self.spearman) {
                let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
                let _ = writeln!(s, "{name},{}", cells.join(","));
            }
        }
        s
    }

    /// Parses [`MetricReport::to_text`] output. Never panics on malformed input.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, l)) if l == REPORT_HEADER => {}
            _ => return Err(Error::Decode("missing metric report header".into())),
        }
        let mut r = MetricReport {
            label: String::new(),
            n: 0,
            fid: f64::NAN,
            precision: f64::NAN,
            recall: f64::NAN,
            hallucination_rate: None,
            mode_coverage: vec![],
            seed_ids: vec![],
            realism: vec![],
            rarity: vec![],
            spearman_names: vec![],
            spearman: vec![],
        };
        let mut seen = std::collections::HashSet::new();
        let mut section: Option<String> = None;
        let mut expect_header = false;
        for (no, line) in lines {
            let line_no = no + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !seen.insert(format!("[{name}]")) {
                    return Err(Error::Decode(format!("line {line_no}: duplicate section {name}")));
                }
                section = Some(name.to_string());
                expect_header = true;
                continue;
            }
            match section.as_deref() {
                None => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| Error::Decode(format!("line {line_no}: expected key=value")))?;
                    if !seen.insert(k.to_string()) {
                        return Err(Error::Decode(format!("line {line_no}: duplicate key {k}")));
                    }
                    match k {
                        "version" => {
                            if v != REPORT_VERSION.to_string() {
                                return Err(Error::Decode(format!("unsupported report version {v}")));
                            }
                        }
                        "label" => r.label = v.to_string(),
                        "n" => r.n = v.parse().map_err(|_| Error::Decode(format!("line {line_no}: bad n")))?,
                        "fid" => r.fid = parse_f64(v, "fid")?,
                        "precision" => r.precision = parse_f64(v, "precision")?,
                        "recall" => r.recall = parse_f64(v, "recall")?,
                        "hallucination_rate" => r.hallucination_rate = Some(parse_f64(v, "hallucination_rate")?),
                        other => return Err(Error::Decode(format!("line {line_no}: unknown key {other}"))),
                    }
                }
                Some(sec) => {
                    let cells: Vec<&str> = line.split(',').collect();
                    if expect_header {
                        expect_header = false;
                        let ok = match sec {
                            "mode_coverage" => cells == ["mode", "coverage"],
                            "samples" => cells == ["seed_id", "realism", "rarity"],
                            "spearman" => {
                                if cells.first() != Some(&"name") || cells.len() < 2 {
                                    false
                                } else {
                                    r.spearman_names = cells[1..].iter().map(|c| c.to_string()).collect();
                                    true
                                }
                            }
                            other => return Err(Error::Decode(format!("unknown section {other}"))),
                        };
                        if !ok {
                            return Err(Error::Decode(format!("line {line_no}: bad {sec} header")));
                        }
                        continue;
                    }
                    match sec {
                        "mode_coverage" => {
                            if cells.len() != 2 || cells[0].parse::<usize>().ok() != Some(r.mode_coverage.len()) {
                                return Err(Error::Decode(format!("line {line_no}: bad coverage row")));
                            }
                            r.mode_coverage.push(parse_f64(cells[1], "coverage")?);
                        }
                        "samples" => {
                            if cells.len() != 3 {
                                return Err(Error::Decode(format!("line {line_no}: bad sample row")));
                            }
                            r.seed_ids.push(
                                cells[0]
                                    .parse()
                                    .map_err(|_| Error::Decode(format!("line {line_no}: bad seed id")))?,
                            );
                            r.realism.push(parse_f64(cells[1], "realism")?);
                            r.rarity.push(parse_f64(cells[2], "rarity")?);
                        }
                        _ => {
                            let k = r.spearman_names.len();
                            let idx = r.spearman.len();
                            if cells.len() != k + 1 || idx >= k || cells[0] != r.spearman_names[idx] {
                                return Err(Error::Decode(format!("line {line_no}: bad spearman row")));
                            }
                            r.spearman.push(
                                cells[1..]
                                    .iter()
                                    .map(|c| parse_f64(c, "spearman"))
                                    .collect::<Result<_>>()?,
                            );
                        }
                    }
                }
            }
        }
        for key in ["version", "label", "n", "fid", "precision", "recall"] {
            if !seen.contains(key) {
                return Err(Error::Decode(format!("metric report lacks `{key}`")));
            }
        }
        if r.spearman.len() != r.spearman_names.len() {
            return Err(Error::Decode("spearman matrix is not square".into()));
        }
        Ok(r)
    }
}

/// Inputs for [`evaluate`].
pub struct EvalInputs<'a> {
    pub label: &'a str,
    pub seed_ids: &'a [u64],
    pub features: &'a Matrix,
    pub reference: &'a Matrix,
    /// Prebuilt manifold of `reference` for realism, rarity and precision.
    pub reference_index: &'a ManifoldIndex,
    pub modes: Option<&'a ModeSpec>,
    /// Extra per-sample scores for the Spearman matrix, aligned with `seed_ids`.
    pub extra_scores: &'a [(String, Vec<f64>)],
}

/// Full report of one sample set.
pub fn evaluate(inp: &EvalInputs<'_>) -> Result<MetricReport> {
    let n = inp.features.rows();
    if n != inp.seed_ids.len() {
        return Err(Error::Dimension {
            layer: "evaluated samples".into(),
            expected: inp.seed_ids.len(),
            got: n,
        });
    }
    let k = inp.reference_index.k();
    let fid = frechet_distance(inp.features, inp.reference)?;
    let precision = inp.reference_index.coverage_of(inp.features)?;
    let recall = ManifoldIndex::new(inp.features.clone(), k)?.coverage_of(inp.reference)?;
    let realism = realism_scores(inp.features, inp.reference_index)?;
    let rarity = rarity_scores(inp.features, inp.reference_index)?;
    let (hallucination_rate, mode_coverage) = match inp.modes {
        Some(m) => {
            let s = mode_stats(inp.features, m)?;
            (Some(s.hallucination_rate), s.coverage)
        }
        None => (None, vec![]),
    };
    let mut names = Vec::new();
    let mut arrays = Vec::new();
    for (name, s) in inp.extra_scores {
        if s.len() != n {
            return Err(Error::Dimension {
                layer: format!("score {name}"),
                expected: n,
                got: s.len(),
            });
        }
        names.push(name.clone());
        arrays.push(s.clone());
    }
    names.push("realism".into());
    arrays.push(realism.clone());
    names.push("rarity".into());
    arrays.push(rarity.clone());
    let spearman = if n >= 2 { spearman_matrix(&arrays)? } else { vec![] };
    if spearman.is_empty() {
        names.clear();
    }
    Ok(MetricReport {
        label: inp.label.to_string(),
        n,
        fid,
        precision,
        recall,
        hallucination_rate,
        mode_coverage,
        seed_ids: inp.seed_ids.to_vec(),
        realism,
        rarity,
        spearman_names: names,
        spearman,
    })
}
