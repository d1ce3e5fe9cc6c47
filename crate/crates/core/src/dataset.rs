//! Toy mixture-of-Gaussians data and the dataset CSV format.
//!
//! Dataset files carry a header `x0,x1,...,cond` followed by one point per
//! row. The `cond` cell holds the mode (class) label and may be empty.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::rng::RngState;

/// Mixture components of the toy distribution, plus the geometric threshold
/// beyond which a point counts as hallucinated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub centers: Vec<Vec<f64>>,
    pub mode_std: f64,
    /// In units of `mode_std`.
    pub hallucination_radius: f64,
}

impl ModeSpec {
    /// `side × side` grid of centers spanning `[-span, span]²`.
    pub fn grid(side: usize, span: f64, mode_std: f64) -> Result<Self> {
        if side == 0 {
            return Err(Error::Config("grid needs at least one mode per side".into()));
        }
        let coord = |i: usize| {
            if side == 1 {
                0.0
            } else {
                -span + 2.0 * span * i as f64 / (side - 1) as f64
            }
        };
        let centers = (0..side)
            .flat_map(|i| (0..side).map(move |j| vec![coord(i), coord(j)]))
            .collect();
        let spec = Self {
            centers,
            mode_std,
            hallucination_radius: 3.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The 25-mode, 5×5 grid on `[-2, 2]²` with standard deviation 0.05.
    pub fn toy25() -> Self {
        Self::grid(5, 2.0, 0.05).expect("valid constants")
    }

    pub fn with_hallucination_radius(mut self, radius: f64) -> Result<Self> {
        self.hallucination_radius = radius;
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Config("mode spec has no centers".into()));
        }
        let d = self.dim();
        if d == 0 || self.centers.iter().any(|c| c.len() != d) {
            return Err(Error::Config("mode centers must share a positive dimension".into()));
        }
        if !(self.mode_std > 0.0) {
            return Err(Error::Config("mode_std must be positive".into()));
        }
        if !(self.hallucination_radius >= 1.0) {
            return Err(Error::Config("hallucination_radius must be at least 1".into()));
        }
        for (i, a) in self.centers.iter().enumerate() {
            for b in &self.centers[i + 1..] {
                if a == b {
                    return Err(Error::Config("mode centers must be distinct".into()));
                }
            }
        }
        Ok(())
    }

    /// `n` points, each from a uniformly chosen mode; labels are mode indices.
    pub fn sample(&self, n: usize, rng: &mut RngState) -> Dataset {
        let d = self.dim();
        let mut points = Matrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        for r in 0..n {
            let k = rng.below(self.len());
            for (v, c) in points.row_mut(r).iter_mut().zip(&self.centers[k]) {
                *v = c + self.mode_std * rng.standard_normal();
            }
            labels.push(Some(k));
        }
        Dataset { points, labels }
    }

    /// Axis-aligned bounding box of the centers, padded by 3 mode stds.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for c in &self.centers {
            for j in 0..d {
                lo[j] = lo[j].min(c[j] - 3.0 * self.mode_std);
                hi[j] = hi[j].max(c[j] + 3.0 * self.mode_std);
            }
        }
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub points: Matrix,
    pub labels: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(points: Matrix, labels: Vec<Option<usize>>) -> Result<Self> {
        if labels.len() != points.rows() {
            return Err(Error::Dimension {
                layer: "dataset labels".into(),
                expected: points.rows(),
                got: labels.len(),
            });
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Labels as a dense vector when every row has one.
    pub fn dense_labels(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            points: self.points.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("cond".into());
        w.write_record(&header)?;
        for (r, row) in self.points.iter_rows().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[r].map(|c| c.to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("dataset csv", e))?;
        Ok(())
    }

    /// Parses the dataset CSV. The header must be `x0,...,x{d-1},cond`.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 2 || header.get(cols - 1) != Some("cond") {
            return Err(Error::Decode("dataset header must end with `cond`".into()));
        }
        let dim = cols - 1;
        for j in 0..dim {
            if header.get(j) != Some(format!("x{j}").as_str()) {
                return Err(Error::Decode(format!("dataset column {j} must be named x{j}")));
            }
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != cols {
                return Err(Error::Decode(format!("row {} has {} fields", line + 1, rec.len())));
            }
            for j in 0..dim {
                let v: f64 = rec[j]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Decode(format!("row {}: bad number `{}`", line + 1, &rec[j])))?;
                if !v.is_finite() {
                    return Err(Error::Decode(format!("row {}: non-finite coordinate", line + 1)));
                }
                data.push(v);
            }
            let c = rec[dim].trim();
            labels.push(if c.is_empty() {
                None
            } else {
                Some(
                    c.parse()
                        .map_err(|_| Error::Decode(format!("row {}: bad cond `{c}`", line + 1)))?,
                )
            });
        }
        let points = Matrix::from_vec(labels.len(), dim, data)?;
        Dataset::new(points, labels)
    }
}
