//! Text and binary formats for scored seeds, embeddings and ensembles.
//!
//! * records CSV: `seed_id,cond,entropy` (`cond` may be empty)
//! * records sidecar: a [`Container`] holding samples, replicas, features
//!   and variances of every record
//! * embeddings CSV: `sample_id,e_0,...,e_{d-1}`
//! * ensemble manifest CSV: `path,seed`
//! * score CSV: `seed_id,score`

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::PathBuf;

use super::container::{Container, ContainerKind, Value};
use crate::error::{Error, Result};
use crate::uncertainty::UncertaintyRecord;

const NO_COND: u64 = u64::MAX;

/// One row of the records CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub seed_id: u64,
    pub cond: Option<usize>,
    pub entropy: f64,
}

pub fn write_records_csv<W: Write>(records: &[UncertaintyRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed_id", "cond", "entropy"])?;
    for r in records {
        w.write_record([
            r.seed_id.to_string(),
            r.cond.map(|c| c.to_string()).unwrap_or_default(),
            format!("{:?}", r.score),
        ])?;
    }
    w.flush().map_err(|e| Error::io("records csv", e))?;
    Ok(())
}

fn expect_header<R: Read>(r: &mut csv::Reader<R>, want: &[&str]) -> Result<()> {
    let h = r.headers()?;
    if h.iter().ne(want.iter().copied()) {
        return Err(Error::Decode(format!("expected header `{}`", want.join(","))));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Decode(format!("row {line}: bad {what} `{s}`")))
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_reader(input);
    expect_header(&mut r, &["seed_id", "cond", "entropy"])?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Decode(format!("row {}: expected 3 fields", i + 1)));
        }
        let cond = if rec[1].trim().is_empty() {
            None
        } else {
            Some(field(&rec[1], "cond", i + 1)?)
        };
        let entropy: f64 = field(&rec[2], "entropy", i + 1)?;
        if entropy.is_nan() {
            return Err(Error::Decode(format!("row {}: entropy is NaN", i + 1)));
        }
        rows.push(ScoreRow {
            seed_id: field(&rec[0], "seed_id", i + 1)?,
            cond,
            entropy,
        });
    }
    Ok(rows)
}

/// Per-sample score CSV `seed_id,score`.
pub fn write_scores_csv<W: Write>(seed_ids: &[u64], scores: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed_id", "score"])?;
    for (id, s) in seed_ids.iter().zip(scores) {
        w.write_record([id.to_string(), format!("{s:?}")])?;
    }
    w.flush().map_err(|e| Error::io("score csv", e))?;
    Ok(())
}

pub fn encode_records(records: &[UncertaintyRecord], noise_var: f64, rule: &str) -> Result<Vec<u8>> {
    let first = records.first();
    let dim = first.map_or(0, |r| r.sample.len());
    let m = first.map_or(0, |r| r.replicas.len());
    let fdim = first.and_then(|r| r.features.first()).map_or(0, Vec::len);
    let mut samples = Vec::with_capacity(records.len() * dim);
    let mut replicas = Vec::with_capacity(records.len() * m * dim);
    let mut features = Vec::with_capacity(records.len() * (m + 1) * fdim);
    let mut variance = Vec::with_capacity(records.len() * fdim);
    for r in records {
        if r.sample.len() != dim
            || r.replicas.len() != m
            || r.replicas.iter().any(|x| x.len() != dim)
            || r.features.len() != m + 1
            || r.features.iter().any(|f| f.len() != fdim)
            || r.variance.len() != fdim
        {
            return Err(Error::Dimension {
                layer: format!("record {}", r.seed_id),
                expected: dim,
                got: r.sample.len(),
            });
        }
        samples.extend(&r.sample);
        r.replicas.iter().for_each(|x| replicas.extend(x));
        r.features.iter().for_each(|f| features.extend(f));
        variance.extend(&r.variance);
    }
    let mut c = Container::new(ContainerKind::Records);
    c.insert("seed_ids", Value::U64s(records.iter().map(|r| r.seed_id).collect()))
        .insert(
            "conds",
            Value::U64s(records.iter().map(|r| r.cond.map_or(NO_COND, |c| c as u64)).collect()),
        )
        .insert("scores", Value::F64s(records.iter().map(|r| r.score).collect()))
        .insert("dim", Value::U64(dim as u64))
        .insert("feature_dim", Value::U64(fdim as u64))
        .insert("replica_count", Value::U64(m as u64))
        .insert("samples", Value::F64s(samples))
        .insert("replicas", Value::F64s(replicas))
        .insert("features", Value::F64s(features))
        .insert("variance", Value::F64s(variance))
        .insert("noise_var", Value::F64(noise_var))
        .insert("rule", Value::Str(rule.to_string()));
    Ok(c.encode())
}

/// Decoded sidecar: records plus the scoring parameters stored with them.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordSet {
    pub records: Vec<UncertaintyRecord>,
    pub noise_var: f64,
    pub rule: String,
}

fn sized(n: usize, parts: &[usize], got: usize, what: &str) -> Result<()> {
    let want = parts
        .iter()
        .try_fold(n, |a, &b| a.checked_mul(b))
        .ok_or_else(|| Error::Decode(format!("{what}: size overflow")))?;
    if want != got {
        return Err(Error::Decode(format!("{what}: expected {want} values, found {got}")));
    }
    Ok(())
}

pub fn decode_records(bytes: &[u8]) -> Result<RecordSet> {
    let c = Container::decode(bytes)?.expect_kind(ContainerKind::Records)?;
    let ids = c.u64s("seed_ids")?;
    let conds = c.u64s("conds")?;
    let scores = c.f64s("scores")?;
    let n = ids.len();
    if conds.len() != n || scores.len() != n {
        return Err(Error::Decode("record columns have different lengths".into()));
    }
    let (dim, fdim, m) = (c.usize("dim")?, c.usize("feature_dim")?, c.usize("replica_count")?);
    let samples = c.f64s("samples")?;
    let replicas = c.f64s("replicas")?;
    let features = c.f64s("features")?;
    let variance = c.f64s("variance")?;
    sized(n, &[dim], samples.len(), "samples")?;
    sized(n, &[m, dim], replicas.len(), "replicas")?;
    let m1 = m
        .checked_add(1)
        .ok_or_else(|| Error::Decode("replica count overflow".into()))?;
    sized(n, &[m1, fdim], features.len(), "features")?;
    sized(n, &[fdim], variance.len(), "variance")?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let cond = match conds[i] {
            NO_COND => None,
            c => Some(usize::try_from(c).map_err(|_| Error::Decode("condition overflows usize".into()))?),
        };
        records.push(UncertaintyRecord {
            seed_id: ids[i],
            cond,
            sample: samples[i * dim..(i + 1) * dim].to_vec(),
            replicas: (0..m)
                .map(|j| replicas[(i * m + j) * dim..(i * m + j + 1) * dim].to_vec())
                .collect(),
            features: (0..m1)
                .map(|j| features[(i * m1 + j) * fdim..(i * m1 + j + 1) * fdim].to_vec())
                .collect(),
            variance: variance[i * fdim..(i + 1) * fdim].to_vec(),
            score: scores[i],
        });
    }
    Ok(RecordSet {
        records,
        noise_var: c.f64("noise_var")?,
        rule: c.str("rule")?.to_string(),
    })
}

/// Reads `sample_id,e_0,...` rows into a lookup table.
pub fn read_embeddings_csv<R: Read>(input: R) -> Result<HashMap<String, Vec<f64>>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 2 || &header[0] != "sample_id" {
        return Err(Error::Decode("embeddings header must start with `sample_id`".into()));
    }
    for j in 1..header.len() {
        if header[j] != format!("e_{}", j - 1) {
            return Err(Error::Decode(format!(
                "embeddings column {j} must be named e_{}",
                j - 1
            )));
        }
    }
    let mut table = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Decode(format!(
                "row {}: expected {} fields",
                i + 1,
                header.len()
            )));
        }
        let values: Vec<f64> = (1..rec.len())
            .map(|j| field::<f64>(&rec[j], "embedding value", i + 1))
            .collect::<Result<_>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Decode(format!("row {}: non-finite embedding", i + 1)));
        }
        let id = rec[0].trim().to_string();
        if table.insert(id.clone(), values).is_some() {
            return Err(Error::Decode(format!("duplicate sample id `{id}`")));
        }
    }
    Ok(table)
}

pub fn write_embeddings_csv<W: Write>(rows: &[(String, Vec<f64>)], out: W) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.1.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..dim).map(|j| format!("e_{j}")));
    w.write_record(&header)?;
    for (id, v) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(v.iter().map(|x| format!("{x:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("embeddings csv", e))?;
    Ok(())
}

/// One ensemble member on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub seed: u64,
}

pub fn write_ensemble_manifest<W: Write>(entries: &[ManifestEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "seed"])?;
    for e in entries {
        w.write_record([e.path.to_string_lossy().into_owned(), e.seed.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("ensemble manifest", e))?;
    Ok(())
}

pub fn read_ensemble_manifest<R: Read>(input: R) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_reader(input);
    expect_header(&mut r, &["path", "seed"])?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 || rec[0].trim().is_empty() {
            return Err(Error::Decode(format!("row {}: expected `path,seed`", i + 1)));
        }
        out.push(ManifestEntry {
            path: PathBuf::from(&rec[0]),
            seed: field(&rec[1], "seed", i + 1)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: u64, cond: Option<usize>) -> UncertaintyRecord {
        UncertaintyRecord {
            seed_id: id,
            cond,
            sample: vec![id as f64, 0.5],
            replicas: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            features: vec![vec![0.1, 0.2], vec![1.0, 2.0], vec![3.0, 4.0]],
            variance: vec![1.001, 1.001],
            score: -1.25 + id as f64,
        }
    }

    #[test]
    fn records_csv_round_trip() {
        let records = vec![rec(0, Some(3)), rec(7, None)];
        let mut buf = Vec::new();
        write_records_csv(&records, &mut buf).unwrap();
        let rows = read_records_csv(&buf[..]).unwrap();
        assert_eq!(
            rows[0],
            ScoreRow {
                seed_id: 0,
                cond: Some(3),
                entropy: -1.25
            }
        );
        assert_eq!(rows[1].cond, None);
    }

    #[test]
    fn sidecar_round_trip() {
        let records = vec![rec(0, Some(3)), rec(7, None)];
        let bytes = encode_records(&records, 1e-3, "entropy").unwrap();
        let back = decode_records(&bytes).unwrap();
        assert_eq!(back.records, records);
        assert_eq!(back.rule, "entropy");
    }

    #[test]
    fn embeddings_and_manifest_round_trip() {
        let rows = vec![
            ("0:0".to_string(), vec![1.0, -2.0]),
            ("0:1".to_string(), vec![0.5, 0.25]),
        ];
        let mut buf = Vec::new();
        write_embeddings_csv(&rows, &mut buf).unwrap();
        let t = read_embeddings_csv(&buf[..]).unwrap();
        assert_eq!(t["0:1"], vec![0.5, 0.25]);
        assert!(read_embeddings_csv("sample_id,e_0\na,1\na,2\n".as_bytes()).is_err());
        assert!(read_embeddings_csv("id,e_0\na,1\n".as_bytes()).is_err());

        let entries = vec![ManifestEntry {
            path: "m/1.ckpt".into(),
            seed: 2,
        }];
        let mut buf = Vec::new();
        write_ensemble_manifest(&entries, &mut buf).unwrap();
        assert_eq!(read_ensemble_manifest(&buf[..]).unwrap(), entries);
        assert!(read_ensemble_manifest("path,seed\n,3\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn text_readers_never_panic(s in ".{0,200}") {
            let _ = read_records_csv(s.as_bytes());
            let _ = read_embeddings_csv(s.as_bytes());
            let _ = read_ensemble_manifest(s.as_bytes());
        }

        #[test]
        fn sidecar_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode_records(&bytes);
        }
    }
}
