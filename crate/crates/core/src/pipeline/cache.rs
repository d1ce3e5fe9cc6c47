//! Content-addressed stage directories.
//!
//! A stage writes its artifacts into `<output>/<name>-<hash12>/` and then a
//! `stamp.json` listing the SHA-256 of every artifact. A directory without a
//! stamp is an interrupted run and is recomputed; a stamp whose artifacts no
//! longer hash to the recorded values is a cache error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::sha256_hex;

pub const STAMP_FILE: &str = "stamp.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamp {
    pub stage: String,
    pub input_hash: String,
    /// Artifact file name to SHA-256 hex.
    pub artifacts: BTreeMap<String, String>,
}

pub fn stage_dir_name(stage: &str, input_hash: &str) -> String {
    format!("{stage}-{}", &input_hash[..12.min(input_hash.len())])
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hashes every artifact in `dir` and writes the stamp last.
pub fn write_stamp(dir: &Path, stage: &str, input_hash: &str, artifacts: &[String]) -> Result<Stamp> {
    let mut map = BTreeMap::new();
    for a in artifacts {
        map.insert(a.clone(), file_hash(&dir.join(a))?);
    }
    let stamp = Stamp {
        stage: stage.to_string(),
        input_hash: input_hash.to_string(),
        artifacts: map,
    };
    let path = dir.join(STAMP_FILE);
    let text = serde_json::to_string_pretty(&stamp).expect("stamp serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(stamp)
}

/// Reads and verifies the stamp of `dir`. `None` when the stage never
/// completed there.
pub fn read_stamp(dir: &Path, stage: &str, input_hash: &str) -> Result<Option<Stamp>> {
    let path = dir.join(STAMP_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let stamp: Stamp =
        serde_json::from_str(&text).map_err(|e| Error::StaleCache(format!("{}: {e}", path.display())))?;
    if stamp.stage != stage || stamp.input_hash != input_hash {
        return Err(Error::StaleCache(format!(
            "{} belongs to stage {} with input {}",
            dir.display(),
            stamp.stage,
            stamp.input_hash
        )));
    }
    verify_artifacts(dir, &stamp.artifacts)?;
    Ok(Some(stamp))
}

pub fn verify_artifacts(dir: &Path, artifacts: &BTreeMap<String, String>) -> Result<()> {
    for (name, expected) in artifacts {
        let p = dir.join(name);
        let found = if p.exists() {
            file_hash(&p)?
        } else {
            "missing".to_string()
        };
        if &found != expected {
            return Err(Error::HashMismatch {
                what: p.display().to_string(),
                expected: expected.clone(),
                found,
            });
        }
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}
