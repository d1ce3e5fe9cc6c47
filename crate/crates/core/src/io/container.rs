//! Self-describing binary container used for checkpoints, Laplace posteriors
//! and scored-record sidecars.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic      4 bytes  "GUNC"
//! version    u16      FORMAT_VERSION
//! kind       u8       ContainerKind
//! count      u32      number of entries
//! entries    count × { key_len u16, key utf-8, tag u8, payload }
//! checksum   32 bytes SHA-256 of every preceding byte
//! ```
//!
//! Payloads by tag: `0` u64, `1` f64, `2` string (u32 length + utf-8),
//! `3` f64 array (u64 count + values), `4` u64 array (u64 count + values).
//! Keys are unique and written in sorted order, so encoding is canonical.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GUNC";
pub const FORMAT_VERSION: u16 = 1;
const CHECKSUM_LEN: usize = 32;
const HEADER_LEN: usize = 4 + 2 + 1 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ContainerKind {
    Checkpoint = 1,
    Laplace = 2,
    Records = 3,
}

impl ContainerKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(ContainerKind::Checkpoint),
            2 => Ok(ContainerKind::Laplace),
            3 => Ok(ContainerKind::Records),
            other => Err(Error::Decode(format!("unknown container kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    U64(u64),
    F64(f64),
    Str(String),
    F64s(Vec<f64>),
    U64s(Vec<u64>),
}

impl Value {
    fn tag(&self) -> u8 {
        match self {
            Value::U64(_) => 0,
            Value::F64(_) => 1,
            Value::Str(_) => 2,
            Value::F64s(_) => 3,
            Value::U64s(_) => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    entries: BTreeMap<String, Value>,
}

impl Container {
    pub fn new(kind: ContainerKind) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Value) -> &mut Self {
        self.entries.insert(key.into(), value);
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Result<&Value> {
        self.entries
            .get(key)
            .ok_or_else(|| Error::Decode(format!("missing entry `{key}`")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        match self.get(key)? {
            Value::U64(v) => Ok(*v),
            _ => Err(type_error(key, "u64")),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        usize::try_from(self.u64(key)?).map_err(|_| Error::Decode(format!("`{key}` overflows usize")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        match self.get(key)? {
            Value::F64(v) => Ok(*v),
            _ => Err(type_error(key, "f64")),
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        match self.get(key)? {
            Value::Str(v) => Ok(v),
            _ => Err(type_error(key, "string")),
        }
    }

    pub fn f64s(&self, key: &str) -> Result<&[f64]> {
        match self.get(key)? {
            Value::F64s(v) => Ok(v),
            _ => Err(type_error(key, "f64 array")),
        }
    }

    pub fn u64s(&self, key: &str) -> Result<&[u64]> {
        match self.get(key)? {
            Value::U64s(v) => Ok(v),
            _ => Err(type_error(key, "u64 array")),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (key, value) in &self.entries {
            out.extend_from_slice(&(key.len() as u16).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.push(value.tag());
            match value {
                Value::U64(v) => out.extend_from_slice(&v.to_le_bytes()),
                Value::F64(v) => out.extend_from_slice(&v.to_le_bytes()),
                Value::Str(s) => {
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
                Value::F64s(vs) => {
                    out.extend_from_slice(&(vs.len() as u64).to_le_bytes());
                    vs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                Value::U64s(vs) => {
                    out.extend_from_slice(&(vs.len() as u64).to_le_bytes());
                    vs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies a container. Never panics on malformed input.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(Error::Decode("container truncated".into()));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(Error::Decode("container checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Decode(format!("unsupported container version {version}")));
        }
        let kind = ContainerKind::from_byte(r.u8()?)?;
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        let mut last_key: Option<String> = None;
        for _ in 0..count {
            let klen = r.u16()? as usize;
            let key = std::str::from_utf8(r.take(klen)?)
                .map_err(|_| Error::Decode("entry key is not utf-8".into()))?
                .to_string();
            if last_key.as_ref().is_some_and(|k| *k >= key) {
                return Err(Error::Decode(format!("entry `{key}` out of order or duplicated")));
            }
            let value = match r.u8()? {
                0 => Value::U64(r.u64()?),
                1 => Value::F64(f64::from_le_bytes(r.array8()?)),
                2 => {
                    let n = r.u32()? as usize;
                    let s = std::str::from_utf8(r.take(n)?)
                        .map_err(|_| Error::Decode(format!("entry `{key}` is not utf-8")))?;
                    Value::Str(s.to_string())
                }
                3 => {
                    let n = r.count()?;
                    Value::F64s(
                        (0..n)
                            .map(|_| r.array8().map(f64::from_le_bytes))
                            .collect::<Result<_>>()?,
                    )
                }
                4 => {
                    let n = r.count()?;
                    Value::U64s((0..n).map(|_| r.u64()).collect::<Result<_>>()?)
                }
                t => return Err(Error::Decode(format!("entry `{key}` has unknown tag {t}"))),
            };
            last_key = Some(key.clone());
            entries.insert(key, value);
        }
        if r.pos != body.len() {
            return Err(Error::Decode("trailing bytes after last entry".into()));
        }
        Ok(Self { kind, entries })
    }

    pub fn expect_kind(self, kind: ContainerKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Decode(format!(
                "expected a {kind:?} container, found {:?}",
                self.kind
            )));
        }
        Ok(self)
    }
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn type_error(key: &str, ty: &str) -> Error {
    Error::Decode(format!("entry `{key}` is not a {ty}"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Decode("unexpected end of container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array8(&mut self) -> Result<[u8; 8]> {
        Ok(self.take(8)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("length checked")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array8()?))
    }

    /// Element count of an 8-byte-per-element array, bounded by what is left.
    fn count(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) / 8;
        if n > left as u64 {
            return Err(Error::Decode(format!("array of {n} elements exceeds the container")));
        }
        Ok(n as usize)
    }
}
