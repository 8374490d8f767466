//! Little-endian binary checkpoint:
//!
//! ```text
//! "DGAT"  u32 version
//! u32 field count, then per field: u32 key length, key, u32 value length, value
//! u32 parameter count, then per parameter:
//!     u32 name length, name, u64 rows, u64 cols, rows*cols values
//! ```
//!
//! Config values are UTF-8 text. Parameter values are stored in the
//! precision named by the `precision` field.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::DataError;
use crate::autodiff::{Matrix, ParamStore};
use crate::layers::ModelConfig;
use crate::{Precision, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGAT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained (or freshly initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub config: ModelConfig,
    pub d_in: usize,
    pub params: ParamStore<S>,
}

/// A checkpoint in whichever precision it was written.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyCheckpoint {
    Single(Checkpoint<f32>),
    Double(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn precision(&self) -> Precision {
        match self {
            AnyCheckpoint::Single(_) => Precision::Single,
            AnyCheckpoint::Double(_) => Precision::Double,
        }
    }
}

fn config_fields<S: Scalar>(ck: &Checkpoint<S>) -> Vec<(&'static str, String)> {
    let c = &ck.config;
    vec![
        ("precision", S::PRECISION.to_string()),
        ("kind", c.kind.to_string()),
        ("num_layers", c.num_layers.to_string()),
        ("hidden_dim", c.hidden_dim.to_string()),
        ("num_classes", c.num_classes.to_string()),
        ("leaky_slope", c.leaky_slope.to_string()),
        ("self_loops", c.self_loops.to_string()),
        ("bias", c.bias.to_string()),
        ("aggregation", c.aggregation.to_string()),
        ("seed", c.seed.to_string()),
        ("d_in", ck.d_in.to_string()),
        ("steps", ck.params.steps().to_string()),
    ]
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}

pub fn encode_checkpoint<S: Scalar>(ck: &Checkpoint<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let fields = config_fields(ck);
    put_u32(&mut out, fields.len());
    for (k, v) in &fields {
        put_bytes(&mut out, k.as_bytes());
        put_bytes(&mut out, v.as_bytes());
    }
    put_u32(&mut out, ck.params.len());
    for p in ck.params.params() {
        put_bytes(&mut out, p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for &v in p.value.as_slice() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            DataError::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, DataError> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| DataError::Checkpoint(format!("{what} is not UTF-8")))
    }
}

fn field<'m>(fields: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str, DataError> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| DataError::Checkpoint(format!("missing config field `{key}`")))
}

fn parsed<T: std::str::FromStr>(fields: &BTreeMap<String, String>, key: &str) -> Result<T, DataError> {
    let raw = field(fields, key)?;
    raw.parse()
        .map_err(|_| DataError::Checkpoint(format!("config field `{key}` has bad value `{raw}`")))
}

fn header(r: &mut Reader<'_>) -> Result<BTreeMap<String, String>, DataError> {
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(DataError::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = r.u32("field count")?;
    let mut fields = BTreeMap::new();
    for _ in 0..count {
        let k = r.string("config key")?;
        let v = r.string("config value")?;
        fields.insert(k, v);
    }
    Ok(fields)
}

fn body<S: Scalar>(r: &mut Reader<'_>, fields: &BTreeMap<String, String>) -> Result<Checkpoint<S>, DataError> {
    let kind = field(fields, "kind")?
        .parse()
        .map_err(|e| DataError::Checkpoint(format!("{e}")))?;
    let aggregation = field(fields, "aggregation")?
        .parse()
        .map_err(|e| DataError::Checkpoint(format!("{e}")))?;
    let config = ModelConfig {
        kind,
        num_layers: parsed(fields, "num_layers")?,
        hidden_dim: parsed(fields, "hidden_dim")?,
        num_classes: parsed(fields, "num_classes")?,
        leaky_slope: parsed(fields, "leaky_slope")?,
        self_loops: parsed(fields, "self_loops")?,
        bias: parsed(fields, "bias")?,
        aggregation,
        seed: parsed(fields, "seed")?,
    };
    let d_in = parsed(fields, "d_in")?;
    let steps = parsed(fields, "steps")?;

    let count = r.u32("parameter count")?;
    let mut params = ParamStore::new();
    let width = S::PRECISION.bytes();
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rows = r.u64("rows")? as usize;
        let cols = r.u64("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| DataError::Checkpoint(format!("parameter `{name}` has absurd shape {rows}x{cols}")))?;
        let raw = r.take(n, &format!("values of `{name}`"))?;
        let data = raw.chunks_exact(width).map(S::read_le).collect();
        params
            .insert(name.clone(), Matrix::from_vec(rows, cols, data))
            .map_err(|e| DataError::Checkpoint(format!("parameter `{name}`: {e}")))?;
    }
    if r.pos != r.buf.len() {
        return Err(DataError::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            r.buf.len() - r.pos
        )));
    }
    params.set_steps(steps);
    Ok(Checkpoint { config, d_in, params })
}

/// Decodes a checkpoint written in precision `S`.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>, DataError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let fields = header(&mut r)?;
    let stored = field(&fields, "precision")?;
    if stored.parse::<Precision>().ok() != Some(S::PRECISION) {
        return Err(DataError::Precision {
            expected: S::PRECISION.as_str(),
            found: stored.to_string(),
        });
    }
    body(&mut r, &fields)
}

pub fn save_checkpoint<S: Scalar>(ck: &Checkpoint<S>, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_checkpoint(ck)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>, DataError> {
    decode_checkpoint(&read_file(path)?)
}

/// Loads a checkpoint in its stored precision.
pub fn load_checkpoint_any(path: &Path) -> Result<AnyCheckpoint, DataError> {
    let bytes = read_file(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    let fields = header(&mut r)?;
    match field(&fields, "precision")?.parse::<Precision>() {
        Ok(Precision::Single) => Ok(AnyCheckpoint::Single(body(&mut r, &fields)?)),
        Ok(Precision::Double) => Ok(AnyCheckpoint::Double(body(&mut r, &fields)?)),
        Err(_) => Err(DataError::Checkpoint(format!(
            "unknown precision `{}`",
            field(&fields, "precision")?
        ))),
    }
}
