//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "LAMCKPT1"
//! version u32      currently 1
//! kind    u8       0 = linear LAM, 1 = grid model
//! seed    u64
//! n_meta  u32      then n_meta × { name: u32 len + bytes, value: f64 }
//! n_arr   u32      then n_arr  × { name: u32 len + bytes,
//!                                  ndim: u32, dims: ndim × u64,
//!                                  data: prod(dims) × f64 }
//! ```
//!
//! Floats are stored bit-exactly, so save → load round-trips parameters
//! bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LAMCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (supported: {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("unknown checkpoint kind tag {0}")]
    BadKind(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing {what} \"{name}\"")]
    Missing { what: &'static str, name: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    LinearLam,
    GridModel,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::LinearLam => 0,
            CheckpointKind::GridModel => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, CheckpointError> {
        match tag {
            0 => Ok(CheckpointKind::LinearLam),
            1 => Ok(CheckpointKind::GridModel),
            other => Err(CheckpointError::BadKind(other)),
        }
    }
}

/// Named scalars plus named shaped arrays.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub seed: u64,
    pub meta: Vec<(String, f64)>,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn meta_value(&self, name: &str) -> Result<f64, CheckpointError> {
        self.meta
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| CheckpointError::Missing { what: "meta field", name: name.into() })
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &[f64]), CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| CheckpointError::Missing { what: "array", name: name.into() })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.kind.tag()])?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (name, value) in &self.meta {
            write_name(&mut w, name)?;
            w.write_all(&value.to_le_bytes())?;
        }
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.arrays {
            write_name(&mut w, name)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            debug_assert_eq!(shape.iter().product::<usize>(), data.len());
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let mut kind_tag = [0u8; 1];
        r.read_exact(&mut kind_tag).map_err(truncated)?;
        let kind = CheckpointKind::from_tag(kind_tag[0])?;
        let seed = read_u64(&mut r)?;

        let n_meta = read_u32(&mut r)? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let name = read_name(&mut r)?;
            meta.push((name, read_f64(&mut r)?));
        }
        let n_arr = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(n_arr);
        for _ in 0..n_arr {
            let name = read_name(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Corrupt(format!("array {name} has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            if len > (1 << 30) {
                return Err(CheckpointError::Corrupt(format!("array {name} is implausibly large")));
            }
            let mut data = vec![0.0f64; len];
            for v in data.iter_mut() {
                *v = read_f64(&mut r)?;
            }
            arrays.push((name, shape, data));
        }
        Ok(Checkpoint { kind, seed, meta, arrays })
    }
}

fn truncated(_: std::io::Error) -> CheckpointError {
    CheckpointError::Corrupt("file truncated".into())
}

fn write_name(w: &mut impl Write, name: &str) -> Result<(), CheckpointError> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    if len > 1024 {
        return Err(CheckpointError::Corrupt("name too long".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt("name is not utf-8".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(f64::from_le_bytes(buf))
}
