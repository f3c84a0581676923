//! Binary checkpoints of trained parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MODUREC\0"
//! version      u32      FORMAT_VERSION
//! header_len   u32
//! header       JSON     CheckpointHeader
//! n_tensors    u32
//! per tensor:
//!   name_len u32, name (utf-8), ndim u32, dims u64 x ndim,
//!   values f64 x prod(dims), row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"MODUREC\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub num_users: usize,
    pub num_items: usize,
    pub user_feature_dim: usize,
    pub item_feature_dim: usize,
    /// Free-form run description (dataset, split, seed).
    #[serde(default)]
    pub run: serde_json::Value,
}

impl CheckpointHeader {
    pub fn input_dim(&self) -> usize {
        match self.model.orientation {
            crate::Orientation::AsWritten => self.num_items,
            crate::Orientation::Transposed => self.num_users,
        }
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write(w: &mut impl Write, header: &CheckpointHeader, params: &ModelParams) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    let json = serde_json::to_vec(header)?;
    put_u32(w, json.len() as u32)?;
    w.write_all(&json)?;
    let tensors = params.tensors();
    put_u32(w, tensors.len() as u32)?;
    for (name, t) in tensors {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.ndim() as u32)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read(r: &mut impl Read) -> Result<(CheckpointHeader, ModelParams)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut json = vec![0u8; get_u32(r)? as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut params = ModelParams::zeros(
        &header.model,
        header.input_dim(),
        header.user_feature_dim,
        header.item_feature_dim,
    );
    let expected = params.tensors().len();
    let count = get_u32(r)? as usize;
    if count != expected {
        return Err(CheckpointError::Tensor {
            name: "*".into(),
            message: format!("{count} tensors stored, {expected} expected"),
        });
    }
    for (name, mut slot) in params.tensors_mut() {
        let mut stored = vec![0u8; get_u32(r)? as usize];
        r.read_exact(&mut stored)?;
        let stored = String::from_utf8_lossy(&stored).into_owned();
        let bad = |message: String| CheckpointError::Tensor { name: name.clone(), message };
        if stored != name {
            return Err(bad(format!("found {stored:?} in its place")));
        }
        let ndim = get_u32(r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(get_u64(r)? as usize);
        }
        if dims != slot.shape() {
            return Err(bad(format!("shape {dims:?}, expected {:?}", slot.shape())));
        }
        let mut buf = [0u8; 8];
        for v in slot.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    Ok((header, params))
}

pub fn save(path: &Path, header: &CheckpointHeader, params: &ModelParams) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write(&mut w, header, params)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
