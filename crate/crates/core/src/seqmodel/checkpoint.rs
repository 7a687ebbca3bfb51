//! Self-describing checkpoint container: a JSON config header followed by
//! named tensors as little-endian 64-bit floats.

use super::{ModelConfig, ModelParams, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"QSEQCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("bad checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&params.config)?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for t in params.tensors() {
        w.write_all(&(t.name.len() as u64).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.rows as u64).to_le_bytes())?;
        w.write_all(&(t.cols as u64).to_le_bytes())?;
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("magic mismatch".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_buf)?;
    let mut nt = [0u8; 4];
    r.read_exact(&mut nt)?;
    let n_tensors = u32::from_le_bytes(nt);
    let mut tensors = Vec::with_capacity(n_tensors as usize);
    for _ in 0..n_tensors {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = vec![0.0; rows * cols];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push(Tensor {
            name,
            rows,
            cols,
            data,
        });
    }
    Ok(ModelParams::from_tensors(config, tensors))
}
