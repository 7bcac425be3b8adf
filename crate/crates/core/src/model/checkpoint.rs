//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! magic (8 bytes) | version u32 | config length u32 | config TOML |
//! tensor count u32 | per tensor: name length u32, name, rank u32,
//! dims u64 × rank, values f64 × product(dims).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ModelError};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPDETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<(), ModelError> {
    let config = toml::to_string(&model.config).map_err(|e| bad(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String, ModelError> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| bad("string is not valid UTF-8"))
}

/// Rebuilds the model from its recorded configuration and overwrites every
/// parameter with the stored values.
pub fn read_checkpoint(mut r: impl Read) -> Result<Model, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let config: ModelConfig = toml::from_str(&read_string(&mut r, len)?).map_err(|e| bad(e.to_string()))?;
    let mut model = Model::new(config, 0)?;
    let count = read_u32(&mut r)? as usize;
    if count != model.params.len() {
        return Err(bad(format!("{count} tensors stored, model has {}", model.params.len())));
    }
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, len)?;
        let id = model.params.get(&name).ok_or_else(|| bad(format!("unknown tensor `{name}`")))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape != model.params.value(id).shape() {
            return Err(bad(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                model.params.value(id).shape()
            )));
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        for _ in 0..shape.iter().product::<usize>() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        *model.params.value_mut(id) = Tensor::new(&shape, data)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
