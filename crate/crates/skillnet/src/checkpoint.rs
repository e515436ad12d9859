//! Model persistence. A checkpoint is a single binary file:
//!
//! ```text
//! magic "SKNETCP1" | u64 header length | JSON header
//! | u64 tensor count | tensors...
//! ```
//!
//! Each tensor section is `u32 name length | name | u8 dtype (1 = f64)
//! | u8 rank | u64 dims... | values as little-endian f64`. Model
//! parameters appear first in their creation order, then optimizer
//! moments under `optim.m.` / `optim.v.` prefixes; per-parameter step
//! counts travel in the header. Round-trips are bit-exact and writing
//! the same state twice produces identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamSlot};
use crate::routing::{Skill, SkillRegistry, TaskSpec};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"SKNETCP1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: EncoderConfig,
    skills: Vec<Skill>,
    tasks: Vec<TaskSpec>,
    optimizer_steps: BTreeMap<String, u64>,
}

/// Everything a checkpoint file holds, in memory.
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub registry: SkillRegistry,
    pub tasks: Vec<TaskSpec>,
    pub params: ParamSet,
    /// Adam moments and step counts, empty when saved without an optimizer.
    pub optimizer: BTreeMap<String, AdamSlot>,
}

pub fn save(
    path: &Path,
    config: &EncoderConfig,
    registry: &SkillRegistry,
    tasks: &[TaskSpec],
    params: &ParamSet,
    adam: Option<&Adam>,
) -> Result<()> {
    let slots = adam.map(Adam::slots);
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        skills: registry.iter().cloned().collect(),
        tasks: tasks.to_vec(),
        optimizer_steps: slots
            .map(|s| s.iter().map(|(k, v)| (k.clone(), v.steps)).collect())
            .unwrap_or_default(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;

    let slot_count = slots.map_or(0, |s| 2 * s.len());
    let total = params.len() + slot_count;
    w.write_all(&(total as u64).to_le_bytes()).map_err(io_err)?;
    for p in params.iter() {
        write_tensor(&mut w, p.name(), p.value.shape(), p.value.data()).map_err(io_err)?;
    }
    if let Some(slots) = slots {
        for (name, slot) in slots {
            let shape = params.by_name(name)?.value.shape().to_vec();
            write_tensor(&mut w, &format!("optim.m.{name}"), &shape, &slot.m).map_err(io_err)?;
            write_tensor(&mut w, &format!("optim.v.{name}"), &shape, &slot.v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn write_tensor(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[DTYPE_F64, shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = read_u64(&mut r, path)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, path)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format {} is not supported (expected {})",
            header.format_version, FORMAT_VERSION
        )));
    }

    let count = read_u64(&mut r, path)? as usize;
    let mut params = ParamSet::new();
    let mut moments: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let (name, tensor) = read_tensor(&mut r, path)?;
        if name.starts_with("optim.m.") || name.starts_with("optim.v.") {
            if moments.insert(name.clone(), tensor).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        } else {
            params.add(name, tensor)?;
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after declared tensors",
            path.display()
        )));
    }

    let mut optimizer = BTreeMap::new();
    for (name, steps) in &header.optimizer_steps {
        let mut take = |prefix: &str| -> Result<Vec<f64>> {
            let key = format!("{prefix}{name}");
            let t = moments
                .remove(&key)
                .ok_or_else(|| Error::Format(format!("missing optimizer tensor `{key}`")))?;
            let expected = params.by_name(name)?.value.numel();
            if t.numel() != expected {
                return Err(Error::Format(format!(
                    "optimizer tensor `{key}` has {} values, parameter has {}",
                    t.numel(),
                    expected
                )));
            }
            Ok(t.into_parts().1)
        };
        let m = take("optim.m.")?;
        let v = take("optim.v.")?;
        optimizer.insert(name.clone(), AdamSlot { m, v, steps: *steps });
    }
    if let Some(orphan) = moments.keys().next() {
        return Err(Error::Format(format!(
            "optimizer tensor `{orphan}` has no step count in the header"
        )));
    }

    Ok(Checkpoint {
        config: header.config,
        registry: SkillRegistry::new(header.skills)?,
        tasks: header.tasks,
        params,
        optimizer,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read, path: &Path) -> Result<(String, Tensor)> {
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4, path)?;
    let name_len = u32::from_le_bytes(b4) as usize;
    let mut name = vec![0u8; name_len];
    read_exact(r, &mut name, path)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;

    let mut meta = [0u8; 2];
    read_exact(r, &mut meta, path)?;
    if meta[0] != DTYPE_F64 {
        return Err(Error::Format(format!(
            "tensor `{name}`: unsupported dtype code {}",
            meta[0]
        )));
    }
    let rank = meta[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = read_u64(r, path)? as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Format(format!("tensor `{name}`: dimension overflow")))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(numel);
    let mut b8 = [0u8; 8];
    for _ in 0..numel {
        read_exact(r, &mut b8, path)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok((name, Tensor::new(shape, data)?))
}
