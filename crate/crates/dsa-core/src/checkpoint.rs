//! Model checkpoint file format ("DSAV").
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  b"DSAV"
//! version u16 = 1
//! count   u32                  number of tensor records
//! per tensor:
//!   name_len u16, name utf-8 bytes
//!   rank     u8,  dims u32 × rank
//!   payload  f32 × prod(dims)  row-major
//! ```
//!
//! The first record is named `__config` and carries the model config as
//! JSON text: its payload is raw u8 bytes (rank 1, dims = [byte length]),
//! not f32s. Weights are stored f32 — loading a checkpoint quantizes; all
//! in-memory math stays f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DsaError, Result};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTParams};

pub const MAGIC: [u8; 4] = *b"DSAV";
pub const VERSION: u16 = 1;
const CONFIG_NAME: &str = "__config";

fn read_exact(r: &mut impl Read, buf: &mut [u8], detail: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DsaError::Truncated { what: "checkpoint", detail: detail.to_string() }
        } else {
            DsaError::Io(e)
        }
    })
}

fn read_u16(r: &mut impl Read, detail: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, detail)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, detail: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, detail)?;
    Ok(u32::from_le_bytes(b))
}

/// Serializes config JSON plus named tensors to any writer.
pub fn write_dsav(w: &mut impl Write, config_json: &str, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = tensors.len() as u32 + 1;
    w.write_all(&count.to_le_bytes())?;

    // leading config record: u8 payload
    let cbytes = config_json.as_bytes();
    w.write_all(&(CONFIG_NAME.len() as u16).to_le_bytes())?;
    w.write_all(CONFIG_NAME.as_bytes())?;
    w.write_all(&[1u8])?;
    w.write_all(&(cbytes.len() as u32).to_le_bytes())?;
    w.write_all(cbytes)?;

    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(DsaError::Malformed { what: "checkpoint", detail: format!("tensor name too long: {name}") });
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        let rank = t.shape().len() as u8;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a DSAV stream back into (config JSON, named tensors).
pub fn read_dsav(r: &mut impl Read) -> Result<(String, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "missing magic")?;
    if magic != MAGIC {
        return Err(DsaError::BadMagic { what: "checkpoint", expected: MAGIC, found: magic });
    }
    let version = read_u16(r, "missing version")?;
    if version != VERSION {
        return Err(DsaError::VersionMismatch { what: "checkpoint", found: version, supported: VERSION });
    }
    let count = read_u32(r, "missing tensor count")? as usize;
    if count == 0 {
        return Err(DsaError::Malformed { what: "checkpoint", detail: "zero tensor records".into() });
    }

    let mut config_json = None;
    let mut tensors = Vec::with_capacity(count - 1);
    for i in 0..count {
        let name_len = read_u16(r, &format!("tensor {i}: missing name length"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(r, &mut name_bytes, &format!("tensor {i}: name cut short"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| DsaError::Malformed {
            what: "checkpoint",
            detail: format!("tensor {i}: name is not UTF-8"),
        })?;
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank, &format!("tensor {name}: missing rank"))?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for d in 0..rank[0] {
            dims.push(read_u32(r, &format!("tensor {name}: missing dim {d}"))? as usize);
        }
        let numel: usize = dims.iter().product();

        if name == CONFIG_NAME {
            let mut bytes = vec![0u8; numel];
            read_exact(r, &mut bytes, "config payload cut short")?;
            let text = String::from_utf8(bytes).map_err(|_| DsaError::Malformed {
                what: "checkpoint",
                detail: "config payload is not UTF-8".into(),
            })?;
            config_json = Some(text);
            continue;
        }

        let mut payload = vec![0u8; numel * 4];
        read_exact(r, &mut payload, &format!("tensor {name}: payload cut short"))?;
        let data: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::from_f32(dims, &data).map_err(|e| DsaError::Malformed {
            what: "checkpoint",
            detail: format!("tensor {name}: {e}"),
        })?;
        tensors.push((name, t));
    }
    let config_json = config_json.ok_or(DsaError::Malformed {
        what: "checkpoint",
        detail: "no __config record".into(),
    })?;
    Ok((config_json, tensors))
}

/// Writes model parameters (config included) to `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ViTParams) -> Result<()> {
    let config_json = serde_json::to_string(&params.cfg)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_dsav(&mut w, &config_json, &params.named())?;
    w.flush()?;
    Ok(())
}

/// Loads model parameters from `path`. Weights come back f32-quantized.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ViTParams> {
    let mut r = BufReader::new(File::open(path)?);
    let (config_json, tensors) = read_dsav(&mut r)?;
    let cfg: ViTConfig = serde_json::from_str(&config_json)?;
    ViTParams::from_named(cfg, tensors)
}
