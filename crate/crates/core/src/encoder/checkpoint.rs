//! Encoder checkpoint files.
//!
//! Layout: the 8-byte magic `ANECKPT\0`, a little-endian `u32` header length,
//! a JSON header (version, config, step, tensor names and shapes, optimizer
//! step), then every parameter as little-endian `f64` in header order,
//! followed by the Adam first and second moments when present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, AneEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::Tensor;

const MAGIC: &[u8; 8] = b"ANECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: EncoderConfig,
    step: u64,
    tensors: Vec<(String, Vec<usize>)>,
    /// Adam step counter; moments follow the parameters when set.
    adam_t: Option<u64>,
}

fn write_tensors(w: &mut impl Write, tensors: &[Tensor]) -> std::io::Result<()> {
    for t in tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensors(r: &mut impl Read, shapes: &[(String, Vec<usize>)]) -> std::io::Result<Vec<Tensor>> {
    let mut buf = [0u8; 8];
    shapes
        .iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            Ok(Tensor::new(shape.clone(), data))
        })
        .collect()
}

pub fn save_checkpoint(encoder: &AneEncoder, path: &Path) -> Result<()> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: encoder.config.clone(),
        step: encoder.step,
        tensors: encoder.names.iter().cloned().zip(encoder.params.iter().map(|t| t.shape.clone())).collect(),
        adam_t: encoder.adam.as_ref().map(|a| a.t),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let body = (|| {
        w.write_all(MAGIC)?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&json)?;
        write_tensors(&mut w, &encoder.params)?;
        if let Some(a) = &encoder.adam {
            write_tensors(&mut w, &a.m)?;
            write_tensors(&mut w, &a.v)?;
        }
        w.flush()
    })();
    body.map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<AneEncoder> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let truncated = |e: std::io::Error| Error::Checkpoint(format!("{}: {e}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not an encoder checkpoint", path.display())));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(truncated)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(truncated)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", header.version)));
    }
    header.config.validate()?;

    let params = read_tensors(&mut r, &header.tensors).map_err(truncated)?;
    let adam = match header.adam_t {
        Some(t) => {
            let m = read_tensors(&mut r, &header.tensors).map_err(truncated)?;
            let v = read_tensors(&mut r, &header.tensors).map_err(truncated)?;
            Some(AdamState { t, m, v })
        }
        None => None,
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(truncated)? != 0 {
        return Err(Error::Checkpoint(format!("{}: trailing bytes after tensor data", path.display())));
    }
    let names = header.tensors.into_iter().map(|(n, _)| n).collect();
    AneEncoder::from_parts(header.config, names, params, header.step, adam)
}
