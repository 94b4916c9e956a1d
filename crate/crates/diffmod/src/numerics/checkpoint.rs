//! Checkpoint file format shared by all modules: a one-line JSON header
//! (format version, config, ordered tensor directory) followed by a raw
//! little-endian f64 payload. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{err_format, Result};
use crate::numerics::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

/// Writes named tensors with an arbitrary JSON config block.
pub fn save(path: &Path, config: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".to_string(),
            byte_offset: offset,
        });
        offset += (t.len() * 8) as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        entries,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header).map_err(|e| err_format!("header encode: {e}"))?;
    w.write_all(b"\n")?;
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back as (config, ordered named tensors).
pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(err_format!("checkpoint truncated before header end"));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| err_format!("header decode: {e}"))?;
    if header.format_version != FORMAT_VERSION {
        return Err(err_format!(
            "unsupported format_version {}",
            header.format_version
        ));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut out = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        if e.dtype != "f64" {
            return Err(err_format!("entry {}: unsupported dtype {}", e.name, e.dtype));
        }
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(err_format!(
                "entry {}: payload ends at {} but needs {}",
                e.name,
                payload.len(),
                end
            ));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_raw(e.shape.clone(), data);
        out.push((e.name.clone(), t));
    }
    Ok((header.config, out))
}
