//! Tensor checkpoint container.
//!
//! Layout: a UTF-8 manifest, then a contiguous little-endian `f32` blob.
//!
//! ```text
//! STACKLAB-TENSORS 1
//! <name>\t<dim>x<dim>...\t<offset>
//! ...
//! END <total values>
//! <blob>
//! ```
//!
//! Offsets count `f32` values from the start of the blob. A scalar shape is
//! written as `-`.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{Scalar, Tensor};

const MAGIC: &str = "STACKLAB-TENSORS 1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed container: {0}")]
    Malformed(String),
}

fn malformed(msg: impl Into<String>) -> ContainerError {
    ContainerError::Malformed(msg.into())
}

pub fn encode_tensors<F: Scalar>(tensors: &[(&str, &Tensor<F>)]) -> Vec<u8> {
    let mut manifest = String::from(MAGIC);
    manifest.push('\n');
    let mut offset = 0usize;
    for (name, t) in tensors {
        let dims = if t.shape().is_empty() {
            "-".to_string()
        } else {
            t.shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x")
        };
        manifest.push_str(&format!("{name}\t{dims}\t{offset}\n"));
        offset += t.numel();
    }
    manifest.push_str(&format!("END {offset}\n"));
    let mut bytes = manifest.into_bytes();
    bytes.reserve(offset * 4);
    for (_, t) in tensors {
        for x in t.data() {
            bytes.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, ContainerError> {
    let mut pos = 0usize;
    let mut next_line = || -> Result<&str, ContainerError> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed("unterminated manifest"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| malformed("manifest is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(malformed("bad magic line"));
    }
    let mut records = Vec::new();
    let total = loop {
        let line = next_line()?;
        if let Some(total) = line.strip_prefix("END ") {
            break total
                .parse::<usize>()
                .map_err(|_| malformed(format!("bad END line {line:?}")))?;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dims, offset] = fields[..] else {
            return Err(malformed(format!("bad record {line:?}")));
        };
        let shape: Vec<usize> = if dims == "-" {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| malformed(format!("bad dims {dims:?}"))))
                .collect::<Result<_, _>>()?
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| malformed(format!("bad offset {offset:?}")))?;
        records.push((name.to_string(), shape, offset));
    };
    let blob = &bytes[pos..];
    if blob.len() != total * 4 {
        return Err(malformed(format!(
            "blob holds {} bytes, manifest expects {}",
            blob.len(),
            total * 4
        )));
    }
    let mut out = Vec::with_capacity(records.len());
    for (name, shape, offset) in records {
        let n: usize = shape.iter().product();
        if offset + n > total {
            return Err(malformed(format!("record {name} overruns blob")));
        }
        let data = blob[offset * 4..(offset + n) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| malformed(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_tensors<F: Scalar>(
    path: &Path,
    tensors: &[(&str, &Tensor<F>)],
) -> Result<(), ContainerError> {
    let io = |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = encode_tensors(tensors);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_tensors(&bytes)
}
