//! Flat binary checkpoint container: named float64 arrays with shape
//! headers, all little-endian, plus a plain-text manifest of architecture
//! hyperparameters. Writes are atomic (temp file + rename).
//!
//! Layout:
//!   magic  8 bytes  b"XFCKPT01"
//!   count  u32
//!   per entry:
//!     name_len u16, name bytes (utf-8)
//!     ndim     u8,  dims as u64 each
//!     values   f64 each (dim product)

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{numel, Tensor};

const MAGIC: &[u8; 8] = b"XFCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad checkpoint magic in {path}: expected {expected:02x?}, found {found:02x?}")]
    BadMagic {
        path: String,
        expected: [u8; 8],
        found: [u8; 8],
    },
    #[error("truncated checkpoint {path} while reading {field}")]
    Truncated { path: String, field: &'static str },
    #[error("entry `{name}` has implausible shape {shape:?}")]
    BadShape { name: String, shape: Vec<u64> },
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn io_err(path: &Path, source: io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(t.shape.len() as u8);
        for d in &t.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Write via a sibling temp file then rename, so readers never observe a
/// partially written checkpoint.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let p = path.display().to_string();
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize, field: &'static str| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(CheckpointError::Truncated {
                path: p.clone(),
                field,
            });
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    let magic = take(&mut cur, 8, "magic")?;
    if magic != MAGIC {
        let mut found = [0u8; 8];
        found.copy_from_slice(magic);
        return Err(CheckpointError::BadMagic {
            path: p,
            expected: *MAGIC,
            found,
        });
    }
    let count = u32::from_le_bytes(take(&mut cur, 4, "count")?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(take(&mut cur, 2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(take(&mut cur, name_len, "name")?).into_owned();
        let ndim = take(&mut cur, 1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(
                take(&mut cur, 8, "dimension")?.try_into().unwrap(),
            ));
        }
        let n: u64 = shape.iter().product();
        if n > (1 << 32) {
            return Err(CheckpointError::BadShape { name, shape });
        }
        let shape: Vec<usize> = shape.into_iter().map(|d| d as usize).collect();
        let mut values = Vec::with_capacity(numel(&shape));
        for _ in 0..numel(&shape) {
            values.push(f64::from_le_bytes(
                take(&mut cur, 8, "values")?.try_into().unwrap(),
            ));
        }
        out.push((name, Tensor::new(shape, values)));
    }
    Ok(out)
}

/// Plain-text architecture manifest next to a checkpoint: `key = value`
/// lines in a fixed order.
pub fn save_manifest(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}
