//! `SDIM` sample files.
//!
//! ```text
//! "SDIM" | u16 version=1 | u32 H | u32 W | H·W × f32 image | H·W × u8 mask | u32 volume_id | u32 slice_index
//! ```
//!
//! All integers and floats little-endian, arrays row-major. The domain name
//! is not stored in the file; the manifest records it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Sample;

pub const SDIM_MAGIC: &[u8; 4] = b"SDIM";
pub const SDIM_VERSION: u16 = 1;

pub fn encode_sample(s: &Sample) -> Vec<u8> {
    let (h, w) = (s.image.shape()[0], s.image.shape()[1]);
    let mut out = Vec::with_capacity(22 + 5 * h * w);
    out.extend_from_slice(SDIM_MAGIC);
    out.extend_from_slice(&SDIM_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in s.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.mask);
    out.extend_from_slice(&s.volume_id.to_le_bytes());
    out.extend_from_slice(&s.slice_index.to_le_bytes());
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

pub fn decode_sample(bytes: &[u8], domain: &str) -> Result<Sample> {
    let need = |at: usize, n: usize| -> Result<&[u8]> {
        bytes.get(at..at + n).ok_or_else(|| {
            format_err(
                at.min(bytes.len()),
                format!("truncated: wanted {n} bytes at {at}, file has {}", bytes.len()),
            )
        })
    };
    let u32_at = |at: usize| -> Result<u32> {
        let b = need(at, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    if need(0, 4)? != SDIM_MAGIC {
        return Err(format_err(0, "bad magic, expected SDIM"));
    }
    let vb = need(4, 2)?;
    let version = u16::from_le_bytes([vb[0], vb[1]]);
    if version != SDIM_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let h = u32_at(6)? as usize;
    let w = u32_at(10)? as usize;
    let n = h
        .checked_mul(w)
        .filter(|&n| n > 0 && n.checked_mul(5).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| format_err(6, format!("extents {h}×{w} invalid for a {}-byte file", bytes.len())))?;
    let img = need(14, 4 * n)?;
    let image: Vec<f32> = img
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mask_at = 14 + 4 * n;
    let mask = need(mask_at, n)?.to_vec();
    if let Some(i) = mask.iter().position(|&m| m > 1) {
        return Err(format_err(mask_at + i, format!("mask value {} is not 0/1", mask[i])));
    }
    let tail = mask_at + n;
    let volume_id = u32_at(tail)?;
    let slice_index = u32_at(tail + 4)?;
    if bytes.len() != tail + 8 {
        return Err(format_err(tail + 8, format!("{} trailing bytes", bytes.len() - tail - 8)));
    }
    Ok(Sample {
        image: Tensor::new(vec![h, w], image)?,
        mask,
        volume_id,
        slice_index,
        domain: domain.to_string(),
    })
}

pub fn write_sample(path: &Path, s: &Sample) -> Result<()> {
    std::fs::write(path, encode_sample(s)).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path, domain: &str) -> Result<Sample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes, domain).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}
