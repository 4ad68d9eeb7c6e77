// SPDX-License-Identifier: MIT OR Apache-2.0

//! `DAVEMAP1` raw attribution maps: the magic, `u32` rank, `u32` dims, then
//! `f64` values, all little-endian.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dave_core::Tensor;

pub const MAP_MAGIC: &[u8; 8] = b"DAVEMAP1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = MAP_MAGIC.to_vec();
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..8] != MAP_MAGIC {
        bail!("format error: not a DAVEMAP1 file");
    }
    let word = |i: usize| -> Result<usize> {
        let b = bytes
            .get(i..i + 4)
            .context("format error: truncated DAVEMAP1 header")?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    };
    let ndim = word(8)?;
    let dims = (0..ndim)
        .map(|i| word(12 + 4 * i))
        .collect::<Result<Vec<_>>>()?;
    let start = 12 + 4 * ndim;
    let n: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != 8 * n {
        bail!(
            "format error: DAVEMAP1 payload has {} bytes, expected {}",
            payload.len(),
            8 * n
        );
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(&dims, data)?)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)).with_context(|| format!("writing {}", path.display()))
}
