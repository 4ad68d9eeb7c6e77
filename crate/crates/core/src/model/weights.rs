// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `DAVEWGT1` weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DAVEWGT1"                      8 bytes
//! u32 config length, UTF-8 JSON   model config
//! repeated until EOF:
//!   u16 name length, name bytes
//!   u8 ndim, ndim × u32 dims
//!   product(dims) × f32 payload
//! ```
//!
//! The container is kept verbatim (config text and record order) so that a
//! load/save cycle reproduces the original bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DaveError, Result};

pub const WEIGHT_MAGIC: &[u8; 8] = b"DAVEWGT1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub config_json: String,
    pub tensors: Vec<NamedTensor>,
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != WEIGHT_MAGIC {
            return Err(DaveError::Format(format!(
                "bad magic {:?}, expected DAVEWGT1",
                String::from_utf8_lossy(&magic)
            )));
        }
        let len = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; len];
        read_exact(&mut r, &mut cfg)?;
        let config_json = String::from_utf8(cfg)
            .map_err(|e| DaveError::Format(format!("config is not UTF-8: {e}")))?;

        let mut tensors = Vec::new();
        loop {
            let mut len_buf = [0u8; 2];
            // Clean EOF is only allowed on a record boundary.
            match r.read(&mut len_buf[..1])? {
                0 => break,
                _ => read_exact(&mut r, &mut len_buf[1..])?,
            }
            let name_len = u16::from_le_bytes(len_buf) as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| DaveError::Format(format!("tensor name is not UTF-8: {e}")))?;
            let mut ndim = [0u8; 1];
            read_exact(&mut r, &mut ndim)?;
            let mut dims = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                dims.push(read_u32(&mut r)? as usize);
            }
            let count: usize = dims.iter().product();
            let mut payload = vec![0u8; count * 4];
            read_exact(&mut r, &mut payload)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        Ok(Self {
            config_json,
            tensors,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(WEIGHT_MAGIC)?;
        w.write_all(&(self.config_json.len() as u32).to_le_bytes())?;
        w.write_all(self.config_json.as_bytes())?;
        for t in &self.tensors {
            if t.name.len() > u16::MAX as usize || t.dims.len() > u8::MAX as usize {
                return Err(DaveError::Format(format!("tensor {} cannot be encoded", t.name)));
            }
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(DaveError::Schema(format!(
                    "tensor {} has dims {:?} but {} values",
                    t.name,
                    t.dims,
                    t.data.len()
                )));
            }
            w.write_all(&(t.name.len() as u16).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.dims.len() as u8])?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(DaveError::Io)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightFile {
        WeightFile {
            config_json: "{\"a\":1}".into(),
            tensors: vec![
                NamedTensor::new("x", &[2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]),
                NamedTensor::new("b", &[1], vec![0.5]),
            ],
        }
    }

    #[test]
    fn byte_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"DAVEWGT1");
        assert_eq!(&bytes[8..12], &7u32.to_le_bytes());
        assert_eq!(&bytes[12..19], b"{\"a\":1}");
        assert_eq!(&bytes[19..21], &1u16.to_le_bytes());
        assert_eq!(bytes[21], b'x');
        assert_eq!(bytes[22], 2);
        assert_eq!(&bytes[23..27], &2u32.to_le_bytes());
        assert_eq!(&bytes[27..31], &3u32.to_le_bytes());
        assert_eq!(&bytes[31..35], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 31 + 24 + 2 + 1 + 1 + 4 + 4);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let back = WeightFile::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(
            WeightFile::read_from(bytes.as_slice()),
            Err(DaveError::Format(_))
        ));
    }

    #[test]
    fn truncation_is_an_io_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [4, 10, 20, 30, bytes.len() - 1] {
            assert!(
                matches!(WeightFile::read_from(&bytes[..cut]), Err(DaveError::Io(_))),
                "cut at {cut}"
            );
        }
    }
}
