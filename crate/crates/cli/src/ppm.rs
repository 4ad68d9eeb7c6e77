// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary PPM (P6, maxval 255) images.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dave_core::{ModelConfig, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

impl Ppm {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = [0usize; 3];
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            bail!("format error: not a binary PPM (expected magic P6)");
        }
        pos += 2;
        for field in fields.iter_mut() {
            // Whitespace and comments may precede every header field.
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                bail!("format error: malformed PPM header");
            }
            *field = std::str::from_utf8(&bytes[start..pos])?
                .parse()
                .context("format error: PPM header value out of range")?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            bail!("format error: PPM maxval must be 255, got {maxval}");
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            bail!("format error: malformed PPM header");
        }
        pos += 1;
        let expected = width * height * 3;
        let pixels = &bytes[pos..];
        if pixels.len() != expected {
            bail!(
                "format error: PPM payload has {} bytes, expected {expected}",
                pixels.len()
            );
        }
        Ok(Self {
            width,
            height,
            pixels: pixels.to_vec(),
        })
    }

    /// Canonical encoding: `P6\n{w} {h}\n255\n` followed by the pixels.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).with_context(|| format!("writing {}", path.display()))
    }

    /// `[3, H, W]` tensor with channels scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |idx| {
            let (c, rem) = (idx / (h * w), idx % (h * w));
            f64::from(self.pixels[rem * 3 + c]) / 255.0
        })
    }

    /// Model input tensor: unit scaling followed by the config's
    /// per-channel standardization.
    pub fn to_model(&self, config: &ModelConfig) -> Tensor {
        config.standardize(&self.to_unit())
    }

    /// Inverse of [`Ppm::to_model`]; out-of-range values are clamped.
    pub fn from_model(config: &ModelConfig, x: &Tensor) -> Result<Self> {
        Self::from_unit(&config.unstandardize(x))
    }

    /// Clamps to `[0, 1]` and rounds to the nearest of 256 levels.
    pub fn from_unit(t: &Tensor) -> Result<Self> {
        let &[3, h, w] = t.shape() else {
            bail!("expected a [3, H, W] image, got {:?}", t.shape());
        };
        let mut pixels = vec![0u8; 3 * h * w];
        for c in 0..3 {
            for p in 0..h * w {
                let v = t.data()[c * h * w + p].clamp(0.0, 1.0);
                pixels[p * 3 + c] = (v * 255.0).round() as u8;
            }
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }
}
