// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation manifests.
//!
//! One record per line: `IMAGE CLASS [R0 C0 R1 C1]... [map=PATH]`. Blank
//! lines and lines starting with `#` are skipped. Relative paths resolve
//! against the manifest's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dave_core::metrics::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// 1-based line number in the manifest.
    pub line: usize,
    pub image: PathBuf,
    pub class: usize,
    pub boxes: Vec<BBox>,
    /// Precomputed `DAVEMAP1` map to score instead of attributing.
    pub map: Option<PathBuf>,
}

pub fn parse(text: &str, base: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        out.push(parse_record(content, line, base).with_context(|| format!("manifest line {line}"))?);
    }
    Ok(out)
}

fn parse_record(content: &str, line: usize, base: &Path) -> Result<Record> {
    let mut tokens = content.split_whitespace();
    let image = tokens.next().expect("non-empty line");
    let class = tokens
        .next()
        .context("missing class index")?
        .parse::<usize>()
        .context("class must be a non-negative integer")?;
    let mut coords = Vec::new();
    let mut map = None;
    for tok in tokens {
        if let Some(p) = tok.strip_prefix("map=") {
            if map.replace(base.join(p)).is_some() {
                bail!("more than one map= entry");
            }
        } else if map.is_some() {
            bail!("box coordinates must precede map=");
        } else {
            coords.push(tok.parse::<usize>().with_context(|| format!("bad box coordinate '{tok}'"))?);
        }
    }
    if coords.len() % 4 != 0 {
        bail!("box coordinates come in groups of four, got {}", coords.len());
    }
    let boxes = coords
        .chunks_exact(4)
        .map(|c| BBox::new(c[0], c[1], c[2], c[3]))
        .collect();
    Ok(Record {
        line,
        image: base.join(image),
        class,
        boxes,
        map,
    })
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, base).with_context(|| format!("in {}", path.display()))
}
