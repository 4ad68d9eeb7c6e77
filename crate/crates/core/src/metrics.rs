// SPDX-License-Identifier: MIT OR Apache-2.0

//! Localization and faithfulness metrics, plus the stability diagnostics.
//!
//! Metrics take channel-summed `[H, W]` maps. Only the positive part counts
//! towards localization mass. A map without positive mass yields `None`,
//! which aggregate averages skip.

use rayon::prelude::*;

use crate::error::{DaveError, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::{softmax, Tensor};
use crate::transforms::{self, SpatialTransform};

/// `[row0, row1) × [col0, col1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        Self { row0, col0, row1, col1 }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self::new(0, 0, h, w)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.row0..self.row1).contains(&i) && (self.col0..self.col1).contains(&j)
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.row0 >= self.row1 || self.col0 >= self.col1 || self.row1 > h || self.col1 > w {
            return Err(DaveError::Param(format!("box {self:?} is empty or outside a {h}×{w} map")));
        }
        Ok(())
    }
}

fn dims2(map: &Tensor) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(DaveError::shape("metric map", map.shape(), &[0, 0])),
    }
}

/// Cell `i` of the row-major 2×2 grid over an `h × w` map.
pub fn grid_cell(h: usize, w: usize, i: usize) -> BBox {
    let (hh, hw) = (h / 2, w / 2);
    let (r, c) = (i / 2, i % 2);
    BBox::new(r * hh, c * hw, (r + 1) * hh, (c + 1) * hw)
}

/// Positive mass inside `region` (a union of boxes) over total positive mass.
pub fn energypg(map: &Tensor, region: &[BBox]) -> Result<Option<f64>> {
    let (h, w) = dims2(map)?;
    if region.is_empty() {
        return Err(DaveError::Param("energypg needs at least one box".into()));
    }
    for b in region {
        b.validate(h, w)?;
    }
    let (mut inside, mut total) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let v = map.get2(i, j).max(0.0);
            total += v;
            if region.iter().any(|b| b.contains(i, j)) {
                inside += v;
            }
        }
    }
    Ok((total > 0.0).then(|| inside / total))
}

/// Positive mass of grid cell `cell` over total positive mass.
pub fn gridpg(map: &Tensor, cell: usize) -> Result<Option<f64>> {
    let (h, w) = dims2(map)?;
    if h % 2 != 0 || w % 2 != 0 || cell >= 4 {
        return Err(DaveError::Param(format!("cell {cell} of a {h}×{w} map is not a 2×2 grid cell")));
    }
    Ok(gridpg_all(map)?.map(|s| s[cell]))
}

/// All four cell scores; they sum to one up to rounding.
pub fn gridpg_all(map: &Tensor) -> Result<Option<[f64; 4]>> {
    let (h, w) = dims2(map)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DaveError::Param(format!("a {h}×{w} map has no 2×2 grid")));
    }
    let mut mass = [0.0; 4];
    for i in 0..h {
        for j in 0..w {
            mass[2 * (i / (h / 2)) + j / (w / 2)] += map.get2(i, j).max(0.0);
        }
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Ok(None);
    }
    Ok(Some(mass.map(|m| m / total)))
}

/// Mean of the defined scores; `None` when every score was dropped.
pub fn mean_defined(scores: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = scores
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub fractions: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Curve {
    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.fractions
            .windows(2)
            .zip(self.probabilities.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
            .sum()
    }
}

/// Pixels sorted by ascending attribution; ties keep linear index order.
pub fn deletion_order(map: &Tensor) -> Result<Vec<usize>> {
    dims2(map)?;
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map.data()[a].total_cmp(&map.data()[b]));
    Ok(order)
}

/// Number of pixels removed at checkpoint `s` of `steps`.
pub fn removed_at(s: usize, steps: usize, pixels: usize) -> usize {
    s * pixels / steps
}

/// Copy of `image` with the given pixels zeroed in every channel.
pub fn zero_pixels(image: &Tensor, pixels: &[usize]) -> Tensor {
    let mut out = image.clone();
    let plane = image.shape()[1] * image.shape()[2];
    let c = image.shape()[0];
    let data = out.data_mut();
    for &p in pixels {
        for ch in 0..c {
            data[ch * plane + p] = 0.0;
        }
    }
    out
}

/// Target-class probability as the least-attributed pixels are zeroed, at
/// `steps + 1` evenly spaced checkpoints from none to all pixels.
pub fn deletion_curve(model: &Model, image: &Tensor, map: &Tensor, k: usize, steps: usize) -> Result<Curve> {
    if steps == 0 {
        return Err(DaveError::Param("deletion needs at least one step".into()));
    }
    let (h, w) = dims2(map)?;
    if image.shape() != [3, h, w] {
        return Err(DaveError::shape("deletion_curve", image.shape(), map.shape()));
    }
    let order = deletion_order(map)?;
    let probabilities = (0..=steps)
        .into_par_iter()
        .map(|s| {
            let x = zero_pixels(image, &order[..removed_at(s, steps, h * w)]);
            let logits = model.forward_logits(&x)?;
            softmax(logits.data())
                .get(k)
                .copied()
                .ok_or_else(|| DaveError::Param(format!("class {k} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Curve {
        fractions: (0..=steps).map(|s| s as f64 / steps as f64).collect(),
        probabilities,
    })
}

/// Four images tiled row-major `[0, 1; 2, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridComposite {
    pub image: Tensor,
    pub labels: [usize; 4],
}

impl GridComposite {
    pub fn cell_box(&self, j: usize) -> BBox {
        let s = self.image.shape();
        grid_cell(s[1], s[2], j)
    }

    /// The source image of quadrant `j`.
    pub fn cell(&self, j: usize) -> Tensor {
        let s = self.image.shape();
        let b = self.cell_box(j);
        let (h, w) = (b.row1 - b.row0, b.col1 - b.col0);
        Tensor::from_fn(&[s[0], h, w], |idx| {
            let (c, rem) = (idx / (h * w), idx % (h * w));
            self.image.get3(c, b.row0 + rem / w, b.col0 + rem % w)
        })
    }

    /// Quadrant holding `label`.
    pub fn cell_of(&self, label: usize) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }
}

pub fn make_grid(images: &[Tensor; 4], labels: [usize; 4]) -> Result<GridComposite> {
    for i in 0..4 {
        for j in i + 1..4 {
            if labels[i] == labels[j] {
                return Err(DaveError::Protocol(format!(
                    "grid cells {i} and {j} share label {}",
                    labels[i]
                )));
            }
        }
    }
    let shape = images[0].shape().to_vec();
    let &[c, h, w] = shape.as_slice() else {
        return Err(DaveError::shape("make_grid", &shape, &[3, 0, 0]));
    };
    if images.iter().any(|im| im.shape() != shape.as_slice()) {
        let other = images.iter().find(|im| im.shape() != shape.as_slice()).expect("exists");
        return Err(DaveError::shape("make_grid", &shape, other.shape()));
    }
    let image = Tensor::from_fn(&[c, 2 * h, 2 * w], |idx| {
        let plane = 4 * h * w;
        let (ch, rem) = (idx / plane, idx % plane);
        let (i, j) = (rem / (2 * w), rem % (2 * w));
        let q = 2 * (i / h) + j / w;
        images[q].get3(ch, i % h, j % w)
    });
    Ok(GridComposite { image, labels })
}

/// `d_T = ‖mean(m_1..m_T) − mean(m_1..m_{T+1})‖₁` for `T = 1..n−1`.
pub fn convergence_series(maps: &[Tensor]) -> Result<Vec<f64>> {
    if maps.len() < 2 {
        return Err(DaveError::Param("convergence needs at least two maps".into()));
    }
    // Running mean, so a constant sequence gives exact zeros.
    let mut mean = maps[0].clone();
    let mut out = Vec::with_capacity(maps.len() - 1);
    for (i, m) in maps.iter().enumerate().skip(1) {
        let step = m.sub(&mean)?.scale(1.0 / (i + 1) as f64);
        out.push(step.norm_l1());
        mean.add_assign(&step)?;
    }
    Ok(out)
}

fn class_probability(model: &Model, image: &Tensor, k: usize) -> Result<f64> {
    let p = softmax(model.forward_logits(image)?.data());
    p.get(k)
        .copied()
        .ok_or_else(|| DaveError::Param(format!("class {k} out of range")))
}

/// `|p_k(rotate(image, θ)) − p_k(image)|` per angle.
pub fn rotation_sensitivity(model: &Model, image: &Tensor, k: usize, angles: &[f64]) -> Result<Vec<f64>> {
    if let Some(a) = angles.iter().find(|a| !a.is_finite()) {
        return Err(DaveError::Param(format!("angle {a} is not finite")));
    }
    let base = class_probability(model, image, k)?;
    angles
        .par_iter()
        .map(|&a| {
            if a == 0.0 {
                return Ok(0.0);
            }
            let x = transforms::apply(&SpatialTransform::rotation(a), image)?;
            Ok((class_probability(model, &x, k)? - base).abs())
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per σ, the median over trials of `|p_k(image + σ ε) − p_k(image)|`.
/// Trial `i` uses the same `ε` (substream `i`) at every σ.
pub fn noise_sensitivity(
    model: &Model,
    image: &Tensor,
    k: usize,
    sigmas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(DaveError::Param("noise sensitivity needs at least one trial".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(DaveError::Param(format!("sigma {s} must be finite and >= 0")));
    }
    let base = class_probability(model, image, k)?;
    let rng = Rng::new(seed);
    sigmas
        .iter()
        .map(|&sigma| {
            if sigma == 0.0 {
                return Ok(0.0);
            }
            let mut deltas = (0..trials as u64)
                .into_par_iter()
                .map(|t| {
                    let eps = rng.substream(t).gaussian(image.shape());
                    let x = image.zip_map(&eps, |v, e| v + sigma * e)?;
                    Ok((class_probability(model, &x, k)? - base).abs())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(median(&mut deltas))
        })
        .collect()
}
