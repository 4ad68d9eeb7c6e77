// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution methods: effective transformation, equivariant averaging,
//! DAVE, and the gradient baselines.
//!
//! DAVE sample `t` uses substream `t` of the seed for both its transform and
//! its noise, in that order. Per-sample rows are computed in parallel and
//! reduced in sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{DaveError, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transforms::{self, NoiseScheme, SpatialTransform, TransformDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Effective,
    Equivariant,
    Dave,
    InputXGradient,
    SmoothGrad,
    IntGrad,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Dave,
        Method::Effective,
        Method::Equivariant,
        Method::InputXGradient,
        Method::SmoothGrad,
        Method::IntGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Effective => "effective",
            Method::Equivariant => "equivariant",
            Method::Dave => "dave",
            Method::InputXGradient => "ixg",
            Method::SmoothGrad => "smoothgrad",
            Method::IntGrad => "intgrad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Signed per-pixel, per-channel attribution for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// `[3, H, W]`.
    pub values: Tensor,
    pub class: usize,
    pub method: Method,
    /// Number of samples or integration steps that went into the map.
    pub samples: usize,
}

impl AttributionMap {
    /// `[H, W]` map summed over channels.
    pub fn channel_sum(&self) -> Tensor {
        self.values.sum_channels().expect("attribution maps are [3, H, W]")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaveParams {
    pub samples: usize,
    pub dist: TransformDistribution,
    pub noise: NoiseScheme,
    pub seed: u64,
}

impl Default for DaveParams {
    fn default() -> Self {
        Self {
            samples: 50,
            dist: TransformDistribution::default(),
            noise: NoiseScheme::VpInterp { t_max: 0.5 },
            seed: 0,
        }
    }
}

impl DaveParams {
    /// One sample at the identity transform without noise.
    pub fn degenerate() -> Self {
        Self {
            samples: 1,
            dist: TransformDistribution::degenerate(),
            noise: NoiseScheme::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(DaveError::Param("sample count must be at least 1".into()));
        }
        self.dist.validate()?;
        self.noise.validate()
    }
}

fn check_image(model: &Model, image: &Tensor) -> Result<()> {
    if image.shape() != model.input_shape() {
        return Err(DaveError::Shape {
            op: "attribution input",
            left: image.shape().to_vec(),
            right: model.input_shape().to_vec(),
        });
    }
    Ok(())
}

/// Input × effective transformation.
pub fn attribute_effective(model: &Model, image: &Tensor, k: usize) -> Result<AttributionMap> {
    let row = model.effective_row(image, k)?.row;
    Ok(AttributionMap {
        values: row.mul(image)?,
        class: k,
        method: Method::Effective,
        samples: 1,
    })
}

/// The transform and perturbed input of DAVE sample `t`.
pub fn dave_sample_input(image: &Tensor, p: &DaveParams, t: u64) -> Result<(SpatialTransform, Tensor)> {
    let mut s = Rng::new(p.seed).substream(t);
    let extent = image.shape().last().copied().unwrap_or(0);
    let tau = transforms::sample_transform(&mut s, &p.dist, extent);
    let noisy = transforms::perturb(&mut s, &p.noise, image)?;
    Ok((tau, transforms::apply(&tau, &noisy)?))
}

/// `τ_t⁻¹(W(x_t))` for every sample, in sample order.
pub fn dave_sample_rows(model: &Model, image: &Tensor, k: usize, p: &DaveParams) -> Result<Vec<Tensor>> {
    p.validate()?;
    check_image(model, image)?;
    (0..p.samples as u64)
        .into_par_iter()
        .map(|t| {
            let (tau, x) = dave_sample_input(image, p, t)?;
            let row = model.effective_row(&x, k)?.row;
            transforms::apply_inverse(&tau, &row)
        })
        .collect()
}

/// Per-sample attribution maps `τ_t⁻¹(W(x_t)) ⊙ image`.
pub fn dave_sample_maps(model: &Model, image: &Tensor, k: usize, p: &DaveParams) -> Result<Vec<Tensor>> {
    dave_sample_rows(model, image, k, p)?
        .iter()
        .map(|r| r.mul(image))
        .collect()
}

/// Sum in index order, starting from the first element.
fn ordered_sum(items: &[Tensor]) -> Result<Tensor> {
    let mut acc = items
        .first()
        .cloned()
        .ok_or_else(|| DaveError::Param("nothing to average".into()))?;
    for t in &items[1..] {
        acc.add_assign(t)?;
    }
    Ok(acc)
}

pub fn attribute_dave(model: &Model, image: &Tensor, k: usize, p: &DaveParams) -> Result<AttributionMap> {
    let rows = dave_sample_rows(model, image, k, p)?;
    let mean = ordered_sum(&rows)?.scale(1.0 / p.samples as f64);
    Ok(AttributionMap {
        values: mean.mul(image)?,
        class: k,
        method: Method::Dave,
        samples: p.samples,
    })
}

/// DAVE without the noise step.
pub fn attribute_equivariant(
    model: &Model,
    image: &Tensor,
    k: usize,
    dist: &TransformDistribution,
    samples: usize,
    seed: u64,
) -> Result<AttributionMap> {
    let p = DaveParams {
        samples,
        dist: *dist,
        noise: NoiseScheme::None,
        seed,
    };
    let mut map = attribute_dave(model, image, k, &p)?;
    map.method = Method::Equivariant;
    Ok(map)
}

/// Pairwise sum; exact for `2^k` equal terms.
fn pairwise(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise(&values[..n / 2]) + pairwise(&values[n / 2..]),
    }
}

/// For each output pixel, the source pixel that `τ` moves onto it. `τ` must
/// be a pixel permutation (flip and quarter turns).
fn permutation_of(t: &SpatialTransform, n: usize) -> Result<Vec<usize>> {
    let index = Tensor::from_fn(&[1, n, n], |i| i as f64);
    let moved = transforms::apply(t, &index)?;
    let mut seen = vec![false; n * n];
    moved
        .data()
        .iter()
        .map(|&v| {
            let i = v as usize;
            if v.fract() != 0.0 || v < 0.0 || i >= n * n || seen[i] {
                return Err(DaveError::Param(format!("{t:?} is not a pixel permutation")));
            }
            seen[i] = true;
            Ok(i)
        })
        .collect()
}

/// Exact group average `(1/|G|) Σ_g g(map)` over a finite group of pixel
/// permutations. Each output value sums its orbit in a fixed canonical
/// order, so the result is constant on orbits and averaging it again
/// returns it unchanged whenever `|G|` is a power of two.
pub fn reynolds_average(map: &Tensor, group: &[SpatialTransform]) -> Result<Tensor> {
    let &[c, n, w] = map.shape() else {
        return Err(DaveError::shape("reynolds_average", map.shape(), &[0, 0, 0]));
    };
    if n != w || group.is_empty() {
        return Err(DaveError::shape("reynolds_average", map.shape(), &[group.len()]));
    }
    let perms = group
        .iter()
        .map(|g| permutation_of(g, n))
        .collect::<Result<Vec<_>>>()?;
    let plane = n * n;
    let scale = 1.0 / group.len() as f64;
    let mut out = Tensor::zeros(map.shape());
    let dst = out.data_mut();
    let mut sources = Vec::with_capacity(group.len());
    let mut values = Vec::with_capacity(group.len());
    for p in 0..plane {
        sources.clear();
        sources.extend(perms.iter().map(|perm| perm[p]));
        sources.sort_unstable();
        for ch in 0..c {
            values.clear();
            values.extend(sources.iter().map(|&s| map.data()[ch * plane + s]));
            dst[ch * plane + p] = pairwise(&values) * scale;
        }
    }
    Ok(out)
}

/// `(1/|G|) Σ_g g⁻¹(f(g(x)))` for a map-valued `f`, summed in group order.
pub fn group_average_operator(
    x: &Tensor,
    group: &[SpatialTransform],
    f: impl Fn(&Tensor) -> Result<Tensor> + Sync,
) -> Result<Tensor> {
    let terms = group
        .par_iter()
        .map(|g| transforms::apply_inverse(g, &f(&transforms::apply(g, x)?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ordered_sum(&terms)?.scale(1.0 / group.len() as f64))
}

/// Input × gradient.
pub fn baseline_input_x_gradient(model: &Model, image: &Tensor, k: usize) -> Result<AttributionMap> {
    Ok(AttributionMap {
        values: model.input_gradient(image, k)?.mul(image)?,
        class: k,
        method: Method::InputXGradient,
        samples: 1,
    })
}

/// Gradient at `image + σ ε_i` with `ε_i` from substream `i`.
pub fn smoothgrad_gradient(model: &Model, image: &Tensor, k: usize, sigma: f64, seed: u64, i: u64) -> Result<Tensor> {
    if sigma == 0.0 {
        return model.input_gradient(image, k);
    }
    let eps = Rng::new(seed).substream(i).gaussian(image.shape());
    let noisy = image.zip_map(&eps, |x, e| x + sigma * e)?;
    model.input_gradient(&noisy, k)
}

/// Mean over `n` noisy gradients, times the image.
pub fn baseline_smoothgrad(model: &Model, image: &Tensor, k: usize, n: usize, sigma: f64, seed: u64) -> Result<AttributionMap> {
    if n == 0 {
        return Err(DaveError::Param("smoothgrad needs at least one sample".into()));
    }
    if !(sigma >= 0.0) {
        return Err(DaveError::Param(format!("sigma must be >= 0, got {sigma}")));
    }
    check_image(model, image)?;
    let grads = (0..n as u64)
        .into_par_iter()
        .map(|i| smoothgrad_gradient(model, image, k, sigma, seed, i))
        .collect::<Result<Vec<_>>>()?;
    // Running mean: n identical gradients average to that gradient exactly.
    let mut mean = grads[0].clone();
    for (i, g) in grads.iter().enumerate().skip(1) {
        let step = g.sub(&mean)?.scale(1.0 / (i + 1) as f64);
        mean.add_assign(&step)?;
    }
    Ok(AttributionMap {
        values: mean.mul(image)?,
        class: k,
        method: Method::SmoothGrad,
        samples: n,
    })
}

/// Integrated gradients with a midpoint Riemann sum along the straight path
/// from `baseline` to `image`.
pub fn baseline_intgrad(model: &Model, image: &Tensor, k: usize, steps: usize, baseline: &Tensor) -> Result<AttributionMap> {
    if steps == 0 {
        return Err(DaveError::Param("intgrad needs at least one step".into()));
    }
    check_image(model, image)?;
    let delta = image.sub(baseline)?;
    let grads = (0..steps)
        .into_par_iter()
        .map(|s| {
            let alpha = (s as f64 + 0.5) / steps as f64;
            model.input_gradient(&baseline.add(&delta.scale(alpha))?, k)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = ordered_sum(&grads)?.scale(1.0 / steps as f64);
    Ok(AttributionMap {
        values: mean.mul(&delta)?,
        class: k,
        method: Method::IntGrad,
        samples: steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::transforms::{dihedral_group, flip_half_turn_group};

    fn image(seed: u64) -> Tensor {
        fixtures::random_image(seed, 32)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("lrp"), None);
    }

    #[test]
    fn effective_zero_image_gives_zero_map() {
        let m = fixtures::tiny_random(1);
        let map = attribute_effective(&m, &Tensor::zeros(&m.input_shape()), 0).unwrap();
        assert_eq!(map.values.max_abs(), 0.0);
    }

    #[test]
    fn effective_map_sums_to_logit_minus_offset() {
        let m = fixtures::tiny_random(2);
        let x = image(3);
        for k in 0..4 {
            let map = attribute_effective(&m, &x, k).unwrap();
            let row = m.effective_row(&x, k).unwrap();
            let logit = m.forward_logits(&x).unwrap().data()[k];
            let target = logit - row.frozen_offset;
            assert!((map.values.sum() - target).abs() <= 1e-6 * target.abs().max(1e-9));
        }
    }

    #[test]
    fn degenerate_dave_is_effective() {
        let m = fixtures::tiny_random(3);
        let x = image(4);
        let dave = attribute_dave(&m, &x, 1, &DaveParams::degenerate()).unwrap();
        let eff = attribute_effective(&m, &x, 1).unwrap();
        assert_eq!(dave.values, eff.values);
        let eq = attribute_equivariant(&m, &x, 1, &TransformDistribution::degenerate(), 1, 9).unwrap();
        assert_eq!(eq.values, eff.values);
        assert_eq!(eq.method, Method::Equivariant);
    }

    #[test]
    fn dave_is_mean_of_sample_maps() {
        let m = fixtures::tiny_random(4);
        let x = image(5);
        let p = DaveParams {
            samples: 6,
            seed: 17,
            ..Default::default()
        };
        let map = attribute_dave(&m, &x, 2, &p).unwrap();
        // Sequential loop oracle.
        let mut acc = Tensor::zeros(x.shape());
        for t in 0..6 {
            let (tau, xt) = dave_sample_input(&x, &p, t).unwrap();
            let row = m.effective_row(&xt, 2).unwrap().row;
            acc.add_assign(&transforms::apply_inverse(&tau, &row).unwrap().mul(&x).unwrap()).unwrap();
        }
        let oracle = acc.scale(1.0 / 6.0);
        assert!(map.values.sub(&oracle).unwrap().max_abs() <= 1e-12 * oracle.max_abs());
    }

    #[test]
    fn dave_is_deterministic_and_seed_sensitive() {
        let m = fixtures::tiny_random(5);
        let x = image(6);
        let p = DaveParams {
            samples: 4,
            seed: 3,
            ..Default::default()
        };
        let a = attribute_dave(&m, &x, 0, &p).unwrap();
        let b = attribute_dave(&m, &x, 0, &p).unwrap();
        assert_eq!(a, b);
        let c = attribute_dave(&m, &x, 0, &DaveParams { seed: 4, ..p.clone() }).unwrap();
        assert_ne!(a.values, c.values);
        assert!(attribute_dave(&m, &x, 0, &DaveParams { samples: 0, ..p }).is_err());
    }

    #[test]
    fn sample_rows_do_not_depend_on_sample_count() {
        let m = fixtures::tiny_random(6);
        let x = image(7);
        let p = DaveParams {
            samples: 5,
            seed: 8,
            ..Default::default()
        };
        let five = dave_sample_rows(&m, &x, 3, &p).unwrap();
        let three = dave_sample_rows(&m, &x, 3, &DaveParams { samples: 3, ..p }).unwrap();
        assert_eq!(&five[..3], &three[..]);
    }

    #[test]
    fn reynolds_average_is_a_projection() {
        let map = image(8);
        for group in [flip_half_turn_group(), dihedral_group()] {
            let once = reynolds_average(&map, &group).unwrap();
            let twice = reynolds_average(&once, &group).unwrap();
            assert_eq!(once, twice);
            assert!(once.norm_l2() <= map.norm_l2() + 1e-12);
            for g in &group {
                assert_eq!(transforms::apply(g, &once).unwrap(), once);
            }
        }
    }

    #[test]
    fn reynolds_average_rejects_resampling_transforms() {
        let map = image(9);
        assert!(reynolds_average(&map, &[SpatialTransform::rotation(10.0)]).is_err());
    }

    #[test]
    fn ixg_baselines() {
        let m = fixtures::tiny_random(7);
        let zero = Tensor::zeros(&m.input_shape());
        assert_eq!(baseline_input_x_gradient(&m, &zero, 0).unwrap().values.max_abs(), 0.0);
        let x = image(10);
        let ixg = baseline_input_x_gradient(&m, &x, 1).unwrap();
        let fd = m.input_gradient_fd(&x, 1, 1e-5).unwrap().mul(&x).unwrap();
        assert!(ixg.values.sub(&fd).unwrap().max_abs() <= 1e-6 * fd.max_abs().max(1.0));
    }

    #[test]
    fn smoothgrad_baselines() {
        let m = fixtures::tiny_random(8);
        let x = image(11);
        let ixg = baseline_input_x_gradient(&m, &x, 0).unwrap();
        let sg0 = baseline_smoothgrad(&m, &x, 0, 5, 0.0, 1).unwrap();
        assert_eq!(sg0.values, ixg.values);
        let a = baseline_smoothgrad(&m, &x, 0, 2, 0.3, 4).unwrap();
        assert_eq!(a, baseline_smoothgrad(&m, &x, 0, 2, 0.3, 4).unwrap());
        let g0 = smoothgrad_gradient(&m, &x, 0, 0.3, 4, 0).unwrap();
        let g1 = smoothgrad_gradient(&m, &x, 0, 0.3, 4, 1).unwrap();
        let hand = g0.add(&g1).unwrap().scale(0.5).mul(&x).unwrap();
        assert!(a.values.sub(&hand).unwrap().max_abs() <= 1e-12 * hand.max_abs());
        assert!(baseline_smoothgrad(&m, &x, 0, 0, 0.3, 4).is_err());
    }

    #[test]
    fn intgrad_baselines() {
        let m = fixtures::tiny_random(9);
        let x = image(12);
        let zero = Tensor::zeros(x.shape());
        assert_eq!(baseline_intgrad(&m, &x, 0, 8, &x).unwrap().values.max_abs(), 0.0);
        let one = baseline_intgrad(&m, &x, 2, 1, &zero).unwrap();
        let mid = m.input_gradient(&x.scale(0.5), 2).unwrap().mul(&x).unwrap();
        assert_eq!(one.values, mid);
        let ig = baseline_intgrad(&m, &x, 2, 64, &zero).unwrap();
        let logits = m.forward_logits(&x).unwrap().data()[2] - m.forward_logits(&zero).unwrap().data()[2];
        assert!((ig.values.sum() - logits).abs() <= 0.02 * logits.abs(), "{} vs {logits}", ig.values.sum());
        assert!(baseline_intgrad(&m, &x, 2, 0, &zero).is_err());
    }

    #[test]
    fn fixed_mixing_effective_equals_ixg() {
        let m = fixtures::fixed_mixing(10);
        let x = image(13);
        for k in 0..4 {
            let eff = attribute_effective(&m, &x, k).unwrap();
            let ixg = baseline_input_x_gradient(&m, &x, k).unwrap();
            assert!(eff.values.sub(&ixg.values).unwrap().max_abs() <= 1e-8);
        }
    }

    #[test]
    fn monte_carlo_smoothing_is_gaussian_convolution() {
        // Surrogate map w(x) = x²; E[w(x + σε)] = x² + σ².
        let sigma = 0.5;
        let n = 100_000;
        for (i, x) in [-1.0f64, 0.0, 2.0].into_iter().enumerate() {
            let eps = Rng::new(77).substream(i as u64).gaussian(&[n]);
            let vals: Vec<f64> = eps.data().iter().map(|e| (x + sigma * e).powi(2)).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            let analytic = x * x + sigma * sigma;
            assert!((mean - analytic).abs() <= 3.0 * se, "x={x}: {mean} vs {analytic} (se {se})");
        }
    }
}
