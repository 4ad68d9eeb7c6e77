// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spatial transforms (flip, rotation, wrapped shift) and input noise.
//!
//! [`apply`] runs the components in the order horizontal flip, rotation about
//! the image center, wrapped translation. Rotation resamples bilinearly with
//! zero padding; a fractional shift resamples bilinearly on the torus. Both
//! are fixed linear operators for a given transform, so `apply` is linear in
//! the image. Flips, integer shifts and multiples of 90° are exact pixel
//! permutations.

use crate::error::{DaveError, Result};
use crate::rng::Substream;
use crate::tensor::Tensor;

/// A group element: flip, then rotate by `angle` degrees (counter-clockwise
/// as displayed), then shift by `shift = (dy, dx)` pixels with wraparound.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpatialTransform {
    pub hflip: bool,
    pub angle: f64,
    pub shift: (f64, f64),
}

impl SpatialTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn rotation(angle: f64) -> Self {
        Self {
            angle,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && self.angle == 0.0 && self.shift == (0.0, 0.0)
    }

    /// Parameter-level inverse: same flip, negated angle and shift.
    pub fn inverse(&self) -> Self {
        Self {
            hflip: self.hflip,
            angle: -self.angle,
            shift: (-self.shift.0, -self.shift.1),
        }
    }

    /// Componentwise parameter composition (flips xor, angles and shifts add).
    pub fn compose_params(&self, other: &Self) -> Self {
        Self {
            hflip: self.hflip ^ other.hflip,
            angle: self.angle + other.angle,
            shift: (self.shift.0 + other.shift.0, self.shift.1 + other.shift.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformDistribution {
    pub flip_prob: f64,
    /// Angles are drawn from `(−angle_range, angle_range)` degrees.
    pub angle_range: f64,
    /// Shift components are drawn from `(−f·extent, f·extent)` pixels.
    pub shift_frac: f64,
}

impl Default for TransformDistribution {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            angle_range: 20.0,
            shift_frac: 0.1,
        }
    }
}

impl TransformDistribution {
    /// Point mass at the identity.
    pub fn degenerate() -> Self {
        Self {
            flip_prob: 0.0,
            angle_range: 0.0,
            shift_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(DaveError::Param(format!("flip_prob {} not in [0, 1]", self.flip_prob)));
        }
        if !(self.angle_range >= 0.0) || !self.angle_range.is_finite() {
            return Err(DaveError::Param(format!("angle_range {} must be >= 0", self.angle_range)));
        }
        if !(0.0..=0.5).contains(&self.shift_frac) {
            return Err(DaveError::Param(format!("shift_frac {} not in [0, 0.5]", self.shift_frac)));
        }
        Ok(())
    }
}

/// Draws a transform for images of side `extent`. Always consumes exactly
/// four values from `s`.
pub fn sample_transform(s: &mut Substream, dist: &TransformDistribution, extent: usize) -> SpatialTransform {
    let hflip = s.bernoulli(dist.flip_prob);
    let angle = s.uniform(-dist.angle_range, dist.angle_range);
    let max_shift = dist.shift_frac * extent as f64;
    let dy = s.uniform(-max_shift, max_shift);
    let dx = s.uniform(-max_shift, max_shift);
    SpatialTransform {
        hflip,
        angle,
        shift: (dy, dx),
    }
}

fn square_dims(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [c, h, w] if h == w => Ok((c, h)),
        _ => Err(DaveError::shape("spatial transform", img.shape(), &[0, 0, 0])),
    }
}

fn flip(img: &Tensor, n: usize) -> Tensor {
    let mut out = img.clone();
    let data = img.data();
    for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
        let src = &data[r * n..(r + 1) * n];
        for (j, v) in row.iter_mut().enumerate() {
            *v = src[n - 1 - j];
        }
    }
    out
}

/// `(cos θ, sin θ)` with exact values at multiples of 90°.
fn cos_sin(degrees: f64) -> (f64, f64) {
    let a = degrees.rem_euclid(360.0);
    if a == 0.0 {
        (1.0, 0.0)
    } else if a == 90.0 {
        (0.0, 1.0)
    } else if a == 180.0 {
        (-1.0, 0.0)
    } else if a == 270.0 {
        (0.0, -1.0)
    } else {
        let r = a.to_radians();
        (r.cos(), r.sin())
    }
}

/// Accumulates the bilinear taps of `(y, x)` through `tap(index, weight)`.
/// Out-of-frame taps are dropped (zero padding) unless `wrap`.
fn bilinear_taps(y: f64, x: f64, n: usize, wrap: bool, mut tap: impl FnMut(usize, f64)) {
    let (y0, x0) = (y.floor(), x.floor());
    let (wy, wx) = (y - y0, x - x0);
    let ni = n as i64;
    for (dy, fy) in [(0i64, 1.0 - wy), (1, wy)] {
        if fy == 0.0 {
            continue;
        }
        for (dx, fx) in [(0i64, 1.0 - wx), (1, wx)] {
            if fx == 0.0 {
                continue;
            }
            let (mut yi, mut xi) = (y0 as i64 + dy, x0 as i64 + dx);
            if wrap {
                yi = yi.rem_euclid(ni);
                xi = xi.rem_euclid(ni);
            } else if yi < 0 || yi >= ni || xi < 0 || xi >= ni {
                continue;
            }
            tap(yi as usize * n + xi as usize, fy * fx);
        }
    }
}

fn resample(img: &Tensor, c: usize, n: usize, wrap: bool, source: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let mut out = Tensor::zeros(img.shape());
    let plane = n * n;
    let src = img.data();
    let dst = out.data_mut();
    for i in 0..n {
        for j in 0..n {
            let (y, x) = source(i as f64, j as f64);
            bilinear_taps(y, x, n, wrap, |idx, w| {
                for ch in 0..c {
                    dst[ch * plane + i * n + j] += w * src[ch * plane + idx];
                }
            });
        }
    }
    out
}

fn rotate(img: &Tensor, c: usize, n: usize, degrees: f64) -> Tensor {
    let (cos, sin) = cos_sin(degrees);
    let center = (n as f64 - 1.0) / 2.0;
    // Inverse warp: output pixel (i, j) reads the source at R(−θ)(p − c) + c.
    resample(img, c, n, false, |i, j| {
        let (yo, xo) = (i - center, j - center);
        let x = xo * cos - yo * sin;
        let y = xo * sin + yo * cos;
        (y + center, x + center)
    })
}

fn shift(img: &Tensor, c: usize, n: usize, (dy, dx): (f64, f64)) -> Tensor {
    resample(img, c, n, true, |i, j| (i - dy, j - dx))
}

/// `τ(img)`: flip, rotate, shift.
pub fn apply(t: &SpatialTransform, img: &Tensor) -> Result<Tensor> {
    let (c, n) = square_dims(img)?;
    let mut out = if t.hflip { flip(img, n) } else { img.clone() };
    if t.angle != 0.0 {
        out = rotate(&out, c, n, t.angle);
    }
    if t.shift != (0.0, 0.0) {
        out = shift(&out, c, n, t.shift);
    }
    Ok(out)
}

/// `τ⁻¹(map)`: unshift, rotate by `−angle`, unflip. Exact for flips,
/// integer shifts and quarter turns; approximate under bilinear resampling
/// otherwise.
pub fn apply_inverse(t: &SpatialTransform, map: &Tensor) -> Result<Tensor> {
    let (c, n) = square_dims(map)?;
    let mut out = map.clone();
    if t.shift != (0.0, 0.0) {
        out = shift(&out, c, n, (-t.shift.0, -t.shift.1));
    }
    if t.angle != 0.0 {
        out = rotate(&out, c, n, -t.angle);
    }
    if t.hflip {
        out = flip(&out, n);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NoiseScheme {
    #[default]
    None,
    /// `x + σ ε`.
    Additive { sigma: f64 },
    /// `(1 − t) x + √(1 − (1 − t)²) ε` with `t ~ U(0, t_max)`.
    VpInterp { t_max: f64 },
}

impl NoiseScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseScheme::None => Ok(()),
            NoiseScheme::Additive { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            NoiseScheme::VpInterp { t_max } if (0.0..=1.0).contains(&t_max) => Ok(()),
            other => Err(DaveError::Param(format!("invalid noise scheme {other:?}"))),
        }
    }

    /// Parses `none`, `additive:σ` or `vp:t_max`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || DaveError::Param(format!("unrecognized noise scheme '{s}'"));
        let scheme = match s.split_once(':') {
            None if s == "none" => NoiseScheme::None,
            Some(("additive", v)) => NoiseScheme::Additive {
                sigma: v.parse().map_err(|_| bad())?,
            },
            Some(("vp", v)) => NoiseScheme::VpInterp {
                t_max: v.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl std::fmt::Display for NoiseScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseScheme::None => write!(f, "none"),
            NoiseScheme::Additive { sigma } => write!(f, "additive:{sigma}"),
            NoiseScheme::VpInterp { t_max } => write!(f, "vp:{t_max}"),
        }
    }
}

/// The variance-preserving interpolation at a given `t`.
pub fn vp_interp(x: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    let a = 1.0 - t;
    let b = (1.0 - a * a).sqrt();
    x.zip_map(eps, |xv, e| a * xv + b * e)
}

/// Draws a perturbed copy of `x`. `None` draws nothing; `Additive` draws
/// `ε`; `VpInterp` draws `t` and then `ε`.
pub fn perturb(s: &mut Substream, scheme: &NoiseScheme, x: &Tensor) -> Result<Tensor> {
    match *scheme {
        NoiseScheme::None => Ok(x.clone()),
        NoiseScheme::Additive { sigma } => {
            let eps = s.gaussian(x.shape());
            x.zip_map(&eps, |xv, e| xv + sigma * e)
        }
        NoiseScheme::VpInterp { t_max } => {
            let t = s.uniform(0.0, t_max);
            let eps = s.gaussian(x.shape());
            vp_interp(x, t, &eps)
        }
    }
}

/// The flip × {0°, 180°} subgroup.
pub fn flip_half_turn_group() -> Vec<SpatialTransform> {
    let mut g = Vec::with_capacity(4);
    for hflip in [false, true] {
        for angle in [0.0, 180.0] {
            g.push(SpatialTransform {
                hflip,
                angle,
                shift: (0.0, 0.0),
            });
        }
    }
    g
}

/// The dihedral group of the square: flips × quarter turns.
pub fn dihedral_group() -> Vec<SpatialTransform> {
    let mut g = Vec::with_capacity(8);
    for hflip in [false, true] {
        for angle in [0.0, 90.0, 180.0, 270.0] {
            g.push(SpatialTransform {
                hflip,
                angle,
                shift: (0.0, 0.0),
            });
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn img(seed: u64, c: usize, n: usize) -> Tensor {
        Rng::new(seed).substream(0).gaussian(&[c, n, n])
    }

    fn general() -> SpatialTransform {
        SpatialTransform {
            hflip: true,
            angle: 13.0,
            shift: (1.25, -2.5),
        }
    }

    #[test]
    fn identity_is_exact() {
        let x = img(1, 3, 9);
        assert_eq!(apply(&SpatialTransform::identity(), &x).unwrap(), x);
        assert_eq!(apply_inverse(&SpatialTransform::identity(), &x).unwrap(), x);
    }

    #[test]
    fn flip_is_an_involution() {
        let x = img(2, 3, 8);
        let f = SpatialTransform {
            hflip: true,
            ..Default::default()
        };
        let once = apply(&f, &x).unwrap();
        assert_ne!(once, x);
        assert_eq!(apply(&f, &once).unwrap(), x);
        assert_eq!(once.get3(1, 2, 0), x.get3(1, 2, 7));
    }

    #[test]
    fn full_period_shift_wraps_to_identity() {
        let x = img(3, 3, 8);
        let t = SpatialTransform {
            shift: (0.0, 8.0),
            ..Default::default()
        };
        assert_eq!(apply(&t, &x).unwrap(), x);
        let t = SpatialTransform {
            shift: (-8.0, 16.0),
            ..Default::default()
        };
        assert_eq!(apply(&t, &x).unwrap(), x);
    }

    #[test]
    fn integer_shift_moves_pixels() {
        let x = img(4, 1, 5);
        let t = SpatialTransform {
            shift: (1.0, 2.0),
            ..Default::default()
        };
        let y = apply(&t, &x).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(y.get3(0, (i + 1) % 5, (j + 2) % 5), x.get3(0, i, j));
            }
        }
    }

    #[test]
    fn inverse_round_trip_is_exact_without_rotation() {
        let x = img(5, 3, 10);
        let t = SpatialTransform {
            hflip: true,
            angle: 0.0,
            shift: (3.0, -7.0),
        };
        assert_eq!(apply_inverse(&t, &apply(&t, &x).unwrap()).unwrap(), x);
    }

    #[test]
    fn quarter_turn_matches_explicit_permutation() {
        // With y pointing down, a counter-clockwise quarter turn sends the
        // source pixel (i, j) to (n − 1 − j, i).
        let n = 4;
        let x = img(6, 2, n);
        let y = apply(&SpatialTransform::rotation(90.0), &x).unwrap();
        for c in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(y.get3(c, n - 1 - j, i), x.get3(c, i, j));
                }
            }
        }
        let back = apply_inverse(&SpatialTransform::rotation(90.0), &y).unwrap();
        assert_eq!(back, x);
        let four = (0..4).try_fold(x.clone(), |acc, _| apply(&SpatialTransform::rotation(90.0), &acc));
        assert_eq!(four.unwrap(), x);
    }

    #[test]
    fn quarter_turn_round_trip_on_inscribed_disc() {
        let n = 4;
        let x = img(7, 1, n);
        for angle in [90.0, 180.0, 270.0, -90.0] {
            let t = SpatialTransform::rotation(angle);
            let back = apply_inverse(&t, &apply(&t, &x).unwrap()).unwrap();
            let c = (n as f64 - 1.0) / 2.0;
            for i in 0..n {
                for j in 0..n {
                    let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                    if r2 <= c * c + 1e-9 {
                        assert_eq!(back.get3(0, i, j), x.get3(0, i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn small_rotation_round_trip_on_smooth_pattern() {
        // Windowed low-frequency sinusoid: smooth, and zero near the border
        // so padding does not enter.
        let n = 32;
        let c = (n as f64 - 1.0) / 2.0;
        let x = Tensor::from_fn(&[1, n, n], |idx| {
            let (i, j) = ((idx / n) as f64, (idx % n) as f64);
            let r = ((i - c).powi(2) + (j - c).powi(2)).sqrt();
            let window = if r < 12.0 { (0.5 + 0.5 * (std::f64::consts::PI * r / 12.0).cos()).powi(2) } else { 0.0 };
            window * ((0.4 * i).sin() + (0.3 * j).cos())
        });
        let t = SpatialTransform::rotation(10.0);
        let back = apply_inverse(&t, &apply(&t, &x).unwrap()).unwrap();
        let mad = back.sub(&x).unwrap().norm_l1() / x.len() as f64;
        assert!(mad <= 0.05, "mean absolute deviation {mad}");
    }

    #[test]
    fn rotation_preserves_mass_on_zero_border() {
        let n = 24;
        let x = Tensor::from_fn(&[3, n, n], |idx| {
            let rem = idx % (n * n);
            let (i, j) = (rem / n, rem % n);
            let inside = (5..19).contains(&i) && (5..19).contains(&j);
            if inside { 1.0 + ((i * 7 + j * 3) % 5) as f64 * 0.1 } else { 0.0 }
        });
        for angle in [-20.0, -7.5, 3.0, 20.0] {
            let y = apply(&SpatialTransform::rotation(angle), &x).unwrap();
            let rel = (y.sum() - x.sum()).abs() / x.sum();
            assert!(rel <= 0.02, "angle {angle}: mass change {rel}");
        }
        let t = SpatialTransform {
            hflip: true,
            angle: 0.0,
            shift: (2.0, -5.0),
        };
        assert_eq!(apply(&t, &x).unwrap().sum(), x.sum());
    }

    #[test]
    fn exact_subgroup_is_unitary() {
        let (a, b) = (img(8, 3, 6), img(9, 3, 6));
        let inner = a.dot(&b).unwrap();
        for t in dihedral_group() {
            let ta = apply(&t, &a).unwrap();
            let tb = apply(&t, &b).unwrap();
            // A permutation of the entries: same multiset of products.
            let mut lhs: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            let mut rhs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            lhs.sort_by(f64::total_cmp);
            rhs.sort_by(f64::total_cmp);
            assert_eq!(lhs, rhs);
            assert!((ta.dot(&tb).unwrap() - inner).abs() <= 1e-12 * inner.abs().max(1.0));
        }
    }

    #[test]
    fn parameter_inverse_composes_to_identity() {
        let t = general();
        assert!(t.compose_params(&t.inverse()).is_identity());
        assert_eq!(t.inverse().inverse(), t);
    }

    #[test]
    fn degenerate_distribution_samples_identity() {
        let mut s = Rng::new(3).substream(0);
        for _ in 0..10 {
            assert!(sample_transform(&mut s, &TransformDistribution::degenerate(), 32).is_identity());
        }
    }

    #[test]
    fn sampled_angles_are_centered() {
        let dist = TransformDistribution::default();
        let rng = Rng::new(11);
        let n = 10_000;
        let mut mean = 0.0;
        let mut flips = 0;
        for i in 0..n {
            let t = sample_transform(&mut rng.substream(i), &dist, 32);
            assert!(t.angle.abs() < 20.0);
            assert!(t.shift.0.abs() < 3.2 && t.shift.1.abs() < 3.2);
            mean += t.angle;
            flips += usize::from(t.hflip);
        }
        mean /= n as f64;
        let bound = 3.0 * 20.0 / (3.0 * n as f64).sqrt();
        assert!(mean.abs() <= bound, "angle mean {mean} vs {bound}");
        assert!((flips as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn noise_schemes() {
        let x = img(12, 3, 4);
        let mut s = Rng::new(1).substream(0);
        assert_eq!(perturb(&mut s, &NoiseScheme::None, &x).unwrap(), x);
        let eps = img(13, 3, 4);
        assert_eq!(vp_interp(&x, 0.0, &eps).unwrap(), x);
        assert_eq!(perturb(&mut s, &NoiseScheme::Additive { sigma: 0.0 }, &x).unwrap(), x);
        assert_eq!(NoiseScheme::parse("vp:0.5").unwrap(), NoiseScheme::VpInterp { t_max: 0.5 });
        assert_eq!(NoiseScheme::parse("additive:0.2").unwrap(), NoiseScheme::Additive { sigma: 0.2 });
        assert_eq!(NoiseScheme::parse("none").unwrap(), NoiseScheme::None);
        assert!(NoiseScheme::parse("vp:2").is_err());
        assert!(NoiseScheme::parse("gauss").is_err());
        assert_eq!(NoiseScheme::parse(&NoiseScheme::VpInterp { t_max: 0.25 }.to_string()).unwrap(), NoiseScheme::VpInterp { t_max: 0.25 });
    }

    #[test]
    fn vp_interp_preserves_unit_variance() {
        let n = 1_000_000;
        let x = Rng::new(20).substream(0).gaussian(&[n]);
        let y = perturb(&mut Rng::new(21).substream(0), &NoiseScheme::VpInterp { t_max: 0.5 }, &x).unwrap();
        let mean = y.sum() / n as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() <= 0.01, "variance {var}");
    }

    #[test]
    fn rejects_non_square_input() {
        let x = Tensor::zeros(&[3, 4, 5]);
        assert!(apply(&general(), &x).is_err());
        assert!(TransformDistribution { flip_prob: 1.5, ..Default::default() }.validate().is_err());
        assert!(TransformDistribution { shift_frac: 0.6, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn apply_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0,
                           flip in any::<bool>(), angle in -25.0f64..25.0,
                           dy in -3.0f64..3.0, dx in -3.0f64..3.0) {
            let t = SpatialTransform { hflip: flip, angle, shift: (dy, dx) };
            let (a, b) = (img(seed, 3, 8), img(seed + 1, 3, 8));
            let lhs = apply(&t, &a.scale(alpha).add(&b.scale(beta)).unwrap()).unwrap();
            let rhs = apply(&t, &a).unwrap().scale(alpha).add(&apply(&t, &b).unwrap().scale(beta)).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12);
        }

        #[test]
        fn inverse_params_round_trip(flip in any::<bool>(), angle in -180.0f64..180.0,
                                     dy in -10.0f64..10.0, dx in -10.0f64..10.0) {
            let t = SpatialTransform { hflip: flip, angle, shift: (dy, dx) };
            prop_assert_eq!(t.inverse().inverse(), t);
            prop_assert!(t.compose_params(&t.inverse()).is_identity());
        }
    }
}
