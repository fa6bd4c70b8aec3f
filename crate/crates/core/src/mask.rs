//! Binary k-space sampling masks.
//!
//! Masks are stored in DFT-native layout: index `(0, 0)` is the DC sample and
//! the signed frequency of row `i` is `i` for `i < n - n/2` and `i - n`
//! otherwise. `centered()` gives the shifted view for display.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    /// Fully sampled vertical lines (phase encoding along columns).
    Cartesian,
    /// Fully sampled horizontal lines.
    CartesianHorizontal,
    /// Golden-angle radial spokes.
    Radial,
    /// Archimedean spiral.
    Spiral,
    /// Variable-density Bernoulli sampling with a Gaussian profile.
    Gaussian2d,
}

impl MaskPattern {
    pub const ALL: [MaskPattern; 5] = [
        MaskPattern::Cartesian,
        MaskPattern::CartesianHorizontal,
        MaskPattern::Radial,
        MaskPattern::Spiral,
        MaskPattern::Gaussian2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskPattern::Cartesian => "cartesian",
            MaskPattern::CartesianHorizontal => "cartesian_horizontal",
            MaskPattern::Radial => "radial",
            MaskPattern::Spiral => "spiral",
            MaskPattern::Gaussian2d => "gaussian2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown sampling pattern {s:?}")))
    }
}

impl std::fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingMask {
    bits: Array2<bool>,
}

/// Signed frequency of DFT index `i` on an axis of length `n`.
pub fn signed_freq(i: usize, n: usize) -> isize {
    if i < n - n / 2 {
        i as isize
    } else {
        i as isize - n as isize
    }
}

/// DFT index of signed frequency `k`, if it lies on the grid.
fn native_index(k: isize, n: usize) -> Option<usize> {
    let n_i = n as isize;
    let lo = -(n_i / 2);
    let hi = n_i - n_i / 2;
    (lo..hi).contains(&k).then(|| k.rem_euclid(n_i) as usize)
}

impl SamplingMask {
    pub fn from_bits(bits: Array2<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidParameter("empty mask".into()));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::InvalidParameter("mask samples nothing".into()));
        }
        Ok(Self { bits })
    }

    pub fn full(shape: (usize, usize)) -> Self {
        Self { bits: Array2::from_elem(shape, true) }
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn shape(&self) -> (usize, usize) {
        self.bits.dim()
    }

    /// Number of sampled locations `f`.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    /// `n m / f`.
    pub fn acceleration(&self) -> f64 {
        1.0 / self.fraction()
    }

    /// Flat row-major indices of the sampled locations; sample order.
    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    /// DC moved to `(n/2, m/2)`.
    pub fn centered(&self) -> Array2<bool> {
        let (n, m) = self.shape();
        Array2::from_shape_fn((n, m), |(i, j)| self.bits[[(i + n - n / 2) % n, (j + m - m / 2) % m]])
    }

    fn set_signed(&mut self, ky: isize, kx: isize) -> bool {
        let (n, m) = self.shape();
        match (native_index(ky, n), native_index(kx, m)) {
            (Some(i), Some(j)) => {
                self.bits[[i, j]] = true;
                true
            }
            _ => false,
        }
    }
}

/// Builds a mask with `n m / f` close to `acceleration`.
///
/// `acl_fraction` is the fraction of fully sampled central lines and only
/// applies to the Cartesian patterns.
pub fn make_mask(
    pattern: MaskPattern,
    shape: (usize, usize),
    acceleration: f64,
    acl_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    let (n, m) = shape;
    if n == 0 || m == 0 {
        return Err(Error::InvalidParameter("empty mask shape".into()));
    }
    if !(acceleration >= 1.0) || !acceleration.is_finite() {
        return Err(Error::InfeasibleAcceleration { acceleration, reason: "acceleration must be at least 1".into() });
    }
    if !(0.0..=1.0).contains(&acl_fraction) {
        return Err(Error::InvalidParameter(format!("ACL fraction {acl_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match pattern {
        MaskPattern::Cartesian => {
            let cols = line_set(m, acceleration, acl_fraction, &mut rng)?;
            let mut bits = Array2::from_elem(shape, false);
            for j in cols {
                bits.column_mut(j).fill(true);
            }
            SamplingMask::from_bits(bits)
        }
        MaskPattern::CartesianHorizontal => {
            let rows = line_set(n, acceleration, acl_fraction, &mut rng)?;
            let mut bits = Array2::from_elem(shape, false);
            for i in rows {
                bits.row_mut(i).fill(true);
            }
            SamplingMask::from_bits(bits)
        }
        MaskPattern::Radial => radial(shape, acceleration, &mut rng),
        MaskPattern::Spiral => spiral(shape, acceleration, &mut rng),
        MaskPattern::Gaussian2d => gaussian(shape, acceleration, &mut rng),
    }
}

/// `round(len / acceleration)` line indices: a contiguous centre block plus
/// equispaced outer lines with a random offset.
fn line_set(len: usize, acceleration: f64, acl_fraction: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let total = ((len as f64 / acceleration).round() as usize).max(1);
    let acl = (acl_fraction * len as f64).round() as usize;
    if acl > total {
        return Err(Error::InfeasibleAcceleration {
            acceleration,
            reason: format!("{acl} central lines exceed the budget of {total} lines"),
        });
    }
    let centre: Vec<isize> = (0..acl as isize).map(|k| k - acl as isize / 2).collect();
    let mut chosen: Vec<usize> = centre.iter().filter_map(|&k| native_index(k, len)).collect();
    let mut outer: Vec<isize> = (0..len).map(|i| signed_freq(i, len)).filter(|k| !centre.contains(k)).collect();
    outer.sort_unstable();
    let need = total - acl;
    if need > 0 {
        let offset: f64 = rng.gen_range(0.0..1.0);
        let step = outer.len() as f64 / need as f64;
        for j in 0..need {
            let k = outer[((j as f64 + offset) * step).floor() as usize % outer.len()];
            chosen.push(native_index(k, len).expect("on grid"));
        }
    }
    chosen.sort_unstable();
    chosen.dedup();
    Ok(chosen)
}

fn within_tolerance(mask: &SamplingMask, acceleration: f64) -> bool {
    (mask.acceleration() - acceleration).abs() <= 0.1 * acceleration
}

fn radial(shape: (usize, usize), acceleration: f64, rng: &mut ChaCha8Rng) -> Result<SamplingMask> {
    let (n, m) = shape;
    let target = (n * m) as f64 / acceleration;
    let golden = std::f64::consts::PI * (5f64.sqrt() - 1.0) / 2.0;
    let theta0: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let reach = 0.5 * ((n * n + m * m) as f64).sqrt() + 1.0;
    let mut mask = SamplingMask { bits: Array2::from_elem(shape, false) };
    mask.set_signed(0, 0);
    let max_spokes = 64 * n.max(m);
    let mut best: Option<SamplingMask> = None;
    for k in 0..max_spokes {
        let prev = mask.count();
        let theta = theta0 + k as f64 * golden;
        let (sn, cs) = theta.sin_cos();
        let steps = (2.0 * reach / 0.5).ceil() as isize;
        for t in 0..=steps {
            let r = -reach + 0.5 * t as f64;
            mask.set_signed((r * sn).round() as isize, (r * cs).round() as isize);
        }
        let count = mask.count() as f64;
        if count >= target {
            // keep whichever of the last two spoke counts is closer
            let before = (prev as f64 - target).abs();
            if before < count - target {
                if let Some(b) = best {
                    return accept(b, acceleration);
                }
            }
            return accept(mask, acceleration);
        }
        best = Some(mask.clone());
    }
    Err(Error::InfeasibleAcceleration { acceleration, reason: "radial spokes cannot reach the sample count".into() })
}

fn spiral_mask(shape: (usize, usize), spacing: f64, rotation: f64) -> SamplingMask {
    let (n, m) = shape;
    let reach = 0.5 * ((n * n + m * m) as f64).sqrt() + 1.0;
    let b = spacing / (2.0 * std::f64::consts::PI);
    let mut mask = SamplingMask { bits: Array2::from_elem(shape, false) };
    let mut theta = 0.0f64;
    loop {
        let r = b * theta;
        if r > reach {
            break;
        }
        let (sn, cs) = (theta + rotation).sin_cos();
        mask.set_signed((r * sn).round() as isize, (r * cs).round() as isize);
        // arc-length step of half a pixel
        theta += 0.5 / (r * r + b * b).sqrt();
    }
    mask
}

fn spiral(shape: (usize, usize), acceleration: f64, rng: &mut ChaCha8Rng) -> Result<SamplingMask> {
    let target = (shape.0 * shape.1) as f64 / acceleration;
    let rotation: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let (mut lo, mut hi) = (0.05f64, shape.0.max(shape.1) as f64);
    let mut best = spiral_mask(shape, hi, rotation);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let mask = spiral_mask(shape, mid, rotation);
        let count = mask.count() as f64;
        if (count - target).abs() < (best.count() as f64 - target).abs() {
            best = mask;
        }
        if count > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    accept(best, acceleration)
}

fn gaussian(shape: (usize, usize), acceleration: f64, rng: &mut ChaCha8Rng) -> Result<SamplingMask> {
    let (n, m) = shape;
    let target = (n * m) as f64 / acceleration;
    let rho = 0.25 * n.min(m) as f64;
    let profile = Array2::from_shape_fn(shape, |(i, j)| {
        let (ky, kx) = (signed_freq(i, n) as f64, signed_freq(j, m) as f64);
        (-(ky * ky + kx * kx) / (2.0 * rho * rho)).exp()
    });
    let expected = |c: f64| profile.iter().map(|p| (c * p).min(1.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while expected(hi) < target && hi < 1e12 {
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let mut bits = profile.mapv(|p| rng.gen_range(0.0..1.0) < (c * p).min(1.0));
    bits[[0, 0]] = true;
    accept(SamplingMask { bits }, acceleration)
}

fn accept(mask: SamplingMask, acceleration: f64) -> Result<SamplingMask> {
    if within_tolerance(&mask, acceleration) {
        Ok(mask)
    } else {
        Err(Error::InfeasibleAcceleration {
            acceleration,
            reason: format!("closest achievable acceleration is {:.3}", mask.acceleration()),
        })
    }
}
