//! Synthetic test objects and coil sensitivities.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mri::{ComplexImage, Sensitivities};
use crate::prior::RealImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PhantomKind {
    SheppLogan,
    Ellipses { seed: u64 },
    Flat,
}

impl PhantomKind {
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        match s {
            "shepp_logan" | "shepp-logan" => Ok(Self::SheppLogan),
            "ellipses" => Ok(Self::Ellipses { seed }),
            "flat" => Ok(Self::Flat),
            _ => Err(Error::InvalidParameter(format!("unknown phantom {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.x0, y - self.y0);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse { value: 1.0, a: 0.69, b: 0.92, x0: 0.0, y0: 0.0, phi_deg: 0.0 },
    Ellipse { value: -0.8, a: 0.6624, b: 0.874, x0: 0.0, y0: -0.0184, phi_deg: 0.0 },
    Ellipse { value: -0.2, a: 0.11, b: 0.31, x0: 0.22, y0: 0.0, phi_deg: -18.0 },
    Ellipse { value: -0.2, a: 0.16, b: 0.41, x0: -0.22, y0: 0.0, phi_deg: 18.0 },
    Ellipse { value: 0.1, a: 0.21, b: 0.25, x0: 0.0, y0: 0.35, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: 0.1, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: -0.1, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.046, b: 0.023, x0: -0.08, y0: -0.605, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.023, b: 0.023, x0: 0.0, y0: -0.606, phi_deg: 0.0 },
    Ellipse { value: 0.1, a: 0.023, b: 0.046, x0: 0.06, y0: -0.605, phi_deg: 0.0 },
];

/// Pixel centre in `[-1, 1]^2`, `y` pointing up.
fn coords(i: usize, j: usize, n: usize, m: usize) -> (f64, f64) {
    ((2 * j + 1) as f64 / m as f64 - 1.0, 1.0 - (2 * i + 1) as f64 / n as f64)
}

fn render(shape: (usize, usize), ellipses: &[Ellipse]) -> RealImage {
    let (n, m) = shape;
    Array2::from_shape_fn(shape, |(i, j)| {
        let (x, y) = coords(i, j, n, m);
        ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.value).sum()
    })
}

fn normalize_max(mut img: RealImage) -> RealImage {
    img.mapv_inplace(|v| v.max(0.0));
    let max = img.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        img /= max;
    }
    img
}

/// Modified Shepp-Logan head phantom scaled to maximum 1.
pub fn shepp_logan(shape: (usize, usize)) -> RealImage {
    normalize_max(render(shape, &SHEPP_LOGAN))
}

/// Random nested ellipses with a smooth intensity ramp and low-amplitude
/// smooth texture, nonnegative with maximum 1.
pub fn random_ellipses(shape: (usize, usize), rng: &mut ChaCha8Rng) -> RealImage {
    let (n, m) = shape;
    let mut ellipses = vec![Ellipse {
        value: rng.gen_range(0.4..0.8),
        a: rng.gen_range(0.6..0.9),
        b: rng.gen_range(0.7..0.95),
        x0: rng.gen_range(-0.05..0.05),
        y0: rng.gen_range(-0.05..0.05),
        phi_deg: rng.gen_range(-20.0..20.0),
    }];
    for _ in 0..rng.gen_range(4..10) {
        ellipses.push(Ellipse {
            value: rng.gen_range(-0.3..0.4),
            a: rng.gen_range(0.05..0.35),
            b: rng.gen_range(0.05..0.35),
            x0: rng.gen_range(-0.45..0.45),
            y0: rng.gen_range(-0.55..0.55),
            phi_deg: rng.gen_range(0.0..180.0),
        });
    }
    let base = render(shape, &ellipses);
    let support = base.mapv(|v| if v != 0.0 { 1.0 } else { 0.0 });
    let (gx, gy): (f64, f64) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let texture = smooth_noise(shape, 0.04 * n.min(m) as f64, rng);
    let img = Array2::from_shape_fn(shape, |(i, j)| {
        let (x, y) = coords(i, j, n, m);
        let ramp = 1.0 + gx * x + gy * y;
        base[[i, j]] * ramp + support[[i, j]] * 0.08 * texture[[i, j]]
    });
    normalize_max(img)
}

/// White noise blurred by a separable Gaussian of width `sigma` pixels
/// (periodic), rescaled to unit maximum magnitude.
pub fn smooth_noise(shape: (usize, usize), sigma: f64, rng: &mut ChaCha8Rng) -> RealImage {
    let (n, m) = shape;
    let white: RealImage = Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal));
    let sigma = sigma.max(0.3);
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let wrap = |k: isize, len: usize| k.rem_euclid(len as isize) as usize;
    let rows = Array2::from_shape_fn(shape, |(i, j)| {
        taps.iter().enumerate().map(|(t, w)| w * white[[wrap(i as isize + t as isize - radius, n), j]]).sum::<f64>()
    });
    let out = Array2::from_shape_fn(shape, |(i, j)| {
        taps.iter().enumerate().map(|(t, w)| w * rows[[i, wrap(j as isize + t as isize - radius, m)]]).sum::<f64>()
    });
    let peak = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        out / peak
    } else {
        out
    }
}

/// Real-valued test object as a complex image.
pub fn phantom(shape: (usize, usize), kind: PhantomKind) -> ComplexImage {
    let img = match kind {
        PhantomKind::SheppLogan => shepp_logan(shape),
        PhantomKind::Ellipses { seed } => random_ellipses(shape, &mut ChaCha8Rng::seed_from_u64(seed)),
        PhantomKind::Flat => Array2::ones(shape),
    };
    img.mapv(|v| Complex64::new(v, 0.0))
}

/// Smooth coil profiles: Gaussian magnitude bumps centred on the image
/// border with gentle linear phase ramps. With `normalize` the maps satisfy
/// `sum_i |sigma_i|^2 = 1`.
pub fn simulate_coils(shape: (usize, usize), coils: usize, seed: u64, normalize: bool) -> Result<Sensitivities> {
    if coils == 0 {
        return Err(Error::InvalidParameter("at least one coil is required".into()));
    }
    let (n, m) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = n.max(m) as f64;
    let width = 0.6 * size;
    let (ci, cj) = (0.5 * n as f64, 0.5 * m as f64);
    let maps: Vec<ComplexImage> = (0..coils)
        .map(|c| {
            let alpha = 2.0 * std::f64::consts::PI * (c as f64 + rng.gen_range(-0.1..0.1)) / coils as f64;
            let (bi, bj) = (ci + 0.5 * n as f64 * alpha.sin(), cj + 0.5 * m as f64 * alpha.cos());
            let beta: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let slope = rng.gen_range(0.5..1.5) * std::f64::consts::FRAC_PI_2 / size;
            let phase0: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            Array2::from_shape_fn(shape, |(i, j)| {
                let (di, dj) = (i as f64 - bi, j as f64 - bj);
                let mag = (-(di * di + dj * dj) / (2.0 * width * width)).exp();
                let ph = phase0 + slope * ((j as f64 - cj) * beta.cos() + (i as f64 - ci) * beta.sin());
                Complex64::from_polar(mag, ph)
            })
        })
        .collect();
    let mut s = Sensitivities::from_maps(&maps)?;
    if normalize {
        s.normalize();
    }
    Ok(s)
}

/// `|D u| / |u|` with forward differences inside the image.
pub fn roughness(u: ndarray::ArrayView2<'_, Complex64>) -> f64 {
    let (n, m) = u.dim();
    let mut d = 0.0;
    for i in 0..n {
        for j in 0..m {
            if i + 1 < n {
                d += (u[[i + 1, j]] - u[[i, j]]).norm_sqr();
            }
            if j + 1 < m {
                d += (u[[i, j + 1]] - u[[i, j]]).norm_sqr();
            }
        }
    }
    let e: f64 = u.iter().map(|v| v.norm_sqr()).sum();
    if e == 0.0 {
        0.0
    } else {
        (d / e).sqrt()
    }
}
