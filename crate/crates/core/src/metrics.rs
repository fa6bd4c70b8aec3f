//! Image quality metrics against a real-valued reference.

use ndarray::{Array2, Zip};

use crate::error::{check_shape, Error, Result};
use crate::mri::{ComplexImage, Sensitivities};
use crate::prior::RealImage;

/// Reported PSNR for a perfect match.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn mse(x: &RealImage, r: &RealImage) -> f64 {
    Zip::from(x).and(r).fold(0.0, |acc, a, b| acc + (a - b) * (a - b)) / x.len() as f64
}

fn max_of(r: &RealImage) -> f64 {
    r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// `10 log10(max(ref)^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &RealImage, reference: &RealImage) -> Result<f64> {
    check_shape(reference.dim(), x.dim())?;
    let e = mse(x, reference);
    let peak = max_of(reference);
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP))
}

/// `|x - ref|^2 / |ref|^2`.
pub fn nmse(x: &RealImage, reference: &RealImage) -> Result<f64> {
    check_shape(reference.dim(), x.dim())?;
    let den: f64 = reference.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(mse(x, reference) * x.len() as f64 / den)
}

/// Mean SSIM over all fully contained 7x7 windows with uniform weights and
/// sample (co)variances; the data range is `max(ref)`.
pub fn ssim(x: &RealImage, reference: &RealImage) -> Result<f64> {
    check_shape(reference.dim(), x.dim())?;
    let (n, m) = x.dim();
    let w = SSIM_WINDOW;
    if n < w || m < w {
        return Err(Error::ShapeTooSmall { shape: (n, m), min: w });
    }
    let range = max_of(reference);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let np = (w * w) as f64;
    let cov = np / (np - 1.0);

    let sums = |f: &dyn Fn(f64, f64) -> f64| -> Array2<f64> {
        let mut integral = Array2::<f64>::zeros((n + 1, m + 1));
        for i in 0..n {
            for j in 0..m {
                integral[[i + 1, j + 1]] =
                    f(x[[i, j]], reference[[i, j]]) + integral[[i, j + 1]] + integral[[i + 1, j]] - integral[[i, j]];
            }
        }
        Array2::from_shape_fn((n - w + 1, m - w + 1), |(i, j)| {
            integral[[i + w, j + w]] - integral[[i, j + w]] - integral[[i + w, j]] + integral[[i, j]]
        })
    };
    let sx = sums(&|a, _| a);
    let sy = sums(&|_, b| b);
    let sxx = sums(&|a, _| a * a);
    let syy = sums(&|_, b| b * b);
    let sxy = sums(&|a, b| a * b);

    let mut total = 0.0;
    for idx in 0..sx.len() {
        let (i, j) = (idx / sx.ncols(), idx % sx.ncols());
        let mx = sx[[i, j]] / np;
        let my = sy[[i, j]] / np;
        let vx = cov * (sxx[[i, j]] / np - mx * mx);
        let vy = cov * (syy[[i, j]] / np - my * my);
        let vxy = cov * (sxy[[i, j]] / np - mx * my);
        let s = ((2.0 * mx * my + c1) * (2.0 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        total += s;
    }
    Ok(total / sx.len() as f64)
}

/// `|x| .* sqrt(sum_i |sigma_i|^2)`.
pub fn rss_weight(x: &ComplexImage, s: &Sensitivities) -> Result<RealImage> {
    check_shape(s.shape(), x.dim())?;
    let rss = s.sum_sq();
    Ok(Zip::from(x).and(&rss).map_collect(|v, &r| v.norm() * r.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

pub fn scores(x: &RealImage, reference: &RealImage) -> Result<Scores> {
    Ok(Scores { psnr: psnr(x, reference)?, ssim: ssim(x, reference)?, nmse: nmse(x, reference)? })
}
