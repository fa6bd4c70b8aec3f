//! Joint posterior sampling over the image and the coil sensitivities.
//!
//! Each reverse-diffusion level runs a predictor on the real and imaginary
//! parts, a data-consistency step on the image, Langevin corrector rounds
//! and a proximal gradient step on the sensitivities.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coil_prior::SmoothnessProx;
use crate::error::{check_shape, Error, Result};
use crate::io::{read_sensitivities, write_sensitivities, Reader, Writer};
use crate::mri::{ComplexImage, KSpaceData, MriOperator, Sensitivities};
use crate::prior::{ImagePrior, RealImage};

pub const RECON_MAGIC: &[u8; 4] = b"PGRC";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Predictor steps `N` of the full schedule.
    pub steps: usize,
    /// Langevin corrector rounds per level.
    pub corrector_steps: usize,
    /// Image data-consistency step.
    pub lambda: f64,
    /// Sensitivity gradient step and prox weight.
    pub mu: f64,
    pub zeta_min: f64,
    pub zeta_max: f64,
    /// Corrector signal-to-noise ratio.
    pub snr: f64,
    pub n_posterior: usize,
    pub map: bool,
    pub map_steps: usize,
    pub map_lr: f64,
    /// Prior weight in the MAP objective, in units of `zeta_min^2`.
    pub map_prior_weight: f64,
    /// Fraction of the schedule skipped by starting from the noised
    /// zero-filled image.
    pub ccdf_start: f64,
    pub seed: u64,
    /// Scales every injected noise draw; `0` gives a deterministic chain.
    pub noise_scale: f64,
    /// Rescale `x` and `sigma` pixelwise after each level so that
    /// `sum_i |sigma_i|^2 = 1`.
    pub normalize_sensitivities: bool,
    /// Cap the sensitivity step at the inverse Lipschitz constant.
    pub clip_mu: bool,
    pub keep_samples: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            corrector_steps: 1,
            lambda: 1.0,
            mu: 10.0,
            zeta_min: 0.01,
            zeta_max: 10.0,
            snr: 0.16,
            n_posterior: 10,
            map: true,
            map_steps: 250,
            map_lr: 1.0,
            map_prior_weight: 0.2,
            ccdf_start: 0.0,
            seed: 0,
            noise_scale: 1.0,
            normalize_sensitivities: true,
            clip_mu: true,
            keep_samples: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.steps < 1 {
            return bad("at least one predictor step is required".into());
        }
        if !(self.zeta_min > 0.0 && self.zeta_max > self.zeta_min) {
            return bad(format!("noise range ({}, {}) must satisfy 0 < min < max", self.zeta_min, self.zeta_max));
        }
        if self.n_posterior < 1 {
            return bad("at least one posterior sample is required".into());
        }
        if !(self.lambda >= 0.0) || !(self.mu > 0.0) || !(self.snr >= 0.0) || !(self.noise_scale >= 0.0) {
            return bad("step sizes must be nonnegative and mu positive".into());
        }
        if !(0.0..1.0).contains(&self.ccdf_start) {
            return bad(format!("ccdf_start {} outside [0, 1)", self.ccdf_start));
        }
        if !(self.map_lr > 0.0) || !(self.map_prior_weight >= 0.0) {
            return bad("MAP step must be positive and prior weight nonnegative".into());
        }
        Ok(())
    }

    /// First level of the reverse chain, `round((1 - ccdf_start) N)`.
    pub fn start_index(&self) -> usize {
        (((1.0 - self.ccdf_start) * self.steps as f64).round() as usize).clamp(1, self.steps)
    }
}

/// `zeta_i = zeta_min (zeta_max / zeta_min)^(i / N)`, `i = 0..=N`.
pub fn schedule(cfg: &SamplerConfig) -> Vec<f64> {
    let n = cfg.steps;
    let ratio = cfg.zeta_max / cfg.zeta_min;
    (0..=n)
        .map(|i| match i {
            0 => cfg.zeta_min,
            i if i == n => cfg.zeta_max,
            i => cfg.zeta_min * ratio.powf(i as f64 / n as f64),
        })
        .collect()
}

/// Langevin step `2 (r |noise| / |score|)^2`; zero for a vanishing score.
pub fn corrector_eps(score: &RealImage, noise: &RealImage, snr: f64) -> f64 {
    let s = score.iter().map(|v| v * v).sum::<f64>().sqrt();
    if s == 0.0 {
        return 0.0;
    }
    let z = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
    2.0 * (snr * z / s).powi(2)
}

fn gaussian(shape: (usize, usize), rng: &mut ChaCha8Rng) -> RealImage {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn parts(x: &ComplexImage) -> (RealImage, RealImage) {
    (x.mapv(|v| v.re), x.mapv(|v| v.im))
}

fn combine(re: &RealImage, im: &RealImage) -> ComplexImage {
    Zip::from(re).and(im).map_collect(|&a, &b| Complex64::new(a, b))
}

fn finite_image(x: &ComplexImage) -> bool {
    x.iter().all(|v| v.re.is_finite() && v.im.is_finite())
}

/// Reverse-diffusion starting point: the zero-filled RSS image (zero phase)
/// plus complex noise of level `zeta_{i0}`.
pub fn ccdf_init(z: &KSpaceData, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<(ComplexImage, usize)> {
    cfg.validate()?;
    let (_, rss) = MriOperator::new(&z.mask).zero_filled(z)?;
    let i0 = cfg.start_index();
    let zeta = schedule(cfg)[i0] * cfg.noise_scale;
    let re = &rss + &(gaussian(rss.dim(), rng) * zeta);
    let im = gaussian(rss.dim(), rng) * zeta;
    Ok((combine(&re, &im), i0))
}

/// Zero-filled coil images divided by their RSS.
pub fn initial_sensitivities(z: &KSpaceData) -> Result<Sensitivities> {
    let (coils, rss) = MriOperator::new(&z.mask).zero_filled(z)?;
    let maps: Vec<ComplexImage> = coils
        .iter()
        .map(|c| Zip::from(c).and(&rss).map_collect(|&v, &r| if r > 0.0 { v / r } else { Complex64::default() }))
        .collect();
    Sensitivities::from_maps(&maps)
}

/// Pixelwise `x <- rho x`, `sigma <- sigma / rho` with `rho^2 = sum |sigma_i|^2`.
pub fn normalize_gauge(x: &mut ComplexImage, s: &mut Sensitivities) {
    let rho = s.sum_sq().mapv(f64::sqrt);
    Zip::from(&mut *x).and(&rho).for_each(|v, &r| {
        if r > 0.0 {
            *v *= r;
        }
    });
    s.normalize();
}

/// `mu`, capped at `1 / max |x|^2` when `clip_mu` is set. The data term is
/// `max |x|^2`-smooth in `sigma`, so larger steps diverge while `x` is noisy.
pub fn sensitivity_step(x: &ComplexImage, cfg: &SamplerConfig) -> f64 {
    if !cfg.clip_mu {
        return cfg.mu;
    }
    let lip = x.iter().fold(0.0f64, |a, v| a.max(v.norm_sqr()));
    if lip > 0.0 {
        cfg.mu.min(1.0 / lip)
    } else {
        cfg.mu
    }
}

/// Endpoint of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSample {
    pub image: ComplexImage,
    pub sensitivities: Sensitivities,
}

/// One posterior sample. `chain` selects an independent noise stream of
/// `cfg.seed`.
pub fn posterior_sample<P: ImagePrior + ?Sized>(
    prior: &P,
    z: &KSpaceData,
    cfg: &SamplerConfig,
    chain: u64,
) -> Result<ChainSample> {
    cfg.validate()?;
    let op = MriOperator::new(&z.mask);
    let shape = op.shape();
    let prox = SmoothnessProx::new(shape);
    let zetas = schedule(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain);

    let (mut x, i0) = ccdf_init(z, cfg, &mut rng)?;
    let mut s = initial_sensitivities(z)?;
    let noise = cfg.noise_scale;
    let check = |x: &ComplexImage, iteration: usize, step: &'static str| {
        if finite_image(x) {
            Ok(())
        } else {
            Err(Error::NonFinite { iteration, step })
        }
    };

    for i in (0..i0).rev() {
        let (hi, lo) = (zetas[i + 1], zetas[i]);
        let dvar = hi * hi - lo * lo;

        let (mut re, mut im) = parts(&x);
        for c in [&mut re, &mut im] {
            let score = prior.score(c, hi)?;
            let xi = gaussian(shape, &mut rng);
            c.scaled_add(dvar, &score);
            c.scaled_add(noise * dvar.sqrt(), &xi);
        }
        x = combine(&re, &im);
        check(&x, i, "predictor")?;

        if cfg.lambda > 0.0 {
            let g = op.grad_x(&x, &s, z)?;
            x.scaled_add(Complex64::new(-cfg.lambda, 0.0), &g);
            check(&x, i, "likelihood")?;
        }

        for _ in 0..cfg.corrector_steps {
            let (mut re, mut im) = parts(&x);
            for c in [&mut re, &mut im] {
                let score = prior.score(c, lo)?;
                let xi = gaussian(shape, &mut rng);
                let eps = corrector_eps(&score, &xi, cfg.snr);
                c.scaled_add(eps, &score);
                c.scaled_add(noise * (2.0 * eps).sqrt(), &xi);
            }
            x = combine(&re, &im);
            check(&x, i, "corrector")?;
        }

        let mu = sensitivity_step(&x, cfg);
        let gs = op.grad_sigma(&x, &s, z)?;
        let mut v = s.clone();
        v.maps_mut().scaled_add(Complex64::new(-mu, 0.0), gs.maps());
        s = prox.apply(&v, mu)?;
        if cfg.normalize_sensitivities {
            normalize_gauge(&mut x, &mut s);
        }
        if !s.is_finite() {
            return Err(Error::NonFinite { iteration: i, step: "sensitivity" });
        }
        check(&x, i, "sensitivity")?;
    }
    Ok(ChainSample { image: x, sensitivities: s })
}

/// `1/2 |A(x, sigma) - z|^2 + w zeta_min^2 (E(Re x, zeta_min) + E(Im x, zeta_min))`.
///
/// The `zeta_min^2` factor matches the balance of the last chain level, where
/// a prior step of `zeta^2 score` meets a unit data step.
pub fn map_objective<P: ImagePrior + ?Sized>(
    prior: &P,
    op: &MriOperator,
    z: &KSpaceData,
    s: &Sensitivities,
    x: &ComplexImage,
    cfg: &SamplerConfig,
) -> Result<f64> {
    let (re, im) = parts(x);
    let prior_term = prior.energy(&re, cfg.zeta_min)? + prior.energy(&im, cfg.zeta_min)?;
    Ok(op.data_misfit(x, s, z)? + map_weight(cfg) * prior_term)
}

fn map_weight(cfg: &SamplerConfig) -> f64 {
    cfg.map_prior_weight * cfg.zeta_min * cfg.zeta_min
}

fn map_gradient<P: ImagePrior + ?Sized>(
    prior: &P,
    op: &MriOperator,
    z: &KSpaceData,
    s: &Sensitivities,
    x: &ComplexImage,
    cfg: &SamplerConfig,
) -> Result<ComplexImage> {
    let (re, im) = parts(x);
    let score = combine(&prior.score(&re, cfg.zeta_min)?, &prior.score(&im, cfg.zeta_min)?);
    let mut g = op.grad_x(x, s, z)?;
    g.scaled_add(Complex64::new(-map_weight(cfg), 0.0), &score);
    Ok(g)
}

/// Nesterov-accelerated gradient descent on [`map_objective`] with the
/// sensitivities held fixed.
///
/// The step starts at `map_lr` and is halved until the sufficient-decrease
/// condition `f(y - t g) <= f(y) - t/2 |g|^2` holds; momentum restarts
/// whenever the objective would increase, so the iterates are monotone.
pub fn map_refine<P: ImagePrior + ?Sized>(
    prior: &P,
    z: &KSpaceData,
    s: &Sensitivities,
    start: &ComplexImage,
    cfg: &SamplerConfig,
) -> Result<ComplexImage> {
    const MIN_STEP: f64 = 1e-14;
    let op = MriOperator::new(&z.mask);
    let objective = |x: &ComplexImage| map_objective(prior, &op, z, s, x, cfg);
    let mut x = start.clone();
    let mut prev = start.clone();
    let mut fx = objective(&x)?;
    let mut step = cfg.map_lr;
    let mut k = 0usize;
    for iteration in 0..cfg.map_steps {
        let momentum = k as f64 / (k as f64 + 3.0);
        let y = &x + &((&x - &prev) * Complex64::new(momentum, 0.0));
        let fy = if k == 0 { fx } else { objective(&y)? };
        let g = map_gradient(prior, &op, z, s, &y, cfg)?;
        let g2: f64 = g.iter().map(|v| v.norm_sqr()).sum();
        if g2 == 0.0 {
            break;
        }
        let (cand, fc) = loop {
            let cand = &y - &(&g * Complex64::new(step, 0.0));
            let fc = objective(&cand)?;
            if fc <= fy - 0.5 * step * g2 {
                break (cand, fc);
            }
            step *= 0.5;
            if step < MIN_STEP {
                return Ok(x);
            }
        };
        if !finite_image(&cand) || !fc.is_finite() {
            return Err(Error::NonFinite { iteration, step: "map" });
        }
        if fc > fx {
            // restart from x without momentum
            prev = x.clone();
            k = 0;
            continue;
        }
        prev = std::mem::replace(&mut x, cand);
        fx = fc;
        k += 1;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconResult {
    /// Mean of the chain endpoints.
    pub mmse: ComplexImage,
    /// Per-pixel variance of the endpoint magnitudes (divided by the number
    /// of samples).
    pub variance: RealImage,
    pub map_image: Option<ComplexImage>,
    /// Mean of the chain sensitivities.
    pub sensitivities: Sensitivities,
    /// Chain endpoints when `keep_samples` is set.
    pub samples: Vec<ComplexImage>,
    /// Factor applied to the data before sampling; outputs are in data units.
    pub data_scale: f64,
}

impl ReconResult {
    pub fn shape(&self) -> (usize, usize) {
        self.mmse.dim()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(RECON_MAGIC);
        let (n, m) = self.shape();
        w.usize(n);
        w.usize(m);
        w.f64(self.data_scale);
        w.complex(self.mmse.iter());
        w.f64s(self.variance.iter());
        w.u32(self.map_image.is_some() as u32);
        if let Some(map) = &self.map_image {
            w.complex(map.iter());
        }
        write_sensitivities(&mut w, &self.sensitivities);
        w.usize(self.samples.len());
        for s in &self.samples {
            w.complex(s.iter());
        }
        w.finish()
    }

    pub fn decode(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data, RECON_MAGIC)?;
        let (n, m) = (r.usize()?, r.usize()?);
        let data_scale = r.f64()?;
        let image = |r: &mut Reader<'_>| -> Result<ComplexImage> {
            Ok(Array2::from_shape_vec((n, m), r.complex(n * m)?).expect("sized"))
        };
        let mmse = image(&mut r)?;
        let variance = Array2::from_shape_vec((n, m), r.f64s(n * m)?).expect("sized");
        let map_image = match r.u32()? {
            0 => None,
            _ => Some(image(&mut r)?),
        };
        let sensitivities = read_sensitivities(&mut r, (n, m))?;
        let count = r.usize()?;
        let samples = (0..count).map(|_| image(&mut r)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { mmse, variance, map_image, sensitivities, samples, data_scale })
    }
}

/// Runs `n_posterior` chains in parallel and reduces them in chain order.
///
/// The data are divided by the maximum of the zero-filled RSS image before
/// sampling so that intensities match the training range; results are
/// scaled back.
pub fn estimate<P: ImagePrior + ?Sized>(prior: &P, z: &KSpaceData, cfg: &SamplerConfig) -> Result<ReconResult> {
    cfg.validate()?;
    let (_, rss) = MriOperator::new(&z.mask).zero_filled(z)?;
    let scale = rss.iter().cloned().fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidParameter("k-space data are zero or non-finite".into()));
    }
    let mut zn = z.clone();
    zn.samples.mapv_inplace(|v| v / scale);
    zn.noise_std /= scale;

    let chains = (0..cfg.n_posterior as u64)
        .into_par_iter()
        .map(|c| posterior_sample(prior, &zn, cfg, c))
        .collect::<Result<Vec<_>>>()?;

    let k = chains.len() as f64;
    let shape = zn.shape();
    let mut mean = Array2::<Complex64>::zeros(shape);
    let mut mag_mean = Array2::<f64>::zeros(shape);
    let mut sens = Sensitivities::zeros(zn.coils(), shape);
    for c in &chains {
        mean += &c.image;
        mag_mean += &c.image.mapv(|v| v.norm());
        *sens.maps_mut() += c.sensitivities.maps();
    }
    mean /= Complex64::new(k, 0.0);
    mag_mean /= k;
    sens.maps_mut().mapv_inplace(|v| v / k);
    let mut variance = Array2::<f64>::zeros(shape);
    for c in &chains {
        Zip::from(&mut variance).and(&c.image).and(&mag_mean).for_each(|v, x, mm| *v += (x.norm() - mm).powi(2));
    }
    variance /= k;

    let map_image = if cfg.map {
        let first = &chains[0];
        let x = map_refine(prior, &zn, &first.sensitivities, &first.image, cfg)?;
        Some(x * Complex64::new(scale, 0.0))
    } else {
        None
    };

    let to_data = Complex64::new(scale, 0.0);
    Ok(ReconResult {
        mmse: mean * to_data,
        variance: variance * (scale * scale),
        map_image,
        sensitivities: sens,
        samples: if cfg.keep_samples { chains.iter().map(|c| &c.image * to_data).collect() } else { Vec::new() },
        data_scale: scale,
    })
}

/// Prior that contributes nothing; reduces the sampler to data consistency.
#[derive(Clone, Copy, Debug, Default)]
pub struct FlatPrior;

impl ImagePrior for FlatPrior {
    fn energy(&self, _x: &RealImage, _zeta: f64) -> Result<f64> {
        Ok(0.0)
    }

    fn score(&self, x: &RealImage, _zeta: f64) -> Result<RealImage> {
        Ok(Array2::zeros(x.dim()))
    }
}

/// Checks that a trained model matches the data grid.
pub fn check_model_shape(model_shape: (usize, usize), z: &KSpaceData) -> Result<()> {
    check_shape(model_shape, z.shape())
}
