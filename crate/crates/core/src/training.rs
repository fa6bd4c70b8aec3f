//! Denoising score matching with analytic gradients, projected AdaBelief
//! and an exponential moving average of the iterates.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::prior::{ModelParams, PogmdmModel, RealImage};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Plain `|x - D(y)|^2` at every noise level. Dominated by the largest
    /// levels in a log-uniform draw.
    Uniform,
    /// `|x - D(y)|^2 / zeta^2`, equalizing the contribution of noise levels.
    #[default]
    InverseVariance,
}

impl LossWeighting {
    fn factor(self, zeta: f64) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::InverseVariance if zeta > 0.0 => 1.0 / (zeta * zeta),
            LossWeighting::InverseVariance => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_momentum: f64,
    /// Noise levels are drawn log-uniformly from `[zeta_min, zeta_max]`.
    pub zeta_min: f64,
    pub zeta_max: f64,
    pub seed: u64,
    /// Train on random square crops of this size instead of full images.
    pub crop: Option<usize>,
    pub weighting: LossWeighting,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            ema_momentum: 0.999,
            zeta_min: 0.01,
            zeta_max: 10.0,
            seed: 0,
            crop: None,
            weighting: LossWeighting::InverseVariance,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if self.batch < 1 {
            return bad("batch must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad("EMA momentum must lie in [0, 1)");
        }
        if !(self.zeta_min > 0.0 && self.zeta_max >= self.zeta_min) {
            return bad("noise range must satisfy 0 < zeta_min <= zeta_max");
        }
        Ok(())
    }
}

/// One training example: clean image, noise level and unit Gaussian noise.
#[derive(Clone, Copy, Debug)]
pub struct DsmSample<'a> {
    pub image: &'a RealImage,
    pub zeta: f64,
    pub noise: &'a RealImage,
}

fn residual(model: &PogmdmModel, s: &DsmSample<'_>, cached: bool) -> Result<(RealImage, RealImage, crate::prior::ScoreParts)> {
    check_shape(model.shape(), s.image.dim())?;
    check_shape(model.shape(), s.noise.dim())?;
    let y = s.image + &(s.noise * s.zeta);
    let parts = if cached { model.score_parts_cached(&y, s.zeta)? } else { model.score_parts(&y, s.zeta)? };
    let mut r = s.image - &y;
    r.scaled_add(-s.zeta * s.zeta, &parts.score);
    Ok((y, r, parts))
}

/// Mean over the batch of `weight(zeta) * |x - y - zeta^2 score(y, zeta)|^2`
/// with `y = x + zeta * noise`.
pub fn dsm_loss(model: &PogmdmModel, batch: &[DsmSample<'_>], weighting: LossWeighting) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let losses = batch
        .par_iter()
        .map(|s| {
            let (_, r, _) = residual(model, s, false)?;
            Ok(weighting.factor(s.zeta) * r.iter().map(|v| v * v).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// `dsm_loss` and its gradient with respect to the flat learnable
/// parameters (`ModelParams::to_flat` order).
pub fn dsm_loss_and_grad(
    model: &PogmdmModel,
    batch: &[DsmSample<'_>],
    weighting: LossWeighting,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per_sample = batch
        .par_iter()
        .map(|s| sample_loss_and_grad(model, s, weighting.factor(s.zeta)))
        .collect::<Result<Vec<_>>>()?;
    // Everything below is linear in the per-sample pieces, so the chain rule
    // into the filter parameters runs once per batch.
    let scale = 1.0 / batch.len() as f64;
    let sys = model.system();
    let mut loss = 0.0;
    let mut filter_grads = vec![Array2::zeros(model.shape()); sys.num_filters()];
    let mut weight_grads = Array2::zeros(model.params().free_weights.dim());
    let mut norm_coeffs = vec![0.0; sys.num_filters()];
    for part in per_sample {
        loss += part.loss * scale;
        let Some(part) = part.grad else { continue };
        for (a, b) in filter_grads.iter_mut().zip(&part.filters) {
            a.scaled_add(scale, b);
        }
        weight_grads.scaled_add(scale, &part.weights);
        for (a, b) in norm_coeffs.iter_mut().zip(&part.norm_coeffs) {
            *a += b * scale;
        }
    }
    let (dgamma, dunit) = sys.noise_norm_grads(&norm_coeffs);
    let mut grad = model.params().clone();
    grad.free_weights = weight_grads;
    grad.shearlet = sys.backprop_with_units(&filter_grads, Some((&dgamma, &dunit)))?;
    Ok((loss, grad.to_flat()))
}

struct SampleGrad {
    /// Gradients with respect to the grid point-spread functions.
    filters: Vec<RealImage>,
    /// Gradients with respect to the free mixture weights, one row per filter.
    weights: Array2<f64>,
    /// `d loss / d noise_norm_k^2`.
    norm_coeffs: Vec<f64>,
}

struct SamplePart {
    loss: f64,
    grad: Option<SampleGrad>,
}

fn sample_loss_and_grad(model: &PogmdmModel, s: &DsmSample<'_>, weight: f64) -> Result<SamplePart> {
    let (y, r, parts) = residual(model, s, true)?;
    let loss = weight * r.iter().map(|v| v * v).sum::<f64>();
    let zeta = s.zeta;
    if zeta == 0.0 || weight == 0.0 {
        return Ok(SamplePart { loss, grad: None });
    }

    // d loss = <a, d score>
    let a = r * (-2.0 * zeta * zeta * weight);
    let sys = model.system();
    let fft = sys.fft();
    let (a_spec, y_spec) = fft.forward_real_pair(&a, &y);
    let a_resp = sys.analyze_spectrum(&a_spec);
    let grid = model.params().grid;

    let per_filter = (0..sys.num_filters())
        .into_par_iter()
        .map(|k| {
            let expert = &model.experts()[k];
            let ev = expert.at_variance(expert.variance(zeta))?;
            let v = &parts.responses[k];
            let ak = &a_resp[k];
            let mut curvature_term = Array2::zeros(v.dim());
            let mut var_coeff = 0.0;
            let mut wgrad_full = vec![0.0; grid.len];
            let dlog = &parts.dlog[k];
            Zip::from(&mut curvature_term).and(v).and(ak).and(dlog).and(&parts.cache[k]).for_each(
                |b, &vp, &ap, &phi, &(d2log, dlog_dvar, mass)| {
                    *b = ap * d2log;
                    var_coeff += ap * dlog_dvar;
                    ev.accumulate_weight_grad_cached(vp, phi, mass, ap, &mut wgrad_full);
                },
            );
            let (phi_spec, b_spec) = fft.forward_real_pair(&parts.dlog[k], &curvature_term);
            let mut spec = Array2::zeros(v.dim());
            Zip::from(&mut spec)
                .and(&phi_spec)
                .and(&b_spec)
                .and(&a_spec)
                .and(&y_spec)
                .for_each(|o, &p, &b, &av, &yv| *o = p * av.conj() + b * yv.conj());
            let g = fft.inverse_real(&spec);
            let wgrad: Vec<f64> = (0..grid.free_len())
                .map(|j| {
                    let (u, l) = grid.mirror(j);
                    if u == l {
                        wgrad_full[u]
                    } else {
                        wgrad_full[u] + wgrad_full[l]
                    }
                })
                .collect();
            Ok((g, wgrad, zeta * zeta * var_coeff))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut filters = Vec::with_capacity(per_filter.len());
    let mut weights = Array2::zeros((per_filter.len(), grid.free_len()));
    let mut norm_coeffs = Vec::with_capacity(per_filter.len());
    for (k, (g, wgrad, c)) in per_filter.into_iter().enumerate() {
        weights.row_mut(k).assign(&ndarray::Array1::from_vec(wgrad));
        filters.push(g);
        // var_k = base^2 + zeta^2 * noise_norm_k^2
        norm_coeffs.push(c);
    }
    Ok(SamplePart { loss, grad: Some(SampleGrad { filters, weights, norm_coeffs }) })
}

/// Mean PSNR of noisy inputs and of their one-step Tweedie denoising.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseReport {
    pub noisy_psnr: f64,
    pub denoised_psnr: f64,
}

impl DenoiseReport {
    pub fn gain(&self) -> f64 {
        self.denoised_psnr - self.noisy_psnr
    }
}

/// Adds noise of standard deviation `zeta` to every image (stream `i` for
/// image `i`) and denoises it with `params`.
pub fn denoise_report(params: &ModelParams, images: &[RealImage], zeta: f64, seed: u64) -> Result<DenoiseReport> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let model = PogmdmModel::build(params, x.dim())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let y = x + &Array2::from_shape_simple_fn(x.dim(), || zeta * rng.sample::<f64, _>(StandardNormal));
            let d = model.denoise(&y, zeta)?;
            Ok((crate::metrics::psnr(&y, x)?, crate::metrics::psnr(&d, x)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    Ok(DenoiseReport {
        noisy_psnr: per_image.iter().map(|p| p.0).sum::<f64>() / n,
        denoised_psnr: per_image.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// AdaBelief moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaBeliefState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    pub t: u64,
}

impl AdaBeliefState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: vec![0.0; len], s: vec![0.0; len], t: 0 }
    }

    /// Unprojected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::CountMismatch { what: "optimizer entries", expected: self.m.len(), found: grads.len() });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            let d = g - self.m[i];
            self.s[i] = self.beta2 * self.s[i] + (1.0 - self.beta2) * d * d + self.eps;
            let m_hat = self.m[i] / bc1;
            let s_hat = self.s[i] / bc2;
            params[i] -= lr * m_hat / (s_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// AdaBelief step on the learnable parameters followed by projection onto
/// the constraint set.
pub fn adabelief_step(state: &mut AdaBeliefState, params: &mut ModelParams, grads: &[f64], lr: f64) -> Result<()> {
    let mut flat = params.to_flat();
    state.step(&mut flat, grads, lr)?;
    params.set_flat(&flat)?;
    params.project();
    Ok(())
}

/// `ema <- momentum * ema + (1 - momentum) * params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidParameter(format!("EMA momentum {momentum} outside [0, 1)")));
    }
    if ema.len() != params.len() {
        return Err(Error::CountMismatch { what: "EMA entries", expected: ema.len(), found: params.len() });
    }
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = momentum * *e + (1.0 - momentum) * p;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Projected EMA parameters; this is the model to use.
    pub ema: ModelParams,
    /// Last optimizer iterate.
    pub last: ModelParams,
    pub losses: Vec<f64>,
}

/// Draws one minibatch: image index, optional crop, log-uniform noise level
/// and unit Gaussian noise per sample.
fn draw_batch(
    images: &[RealImage],
    cfg: &TrainConfig,
    shape: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> (Vec<RealImage>, Vec<f64>, Vec<RealImage>) {
    let (lo, hi) = (cfg.zeta_min.ln(), cfg.zeta_max.ln());
    let mut xs = Vec::with_capacity(cfg.batch);
    let mut zetas = Vec::with_capacity(cfg.batch);
    let mut noises = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let img = &images[rng.gen_range(0..images.len())];
        let (n, m) = img.dim();
        let (oi, oj) = (rng.gen_range(0..=n - shape.0), rng.gen_range(0..=m - shape.1));
        xs.push(img.slice(ndarray::s![oi..oi + shape.0, oj..oj + shape.1]).to_owned());
        zetas.push(if hi > lo { rng.gen_range(lo..hi).exp() } else { cfg.zeta_min });
        noises.push(Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal)));
    }
    (xs, zetas, noises)
}

/// Projected-AdaBelief training on `images` (all of one shape, values in
/// `[0, 1]`). `on_step` receives `(step, loss)` after every update.
pub fn train(
    images: &[RealImage],
    cfg: &TrainConfig,
    init: &ModelParams,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let full = images[0].dim();
    for img in images {
        check_shape(full, img.dim())?;
    }
    let shape = match cfg.crop {
        Some(c) if c <= full.0 && c <= full.1 => (c, c),
        Some(c) => return Err(Error::InvalidParameter(format!("crop {c} exceeds image shape {full:?}"))),
        None => full,
    };

    let mut params = init.clone();
    params.project();
    let mut state = AdaBeliefState::new(params.learnable_count(), cfg.beta1, cfg.beta2, cfg.eps);
    let start = params.to_flat();
    let mut ema = start.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (xs, zetas, noises) = draw_batch(images, cfg, shape, &mut rng);
        let batch: Vec<DsmSample<'_>> = xs
            .iter()
            .zip(&zetas)
            .zip(&noises)
            .map(|((image, &zeta), noise)| DsmSample { image, zeta, noise })
            .collect();
        let model = PogmdmModel::build(&params, shape)?;
        let (loss, grad) = dsm_loss_and_grad(&model, &batch, cfg.weighting)?;
        adabelief_step(&mut state, &mut params, &grad, cfg.lr)?;
        ema_update(&mut ema, &params.to_flat(), cfg.ema_momentum)?;
        losses.push(loss);
        on_step(step, loss);
    }

    // Remove the weight the average still places on the initial parameters,
    // as in bias-corrected moment estimates. With 0.999 over 2000 steps that
    // weight is about 0.135, enough to pull the prior back towards its start.
    let keep = cfg.ema_momentum.powi(cfg.steps as i32);
    if keep < 1.0 {
        for (e, &s) in ema.iter_mut().zip(&start) {
            *e = (*e - keep * s) / (1.0 - keep);
        }
    }
    let mut ema_params = params.clone();
    ema_params.set_flat(&ema)?;
    ema_params.project();
    Ok(TrainOutcome { ema: ema_params, last: params, losses })
}
