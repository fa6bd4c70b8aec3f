//! Acceptance run. Prints one line per criterion and exits non-zero if any
//! fails. Built with `harness = false` so the lines are never captured.

use std::time::{Duration, Instant};

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use pogmdm::coil_prior::{laplacian, prox_smoothness};
use pogmdm::dataset::{make_dataset, DatasetKind};
use pogmdm::mask::{make_mask, MaskPattern, SamplingMask};
use pogmdm::metrics::{psnr, rss_weight};
use pogmdm::mri::{forward, zero_filled, ComplexImage, MriOperator, Sensitivities};
use pogmdm::phantom::{shepp_logan, simulate_coils};
use pogmdm::prior::{tv_energy, tv_score, ModelParams, PogmdmModel, RealImage};
use pogmdm::sampler::{estimate, schedule, ReconResult, SamplerConfig};
use pogmdm::shearlet::{ShearletParams, ShearletSystem};
use pogmdm::simplex;
use pogmdm::training::{denoise_report, dsm_loss, dsm_loss_and_grad, train, DsmSample, LossWeighting, TrainConfig};

const ADJOINT_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const PROX_TOL: f64 = 1e-8;
const MASS_TOL: f64 = 1e-3;
const DENOISE_GAIN_DB: f64 = 3.0;
const MMSE_GAIN_DB: f64 = 4.0;
const MAP_SLACK_DB: f64 = 0.2;
const SIMPLEX_TOL: f64 = 1e-8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rand_real(shape: (usize, usize), rng: &mut ChaCha8Rng) -> RealImage {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

fn rand_complex(shape: (usize, usize), rng: &mut ChaCha8Rng) -> ComplexImage {
    Array2::from_shape_simple_fn(shape, || Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

fn rand_sens(coils: usize, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Sensitivities {
    let maps: Vec<_> = (0..coils).map(|_| rand_complex(shape, rng)).collect();
    Sensitivities::from_maps(&maps).unwrap()
}

fn rand_mask(shape: (usize, usize), rng: &mut ChaCha8Rng) -> SamplingMask {
    let mut bits = Array2::from_shape_simple_fn(shape, || rng.gen_bool(0.4));
    bits[[0, 0]] = true;
    SamplingMask::from_bits(bits).unwrap()
}

fn parameter_count() -> Outcome {
    let model = PogmdmModel::build(&ModelParams::initial(), (64, 64)).unwrap();
    let n = model.learnable_count();
    outcome(n == 1578, format!("{n} learnable parameters (expected 1578)"))
}

fn adjoints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = (16, 16);
    let sys = ShearletSystem::build(&ShearletParams::initial(), shape).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = rand_real(shape, &mut rng);
        let r: Vec<_> = (0..sys.num_filters()).map(|_| rand_real(shape, &mut rng)).collect();
        let kx = sys.analyze(&x).unwrap();
        let lhs: f64 = kx.iter().zip(&r).map(|(a, b)| (a * b).sum()).sum();
        let rhs = (&x * &sys.adjoint(&r).unwrap()).sum();
        let scale = kx.iter().map(|a| a.mapv(|v| v * v).sum()).sum::<f64>().sqrt()
            * r.iter().map(|a| a.mapv(|v| v * v).sum()).sum::<f64>().sqrt();
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    for c in [1, 4] {
        for _ in 0..20 {
            let x = rand_complex(shape, &mut rng);
            let s = rand_sens(c, shape, &mut rng);
            let op = MriOperator::new(&rand_mask(shape, &mut rng));
            let ax = op.forward(&x, &s).unwrap().samples;
            let w = Array2::from_shape_simple_fn(ax.dim(), || Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let lhs: Complex64 = ax.iter().zip(&w).map(|(a, b)| b.conj() * a).sum();
            let adj = op.adjoint_x(&s, &w).unwrap();
            let rhs: Complex64 = x.iter().zip(&adj).map(|(a, b)| b.conj() * a).sum();
            let scale = ax.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt() * w.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            worst = worst.max((lhs - rhs).norm() / scale);
        }
    }
    outcome(worst <= ADJOINT_TOL, format!("worst relative mismatch {worst:.2e} over 60 instances (tol {ADJOINT_TOL:e})"))
}

/// Relative error between a central difference and an analytic value, with
/// a floor that keeps near-zero entries from dominating.
fn rel(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 5];

    let shape = (16, 16);
    let mut params = ModelParams::initial();
    params.free_weights.mapv_inplace(|w| w * rng.gen_range(0.5..1.5));
    params.project();
    let model = PogmdmModel::build(&params, shape).unwrap();
    let x = rand_real(shape, &mut rng).mapv(|v| 0.5 + 0.3 * v);
    for zeta in [0.05, 0.5] {
        let score = model.prior_score(&x, zeta).unwrap();
        let floor = score.iter().fold(0.0f64, |a, v| a.max(v.abs())) * 1e-3;
        for p in [(0, 0), (5, 11), (15, 3), (8, 8)] {
            // the energy is O(1e3) while some score entries are O(1e-3), so a
            // smaller step loses the difference to cancellation
            let h = 1e-4;
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[p] += h;
            xm[p] -= h;
            let fd = -(model.neg_log_prior(&xp, zeta).unwrap() - model.neg_log_prior(&xm, zeta).unwrap()) / (2.0 * h);
            worst[0] = worst[0].max(rel(fd, score[p], floor));
        }
    }

    let x8 = rand_real((8, 8), &mut rng);
    let tv = tv_score(&x8, 0.05).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let h = 1e-6;
            let (mut xp, mut xm) = (x8.clone(), x8.clone());
            xp[[i, j]] += h;
            xm[[i, j]] -= h;
            let fd = -(tv_energy(&xp, 0.05) - tv_energy(&xm, 0.05)) / (2.0 * h);
            worst[1] = worst[1].max(rel(fd, tv[[i, j]], 1e-3));
        }
    }

    let xs = rand_complex((8, 8), &mut rng);
    let s = rand_sens(2, (8, 8), &mut rng);
    let op = MriOperator::new(&rand_mask((8, 8), &mut rng));
    let z = op.forward(&rand_complex((8, 8), &mut rng), &rand_sens(2, (8, 8), &mut rng)).unwrap();
    let gx = op.grad_x(&xs, &s, &z).unwrap();
    let gs = op.grad_sigma(&xs, &s, &z).unwrap();
    let h = 1e-6;
    for p in [(0, 0), (3, 5), (7, 2), (4, 4)] {
        for dir in [Complex64::new(h, 0.0), Complex64::new(0.0, h)] {
            let part = |v: Complex64| if dir.re != 0.0 { v.re } else { v.im };
            let (mut xp, mut xm) = (xs.clone(), xs.clone());
            xp[p] += dir;
            xm[p] -= dir;
            let fd = (op.data_misfit(&xp, &s, &z).unwrap() - op.data_misfit(&xm, &s, &z).unwrap()) / (2.0 * h);
            worst[2] = worst[2].max(rel(fd, part(gx[p]), 1e-3));

            let (mut sp, mut sm) = (s.clone(), s.clone());
            sp.maps_mut()[[1, p.0, p.1]] += dir;
            sm.maps_mut()[[1, p.0, p.1]] -= dir;
            let fd = (op.data_misfit(&xs, &sp, &z).unwrap() - op.data_misfit(&xs, &sm, &z).unwrap()) / (2.0 * h);
            worst[3] = worst[3].max(rel(fd, part(gs.maps()[[1, p.0, p.1]]), 1e-3));
        }
    }

    let images: Vec<RealImage> = (0..2).map(|_| rand_real(shape, &mut rng).mapv(|v| 0.5 + 0.4 * v)).collect();
    let noises: Vec<RealImage> = (0..2).map(|_| Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))).collect();
    let batch: Vec<_> = [0.04, 0.3]
        .iter()
        .enumerate()
        .map(|(i, &zeta)| DsmSample { image: &images[i], zeta, noise: &noises[i] })
        .collect();
    let (loss, grad) = dsm_loss_and_grad(&model, &batch, LossWeighting::Uniform).unwrap();
    let flat = params.to_flat();
    // h, P, inner and outer mixture weights, gamma
    for &i in &[0, 4, 9 + 8 * 17 + 8, 9 + 3 * 17 + 12, 298 + 2, 298 + 63 + 30, 298 + 5 * 63 + 1, 1558, 1577] {
        let step = 1e-6 * flat[i].abs().max(1e-2);
        let eval = |d: f64| {
            let mut f = flat.clone();
            f[i] += d;
            let mut p = params.clone();
            p.set_flat(&f).unwrap();
            dsm_loss(&PogmdmModel::build(&p, shape).unwrap(), &batch, LossWeighting::Uniform).unwrap()
        };
        let fd = (eval(step) - eval(-step)) / (2.0 * step);
        worst[4] = worst[4].max(rel(fd, grad[i], 1e-3 * loss));
    }

    let names = ["prior_score", "tv_score", "grad_x", "grad_sigma", "dsm_loss"];
    let detail = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(worst.iter().all(|&w| w <= GRAD_TOL), format!("worst relative error: {detail} (tol {GRAD_TOL:e})"))
}

/// Gaussian elimination on `I + mu D^T D`, assembled column by column.
fn dense_solve(v: &RealImage, mu: f64) -> RealImage {
    let (n, m) = v.dim();
    let len = n * m;
    let mut a = vec![vec![0.0; len + 1]; len];
    for p in 0..len {
        let mut e = Array2::zeros((n, m));
        e[[p / m, p % m]] = 1.0;
        let col = laplacian(&e);
        for q in 0..len {
            a[q][p] = mu * col[[q / m, q % m]] + if p == q { 1.0 } else { 0.0 };
        }
        a[p][len] = v[[p / m, p % m]];
    }
    for k in 0..len {
        let piv = (k..len).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, piv);
        for i in k + 1..len {
            let f = a[i][k] / a[k][k];
            for j in k..=len {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    let mut u = vec![0.0; len];
    for k in (0..len).rev() {
        let s: f64 = (k + 1..len).map(|j| a[k][j] * u[j]).sum();
        u[k] = (a[k][len] - s) / a[k][k];
    }
    Array2::from_shape_vec((n, m), u).unwrap()
}

fn prox() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = rand_sens(2, (8, 8), &mut rng);
    let mut worst: f64 = 0.0;
    for mu in [0.1, 1.0, 10.0] {
        let out = prox_smoothness(&s, mu).unwrap();
        for c in 0..2 {
            let re = dense_solve(&s.map(c).mapv(|v| v.re), mu);
            let im = dense_solve(&s.map(c).mapv(|v| v.im), mu);
            for ((i, j), v) in out.map(c).indexed_iter() {
                worst = worst.max((v - Complex64::new(re[[i, j]], im[[i, j]])).norm());
            }
        }
    }
    outcome(worst <= PROX_TOL, format!("max deviation from dense solve {worst:.2e} (tol {PROX_TOL:e})"))
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ModelParams::initial();
    params.free_weights.mapv_inplace(|w| w * rng.gen_range(0.0..2.0));
    params.project();
    let mut worst: f64 = 0.0;
    for p in [ModelParams::initial(), params] {
        let model = PogmdmModel::build(&p, (64, 64)).unwrap();
        for zeta in [0.0, 0.1, 1.0] {
            for e in model.experts() {
                let var = e.variance(zeta);
                let std = var.sqrt();
                let ev = e.at_variance(var).unwrap();
                let (lo, hi) = (-0.5 - 10.0 * std, 0.5 + 10.0 * std);
                let h = std / 20.0;
                let n = ((hi - lo) / h).ceil() as usize;
                let h = (hi - lo) / n as f64;
                let f = |i: usize| ev.log_density(lo + i as f64 * h).exp();
                let mass = h * ((1..n).map(f).sum::<f64>() + 0.5 * (f(0) + f(n)));
                worst = worst.max((mass - 1.0).abs());
            }
        }
    }
    outcome(worst <= MASS_TOL, format!("worst |mass - 1| {worst:.2e} over 2 x 20 experts x 3 levels (tol {MASS_TOL:e})"))
}

fn trained_model() -> (ModelParams, Duration) {
    let images = make_dataset(DatasetKind::Ellipses, 500, (64, 64), 1);
    let cfg = TrainConfig { steps: 2000, ..TrainConfig::default() };
    let start = Instant::now();
    let out = train(&images, &cfg, &ModelParams::initial(), |_, _| {}).unwrap();
    (out.ema, start.elapsed())
}

fn training(params: &ModelParams, took: Duration) -> Outcome {
    let held = make_dataset(DatasetKind::Ellipses, 20, (64, 64), 777);
    let r = denoise_report(params, &held, 0.1, 0).unwrap();
    let secs = took.as_secs_f64();
    outcome(
        r.gain() >= DENOISE_GAIN_DB && secs < 900.0,
        format!(
            "noisy {:.2} dB, denoised {:.2} dB, gain {:.2} dB (need {DENOISE_GAIN_DB}), trained in {secs:.0} s (limit 900)",
            r.noisy_psnr,
            r.denoised_psnr,
            r.gain()
        ),
    )
}

struct Recon {
    truth: ComplexImage,
    mask: SamplingMask,
    zero_filled: RealImage,
    result: ReconResult,
    took: Duration,
}

fn reconstruct(params: &ModelParams) -> Recon {
    let shape = (64, 64);
    let truth = shepp_logan(shape).mapv(|v| Complex64::new(v, 0.0));
    let s = simulate_coils(shape, 4, 0, true).unwrap();
    let mask = make_mask(MaskPattern::Cartesian, shape, 4.0, 0.08, 0).unwrap();
    let z = forward(&truth, &s, &mask).unwrap();
    let (_, zf) = zero_filled(&z).unwrap();
    let model = PogmdmModel::build(params, shape).unwrap();
    let cfg = SamplerConfig { ccdf_start: 0.8, n_posterior: 10, keep_samples: true, ..SamplerConfig::default() };
    let start = Instant::now();
    let result = estimate(&model, &z, &cfg).unwrap();
    Recon { truth, mask, zero_filled: zf, result, took: start.elapsed() }
}

fn joint_reconstruction(r: &Recon) -> Outcome {
    let reference = r.truth.mapv(|v| v.norm());
    let sens = &r.result.sensitivities;
    let zf = psnr(&r.zero_filled, &reference).unwrap();
    let mmse = psnr(&rss_weight(&r.result.mmse, sens).unwrap(), &reference).unwrap();
    let first = psnr(&rss_weight(&r.result.samples[0], sens).unwrap(), &reference).unwrap();
    let map = psnr(&rss_weight(r.result.map_image.as_ref().unwrap(), sens).unwrap(), &reference).unwrap();
    let secs = r.took.as_secs_f64();
    outcome(
        mmse >= zf + MMSE_GAIN_DB && map >= first - MAP_SLACK_DB && secs < 600.0,
        format!(
            "zero-filled {zf:.2} dB, MMSE {mmse:.2} dB (need +{MMSE_GAIN_DB}), MAP {map:.2} dB from start {first:.2} dB (slack {MAP_SLACK_DB}), {secs:.0} s (limit 600)"
        ),
    )
}

fn variance_decomposition(r: &Recon) -> Outcome {
    let res = &r.result;
    let sq = |x: &ComplexImage| (x - &r.truth).mapv(|v| v.norm_sqr()).mean().unwrap();
    let mse = sq(&res.mmse);
    let per_sample = res.samples.iter().map(sq).sum::<f64>() / res.samples.len() as f64;
    let nonneg = res.variance.iter().all(|&v| v >= 0.0);

    // Regions come from the zero-filled aliasing the mask produces: pixels
    // where the zero-filled error is large, against empty background pixels
    // that the aliasing leaves alone.
    let reference = r.truth.mapv(|v| v.norm());
    let err = (&r.zero_filled - &reference).mapv(f64::abs);
    let cut = 0.1 * reference.iter().cloned().fold(0.0, f64::max);
    let (mut art, mut na, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for ((p, &e), &v) in err.indexed_iter().zip(res.variance.iter()) {
        if e > cut {
            art += v;
            na += 1;
        } else if reference[p] == 0.0 {
            bg += v;
            nb += 1;
        }
    }
    let (art, bg) = (art / na.max(1) as f64, bg / nb.max(1) as f64);
    outcome(
        mse <= per_sample && nonneg && na > 0 && nb > 0 && art > bg,
        format!(
            "MSE {mse:.3e} vs mean per-sample {per_sample:.3e}, variance >= 0: {nonneg}, artifact mean {art:.3e} ({na} px) vs background {bg:.3e} ({nb} px), acceleration {:.2}",
            r.mask.acceleration()
        ),
    )
}

fn schedule_and_determinism() -> Outcome {
    let full = SamplerConfig::default();
    let zetas = schedule(&full);
    let (first, last) = (zetas[0], zetas[full.steps]);
    let ends = first == 0.01 && last == 10.0;

    let shape = (32, 32);
    let truth = shepp_logan(shape).mapv(|v| Complex64::new(v, 0.0));
    let s = simulate_coils(shape, 2, 3, true).unwrap();
    let mask = make_mask(MaskPattern::Cartesian, shape, 2.0, 0.1, 3).unwrap();
    let z = forward(&truth, &s, &mask).unwrap();
    let model = PogmdmModel::build(&ModelParams::initial(), shape).unwrap();
    let cfg = SamplerConfig { steps: 30, n_posterior: 2, map_steps: 5, seed: 11, keep_samples: true, ..SamplerConfig::default() };
    let a = estimate(&model, &z, &cfg).unwrap().encode();
    let b = estimate(&model, &z, &cfg).unwrap().encode();
    outcome(
        ends && a == b,
        format!("zeta_0 {first} zeta_N {last}, repeated run byte-identical: {} ({} bytes)", a == b, a.len()),
    )
}

/// Exhaustive search over supports: on a fixed support the projection onto
/// the simplex is a shift, and the optimum is the feasible candidate closest
/// to `v`.
fn brute_force_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for support in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|&i| support & (1 << i) != 0).collect();
        let shift = (idx.iter().map(|&i| v[i]).sum::<f64>() - 1.0) / idx.len() as f64;
        let mut x = vec![0.0; n];
        for &i in &idx {
            x[i] = v[i] - shift;
        }
        if x.iter().any(|&xi| xi < -1e-15) {
            continue;
        }
        let d: f64 = x.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, x));
        }
    }
    best.unwrap().1
}

fn simplex_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let got = simplex::project(&v);
        let want = brute_force_simplex(&v);
        worst = got.iter().zip(&want).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    outcome(worst <= SIMPLEX_TOL, format!("max deviation {worst:.2e} over 100 vectors (tol {SIMPLEX_TOL:e})"))
}

fn timed(limit: Option<f64>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let secs = start.elapsed().as_secs_f64();
    if let Some(limit) = limit {
        o.pass &= secs < limit;
        o.detail = format!("{}, {secs:.2} s (limit {limit} s)", o.detail);
    }
    o
}

fn main() {
    // `cargo test -- --list` and filters expect a quiet exit.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, timed(Some(1.0), parameter_count));
    report(2, timed(Some(10.0), adjoints));
    report(3, timed(Some(60.0), gradients));
    report(4, timed(Some(5.0), prox));
    report(5, timed(Some(5.0), normalization));
    let (params, took) = trained_model();
    report(6, training(&params, took));
    let recon = reconstruct(&params);
    report(7, joint_reconstruction(&recon));
    report(8, variance_decomposition(&recon));
    report(9, schedule_and_determinism());
    report(10, simplex_oracle());

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
