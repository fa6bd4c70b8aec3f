use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use pogmdm::dataset::{load_dataset, make_dataset, write_dataset, DatasetKind};
use pogmdm::io::{
    read_image, read_kspace, read_model, save_mask_png, save_png, write_image, write_kspace, write_model, ImageData,
};
use pogmdm::mask::{make_mask, MaskPattern};
use pogmdm::metrics::{rss_weight, scores, Scores};
use pogmdm::mri::{forward, zero_filled, ComplexImage, KSpaceData};
use pogmdm::phantom::{phantom, simulate_coils, PhantomKind};
use pogmdm::prior::{ModelParams, PogmdmModel, RealImage};
use pogmdm::sampler::{estimate, ReconResult, SamplerConfig};
use pogmdm::training::{denoise_report, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "pogmdm", version, about = "Diffusion-prior training and joint parallel MRI reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic training images
    Dataset(DatasetArgs),
    /// Train a prior by denoising score matching
    Train(TrainArgs),
    /// Simulate multi-coil k-space data from a phantom
    Simulate(SimulateArgs),
    /// Write a sampling mask as PNG
    Mask(MaskArgs),
    /// Joint posterior reconstruction of image and coil sensitivities
    Reconstruct(ReconstructArgs),
    /// Compare reconstructions with a reference
    Eval(EvalArgs),
    /// Grid search over sampler step sizes
    Sweep(SweepArgs),
    /// Denoising PSNR of a prior on a set of clean images
    Denoise(DenoiseArgs),
}

#[derive(Args, Debug)]
struct DatasetArgs {
    #[arg(long, default_value = "ellipses")]
    kind: String,
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    shape: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// directory of training images
    #[arg(long)]
    data: PathBuf,
    /// TOML file with training options
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    crop: Option<usize>,
    /// CSV file receiving the loss per step
    #[arg(long)]
    log: Option<PathBuf>,
    /// moving-average model
    #[arg(long)]
    out: PathBuf,
    /// also write the last optimizer iterate
    #[arg(long)]
    last: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct MaskOptions {
    #[arg(long, default_value = "cartesian")]
    pattern: String,
    #[arg(long, default_value_t = 4.0)]
    acceleration: f64,
    /// fraction of fully sampled central lines (Cartesian only)
    #[arg(long, default_value_t = 0.08)]
    acl: f64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 64)]
    shape: usize,
    #[arg(long, default_value = "shepp_logan")]
    phantom: String,
    #[arg(long, default_value_t = 4)]
    coils: usize,
    #[command(flatten)]
    mask: MaskOptions,
    /// standard deviation of complex k-space noise
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// also write the ground-truth image (binary container and PNG)
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long, default_value_t = 64)]
    shape: usize,
    #[command(flatten)]
    mask: MaskOptions,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SamplerOverrides {
    /// TOML file with sampler options
    #[arg(long = "pattern-config", alias = "sampler-config")]
    pattern_config: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long = "ccdf-start")]
    ccdf_start: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    kspace: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    sampler: SamplerOverrides,
    #[arg(long, overrides_with = "no_map")]
    map: bool,
    #[arg(long = "no-map")]
    no_map: bool,
    /// reference image for metrics.csv
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    pred: Vec<PathBuf>,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    model: PathBuf,
    /// directory of clean images
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    zeta: f64,
    /// use only the first `count` images
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    kspace: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[command(flatten)]
    sampler: SamplerOverrides,
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "10.0")]
    mu: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.16")]
    snr: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("POGMDM_THREADS") {
        let n: usize = v.parse().with_context(|| format!("POGMDM_THREADS={v:?} is not a count"))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    init_threads()?;
    match Cli::parse().command {
        Command::Dataset(a) => cmd_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Mask(a) => cmd_mask(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Denoise(a) => cmd_denoise(a),
    }
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let kind = DatasetKind::parse(&a.kind)?;
    let images = make_dataset(kind, a.count, (a.shape, a.shape), a.seed);
    write_dataset(&a.out, &images)?;
    println!("wrote {} images to {}", images.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if a.crop.is_some() {
        cfg.crop = a.crop;
    }
    let images = load_dataset(&a.data)?;
    if images.is_empty() {
        bail!("no images found in {}", a.data.display());
    }
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.steps);
    let outcome = train(&images, &cfg, &ModelParams::initial(), |step, loss| {
        log.push(loss);
        if step % 100 == 0 || step + 1 == cfg.steps {
            eprintln!("step {step:>6}  loss {loss:.6e}  {:.1}s", start.elapsed().as_secs_f64());
        }
    })?;
    write_model(&a.out, &outcome.ema)?;
    if let Some(path) = &a.last {
        write_model(path, &outcome.last)?;
    }
    if let Some(path) = &a.log {
        let mut f = fs::File::create(path)?;
        writeln!(f, "step,loss")?;
        for (i, l) in log.iter().enumerate() {
            writeln!(f, "{i},{l}")?;
        }
    }
    println!("wrote model to {}", a.out.display());
    Ok(())
}

fn build_mask(o: &MaskOptions, shape: usize, seed: u64) -> Result<pogmdm::mask::SamplingMask> {
    Ok(make_mask(MaskPattern::parse(&o.pattern)?, (shape, shape), o.acceleration, o.acl, seed)?)
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let shape = (a.shape, a.shape);
    let x = phantom(shape, PhantomKind::parse(&a.phantom, a.seed)?);
    let s = simulate_coils(shape, a.coils, a.seed, true)?;
    let mask = build_mask(&a.mask, a.shape, a.seed)?;
    let mut z = forward(&x, &s, &mask)?;
    if a.noise > 0.0 {
        z.add_noise(a.noise, a.seed.wrapping_add(1));
    }
    write_kspace(&a.out, &z)?;
    if let Some(t) = &a.truth {
        write_image(t, &ImageData::Complex(x.clone()))?;
        save_png(with_extension(t, "png"), &x.mapv(|v| v.norm()))?;
    }
    println!(
        "wrote {} coils, {} samples per coil (acceleration {:.2}) to {}",
        z.coils(),
        mask.count(),
        mask.acceleration(),
        a.out.display()
    );
    Ok(())
}

fn cmd_mask(a: MaskArgs) -> Result<()> {
    let mask = build_mask(&a.mask, a.shape, a.seed)?;
    save_mask_png(&a.out, &mask)?;
    println!("acceleration {:.3}, {} samples", mask.acceleration(), mask.count());
    Ok(())
}

fn sampler_config(o: &SamplerOverrides) -> Result<SamplerConfig> {
    let mut cfg: SamplerConfig = match &o.pattern_config {
        Some(p) => read_toml(p)?,
        None => SamplerConfig::default(),
    };
    cfg.n_posterior = o.samples.unwrap_or(cfg.n_posterior);
    cfg.ccdf_start = o.ccdf_start.unwrap_or(cfg.ccdf_start);
    cfg.steps = o.steps.unwrap_or(cfg.steps);
    cfg.seed = o.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path, z: &KSpaceData) -> Result<PogmdmModel> {
    let params = read_model(path)?;
    Ok(PogmdmModel::build(&params, z.shape())?)
}

fn load_reference(path: &Path) -> Result<RealImage> {
    Ok(pogmdm::io::load_magnitude(path)?)
}

fn save_complex(dir: &Path, name: &str, x: &ComplexImage, weighted: &RealImage) -> Result<()> {
    write_image(dir.join(format!("{name}.bin")), &ImageData::Complex(x.clone()))?;
    save_png(dir.join(format!("{name}.png")), weighted)?;
    Ok(())
}

fn relative_residual(x: &ComplexImage, r: &ReconResult, z: &KSpaceData) -> Result<f64> {
    let pred = forward(x, &r.sensitivities, &z.mask)?;
    let num: f64 = pred.samples.iter().zip(z.samples.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
    let den: f64 = z.samples.iter().map(|v| v.norm_sqr()).sum();
    Ok((num / den).sqrt())
}

fn fmt_scores(s: Option<Scores>) -> String {
    match s {
        Some(s) => format!("{:.4},{:.6},{:.6e}", s.psnr, s.ssim, s.nmse),
        None => ",,".into(),
    }
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let z = read_kspace(&a.kspace)?;
    let model = load_model(&a.model, &z)?;
    let mut cfg = sampler_config(&a.sampler)?;
    if a.no_map {
        cfg.map = false;
    } else if a.map {
        cfg.map = true;
    }
    let reference = a.reference.as_deref().map(load_reference).transpose()?;
    fs::create_dir_all(&a.out)?;

    let start = Instant::now();
    let r = estimate(&model, &z, &cfg)?;
    eprintln!("sampled {} chains in {:.1}s", cfg.n_posterior, start.elapsed().as_secs_f64());

    let mmse_w = rss_weight(&r.mmse, &r.sensitivities)?;
    save_complex(&a.out, "mmse", &r.mmse, &mmse_w)?;
    write_image(a.out.join("variance.bin"), &ImageData::Real(r.variance.clone()))?;
    save_png(a.out.join("variance.png"), &r.variance)?;
    for i in 0..r.sensitivities.coils() {
        save_png(a.out.join(format!("sens_{i}.png")), &r.sensitivities.map(i).mapv(|v| v.norm()))?;
    }
    fs::write(a.out.join("result.bin"), r.encode())?;

    let (_, zf) = zero_filled(&z)?;
    let mut rows = vec![("zero_filled".to_string(), zf.clone(), None)];
    rows.push(("mmse".into(), mmse_w, Some(relative_residual(&r.mmse, &r, &z)?)));
    if let Some(map) = &r.map_image {
        let w = rss_weight(map, &r.sensitivities)?;
        save_complex(&a.out, "map", map, &w)?;
        rows.push(("map".into(), w, Some(relative_residual(map, &r, &z)?)));
    }
    let mut f = fs::File::create(a.out.join("metrics.csv"))?;
    writeln!(f, "image,psnr,ssim,nmse,residual")?;
    for (name, img, res) in rows {
        let s = reference.as_ref().map(|rf| scores(&img, rf)).transpose()?;
        let res = res.map(|v| format!("{v:.6e}")).unwrap_or_default();
        writeln!(f, "{name},{},{res}", fmt_scores(s))?;
        if let Some(s) = s {
            println!("{name:<12} psnr {:.2} dB  ssim {:.4}  nmse {:.4e}", s.psnr, s.ssim, s.nmse);
        }
    }
    println!("wrote results to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let reference = load_reference(&a.reference)?;
    let mut f = fs::File::create(&a.out)?;
    writeln!(f, "file,psnr,ssim,nmse")?;
    for p in &a.pred {
        let img = pogmdm::io::load_magnitude(p).with_context(|| format!("loading {}", p.display()))?;
        let s = scores(&img, &reference)?;
        writeln!(f, "{},{}", p.display(), fmt_scores(Some(s)))?;
        println!("{}: psnr {:.2} dB  ssim {:.4}  nmse {:.4e}", p.display(), s.psnr, s.ssim, s.nmse);
    }
    Ok(())
}

fn cmd_denoise(a: DenoiseArgs) -> Result<()> {
    let params = read_model(&a.model)?;
    let mut images = load_dataset(&a.data)?;
    if let Some(n) = a.count {
        images.truncate(n);
    }
    let r = denoise_report(&params, &images, a.zeta, a.seed)?;
    println!(
        "{} images  zeta {}  noisy {:.2} dB  denoised {:.2} dB  gain {:+.2} dB",
        images.len(),
        a.zeta,
        r.noisy_psnr,
        r.denoised_psnr,
        r.gain()
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let z = read_kspace(&a.kspace)?;
    let model = load_model(&a.model, &z)?;
    let base = SamplerConfig { map: false, ..sampler_config(&a.sampler)? };
    let reference = match read_image(&a.reference) {
        Ok(img) => img.magnitude(),
        Err(_) => load_reference(&a.reference)?,
    };
    let mut f = fs::File::create(&a.out)?;
    writeln!(f, "lambda,mu,snr,psnr,ssim,nmse")?;
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &lambda in &a.lambda {
        for &mu in &a.mu {
            for &snr in &a.snr {
                let cfg = SamplerConfig { lambda, mu, snr, ..base.clone() };
                let row = match estimate(&model, &z, &cfg) {
                    Ok(r) => Some(scores(&rss_weight(&r.mmse, &r.sensitivities)?, &reference)?),
                    Err(e) => {
                        eprintln!("lambda {lambda} mu {mu} snr {snr}: {e}");
                        None
                    }
                };
                writeln!(f, "{lambda},{mu},{snr},{}", fmt_scores(row))?;
                if let Some(s) = row {
                    println!("lambda {lambda:<6} mu {mu:<6} snr {snr:<6} psnr {:.2} dB", s.psnr);
                    if best.is_none_or(|b| s.psnr > b.3) {
                        best = Some((lambda, mu, snr, s.psnr));
                    }
                }
            }
        }
    }
    if let Some((l, m, s, p)) = best {
        println!("best: lambda {l} mu {m} snr {s} ({p:.2} dB)");
    }
    Ok(())
}
