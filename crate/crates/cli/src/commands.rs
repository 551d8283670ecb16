use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use patchpost::degradation::add_gaussian_noise;
use patchpost::io::PriorFile;
use patchpost::prior::PatchPrior;
use patchpost::rng::StreamKey;
use patchpost::{
    build_gaussian_kernel, epll_energy, DataWeight, load_prior, make_grids, mmse_estimate, psnr as image_psnr, read_image,
    run_denoise, run_restore, sample_patches, save_prior, train_gmm_em, write_image, Coupling, EmOptions,
    GaussianBackend, GaussianKernelSpec, Image, Kernel, LinearOperator, Mask, Mode, NoiseModel, Prior,
    SamplerConfig, Schedule,
};

use crate::manifest::{default_path, sha256_file, Manifest};
use crate::{
    BackendArg, CliError, CouplingArg, DataWeightArg, DeblurArgs, DegradeArgs, DenoiseArgs, EnergyArgs, InpaintArgs, KernelArgs,
    MakeMaskArgs, ModeArg, RunArgs, SamplePriorArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub struct Context {
    pub args: Vec<String>,
    pub record: bool,
    pub threads: usize,
}

impl Context {
    fn manifest(&self, command: &str) -> Result<Manifest> {
        let mut m = Manifest::new();
        m.set("tool", concat!("patchpost ", env!("CARGO_PKG_VERSION")));
        m.set("command", command);
        let cwd = std::env::current_dir().map_err(|e| CliError::Io(e.to_string()))?;
        m.set("cwd", cwd.display());
        for (i, a) in self.args.iter().enumerate() {
            if a.contains('\n') {
                return Err(CliError::Invalid("arguments may not contain newlines".into()));
            }
            m.set(format!("arg.{i}"), a);
        }
        m.set("threads", self.threads);
        Ok(m)
    }

    fn finish(&self, m: &mut Manifest, start: Instant, path: &Path) -> Result<()> {
        m.set("time.total_s", format!("{:.3}", start.elapsed().as_secs_f64()));
        if self.record {
            m.save(path)?;
            log::info!("manifest written to {}", path.display());
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Image> {
    read_image(path).map_err(|e| match e {
        patchpost::Error::Io(err) => CliError::io(path, err),
        other => CliError::from(other).with_path(path),
    })
}

fn write(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_image(img, path).map_err(|e| match e {
        patchpost::Error::Io(err) => CliError::io(path, err),
        other => CliError::from(other).with_path(path),
    })
}

fn load(path: &Path) -> Result<PriorFile> {
    load_prior(path).map_err(|e| match e {
        patchpost::Error::Io(err) => CliError::io(path, err),
        other => CliError::from(other).with_path(path),
    })
}

impl CliError {
    fn with_path(self, path: &Path) -> Self {
        let p = path.display();
        match self {
            CliError::Invalid(m) => CliError::Invalid(format!("{p}: {m}")),
            CliError::Format(m) => CliError::Format(format!("{p}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{p}: {m}")),
            other => other,
        }
    }
}

/// `(σ, σ²)` on the unit scale from a 0–255 value.
fn noise_level(sigma255: f64) -> Result<(f64, f64)> {
    if !(sigma255 > 0.0 && sigma255.is_finite()) {
        return Err(CliError::Invalid(format!("--sigma must be positive, got {sigma255}")));
    }
    let s = sigma255 / 255.0;
    Ok((s, s * s))
}

fn record_sigma(m: &mut Manifest, sigma255: f64) {
    m.set("sigma_255", sigma255);
    m.set("sigma", sigma255 / 255.0);
    m.set("noise_variance", (sigma255 / 255.0).powi(2));
}

fn kernel_from(args: &KernelArgs, m: &mut Manifest) -> Result<Option<Kernel>> {
    let elliptic = args.kernel_sx.is_some() || args.kernel_sy.is_some() || args.kernel_rho.is_some();
    let given = [args.kernel_scale.is_some(), elliptic, args.kernel_file.is_some()].iter().filter(|&&b| b).count();
    if given > 1 {
        return Err(CliError::Invalid(
            "give only one of --kernel-scale, --kernel-sx/--kernel-sy/--kernel-rho, --kernel-file".into(),
        ));
    }
    let kernel = if let Some(path) = &args.kernel_file {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        m.record_input("kernel", path)?;
        Kernel::parse(&text).map_err(|e| CliError::from(e).with_path(path))?
    } else {
        let spec = if let Some(s) = args.kernel_scale {
            GaussianKernelSpec::isotropic(s)
        } else if elliptic {
            let sx = args.kernel_sx.ok_or_else(|| CliError::Invalid("--kernel-sx is required".into()))?;
            GaussianKernelSpec { sigma_x: sx, sigma_y: args.kernel_sy.unwrap_or(sx), rho: args.kernel_rho.unwrap_or(0.0) }
        } else {
            return Ok(None);
        };
        m.set("kernel.sigma_x", spec.sigma_x);
        m.set("kernel.sigma_y", spec.sigma_y);
        m.set("kernel.rho", spec.rho);
        build_gaussian_kernel(&spec)?
    };
    m.set("kernel.size", format!("{}x{}", kernel.rows(), kernel.cols()));
    Ok(Some(kernel))
}

fn mask_for(path: &Path, img: &Image, m: &mut Manifest) -> Result<Mask> {
    let mask = Mask::from_image(&read(path)?);
    if (mask.height(), mask.width()) != (img.height(), img.width()) {
        return Err(CliError::Invalid(format!(
            "mask is {}x{}, image is {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    m.record_input("mask", path)?;
    m.set("mask.observed_fraction", mask.observed_fraction());
    Ok(mask)
}

fn override_schedule(s: &mut Schedule, tau: Option<f64>, power: Option<f64>, scale: Option<f64>) -> Result<()> {
    s.tau = tau.unwrap_or(s.tau);
    s.power = power.unwrap_or(s.power);
    s.scale = scale.unwrap_or(s.scale);
    Ok(s.validate()?)
}

fn record_schedule(m: &mut Manifest, name: &str, s: &Schedule) {
    m.set(format!("{name}.tau"), s.tau);
    m.set(format!("{name}.power"), s.power);
    m.set(format!("{name}.scale"), s.scale);
}

fn describe_prior(m: &mut Manifest, file: &PriorFile) {
    m.set("prior.patch_size", file.patch_size);
    m.set("prior.channels", file.channels);
    match &file.prior {
        Prior::Gmm(g) => {
            m.set("prior.kind", "gmm");
            m.set("prior.components", g.components());
        }
        Prior::Dictionary(d) => {
            m.set("prior.kind", "dictionary");
            m.set("prior.atoms", d.len());
        }
    }
}

/// Shared front half of the restoration commands.
struct Job {
    input: Image,
    file: PriorFile,
    cfg: SamplerConfig,
    manifest: Manifest,
    manifest_path: PathBuf,
    start: Instant,
}

fn prepare(ctx: &Context, command: &str, run: &RunArgs, make: impl FnOnce(patchpost::GridSet) -> SamplerConfig) -> Result<Job> {
    let start = Instant::now();
    let mut manifest = ctx.manifest(command)?;
    let input = read(&run.input)?;
    manifest.record_input("image", &run.input)?;
    let file = load(&run.prior)?;
    manifest.record_input("prior", &run.prior)?;
    describe_prior(&mut manifest, &file);
    if file.channels != input.channels() {
        return Err(CliError::Invalid(format!(
            "prior is for {}-channel patches, image has {} channels",
            file.channels,
            input.channels()
        )));
    }
    let grids = make_grids(file.patch_size, run.grids, run.grid_seed)?;
    let mut cfg = make(grids.clone());
    cfg.iterations = run.iters;
    cfg.seed = run.seed;
    cfg.final_smooth = !run.no_final_smooth;
    cfg.coupling = match run.coupling {
        CouplingArg::Chain => Coupling::Chain,
        CouplingArg::Average => Coupling::Average,
    };
    cfg.data_weight = match run.data_weight {
        DataWeightArg::Split => DataWeight::Split,
        DataWeightArg::Full => DataWeight::Full,
    };
    cfg.mode = match run.mode {
        ModeArg::Map => Mode::Map,
        ModeArg::Sample | ModeArg::Mmse => Mode::Sample,
    };
    override_schedule(&mut cfg.beta, run.beta_tau, run.beta_power, run.beta_scale)?;
    cfg.validate()?;

    let m = &mut manifest;
    m.set("mode", format!("{:?}", run.mode).to_lowercase());
    m.set("iterations", cfg.iterations);
    m.set("grids", grids.count());
    m.set("grid_seed", run.grid_seed);
    for (i, g) in grids.grids().iter().enumerate() {
        m.set(format!("grid.{i}"), format!("{},{}", g.offset_y, g.offset_x));
    }
    m.set("seed", cfg.seed);
    record_schedule(m, "beta", &cfg.beta);
    m.set("final_smooth", cfg.final_smooth);
    m.set("coupling", format!("{:?}", run.coupling).to_lowercase());
    m.set("data_weight", format!("{:?}", run.data_weight).to_lowercase());
    let manifest_path = default_path(run.manifest.as_ref(), &run.out);
    Ok(Job { input, file, cfg, manifest, manifest_path, start })
}

/// Runs the chain(s) for `job` according to the mode and writes outputs.
fn execute(ctx: &Context, run: &RunArgs, mut job: Job, chain: impl Fn(&SamplerConfig) -> patchpost::Result<(Image, f64, u64)> + Sync) -> Result<()> {
    let t0 = Instant::now();
    let samples = run.samples.unwrap_or(if run.mode == ModeArg::Mmse { 20 } else { 1 });
    if samples == 0 {
        return Err(CliError::Invalid("--samples must be at least 1".into()));
    }
    if run.mode == ModeArg::Map && run.samples.is_some_and(|s| s != 1) {
        return Err(CliError::Invalid("--samples applies to sample and mmse modes only".into()));
    }
    job.manifest.set("samples", samples);
    let outputs: Vec<(Image, PathBuf)> = match run.mode {
        ModeArg::Mmse => {
            let cfg = &job.cfg;
            let est = mmse_estimate(samples, cfg.seed, |seed| {
                let mut c = cfg.clone();
                c.seed = seed;
                Ok(chain(&c)?.0)
            })?;
            vec![(est, run.out.clone())]
        }
        ModeArg::Map | ModeArg::Sample => {
            let mut out = Vec::with_capacity(samples);
            for i in 0..samples {
                let mut c = job.cfg.clone();
                c.seed = job.cfg.seed.wrapping_add(i as u64);
                let (img, fit, digest) = chain(&c)?;
                let path = if samples == 1 { run.out.clone() } else { numbered(&run.out, i) };
                let key = if samples == 1 { String::new() } else { format!(".{i}") };
                job.manifest.set(format!("data_fit{key}"), fit);
                job.manifest.set(format!("stream_digest{key}"), format!("{digest:016x}"));
                out.push((img, path));
            }
            out
        }
    };
    job.manifest.set("time.run_s", format!("{:.3}", t0.elapsed().as_secs_f64()));

    let truth = match &run.ground_truth {
        Some(p) => {
            let t = read(p)?;
            job.manifest.record_input("ground_truth", p)?;
            if t.shape() != job.input.shape() {
                return Err(CliError::Invalid("ground truth and input differ in size".into()));
            }
            Some(t)
        }
        None => None,
    };
    if let Some(t) = &truth {
        let v = image_psnr(&job.input, t, 1.0)?;
        job.manifest.set("psnr.input", v);
        println!("input PSNR {v:.3} dB");
    }
    for (i, (img, path)) in outputs.iter().enumerate() {
        write(img, path)?;
        if let Some(t) = &truth {
            let v = image_psnr(img, t, 1.0)?;
            let key = if outputs.len() == 1 { "psnr.output".to_string() } else { format!("psnr.output.{i}") };
            job.manifest.set(key, v);
            println!("{} PSNR {v:.3} dB", path.display());
        }
        job.manifest.record_output(path)?;
    }
    let path = job.manifest_path.clone();
    ctx.finish(&mut job.manifest, job.start, &path)
}

fn numbered(path: &Path, i: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}-{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{i}"),
    };
    path.with_file_name(name)
}

pub fn denoise(ctx: &Context, a: DenoiseArgs) -> Result<()> {
    let sigma255 = a.run.sigma.ok_or_else(|| CliError::Invalid("--sigma is required".into()))?;
    let (_, var) = noise_level(sigma255)?;
    let mut job = prepare(ctx, "denoise", &a.run, |g| SamplerConfig::denoising(var, g, 0))?;
    record_sigma(&mut job.manifest, sigma255);
    job.manifest.set("operator", "identity");
    let (y, prior) = (job.input.clone(), job.file.prior.clone());
    let noise = NoiseModel::Spherical(var);
    execute(ctx, &a.run, job, |c| {
        let r = run_denoise(&y, &noise, &prior, c)?;
        let fit = r.diagnostics.last().map_or(f64::NAN, |d| d.data_fit);
        Ok((r.estimate, fit, r.stream_digest))
    })
}

pub fn inpaint(ctx: &Context, a: InpaintArgs) -> Result<()> {
    let sigma255 = a.run.sigma.unwrap_or(1.0);
    let (_, var) = noise_level(sigma255)?;
    let mut job = prepare(ctx, "inpaint", &a.run, |g| SamplerConfig::inpainting(g, 0))?;
    record_sigma(&mut job.manifest, sigma255);
    job.manifest.set("operator", "mask");
    let mask = mask_for(&a.mask, &job.input, &mut job.manifest)?;
    let ch = job.input.channels();
    let diag: Vec<f64> =
        (0..job.input.data().len()).map(|i| if mask.values()[i / ch] > 0.0 { var } else { f64::INFINITY }).collect();
    let (y, prior) = (job.input.clone(), job.file.prior.clone());
    let noise = NoiseModel::Diagonal(diag);
    execute(ctx, &a.run, job, |c| {
        let r = run_denoise(&y, &noise, &prior, c)?;
        let fit = r.diagnostics.last().map_or(f64::NAN, |d| d.data_fit);
        Ok((r.estimate, fit, r.stream_digest))
    })
}

pub fn deblur(ctx: &Context, a: DeblurArgs) -> Result<()> {
    let sigma255 = a.run.sigma.ok_or_else(|| CliError::Invalid("--sigma is required".into()))?;
    let (_, var) = noise_level(sigma255)?;
    let mut job = prepare(ctx, "deblur", &a.run, |g| SamplerConfig::deblurring(g, 0))?;
    record_sigma(&mut job.manifest, sigma255);
    let kernel = kernel_from(&a.kernel, &mut job.manifest)?
        .ok_or_else(|| CliError::Invalid("deblur needs --kernel-scale, --kernel-sx or --kernel-file".into()))?;
    job.manifest.set("operator", "convolution");
    let mut gamma = job.cfg.gamma.expect("deblurring config has a γ schedule");
    override_schedule(&mut gamma, a.gamma_tau, a.gamma_power, a.gamma_scale)?;
    job.cfg.gamma = Some(gamma);
    record_schedule(&mut job.manifest, "gamma", &gamma);
    job.cfg.backend = match a.backend {
        BackendArg::Auto => GaussianBackend::Auto,
        BackendArg::Pointwise => GaussianBackend::Pointwise,
        BackendArg::Spectral => GaussianBackend::Spectral,
        BackendArg::Iterative => GaussianBackend::Iterative,
    };
    job.manifest.set("backend", format!("{:?}", a.backend).to_lowercase());
    let (y, prior) = (job.input.clone(), job.file.prior.clone());
    let op = LinearOperator::Convolution(kernel);
    execute(ctx, &a.run, job, |c| {
        let r = run_restore(&y, &op, var, &prior, c)?;
        let fit = r.diagnostics.last().map_or(f64::NAN, |d| d.data_fit);
        Ok((r.estimate, fit, r.stream_digest))
    })
}

pub fn energy(a: EnergyArgs) -> Result<()> {
    let (_, var) = noise_level(a.sigma)?;
    let x = read(&a.image)?;
    let y = read(&a.observed)?;
    let file = load(&a.prior)?;
    let mut scratch = Manifest::new();
    let op = match (kernel_from(&a.kernel, &mut scratch)?, &a.mask) {
        (Some(_), Some(_)) => return Err(CliError::Invalid("give either a kernel or a mask, not both".into())),
        (Some(k), None) => LinearOperator::Convolution(k),
        (None, Some(p)) => LinearOperator::Mask(mask_for(p, &x, &mut scratch)?),
        (None, None) => LinearOperator::Identity,
    };
    let grids = make_grids(file.patch_size, a.grids, a.grid_seed)?;
    let e = epll_energy(&x, &y, &op, var, &grids, &file.prior)?;
    println!("{e}");
    Ok(())
}

pub fn sample_prior(ctx: &Context, a: SamplePriorArgs) -> Result<()> {
    let start = Instant::now();
    let mut m = ctx.manifest("sample-prior")?;
    let file = load(&a.prior)?;
    m.record_input("prior", &a.prior)?;
    describe_prior(&mut m, &file);
    m.set("count", a.count);
    m.set("seed", a.seed);
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let key = StreamKey::new(a.seed, 0);
    let p = file.patch_size;
    for i in 0..a.count {
        let patch = file.prior.sample_prior(&mut key.rng(i as u64));
        let img = Image::new(p, p, file.channels, patch)?;
        let path = a.out_dir.join(format!("patch-{i:04}.png"));
        write(&img, &path)?;
        m.record_output(&path)?;
    }
    let path = default_path(a.manifest.as_ref(), &a.out_dir.join("patches"));
    ctx.finish(&mut m, start, &path)
}

pub fn psnr(a: &Path, b: &Path) -> Result<()> {
    let v = image_psnr(&read(a)?, &read(b)?, 1.0)?;
    println!("{v}");
    Ok(())
}

pub fn degrade(ctx: &Context, a: DegradeArgs) -> Result<()> {
    let start = Instant::now();
    let mut m = ctx.manifest("degrade")?;
    let x = read(&a.input)?;
    m.record_input("image", &a.input)?;
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(CliError::Invalid(format!("--sigma must be non-negative, got {}", a.sigma)));
    }
    record_sigma(&mut m, a.sigma);
    let op = match (kernel_from(&a.kernel, &mut m)?, &a.mask) {
        (Some(_), Some(_)) => return Err(CliError::Invalid("give either a kernel or a mask, not both".into())),
        (Some(k), None) => LinearOperator::Convolution(k),
        (None, Some(p)) => LinearOperator::Mask(mask_for(p, &x, &mut m)?),
        (None, None) => LinearOperator::Identity,
    };
    m.set("seed", a.seed);
    let y = add_gaussian_noise(&op.apply(&x)?, a.sigma / 255.0, a.seed)?;
    write(&y, &a.out)?;
    m.record_output(&a.out)?;
    ctx.finish(&mut m, start, &default_path(a.manifest.as_ref(), &a.out))
}

pub fn make_mask(ctx: &Context, a: MakeMaskArgs) -> Result<()> {
    let start = Instant::now();
    let mut m = ctx.manifest("make-mask")?;
    let like = read(&a.like)?;
    m.record_input("image", &a.like)?;
    m.set("missing", a.missing);
    m.set("seed", a.seed);
    let mask = Mask::random(like.height(), like.width(), a.missing, a.seed)?;
    write(&mask.to_image(), &a.out)?;
    m.record_output(&a.out)?;
    ctx.finish(&mut m, start, &default_path(a.manifest.as_ref(), &a.out))
}

pub fn train_prior(ctx: &Context, a: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let mut m = ctx.manifest("train-prior")?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.images)
        .map_err(|e| CliError::io(&a.images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| ["png", "pgm", "ppm", "pnm"].contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Invalid(format!("no PNG/PGM/PPM images in {}", a.images.display())));
    }
    let mut images = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let img = read(p)?;
        m.record_input(&format!("train.{i}"), p)?;
        images.push(if a.gray { img.to_gray() } else { img });
    }
    let channels = images[0].channels();
    if images.iter().any(|im| im.channels() != channels) {
        return Err(CliError::Invalid("training images mix gray and color; pass --gray".into()));
    }
    let patches = sample_patches(&images, a.patch_size, a.patches, a.seed)?;
    let opts = EmOptions { components: a.components, iterations: a.iters, seed: a.seed, ..EmOptions::default() };
    for (k, v) in [
        ("components", a.components as u64),
        ("patch_size", a.patch_size as u64),
        ("patches", a.patches as u64),
        ("iterations", a.iters as u64),
        ("seed", a.seed),
        ("kmeans_iterations", opts.kmeans_iterations as u64),
    ] {
        m.set(k, v);
    }
    m.set("gray", a.gray);
    m.set("channels", channels);
    let fit = train_gmm_em(&patches, &opts)?;
    for (i, ll) in fit.log_likelihood.iter().enumerate() {
        log::info!("EM iteration {i}: mean log-likelihood {ll:.6}");
    }
    m.set("log_likelihood.initial", fit.log_likelihood[0]);
    m.set("log_likelihood.final", fit.log_likelihood[fit.log_likelihood.len() - 1]);
    m.set("reseeded", fit.reseeded);
    let file = PriorFile::new(a.patch_size, channels, Prior::Gmm(fit.prior))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_prior(&file, &a.out)?;
    m.record_output(&a.out)?;
    ctx.finish(&mut m, start, &default_path(a.manifest.as_ref(), &a.out))
}

/// Re-runs a recorded command and compares every output digest.
pub fn replay(path: &Path) -> Result<()> {
    let m = Manifest::load(path)?;
    let args = m.list("arg");
    if args.is_empty() {
        return Err(CliError::Format(format!("{}: no recorded arguments", path.display())));
    }
    if args[0] == "replay" {
        return Err(CliError::Invalid("a replay manifest cannot be replayed".into()));
    }
    if let Some(cwd) = m.get("cwd") {
        std::env::set_current_dir(cwd).map_err(|e| CliError::io(Path::new(cwd), e))?;
    }
    for (k, v) in m.entries() {
        if let Some(role) = k.strip_prefix("input.").and_then(|r| r.strip_suffix(".sha256")) {
            let file = m
                .get(&format!("input.{role}.path"))
                .ok_or_else(|| CliError::Format(format!("missing path for input {role}")))?;
            if sha256_file(Path::new(file))? != *v {
                return Err(CliError::Mismatch(format!("input {file} changed since the run")));
            }
        }
    }
    let os_args: Vec<std::ffi::OsString> = args.iter().map(Into::into).collect();
    crate::run(&os_args, false)?;
    let outputs = m.list("output");
    for (i, out) in outputs.iter().enumerate() {
        let want = m
            .get(&format!("output.{i}.sha256"))
            .ok_or_else(|| CliError::Format(format!("missing digest for output {out}")))?;
        let got = sha256_file(Path::new(out))?;
        if got != want {
            return Err(CliError::Mismatch(format!("{out}: sha256 {got}, recorded {want}")));
        }
    }
    println!("replay ok: {} output(s) identical", outputs.len());
    Ok(())
}
