use rand_distr::{Distribution, StandardNormal};

use super::domain::Domain;
use super::{epll_energy, Coupling, IterationDiagnostics, Mode, RestorationResult, SamplerConfig, FINAL_SMOOTH_FACTOR};
use crate::degradation::{GaussianStep, LinearOperator, Mask};
use crate::error::{invalid, numerical, Result};
use crate::image::{GridSpec, Image};
use crate::prior::{NoiseModel, PatchAction, PatchNoise, PatchPrior};
use crate::rng::StreamKey;

/// Initial value of pixels with no observation.
const UNOBSERVED_FILL: f64 = 0.5;

/// Grid visited at update `step`: 0, 1, …, G−1, G−2, …, 0, 1, …
fn grid_at(step: usize, count: usize) -> usize {
    if count == 1 {
        return 0;
    }
    let period = 2 * (count - 1);
    let j = step % period;
    if j < count {
        j
    } else {
        period - j
    }
}

/// `(iteration, β, γ)` for every sweep, including the final smoothing one.
fn plan(cfg: &SamplerConfig) -> Vec<(usize, f64, Option<f64>)> {
    let t = cfg.iterations;
    let gamma = |i: usize| cfg.gamma.map(|s| s.eval(i as f64));
    let mut out: Vec<_> = (1..=t).map(|i| (i, cfg.beta.eval(i as f64), gamma(i))).collect();
    if cfg.final_smooth {
        out.push((t + 1, FINAL_SMOOTH_FACTOR * cfg.beta.eval(t as f64), gamma(t)));
    }
    out
}

/// One update of grid `g`, given the coupling target `x̄` with total weight
/// `w` (precision `2w`).
struct Update<'a> {
    grid: &'a GridSpec,
    g: usize,
    step: u64,
    x_bar: &'a Image,
    weight: f64,
    gamma: Option<f64>,
    previous: &'a Image,
}

struct Chain<'a> {
    cfg: &'a SamplerConfig,
    xs: Vec<Image>,
    visited: Vec<bool>,
    last: usize,
    digest: u64,
}

impl<'a> Chain<'a> {
    fn new(cfg: &'a SamplerConfig, init: Image) -> Self {
        let count = cfg.grids.count();
        Self { cfg, xs: vec![init; count], visited: vec![false; count], last: 0, digest: 0 }
    }

    /// Coupling target and weight for grid `g`. On the first sweep only
    /// already-updated neighbours count, except for the very first update,
    /// which falls back to the initialized neighbour.
    fn coupling(&self, g: usize, beta: f64) -> (Option<Image>, f64) {
        let count = self.xs.len();
        let all: Vec<usize> = [g.checked_sub(1), (g + 1 < count).then_some(g + 1)].into_iter().flatten().collect();
        let mut nb: Vec<usize> = all.iter().copied().filter(|&n| self.visited[n]).collect();
        if nb.is_empty() && !self.visited.iter().any(|&v| v) {
            nb = all;
        }
        if nb.is_empty() {
            return (None, 0.0);
        }
        let mut mean = self.xs[nb[0]].clone();
        for &n in &nb[1..] {
            mean.axpy(1.0, &self.xs[n]).expect("grid copies share a shape");
        }
        mean.scale(1.0 / nb.len() as f64);
        let weight = match self.cfg.coupling {
            Coupling::Chain => beta * nb.len() as f64,
            Coupling::Average => beta,
        };
        (Some(mean), weight)
    }

    fn run(
        &mut self,
        mut update: impl FnMut(&Update) -> Result<Image>,
        mut diagnose: impl FnMut(&Image) -> Result<(f64, Option<f64>)>,
    ) -> Result<Vec<IterationDiagnostics>> {
        let count = self.xs.len();
        let mut step = 0usize;
        let mut diagnostics = Vec::new();
        for (iteration, beta, gamma) in plan(self.cfg) {
            for _ in 0..count {
                let g = grid_at(step, count);
                let (x_bar, weight) = self.coupling(g, beta);
                let next = update(&Update {
                    grid: self.cfg.grids.get(g),
                    g,
                    step: step as u64,
                    x_bar: x_bar.as_ref().unwrap_or(&self.xs[g]),
                    weight,
                    gamma,
                    previous: &self.xs[g],
                })?;
                if !next.is_finite() {
                    return Err(numerical(format!("non-finite value at iteration {iteration}, grid {g}")));
                }
                self.xs[g] = next;
                self.visited[g] = true;
                self.last = g;
                self.digest = StreamKey::new(self.cfg.seed, step as u64).digest_into(self.digest);
                step += 1;
            }
            let (data_fit, energy) = diagnose(&self.xs[self.last])?;
            diagnostics.push(IterationDiagnostics { iteration, beta, gamma, data_fit, energy });
        }
        Ok(diagnostics)
    }

    fn estimate(&self, domain: &Domain) -> Result<Image> {
        match self.cfg.mode {
            Mode::Sample => domain.crop(&self.xs[self.last]),
            Mode::Map => {
                let mut mean = self.xs[0].clone();
                for x in &self.xs[1..] {
                    mean.axpy(1.0, x)?;
                }
                mean.scale(1.0 / self.xs.len() as f64);
                domain.crop(&mean)
            }
        }
    }
}

fn check_prior(prior: &dyn PatchPrior, cfg: &SamplerConfig, channels: usize) -> Result<()> {
    let p = cfg.grids.patch_size();
    if prior.dim() != p * p * channels {
        return Err(invalid(format!(
            "prior dimension {} does not match {p}x{p}x{channels} patches",
            prior.dim()
        )));
    }
    Ok(())
}

fn action(mode: Mode, key: StreamKey) -> PatchAction {
    match mode {
        Mode::Sample => PatchAction::Sample(key),
        Mode::Map => PatchAction::Map,
    }
}

/// Fills the pixels no patch covered: a flat prior leaves the Gaussian
/// `N(r, s)` per element.
fn fill_uncovered(
    img: &mut Image,
    uncovered: &[usize],
    mean: impl Fn(usize) -> f64,
    var: impl Fn(usize) -> f64,
    mode: Mode,
    key: StreamKey,
    stream: u64,
) {
    if uncovered.is_empty() {
        return;
    }
    let ch = img.channels();
    let mut rng = key.rng(stream);
    let data = img.data_mut();
    for &px in uncovered {
        for e in px * ch..(px + 1) * ch {
            let s = var(e);
            if !s.is_finite() {
                continue;
            }
            data[e] = match mode {
                Mode::Map => mean(e),
                Mode::Sample => {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    mean(e) + s.sqrt() * n
                }
            };
        }
    }
}

/// Gibbs sampler for `y = x + n` with spherical or diagonal Gaussian noise.
///
/// Each grid update draws every patch of the grid from its posterior given
/// the precision-weighted combination of the coupling target and `y`.
/// Infinite diagonal entries mark missing pixels (inpainting).
pub fn run_denoise(
    y: &Image,
    noise: &NoiseModel,
    prior: &dyn PatchPrior,
    cfg: &SamplerConfig,
) -> Result<RestorationResult> {
    cfg.validate()?;
    noise.validate(y.data().len())?;
    check_prior(prior, cfg, y.channels())?;
    let split = cfg.data_split() as f64;
    let domain = Domain::reflect(y.shape(), cfg.grids.patch_size());
    let n = domain.shape.len();

    let y_ext = domain.extend(y);
    let (data_precision, spherical) = match noise {
        NoiseModel::Spherical(v) => (vec![1.0 / (split * v); n], Some(*v)),
        NoiseModel::Diagonal(d) => {
            let ext = domain.extend_raw(d, y.channels());
            (ext.iter().map(|v| 1.0 / (split * v)).collect(), None)
        }
    };
    let init = Image::from_vec(
        domain.shape,
        y_ext.data().iter().zip(&data_precision).map(|(&v, &dp)| if dp > 0.0 { v } else { UNOBSERVED_FILL }).collect(),
    );
    let observed: Vec<bool> = match noise {
        NoiseModel::Spherical(_) => vec![true; y.data().len()],
        NoiseModel::Diagonal(d) => d.iter().map(|v| v.is_finite()).collect(),
    };

    let mut chain = Chain::new(cfg, init.clone());
    let update = |u: &Update| -> Result<Image> {
        let key = StreamKey::new(cfg.seed, u.step);
        let two_w = 2.0 * u.weight;
        let mut r = vec![0.0; n];
        let mut s = vec![0.0; n];
        for i in 0..n {
            let dp = data_precision[i];
            let prec = two_w + dp;
            if prec > 0.0 {
                let data = if dp > 0.0 { dp * y_ext.data()[i] } else { 0.0 };
                r[i] = (two_w * u.x_bar.data()[i] + data) / prec;
                s[i] = 1.0 / prec;
            } else {
                r[i] = u.previous.data()[i];
                s[i] = f64::INFINITY;
            }
        }
        let r_img = Image::from_vec(domain.shape, r);
        let patches = domain.extract(&r_img, u.grid)?;
        let patch_noise = match spherical {
            Some(_) => PatchNoise::Shared(NoiseModel::Spherical(s[0])),
            None => {
                let s_img = Image::from_vec(domain.shape, s.clone());
                PatchNoise::PerPatch(domain.extract(&s_img, u.grid)?.into_iter().map(NoiseModel::Diagonal).collect())
            }
        };
        let restored = prior.restore_patches(&patches, &patch_noise, action(cfg.mode, key))?;
        let mut next = u.previous.clone();
        domain.assemble_into(&restored, u.grid, &mut next)?;
        let uncovered = domain.uncovered(u.grid)?;
        fill_uncovered(&mut next, &uncovered, |e| r_img.data()[e], |e| s[e], cfg.mode, key, patches.len() as u64);
        Ok(next)
    };
    let diagnose = |x: &Image| -> Result<(f64, Option<f64>)> {
        let x = domain.crop(x)?;
        let (mut sum, mut m) = (0.0, 0usize);
        for ((a, b), &o) in x.data().iter().zip(y.data()).zip(&observed) {
            if o {
                sum += (a - b) * (a - b);
                m += 1;
            }
        }
        let fit = if m > 0 { sum / m as f64 } else { 0.0 };
        let energy = match (cfg.track_energy, spherical) {
            (true, Some(v)) => Some(epll_energy(&x, y, &LinearOperator::Identity, v, &cfg.grids, prior)?),
            _ => None,
        };
        Ok((fit, energy))
    };
    let diagnostics = chain.run(update, diagnose)?;
    Ok(RestorationResult { estimate: chain.estimate(&domain)?, diagnostics, stream_digest: chain.digest })
}

/// Gibbs sampler for `y = Hx + n`, `n ~ N(0, σ²I)`, with an auxiliary image
/// per grid: each update draws the grid image from its Gaussian conditional
/// and then every patch of the auxiliary image from its patch posterior with
/// noise variance `1/(2γ)`.
///
/// Convolutions are handled on a torus so the Gaussian step is exact; other
/// operators work on a reflect-padded domain.
pub fn run_restore(
    y: &Image,
    op: &LinearOperator,
    noise_var: f64,
    prior: &dyn PatchPrior,
    cfg: &SamplerConfig,
) -> Result<RestorationResult> {
    cfg.validate()?;
    if cfg.gamma.is_none() {
        return Err(invalid("restoration needs a γ schedule"));
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(invalid(format!("noise variance must be positive, got {noise_var}")));
    }
    if !y.is_finite() {
        return Err(invalid("observation has non-finite values"));
    }
    op.check_shape(y.shape())?;
    check_prior(prior, cfg, y.channels())?;
    let p = cfg.grids.patch_size();
    let domain = match op {
        LinearOperator::Convolution(_) => Domain::torus(y.shape(), p),
        _ => Domain::reflect(y.shape(), p),
    };
    let y_ext = domain.extend(y);
    let op_ext = match op {
        LinearOperator::Mask(m) => {
            let values = domain.extend_raw(m.values(), 1);
            LinearOperator::Mask(Mask::new(domain.shape.height, domain.shape.width, values)?)
        }
        other => other.clone(),
    };
    let init = match &op_ext {
        LinearOperator::Mask(m) => {
            let ch = y.channels();
            let data =
                y_ext.data().iter().enumerate().map(|(i, &v)| if m.values()[i / ch] > 0.0 { v } else { UNOBSERVED_FILL });
            Image::from_vec(domain.shape, data.collect())
        }
        _ => y_ext.clone(),
    };

    let mut ts = vec![init.clone(); cfg.grids.count()];
    let mut chain = Chain::new(cfg, init);
    let update = |u: &Update| -> Result<Image> {
        let gamma = u.gamma.expect("checked above");
        let x_key = StreamKey::new(cfg.seed, 2 * u.step);
        let t_key = StreamKey::new(cfg.seed, 2 * u.step + 1);
        let step = GaussianStep {
            op: &op_ext,
            y: &y_ext,
            noise_var,
            grids: cfg.data_split(),
            beta: u.weight,
            x_bar: u.x_bar,
            gamma,
            t: &ts[u.g],
        };
        let x = match cfg.mode {
            Mode::Sample => step.sample(cfg.backend, &mut x_key.rng(0))?,
            Mode::Map => step.mean(cfg.backend)?,
        };
        let split_var = 1.0 / (2.0 * gamma);
        let patches = domain.extract(&x, u.grid)?;
        let restored = prior.restore_patches(
            &patches,
            &PatchNoise::Shared(NoiseModel::Spherical(split_var)),
            action(cfg.mode, t_key),
        )?;
        let mut t = x.clone();
        domain.assemble_into(&restored, u.grid, &mut t)?;
        let uncovered = domain.uncovered(u.grid)?;
        fill_uncovered(&mut t, &uncovered, |e| x.data()[e], |_| split_var, cfg.mode, t_key, patches.len() as u64);
        ts[u.g] = t;
        Ok(x)
    };
    let diagnose = |x: &Image| -> Result<(f64, Option<f64>)> {
        let x = domain.crop(x)?;
        let fit = op.residual_norm_sq(&x, y)? / y.data().len() as f64;
        let energy = if cfg.track_energy { Some(epll_energy(&x, y, op, noise_var, &cfg.grids, prior)?) } else { None };
        Ok((fit, energy))
    };
    let diagnostics = chain.run(update, diagnose)?;
    Ok(RestorationResult { estimate: chain.estimate(&domain)?, diagnostics, stream_digest: chain.digest })
}
