//! Gibbs chains over grids of non-overlapping patches, MMSE averaging and
//! the EPLL energy.

mod chain;
mod domain;

pub use chain::{run_denoise, run_restore};

use rayon::prelude::*;

use crate::degradation::{GaussianBackend, LinearOperator};
use crate::error::{invalid, Result};
use crate::image::{extract_grid_patches, GridSet, Image, Padding};
use crate::prior::PatchPrior;

/// Annealing schedule `f(i) = (1 + (i/τ)^d)·a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub tau: f64,
    pub power: f64,
    pub scale: f64,
}

impl Schedule {
    pub fn new(tau: f64, power: f64, scale: f64) -> Result<Self> {
        let s = Self { tau, power, scale };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("power", self.power), ("scale", self.scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("schedule {name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn eval(&self, i: f64) -> f64 {
        schedule_eval(self, i)
    }
}

pub fn schedule_eval(s: &Schedule, i: f64) -> f64 {
    (1.0 + (i / s.tau).powf(s.power)) * s.scale
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    /// Draw from each conditional; return the last updated grid.
    #[default]
    Sample,
    /// Replace each draw by its mode; return the mean over grids.
    Map,
}

/// How a grid is tied to its neighbours in the chain of grid copies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Coupling {
    /// Exact conditional of the chain: an interior grid sees the mean of
    /// both neighbours with weight `2β`, an end grid its one neighbour with
    /// weight `β`.
    #[default]
    Chain,
    /// Mean of the neighbours with weight `β` for every grid.
    Average,
}

/// How the data term is shared among the grid copies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DataWeight {
    /// Each of the `G` copies carries `‖Hx − y‖²/(2Gσ²)`, so the copies
    /// together carry the likelihood once.
    #[default]
    Split,
    /// Each copy carries the full `‖Hx − y‖²/(2σ²)`. At high coupling this
    /// weighs the data against the `G` grid priors the way EPLL weighs it
    /// against its overlapping patches.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub grids: GridSet,
    pub beta: Schedule,
    /// Required by [`run_restore`]; ignored by [`run_denoise`].
    pub gamma: Option<Schedule>,
    pub mode: Mode,
    /// One extra sweep at 100× the last `β`.
    pub final_smooth: bool,
    pub seed: u64,
    pub coupling: Coupling,
    pub data_weight: DataWeight,
    pub backend: GaussianBackend,
    /// Record the EPLL energy after every iteration (costly).
    pub track_energy: bool,
}

pub const DEFAULT_ITERATIONS: usize = 100;
pub const DEFAULT_GRIDS: usize = 32;
pub const BETA_POWER: f64 = 2.2;
pub const FINAL_SMOOTH_FACTOR: f64 = 100.0;

impl SamplerConfig {
    fn base(grids: GridSet, beta: Schedule, gamma: Option<Schedule>, seed: u64) -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            grids,
            beta,
            gamma,
            mode: Mode::Sample,
            final_smooth: true,
            seed,
            coupling: Coupling::Chain,
            data_weight: DataWeight::Split,
            backend: GaussianBackend::Auto,
            track_energy: false,
        }
    }

    /// `β`: τ = 18, d = 2.2, a = 1/σ².
    pub fn denoising(noise_var: f64, grids: GridSet, seed: u64) -> Self {
        let beta = Schedule { tau: 18.0, power: BETA_POWER, scale: 1.0 / noise_var };
        Self::base(grids, beta, None, seed)
    }

    /// `β`: τ = 18, d = 2.2, a = 10; `γ`: τ = 1, d = 0.65, a = 0.1.
    pub fn deblurring(grids: GridSet, seed: u64) -> Self {
        let beta = Schedule { tau: 18.0, power: BETA_POWER, scale: 10.0 };
        let gamma = Schedule { tau: 1.0, power: 0.65, scale: 0.1 };
        Self::base(grids, beta, Some(gamma), seed)
    }

    /// `β`: τ = 6, d = 2.2, a = 2.
    pub fn inpainting(grids: GridSet, seed: u64) -> Self {
        let beta = Schedule { tau: 6.0, power: BETA_POWER, scale: 2.0 };
        Self::base(grids, beta, None, seed)
    }

    /// Number of copies the data term is divided among.
    pub fn data_split(&self) -> usize {
        match self.data_weight {
            DataWeight::Split => self.grids.count(),
            DataWeight::Full => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("iteration count must be at least 1"));
        }
        self.beta.validate()?;
        if let Some(g) = &self.gamma {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationDiagnostics {
    /// 1-based; the final smoothing sweep is `iterations + 1`.
    pub iteration: usize,
    pub beta: f64,
    pub gamma: Option<f64>,
    /// `‖Hx − y‖² / N` for the last updated grid.
    pub data_fit: f64,
    pub energy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestorationResult {
    pub estimate: Image,
    pub diagnostics: Vec<IterationDiagnostics>,
    /// Digest of every random stream the chain consumed.
    pub stream_digest: u64,
}

/// Pixelwise mean of `n` chains; chain `i` gets seed `seed + i`, so chain
/// 0 reproduces a single run with `seed`.
pub fn mmse_estimate<F>(n: usize, seed: u64, run: F) -> Result<Image>
where
    F: Fn(u64) -> Result<Image> + Sync,
{
    if n == 0 {
        return Err(invalid("MMSE needs at least one sample"));
    }
    let samples: Vec<Image> =
        (0..n as u64).into_par_iter().map(|i| run(seed.wrapping_add(i))).collect::<Result<_>>()?;
    let mut acc = samples[0].clone();
    for s in &samples[1..] {
        acc.axpy(1.0, s)?;
    }
    acc.scale(1.0 / n as f64);
    Ok(acc)
}

/// `‖Hx − y‖²/(2σ²) − Σ_g Σ_i log p(P_i x)`, with patches taken from `x`
/// reflect-padded by the patch size. `+∞` if any patch has zero density.
pub fn epll_energy(
    x: &Image,
    y: &Image,
    op: &LinearOperator,
    noise_var: f64,
    grids: &GridSet,
    prior: &dyn PatchPrior,
) -> Result<f64> {
    if !(noise_var > 0.0) {
        return Err(invalid(format!("noise variance must be positive, got {noise_var}")));
    }
    let p = grids.patch_size();
    if prior.dim() != p * p * x.channels() {
        return Err(invalid(format!(
            "prior dimension {} does not match {p}x{p}x{} patches",
            prior.dim(),
            x.channels()
        )));
    }
    let data = op.residual_norm_sq(x, y)? / (2.0 * noise_var);
    let padded = domain::extend(x, Padding::uniform(p));
    let mut log_p = 0.0;
    for g in grids.grids() {
        let patches = extract_grid_patches(&padded, g)?;
        let terms: Vec<f64> = patches.par_iter().map(|q| prior.log_density(q)).collect::<Result<_>>()?;
        log_p += terms.iter().sum::<f64>();
    }
    if log_p == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok(data - log_p)
}
