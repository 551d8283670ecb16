//! Patch priors and patch-level posterior inference under Gaussian noise.

mod dictionary;
mod em;
mod gmm;

pub use dictionary::DictionaryPrior;
pub use em::{mean_log_likelihood, train_gmm_em, EmFit, EmOptions};
pub use gmm::GmmPrior;

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::rng::StreamKey;

/// Smallest eigenvalue allowed in a GMM component covariance.
pub const COVARIANCE_FLOOR: f64 = 1e-6;

/// Max-norm tolerance for dictionary membership.
pub const DICTIONARY_TOLERANCE: f64 = 1e-6;

/// Gaussian observation noise on a patch.
///
/// Diagonal entries may be `+∞`, which marks a coordinate as unobserved.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseModel {
    Spherical(f64),
    Diagonal(Vec<f64>),
}

impl NoiseModel {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            NoiseModel::Spherical(v) => {
                if !(*v > 0.0) {
                    return Err(invalid(format!("noise variance must be positive, got {v}")));
                }
            }
            NoiseModel::Diagonal(d) => {
                if d.len() != dim {
                    return Err(invalid(format!("diagonal noise has {} entries, expected {dim}", d.len())));
                }
                if let Some(i) = d.iter().position(|v| !(*v > 0.0)) {
                    return Err(invalid(format!("noise variance {i} must be positive, got {}", d[i])));
                }
            }
        }
        Ok(())
    }

    /// Reduces the model to the cheapest equivalent form.
    pub(crate) fn classify(&self, dim: usize) -> Result<NoiseForm> {
        self.validate(dim)?;
        Ok(match self {
            NoiseModel::Spherical(v) => NoiseForm::Spherical(*v),
            NoiseModel::Diagonal(d) => {
                let first = d.first().copied().unwrap_or(f64::INFINITY);
                if d.iter().all(|&v| v == first) {
                    NoiseForm::Spherical(first)
                } else {
                    let observed: Vec<usize> = (0..dim).filter(|&i| d[i].is_finite()).collect();
                    if observed.is_empty() {
                        NoiseForm::Spherical(f64::INFINITY)
                    } else {
                        let variances = observed.iter().map(|&i| d[i]).collect();
                        NoiseForm::Diagonal { observed, variances }
                    }
                }
            }
        })
    }
}

#[derive(Clone, Debug)]
pub(crate) enum NoiseForm {
    /// Isotropic variance; `+∞` means nothing is observed.
    Spherical(f64),
    /// Finite variances for the `observed` coordinates only.
    Diagonal { observed: Vec<usize>, variances: Vec<f64> },
}

/// Noise shared by a batch of patches, or given per patch.
#[derive(Clone, Debug)]
pub enum PatchNoise {
    Shared(NoiseModel),
    PerPatch(Vec<NoiseModel>),
}

impl PatchNoise {
    fn get(&self, i: usize) -> &NoiseModel {
        match self {
            PatchNoise::Shared(n) => n,
            PatchNoise::PerPatch(v) => &v[i],
        }
    }
}

/// What to do with each patch of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchAction {
    /// Draw from the patch posterior; patch `i` uses stream `i` of the key.
    Sample(StreamKey),
    /// Take the (approximate) posterior mode.
    Map,
}

/// A probability model over vectorized patches that supports posterior
/// inference given a Gaussian-noise observation of a patch.
pub trait PatchPrior: Send + Sync {
    fn dim(&self) -> usize;

    /// `log p(x)`, possibly `-∞`.
    fn log_density(&self, x: &[f64]) -> Result<f64>;

    fn sample_posterior(&self, y: &[f64], noise: &NoiseModel, rng: &mut dyn RngCore) -> Result<Vec<f64>>;

    fn map_posterior(&self, y: &[f64], noise: &NoiseModel) -> Result<Vec<f64>>;

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Posterior inference for many independent patches.
    fn restore_patches(
        &self,
        observations: &[Vec<f64>],
        noise: &PatchNoise,
        action: PatchAction,
    ) -> Result<Vec<Vec<f64>>> {
        restore_each(self, observations, noise, action)
    }
}

/// Patch-by-patch fallback for [`PatchPrior::restore_patches`].
pub fn restore_each<P: PatchPrior + ?Sized>(
    prior: &P,
    observations: &[Vec<f64>],
    noise: &PatchNoise,
    action: PatchAction,
) -> Result<Vec<Vec<f64>>> {
    if let PatchNoise::PerPatch(v) = noise {
        if v.len() != observations.len() {
            return Err(invalid(format!("{} noise models for {} patches", v.len(), observations.len())));
        }
    }
    observations
        .par_iter()
        .enumerate()
        .map(|(i, y)| match action {
            PatchAction::Map => prior.map_posterior(y, noise.get(i)),
            PatchAction::Sample(key) => prior.sample_posterior(y, noise.get(i), &mut key.rng(i as u64)),
        })
        .collect()
}

/// A prior loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    Gmm(GmmPrior),
    Dictionary(DictionaryPrior),
}

impl PatchPrior for Prior {
    fn dim(&self) -> usize {
        match self {
            Prior::Gmm(p) => p.dim(),
            Prior::Dictionary(p) => p.dim(),
        }
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            Prior::Gmm(p) => p.log_density(x),
            Prior::Dictionary(p) => p.log_density(x),
        }
    }

    fn sample_posterior(&self, y: &[f64], noise: &NoiseModel, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        match self {
            Prior::Gmm(p) => p.sample_posterior(y, noise, rng),
            Prior::Dictionary(p) => p.sample_posterior(y, noise, rng),
        }
    }

    fn map_posterior(&self, y: &[f64], noise: &NoiseModel) -> Result<Vec<f64>> {
        match self {
            Prior::Gmm(p) => p.map_posterior(y, noise),
            Prior::Dictionary(p) => p.map_posterior(y, noise),
        }
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        match self {
            Prior::Gmm(p) => p.sample_prior(rng),
            Prior::Dictionary(p) => p.sample_prior(rng),
        }
    }

    fn restore_patches(
        &self,
        observations: &[Vec<f64>],
        noise: &PatchNoise,
        action: PatchAction,
    ) -> Result<Vec<Vec<f64>>> {
        match self {
            Prior::Gmm(p) => p.restore_patches(observations, noise, action),
            Prior::Dictionary(p) => p.restore_patches(observations, noise, action),
        }
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights into probabilities.
pub(crate) fn normalize_log_weights(log_weights: &[f64]) -> Vec<f64> {
    let total = log_sum_exp(log_weights);
    log_weights.iter().map(|w| (w - total).exp()).collect()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave u just past the last partial sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub(crate) fn check_dim(what: &str, len: usize, dim: usize) -> Result<()> {
    if len != dim {
        return Err(invalid(format!("{what} has dimension {len}, prior expects {dim}")));
    }
    Ok(())
}
