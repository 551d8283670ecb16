use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::gmm::{Spectrum, LN_2PI};
use super::{log_sum_exp, GmmPrior};
use crate::error::{invalid, Result};
use crate::rng::mix64;

/// Settings for [`train_gmm_em`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmOptions {
    pub components: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Lloyd iterations run after k-means++ seeding.
    pub kmeans_iterations: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { components: 200, iterations: 30, seed: 0, kmeans_iterations: 5 }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub prior: GmmPrior,
    /// Mean per-patch log-likelihood before the first iteration and after
    /// each iteration.
    pub log_likelihood: Vec<f64>,
    /// Number of times a collapsed component was re-seeded.
    pub reseeded: usize,
}

/// A component whose effective count drops below this is re-seeded.
const COLLAPSE_COUNT: f64 = 1.0;

/// Fits a full-covariance GMM by expectation maximization.
///
/// Covariance eigenvalues are clamped at [`COVARIANCE_FLOOR`], which is the
/// constrained maximum-likelihood update, so the likelihood trace stays
/// non-decreasing unless a component has to be re-seeded.
pub fn train_gmm_em(patches: &[Vec<f64>], options: &EmOptions) -> Result<EmFit> {
    let k = options.components;
    let n = patches.len();
    if k == 0 {
        return Err(invalid("component count must be positive"));
    }
    if k > n {
        return Err(invalid(format!("{k} components need at least {k} patches, got {n}")));
    }
    let dim = patches[0].len();
    if dim == 0 {
        return Err(invalid("patch dimension must be positive"));
    }
    for (i, p) in patches.iter().enumerate() {
        if p.len() != dim {
            return Err(invalid(format!("patch {i} has dimension {}, expected {dim}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("patch {i} has non-finite entries")));
        }
    }
    let data = DMatrix::from_fn(dim, n, |i, j| patches[j][i]);
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(options.seed));

    let (_, global_cov) = weighted_moments(&data, None);
    let means = kmeans_pp(&data, k, options.kmeans_iterations, &mut rng);
    let mut prior = GmmPrior::new(
        vec![1.0 / k as f64; k],
        means.into_iter().map(|m| m.data.into()).collect(),
        vec![global_cov.clone(); k],
    )?;

    let mut trace = Vec::with_capacity(options.iterations + 1);
    let mut reseeded = 0;
    for _ in 0..options.iterations {
        let (log_resp, mean_ll) = e_step(&prior, &data);
        trace.push(mean_ll);

        let stats: Vec<(f64, DVector<f64>, DMatrix<f64>)> = (0..k)
            .into_par_iter()
            .map(|c| {
                let r = DVector::from_fn(n, |j, _| log_resp[(c, j)].exp());
                let count = r.sum();
                let (mean, cov) = weighted_moments(&data, Some(&r));
                (count, mean, cov)
            })
            .collect();

        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for (c, (count, mean, cov)) in stats.into_iter().enumerate() {
            if count < COLLAPSE_COUNT || !mean.iter().all(|v| v.is_finite()) {
                let j = rng.random_range(0..n);
                log::warn!("EM: component {c} collapsed (effective count {count:.3e}); re-seeding from patch {j}");
                reseeded += 1;
                weights.push(1.0 / k as f64);
                means.push(patches[j].clone());
                covs.push(global_cov.clone());
            } else {
                weights.push(count / n as f64);
                means.push(mean.data.into());
                covs.push(cov);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        prior = GmmPrior::new(weights, means, covs)?;
    }
    trace.push(e_step(&prior, &data).1);
    Ok(EmFit { prior, log_likelihood: trace, reseeded })
}

/// Mean per-patch log-likelihood of `patches` under `prior`.
pub fn mean_log_likelihood(prior: &GmmPrior, patches: &[Vec<f64>]) -> Result<f64> {
    let dim = super::PatchPrior::dim(prior);
    for p in patches {
        super::check_dim("patch", p.len(), dim)?;
    }
    let data = DMatrix::from_fn(dim, patches.len(), |i, j| patches[j][i]);
    Ok(e_step(prior, &data).1)
}

/// Log-responsibilities (K × N) and the mean log-likelihood.
fn e_step(prior: &GmmPrior, data: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let (dim, n) = data.shape();
    let k = prior.components();
    let rows: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|c| {
            let spec: &Spectrum = prior.spectrum(c);
            let mut centered = data.clone();
            let mean = DVector::from_column_slice(prior.mean(c));
            for mut col in centered.column_iter_mut() {
                col -= &mean;
            }
            let z = &spec.vectors_t * centered;
            let inv: Vec<f64> = spec.values.iter().map(|l| 1.0 / l).collect();
            let log_det: f64 = spec.values.iter().map(|l| l.ln()).sum();
            let constant = prior.log_weights()[c] - 0.5 * (dim as f64 * LN_2PI + log_det);
            z.column_iter()
                .map(|col| constant - 0.5 * col.iter().zip(&inv).map(|(zi, vi)| zi * zi * vi).sum::<f64>())
                .collect()
        })
        .collect();
    let mut log_resp = DMatrix::from_fn(k, n, |c, j| rows[c][j]);
    let mut total = 0.0;
    let mut column = vec![0.0; k];
    for j in 0..n {
        for c in 0..k {
            column[c] = log_resp[(c, j)];
        }
        let norm = log_sum_exp(&column);
        total += norm;
        for c in 0..k {
            log_resp[(c, j)] -= norm;
        }
    }
    (log_resp, total / n as f64)
}

/// Weighted mean and maximum-likelihood covariance of the columns of
/// `data`; uniform weights when `weights` is `None`.
fn weighted_moments(data: &DMatrix<f64>, weights: Option<&DVector<f64>>) -> (DVector<f64>, DMatrix<f64>) {
    let (dim, n) = data.shape();
    let w = weights.cloned().unwrap_or_else(|| DVector::from_element(n, 1.0));
    let total = w.sum();
    let mean = data * &w / total;
    let mut scaled = data.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col -= &mean;
        col *= w[j].sqrt();
    }
    let cov = &scaled * scaled.transpose() / total;
    let cov = (&cov + cov.transpose()) * 0.5;
    debug_assert_eq!(cov.nrows(), dim);
    (mean, cov)
}

/// k-means++ seeding on a subsample of `10·k` patches, followed by a few
/// Lloyd iterations on the same subsample.
fn kmeans_pp(data: &DMatrix<f64>, k: usize, lloyd: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let n = data.ncols();
    let m = (10 * k).min(n);
    let mut picked = sample_indices(rng, n, m).into_vec();
    picked.sort_unstable();
    let sub: Vec<DVector<f64>> = picked.iter().map(|&j| data.column(j).into_owned()).collect();

    let mut centers = vec![sub[rng.random_range(0..m)].clone()];
    let mut dist: Vec<f64> = sub.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = m - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        let c = sub[next].clone();
        for (d, x) in dist.iter_mut().zip(&sub) {
            *d = d.min((x - &c).norm_squared());
        }
        centers.push(c);
    }

    for _ in 0..lloyd {
        let assign: Vec<usize> = sub
            .par_iter()
            .map(|x| {
                let mut best = (0, f64::INFINITY);
                for (c, center) in centers.iter().enumerate() {
                    let d = (x - center).norm_squared();
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect();
        let mut sums = vec![DVector::zeros(data.nrows()); k];
        let mut counts = vec![0usize; k];
        for (x, &c) in sub.iter().zip(&assign) {
            sums[c] += x;
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = &sums[c] / counts[c] as f64;
            }
        }
    }
    centers
}
