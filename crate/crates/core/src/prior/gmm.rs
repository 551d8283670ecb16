use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, LU};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{
    argmax, check_dim, log_sum_exp, normalize_log_weights, restore_each, sample_categorical, NoiseForm,
    NoiseModel, PatchAction, PatchNoise, PatchPrior, COVARIANCE_FLOOR,
};
use crate::error::{invalid, numerical, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Eigen-decomposition of a component covariance, `Σ = U diag(λ) Uᵀ`.
#[derive(Clone, Debug)]
pub(crate) struct Spectrum {
    pub vectors: DMatrix<f64>,
    pub vectors_t: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl Spectrum {
    /// Decomposes the symmetric part of `cov`, raising eigenvalues below
    /// `floor`. Returns whether any eigenvalue was raised.
    pub(crate) fn floored(cov: &DMatrix<f64>, floor: f64) -> Result<(Self, bool)> {
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(numerical("covariance eigen-decomposition produced non-finite values"));
        }
        let mut clamped = false;
        let values = eig.eigenvalues.map(|v| {
            if v < floor {
                clamped = true;
                floor
            } else {
                v
            }
        });
        let vectors_t = eig.eigenvectors.transpose();
        Ok((Self { vectors: eig.eigenvectors, vectors_t, values }, clamped))
    }

    pub(crate) fn min_value(&self) -> f64 {
        self.values.min()
    }

    pub(crate) fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * self.values[j]
        });
        let m = scaled * &self.vectors_t;
        (&m + m.transpose()) * 0.5
    }
}

/// Gaussian mixture over vectorized patches with full covariances.
///
/// The Cholesky factors are the stored parameters; covariances and their
/// spectra are derived from them and cached.
#[derive(Clone, Debug)]
pub struct GmmPrior {
    dim: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    factors: Vec<DMatrix<f64>>,
    covariances: Vec<DMatrix<f64>>,
    spectra: Vec<Spectrum>,
}

impl PartialEq for GmmPrior {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.means == other.means && self.factors == other.factors
    }
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(invalid("a mixture needs at least one component"));
    }
    if let Some(k) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(invalid(format!("weight {k} must be positive, got {}", weights[k])));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

fn validate_means(means: &[Vec<f64>], k: usize) -> Result<usize> {
    if means.len() != k {
        return Err(invalid(format!("{} means for {k} weights", means.len())));
    }
    let dim = means[0].len();
    if dim == 0 {
        return Err(invalid("patch dimension must be positive"));
    }
    for (i, m) in means.iter().enumerate() {
        if m.len() != dim {
            return Err(invalid(format!("mean {i} has dimension {}, expected {dim}", m.len())));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("mean {i} has non-finite entries")));
        }
    }
    Ok(dim)
}

/// Linear system `(Σ_k + N)_oo` restricted to the observed coordinates.
struct ObservedSystem<'a> {
    solver: Solver<'a>,
    residual: DVector<f64>,
    alpha: DVector<f64>,
    log_likelihood: f64,
}

enum Solver<'a> {
    Cholesky(Cholesky<f64, Dyn>),
    /// Every coordinate observed, variance `s0` except at a few: Woodbury
    /// update of the cached spectrum, `A = Σ + s0 I`, `M = C⁻¹ + Uᵀ A⁻¹ U`.
    LowRank {
        spectrum: &'a Spectrum,
        inv: DVector<f64>,
        basis: DMatrix<f64>,
        capacitance: LU<f64, Dyn, Dyn>,
    },
}

impl ObservedSystem<'_> {
    fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.solver {
            Solver::Cholesky(chol) => chol.solve(v),
            Solver::LowRank { spectrum, inv, basis, capacitance } => {
                let z = &spectrum.vectors_t * v;
                low_rank_apply(spectrum, inv, basis, capacitance, z)
            }
        }
    }

    fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.solver {
            Solver::Cholesky(chol) => chol.solve(m),
            Solver::LowRank { .. } => {
                let cols: Vec<DVector<f64>> = m.column_iter().map(|c| self.solve(&c.into_owned())).collect();
                DMatrix::from_columns(&cols)
            }
        }
    }
}

/// `V diag(inv) (z - B M⁻¹ Bᵀ diag(inv) z)` with `z = Vᵀ v`.
fn low_rank_apply(
    spectrum: &Spectrum,
    inv: &DVector<f64>,
    basis: &DMatrix<f64>,
    capacitance: &LU<f64, Dyn, Dyn>,
    z: DVector<f64>,
) -> DVector<f64> {
    let scaled = z.component_mul(inv);
    let t = capacitance.solve(&basis.tr_mul(&scaled)).unwrap_or_else(|| DVector::zeros(basis.ncols()));
    let corrected = (z - basis * t).component_mul(inv);
    &spectrum.vectors * corrected
}

/// Common variance and the exceptions to it, when every coordinate is
/// observed and at most a quarter differ.
struct LowRankNoise {
    base: f64,
    exceptions: Vec<usize>,
    offsets: Vec<f64>,
}

impl LowRankNoise {
    fn detect(dim: usize, observed: &[usize], variances: &[f64]) -> Option<Self> {
        if observed.len() != dim || dim == 0 {
            return None;
        }
        let mut sorted = variances.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (mut base, mut best, mut run) = (sorted[0], 0, 0);
        for i in 0..sorted.len() {
            run = if i > 0 && sorted[i] == sorted[i - 1] { run + 1 } else { 1 };
            if run > best {
                best = run;
                base = sorted[i];
            }
        }
        if dim - best > dim / 4 || base <= 0.0 {
            return None;
        }
        let exceptions: Vec<usize> = (0..dim).filter(|&i| variances[i] != base).collect();
        let offsets = exceptions.iter().map(|&i| variances[i] - base).collect();
        Some(Self { base, exceptions, offsets })
    }
}

impl GmmPrior {
    /// Builds a mixture from covariances, flooring their spectra at
    /// [`COVARIANCE_FLOOR`].
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        validate_weights(&weights)?;
        let dim = validate_means(&means, weights.len())?;
        if covariances.len() != weights.len() {
            return Err(invalid(format!("{} covariances for {} weights", covariances.len(), weights.len())));
        }
        let mut factors = Vec::with_capacity(weights.len());
        let mut covs = Vec::with_capacity(weights.len());
        let mut spectra = Vec::with_capacity(weights.len());
        for (k, cov) in covariances.into_iter().enumerate() {
            if cov.nrows() != dim || cov.ncols() != dim {
                return Err(invalid(format!("covariance {k} is {}x{}, expected {dim}x{dim}", cov.nrows(), cov.ncols())));
            }
            if cov.iter().any(|v| !v.is_finite()) {
                return Err(numerical(format!("component {k}: covariance has non-finite entries")));
            }
            let scale = cov.amax().max(1.0);
            if (&cov - cov.transpose()).amax() > 1e-8 * scale {
                return Err(invalid(format!("covariance {k} is not symmetric")));
            }
            let (spectrum, clamped) =
                Spectrum::floored(&cov, COVARIANCE_FLOOR).map_err(|e| numerical(format!("component {k}: {e}")))?;
            let sigma = if clamped { spectrum.reconstruct() } else { (&cov + cov.transpose()) * 0.5 };
            let factor = Cholesky::new(sigma.clone())
                .ok_or_else(|| numerical(format!("component {k}: covariance is not positive definite")))?
                .l();
            factors.push(factor);
            covs.push(sigma);
            spectra.push(spectrum);
        }
        Ok(Self::assemble(dim, weights, means, factors, covs, spectra))
    }

    /// Builds a mixture from lower-triangular Cholesky factors, keeping them
    /// verbatim unless a covariance falls below the floor.
    pub fn from_cholesky(weights: Vec<f64>, means: Vec<Vec<f64>>, factors: Vec<DMatrix<f64>>) -> Result<Self> {
        validate_weights(&weights)?;
        let dim = validate_means(&means, weights.len())?;
        if factors.len() != weights.len() {
            return Err(invalid(format!("{} factors for {} weights", factors.len(), weights.len())));
        }
        let mut out_factors = Vec::with_capacity(factors.len());
        let mut covs = Vec::with_capacity(factors.len());
        let mut spectra = Vec::with_capacity(factors.len());
        for (k, factor) in factors.into_iter().enumerate() {
            if factor.nrows() != dim || factor.ncols() != dim {
                return Err(invalid(format!("factor {k} is {}x{}, expected {dim}x{dim}", factor.nrows(), factor.ncols())));
            }
            for i in 0..dim {
                let d = factor[(i, i)];
                if !(d.is_finite() && d > 0.0) {
                    return Err(numerical(format!(
                        "component {k}: Cholesky factor diagonal {i} is {d}, covariance not positive definite"
                    )));
                }
                if (i + 1..dim).any(|j| factor[(i, j)] != 0.0) {
                    return Err(invalid(format!("factor {k} is not lower triangular")));
                }
            }
            if factor.iter().any(|v| !v.is_finite()) {
                return Err(numerical(format!("component {k}: factor has non-finite entries")));
            }
            let sigma = &factor * factor.transpose();
            let (spectrum, _) =
                Spectrum::floored(&sigma, 0.0).map_err(|e| numerical(format!("component {k}: {e}")))?;
            if spectrum.min_value() < COVARIANCE_FLOOR * (1.0 - 1e-6) {
                let (floored, _) = Spectrum::floored(&sigma, COVARIANCE_FLOOR)?;
                let sigma = floored.reconstruct();
                let factor = Cholesky::new(sigma.clone())
                    .ok_or_else(|| numerical(format!("component {k}: floored covariance is not positive definite")))?
                    .l();
                out_factors.push(factor);
                covs.push(sigma);
                spectra.push(floored);
            } else {
                out_factors.push(factor);
                covs.push(sigma);
                spectra.push(spectrum);
            }
        }
        Ok(Self::assemble(dim, weights, means, out_factors, covs, spectra))
    }

    fn assemble(
        dim: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        factors: Vec<DMatrix<f64>>,
        covariances: Vec<DMatrix<f64>>,
        spectra: Vec<Spectrum>,
    ) -> Self {
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let means = means.into_iter().map(DVector::from_vec).collect();
        Self { dim, weights, log_weights, means, factors, covariances, spectra }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.means[k].as_slice()
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.covariances[k]
    }

    pub fn cholesky_factor(&self, k: usize) -> &DMatrix<f64> {
        &self.factors[k]
    }

    /// Eigenvalues of component `k`'s covariance.
    pub fn eigenvalues(&self, k: usize) -> &[f64] {
        self.spectra[k].values.as_slice()
    }

    pub(crate) fn spectrum(&self, k: usize) -> &Spectrum {
        &self.spectra[k]
    }

    pub(crate) fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// `Σ_k π_k μ_k`.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut out = DVector::zeros(self.dim);
        for (w, m) in self.weights.iter().zip(&self.means) {
            out.axpy(*w, m, 1.0);
        }
        out.data.into()
    }

    fn check_component(&self, k: usize) -> Result<()> {
        if k >= self.components() {
            return Err(invalid(format!("component {k} out of range (K = {})", self.components())));
        }
        Ok(())
    }

    /// `log N(y; μ_k, Σ_k + sI)` for finite `s`; 0 when `s = ∞` (the
    /// constant cancels across components).
    fn spherical_log_likelihood(&self, k: usize, y: &DVector<f64>, s: f64) -> f64 {
        if s.is_infinite() {
            return 0.0;
        }
        let spec = &self.spectra[k];
        let z = &spec.vectors_t * (y - &self.means[k]);
        let mut acc = self.dim as f64 * LN_2PI;
        for (zi, li) in z.iter().zip(spec.values.iter()) {
            let v = li + s;
            acc += v.ln() + zi * zi / v;
        }
        -0.5 * acc
    }

    fn observed_system(
        &self,
        k: usize,
        y: &DVector<f64>,
        observed: &[usize],
        variances: &[f64],
    ) -> Result<ObservedSystem<'_>> {
        if let Some(noise) = LowRankNoise::detect(self.dim, observed, variances) {
            return self.low_rank_system(k, y, &noise);
        }
        let sigma = &self.covariances[k];
        let mu = &self.means[k];
        let m = observed.len();
        let mut s = DMatrix::from_fn(m, m, |a, b| sigma[(observed[a], observed[b])]);
        for a in 0..m {
            s[(a, a)] += variances[a];
        }
        let chol = Cholesky::new(s)
            .ok_or_else(|| numerical(format!("component {k}: observed covariance is not positive definite")))?;
        let residual = DVector::from_fn(m, |a, _| y[observed[a]] - mu[observed[a]]);
        let alpha = chol.solve(&residual);
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_likelihood = -0.5 * (m as f64 * LN_2PI + log_det + residual.dot(&alpha));
        Ok(ObservedSystem { solver: Solver::Cholesky(chol), residual, alpha, log_likelihood })
    }

    fn low_rank_system(&self, k: usize, y: &DVector<f64>, noise: &LowRankNoise) -> Result<ObservedSystem<'_>> {
        let spectrum = &self.spectra[k];
        let residual = y - &self.means[k];
        let z = &spectrum.vectors_t * &residual;
        let inv = spectrum.values.map(|l| 1.0 / (l + noise.base));
        let basis = spectrum.vectors_t.select_columns(&noise.exceptions);
        let weighted = DMatrix::from_fn(basis.nrows(), basis.ncols(), |i, j| basis[(i, j)] * inv[i]);
        let mut cap = basis.tr_mul(&weighted);
        for (j, c) in noise.offsets.iter().enumerate() {
            cap[(j, j)] += 1.0 / c;
        }
        let capacitance = cap.lu();
        let det = capacitance.determinant();
        if !det.is_finite() || det == 0.0 {
            return Err(numerical(format!("component {k}: singular low-rank noise update")));
        }
        let u = basis.tr_mul(&z.component_mul(&inv));
        let t = capacitance.solve(&u).ok_or_else(|| numerical(format!("component {k}: singular capacitance")))?;
        let quad = z.iter().zip(inv.iter()).map(|(zi, vi)| zi * zi * vi).sum::<f64>() - u.dot(&t);
        let log_det = spectrum.values.iter().map(|l| (l + noise.base).ln()).sum::<f64>()
            + noise.offsets.iter().map(|c| c.abs().ln()).sum::<f64>()
            + det.abs().ln();
        let log_likelihood = -0.5 * (self.dim as f64 * LN_2PI + log_det + quad);
        let alpha = low_rank_apply(spectrum, &inv, &basis, &capacitance, z);
        Ok(ObservedSystem {
            solver: Solver::LowRank { spectrum, inv, basis, capacitance },
            residual,
            alpha,
            log_likelihood,
        })
    }

    fn cross_covariance(&self, k: usize, observed: &[usize]) -> DMatrix<f64> {
        let sigma = &self.covariances[k];
        DMatrix::from_fn(observed.len(), self.dim, |a, j| sigma[(observed[a], j)])
    }

    fn log_joint_form(&self, y: &DVector<f64>, form: &NoiseForm) -> Result<Vec<f64>> {
        (0..self.components())
            .map(|k| {
                let ll = match form {
                    NoiseForm::Spherical(s) => self.spherical_log_likelihood(k, y, *s),
                    NoiseForm::Diagonal { observed, variances } => {
                        self.observed_system(k, y, observed, variances)?.log_likelihood
                    }
                };
                Ok(self.log_weights[k] + ll)
            })
            .collect()
    }

    /// `log π_k + log N(y; μ_k, Σ_k + N)` for every component, with
    /// unobserved coordinates marginalized out.
    pub fn log_joint(&self, y: &[f64], noise: &NoiseModel) -> Result<Vec<f64>> {
        check_dim("observation", y.len(), self.dim)?;
        let form = noise.classify(self.dim)?;
        self.log_joint_form(&DVector::from_column_slice(y), &form)
    }

    /// Posterior component probabilities `p(k | y)`.
    pub fn responsibilities(&self, y: &[f64], noise: &NoiseModel) -> Result<Vec<f64>> {
        Ok(normalize_log_weights(&self.log_joint(y, noise)?))
    }

    /// Mean and covariance of `p(x | y, k)`, i.e. `(Σ_k⁻¹ + N⁻¹)⁻¹` and
    /// `Σ_post (Σ_k⁻¹ μ_k + N⁻¹ y)`.
    pub fn posterior_moments(&self, k: usize, y: &[f64], noise: &NoiseModel) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_component(k)?;
        check_dim("observation", y.len(), self.dim)?;
        let y = DVector::from_column_slice(y);
        match noise.classify(self.dim)? {
            NoiseForm::Spherical(s) => {
                if s.is_infinite() {
                    return Ok((self.means[k].clone(), self.covariances[k].clone()));
                }
                let spec = &self.spectra[k];
                let z = &spec.vectors_t * (&y - &self.means[k]);
                let shrunk = DVector::from_fn(self.dim, |i, _| spec.values[i] / (spec.values[i] + s) * z[i]);
                let mean = &self.means[k] + &spec.vectors * shrunk;
                let post = Spectrum {
                    vectors: spec.vectors.clone(),
                    vectors_t: spec.vectors_t.clone(),
                    values: spec.values.map(|l| l * s / (l + s)),
                };
                Ok((mean, post.reconstruct()))
            }
            NoiseForm::Diagonal { observed, variances } => {
                let sys = self.observed_system(k, &y, &observed, &variances)?;
                let cross = self.cross_covariance(k, &observed);
                let mean = &self.means[k] + cross.tr_mul(&sys.alpha);
                let gain = sys.solve_matrix(&cross);
                let cov = &self.covariances[k] - cross.tr_mul(&gain);
                Ok((mean, (&cov + cov.transpose()) * 0.5))
            }
        }
    }

    fn posterior_mean_form(&self, k: usize, y: &DVector<f64>, form: &NoiseForm) -> Result<DVector<f64>> {
        match form {
            NoiseForm::Spherical(s) => {
                if s.is_infinite() {
                    return Ok(self.means[k].clone());
                }
                let spec = &self.spectra[k];
                let z = &spec.vectors_t * (y - &self.means[k]);
                let shrunk = DVector::from_fn(self.dim, |i, _| spec.values[i] / (spec.values[i] + s) * z[i]);
                Ok(&self.means[k] + &spec.vectors * shrunk)
            }
            NoiseForm::Diagonal { observed, variances } => {
                let sys = self.observed_system(k, y, observed, variances)?;
                let cross = self.cross_covariance(k, observed);
                Ok(&self.means[k] + cross.tr_mul(&sys.alpha))
            }
        }
    }

    fn posterior_draw_form(
        &self,
        k: usize,
        y: &DVector<f64>,
        form: &NoiseForm,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>> {
        match form {
            NoiseForm::Spherical(s) if s.is_infinite() => Ok(self.prior_draw(k, rng)),
            NoiseForm::Spherical(s) => {
                let spec = &self.spectra[k];
                let z = &spec.vectors_t * (y - &self.means[k]);
                let coeffs = DVector::from_fn(self.dim, |i, _| {
                    let l = spec.values[i];
                    let n: f64 = StandardNormal.sample(rng);
                    l / (l + s) * z[i] + (l * s / (l + s)).sqrt() * n
                });
                Ok(&self.means[k] + &spec.vectors * coeffs)
            }
            NoiseForm::Diagonal { observed, variances } => {
                // Draw from the prior component, perturb the observation, and
                // condition: the result has exactly the posterior law.
                let sys = self.observed_system(k, y, observed, variances)?;
                let x0 = self.prior_draw(k, rng);
                let mu = &self.means[k];
                let resid = DVector::from_fn(observed.len(), |a, _| {
                    let i = observed[a];
                    let n: f64 = StandardNormal.sample(rng);
                    sys.residual[a] + mu[i] - x0[i] - variances[a].sqrt() * n
                });
                let cross = self.cross_covariance(k, observed);
                Ok(x0 + cross.tr_mul(&sys.solve(&resid)))
            }
        }
    }

    fn prior_draw(&self, k: usize, rng: &mut dyn RngCore) -> DVector<f64> {
        let z = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(rng));
        &self.means[k] + &self.factors[k] * z
    }

    fn restore_spherical_batch(&self, observations: &[Vec<f64>], s: f64, action: PatchAction) -> Result<Vec<Vec<f64>>> {
        let n = observations.len();
        let kk = self.components();
        for y in observations {
            check_dim("observation", y.len(), self.dim)?;
        }
        let mut log_joint = vec![0.0; n * kk];
        if s.is_finite() {
            let ys = DMatrix::from_fn(self.dim, n, |i, j| observations[j][i]);
            for k in 0..kk {
                let spec = &self.spectra[k];
                let mut centered = ys.clone();
                for mut col in centered.column_iter_mut() {
                    col -= &self.means[k];
                }
                let z = &spec.vectors_t * centered;
                let inv: Vec<f64> = spec.values.iter().map(|l| 1.0 / (l + s)).collect();
                let log_det: f64 = spec.values.iter().map(|l| (l + s).ln()).sum();
                let constant = self.log_weights[k] - 0.5 * (self.dim as f64 * LN_2PI + log_det);
                for (j, col) in z.column_iter().enumerate() {
                    let q: f64 = col.iter().zip(&inv).map(|(zi, vi)| zi * zi * vi).sum();
                    log_joint[j * kk + k] = constant - 0.5 * q;
                }
            }
        } else {
            for j in 0..n {
                log_joint[j * kk..(j + 1) * kk].copy_from_slice(&self.log_weights);
            }
        }
        let form = NoiseForm::Spherical(s);
        (0..n)
            .into_par_iter()
            .map(|j| {
                let row = &log_joint[j * kk..(j + 1) * kk];
                let y = DVector::from_column_slice(&observations[j]);
                let x = match action {
                    PatchAction::Map => self.posterior_mean_form(argmax(row), &y, &form)?,
                    PatchAction::Sample(key) => {
                        let mut rng = key.rng(j as u64);
                        let k = sample_categorical(&normalize_log_weights(row), &mut rng);
                        self.posterior_draw_form(k, &y, &form, &mut rng)?
                    }
                };
                Ok(x.data.into())
            })
            .collect()
    }
}

impl PatchPrior for GmmPrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim("patch", x.len(), self.dim)?;
        let x = DVector::from_column_slice(x);
        let terms: Vec<f64> = (0..self.components())
            .map(|k| self.log_weights[k] + self.spherical_log_likelihood(k, &x, 0.0))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    fn sample_posterior(&self, y: &[f64], noise: &NoiseModel, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        check_dim("observation", y.len(), self.dim)?;
        let form = noise.classify(self.dim)?;
        let y = DVector::from_column_slice(y);
        let probs = normalize_log_weights(&self.log_joint_form(&y, &form)?);
        let k = sample_categorical(&probs, rng);
        Ok(self.posterior_draw_form(k, &y, &form, rng)?.data.into())
    }

    /// Posterior mean of the most responsible component.
    fn map_posterior(&self, y: &[f64], noise: &NoiseModel) -> Result<Vec<f64>> {
        check_dim("observation", y.len(), self.dim)?;
        let form = noise.classify(self.dim)?;
        let y = DVector::from_column_slice(y);
        let k = argmax(&self.log_joint_form(&y, &form)?);
        Ok(self.posterior_mean_form(k, &y, &form)?.data.into())
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let k = sample_categorical(&self.weights, rng);
        self.prior_draw(k, rng).data.into()
    }

    fn restore_patches(
        &self,
        observations: &[Vec<f64>],
        noise: &PatchNoise,
        action: PatchAction,
    ) -> Result<Vec<Vec<f64>>> {
        if let PatchNoise::Shared(model) = noise {
            if let NoiseForm::Spherical(s) = model.classify(self.dim)? {
                return self.restore_spherical_batch(observations, s, action);
            }
        }
        restore_each(self, observations, noise, action)
    }
}
