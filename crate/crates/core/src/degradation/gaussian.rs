use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use super::fft::{kernel_power_spectrum, Fft2};
use super::LinearOperator;
use crate::error::{invalid, numerical, Result};
use crate::image::{ensure_same_shape, Image, Shape};

/// How to solve and sample the Gaussian conditional.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GaussianBackend {
    /// Pointwise for identity and mask, spectral for convolution.
    #[default]
    Auto,
    /// Exact, for operators with diagonal `HᵀH`.
    Pointwise,
    /// Exact in the Fourier domain, for identity and periodic convolution.
    Spectral,
    /// Preconditioned conjugate gradients; sampling by perturbing the
    /// right-hand side. Works for every operator.
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

const PCG_TOLERANCE: f64 = 1e-8;
const PCG_MAX_ITERATIONS: usize = 5000;

/// The Gaussian over an image `x` with density proportional to
/// `exp(-β‖x − x̄‖² − γ‖x − t‖² − ‖Hx − y‖²/(2Gσ²))`,
/// i.e. precision `P = 2β + 2γ + HᵀH/(Gσ²)` and mean
/// `P⁻¹(2β x̄ + 2γ t + Hᵀy/(Gσ²))`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianStep<'a> {
    pub op: &'a LinearOperator,
    pub y: &'a Image,
    pub noise_var: f64,
    /// `G`: the number of copies the data term is divided among.
    pub grids: usize,
    pub beta: f64,
    pub x_bar: &'a Image,
    pub gamma: f64,
    pub t: &'a Image,
}

impl GaussianStep<'_> {
    fn validate(&self) -> Result<Shape> {
        ensure_same_shape(self.x_bar, self.t)?;
        ensure_same_shape(self.y, self.t)?;
        self.op.check_shape(self.t.shape())?;
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(invalid(format!("noise variance must be positive, got {}", self.noise_var)));
        }
        if self.grids == 0 {
            return Err(invalid("grid count must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite() && self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("coupling weights must be finite and non-negative, got β={}, γ={}", self.beta, self.gamma)));
        }
        Ok(self.t.shape())
    }

    /// `1/(Gσ²)`.
    pub fn data_weight(&self) -> f64 {
        1.0 / (self.grids as f64 * self.noise_var)
    }

    fn prior_weight(&self) -> f64 {
        2.0 * self.beta + 2.0 * self.gamma
    }

    pub fn rhs(&self) -> Result<Image> {
        self.validate()?;
        let mut b = self.op.apply_adjoint(self.y)?;
        b.scale(self.data_weight());
        if self.beta > 0.0 {
            b.axpy(2.0 * self.beta, self.x_bar)?;
        }
        if self.gamma > 0.0 {
            b.axpy(2.0 * self.gamma, self.t)?;
        }
        Ok(b)
    }

    pub fn apply_precision(&self, x: &Image) -> Result<Image> {
        let mut out = self.op.apply_normal(x)?;
        out.scale(self.data_weight());
        out.axpy(self.prior_weight(), x)?;
        Ok(out)
    }

    /// A draw with covariance exactly `P`:
    /// `√(2β) n₁ + √(2γ) n₂ + Hᵀn₃ / √(Gσ²)`.
    pub fn perturbation(&self, rng: &mut dyn RngCore) -> Result<Image> {
        let shape = self.validate()?;
        let mut noise = || Image::from_fn(shape, |_, _, _| StandardNormal.sample(&mut *rng));
        let n1 = noise();
        let n2 = noise();
        let n3 = noise();
        let mut xi = self.op.apply_adjoint(&n3)?;
        xi.scale(self.data_weight().sqrt());
        xi.axpy((2.0 * self.beta).sqrt(), &n1)?;
        xi.axpy((2.0 * self.gamma).sqrt(), &n2)?;
        Ok(xi)
    }

    fn resolve(&self, backend: GaussianBackend) -> Result<GaussianBackend> {
        let pointwise = self.op.is_pointwise();
        let spectral = !matches!(self.op, LinearOperator::Mask(_));
        Ok(match backend {
            GaussianBackend::Auto if pointwise => GaussianBackend::Pointwise,
            GaussianBackend::Auto => GaussianBackend::Spectral,
            GaussianBackend::Pointwise if !pointwise => {
                return Err(invalid("pointwise backend needs an identity or mask operator"))
            }
            GaussianBackend::Spectral if !spectral => {
                return Err(invalid("spectral backend needs an identity or convolution operator"))
            }
            other => other,
        })
    }

    /// Solves `P x = b`.
    pub fn solve(&self, b: &Image, backend: GaussianBackend) -> Result<Image> {
        let shape = self.validate()?;
        ensure_same_shape(b, self.t)?;
        match self.resolve(backend)? {
            GaussianBackend::Pointwise => {
                let diag = self.pointwise_precision(shape)?;
                let ch = shape.channels;
                let data = b.data().iter().enumerate().map(|(i, v)| v / diag[i / ch]).collect();
                Ok(Image::from_vec(shape, data))
            }
            GaussianBackend::Spectral => {
                let eig = self.spectral_precision(shape)?;
                Ok(self.spectral_apply(b, &eig, |p| 1.0 / p))
            }
            _ => Ok(self.solve_iterative(b)?.0),
        }
    }

    pub fn mean(&self, backend: GaussianBackend) -> Result<Image> {
        self.solve(&self.rhs()?, backend)
    }

    /// One exact draw from the Gaussian.
    pub fn sample(&self, backend: GaussianBackend, rng: &mut dyn RngCore) -> Result<Image> {
        let shape = self.validate()?;
        match self.resolve(backend)? {
            GaussianBackend::Pointwise => {
                let diag = self.pointwise_precision(shape)?;
                let mut x = self.mean(GaussianBackend::Pointwise)?;
                let ch = shape.channels;
                for (i, v) in x.data_mut().iter_mut().enumerate() {
                    let n: f64 = StandardNormal.sample(&mut *rng);
                    *v += n / diag[i / ch].sqrt();
                }
                Ok(x)
            }
            GaussianBackend::Spectral => {
                let eig = self.spectral_precision(shape)?;
                let mut x = self.spectral_apply(&self.rhs()?, &eig, |p| 1.0 / p);
                let noise = Image::from_fn(shape, |_, _, _| StandardNormal.sample(&mut *rng));
                x.axpy(1.0, &self.spectral_apply(&noise, &eig, |p| 1.0 / p.sqrt()))?;
                Ok(x)
            }
            _ => {
                let mut b = self.rhs()?;
                b.axpy(1.0, &self.perturbation(rng)?)?;
                Ok(self.solve_iterative(&b)?.0)
            }
        }
    }

    fn pointwise_precision(&self, shape: Shape) -> Result<Vec<f64>> {
        let c = self.data_weight();
        let a = self.prior_weight();
        let diag: Vec<f64> = self.op.normal_diagonal(shape).into_iter().map(|d| a + c * d).collect();
        if diag.iter().any(|&d| !(d > 0.0)) {
            return Err(numerical("Gaussian precision is singular: a pixel has neither data nor coupling"));
        }
        Ok(diag)
    }

    fn spectral_precision(&self, shape: Shape) -> Result<Vec<f64>> {
        let (h, w) = (shape.height, shape.width);
        let c = self.data_weight();
        let a = self.prior_weight();
        let eig: Vec<f64> = match self.op {
            LinearOperator::Convolution(k) => kernel_power_spectrum(k, h, w).iter().map(|p| a + c * p).collect(),
            _ => vec![a + c; h * w],
        };
        if eig.iter().any(|&p| !(p > 0.0)) {
            return Err(numerical("Gaussian precision is singular at some frequency"));
        }
        Ok(eig)
    }

    /// Applies the circulant operator with eigenvalues `f(eig)` to each
    /// channel.
    fn spectral_apply(&self, x: &Image, eig: &[f64], f: impl Fn(f64) -> f64) -> Image {
        let shape = x.shape();
        let (h, w, ch) = (shape.height, shape.width, shape.channels);
        let plan = Fft2::get(h, w);
        let gains: Vec<f64> = eig.iter().map(|&p| f(p) / (h * w) as f64).collect();
        let mut out = Image::zeros(shape);
        let mut buf = vec![Complex64::default(); h * w];
        for q in 0..ch {
            for (i, z) in buf.iter_mut().enumerate() {
                *z = Complex64::new(x.data()[i * ch + q], 0.0);
            }
            plan.forward(&mut buf);
            for (z, g) in buf.iter_mut().zip(&gains) {
                *z *= g;
            }
            plan.inverse(&mut buf);
            let data = out.data_mut();
            for (i, z) in buf.iter().enumerate() {
                data[i * ch + q] = z.re;
            }
        }
        out
    }

    /// Jacobi-preconditioned conjugate gradients on `P x = b`, to relative
    /// residual 1e-8.
    pub fn solve_iterative(&self, b: &Image) -> Result<(Image, PcgReport)> {
        let shape = self.validate()?;
        ensure_same_shape(b, self.t)?;
        let ch = shape.channels;
        let c = self.data_weight();
        let a = self.prior_weight();
        let diag: Vec<f64> = self
            .op
            .normal_diagonal(shape)
            .into_iter()
            .flat_map(|d| std::iter::repeat_n(a + c * d, ch))
            .collect();
        if diag.iter().any(|&d| !(d > 0.0)) {
            return Err(numerical("Gaussian precision is singular: a pixel has neither data nor coupling"));
        }
        let b_norm = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if b_norm == 0.0 {
            return Ok((Image::zeros(shape), PcgReport { iterations: 0, relative_residual: 0.0 }));
        }
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();

        let mut x = Image::from_vec(shape, b.data().iter().zip(&diag).map(|(v, d)| v / d).collect());
        let px = self.apply_precision(&x)?;
        let mut r: Vec<f64> = b.data().iter().zip(px.data()).map(|(u, v)| u - v).collect();
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(v, d)| v / d).collect();
        let mut p = Image::from_vec(shape, z.clone());
        let mut rz = dot(&r, &z);
        let mut residual = dot(&r, &r).sqrt() / b_norm;
        let mut iterations = 0;
        while residual > PCG_TOLERANCE {
            if iterations == PCG_MAX_ITERATIONS {
                return Err(numerical(format!(
                    "conjugate gradients did not converge in {PCG_MAX_ITERATIONS} iterations (relative residual {residual:.3e})"
                )));
            }
            iterations += 1;
            let ap = self.apply_precision(&p)?;
            let alpha = rz / dot(p.data(), ap.data());
            x.axpy(alpha, &p)?;
            for (ri, api) in r.iter_mut().zip(ap.data()) {
                *ri -= alpha * api;
            }
            residual = dot(&r, &r).sqrt() / b_norm;
            if !residual.is_finite() {
                return Err(numerical("conjugate gradients diverged"));
            }
            for ((zi, ri), d) in z.iter_mut().zip(&r).zip(&diag) {
                *zi = ri / d;
            }
            let rz_next = dot(&r, &z);
            let ratio = rz_next / rz;
            rz = rz_next;
            for (pi, zi) in p.data_mut().iter_mut().zip(&z) {
                *pi = zi + ratio * *pi;
            }
        }
        Ok((x, PcgReport { iterations, relative_residual: residual }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{build_gaussian_kernel, GaussianKernelSpec, Mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: Shape, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(shape, |_, _, _| rng.random::<f64>())
    }

    fn blur() -> LinearOperator {
        LinearOperator::Convolution(
            build_gaussian_kernel(&GaussianKernelSpec { sigma_x: 1.5, sigma_y: 1.0, rho: 0.75 }).unwrap(),
        )
    }

    #[test]
    fn scalar_identity_case_moments() {
        // β = 0, γ = 1, σ² = 1, G = 1: precision 3, mean (2c + c)/3 = c.
        let shape = Shape::new(1, 1, 1);
        let y = Image::filled(shape, 0.4);
        let step = GaussianStep {
            op: &LinearOperator::Identity,
            y: &y,
            noise_var: 1.0,
            grids: 1,
            beta: 0.0,
            x_bar: &y,
            gamma: 1.0,
            t: &y,
        };
        for backend in [GaussianBackend::Pointwise, GaussianBackend::Spectral, GaussianBackend::Iterative] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let n = 100_000;
            let draws: Vec<f64> = (0..n).map(|_| step.sample(backend, &mut rng).unwrap().data()[0]).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            let se_mean = (1.0 / 3.0 / n as f64).sqrt();
            let se_var = (1.0 / 3.0) * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - 0.4).abs() < 4.0 * se_mean, "{backend:?}: mean {mean}");
            assert!((var - 1.0 / 3.0).abs() < 4.0 * se_var, "{backend:?}: var {var}");
        }
    }

    #[test]
    fn large_gamma_pins_to_split_variable() {
        let shape = Shape::new(8, 8, 1);
        let y = random_image(shape, 1);
        let t = random_image(shape, 2);
        let op = blur();
        let step = GaussianStep { op: &op, y: &y, noise_var: 0.01, grids: 4, beta: 0.0, x_bar: &t, gamma: 1e8, t: &t };
        let x = step.sample(GaussianBackend::Spectral, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(x.data().iter().zip(t.data()).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn spectral_mean_satisfies_normal_equations() {
        let shape = Shape::new(12, 10, 2);
        let y = random_image(shape, 3);
        let xb = random_image(shape, 4);
        let t = random_image(shape, 5);
        let op = blur();
        let step = GaussianStep { op: &op, y: &y, noise_var: 1e-3, grids: 8, beta: 0.7, x_bar: &xb, gamma: 0.2, t: &t };
        let mean = step.mean(GaussianBackend::Spectral).unwrap();
        let back = step.apply_precision(&mean).unwrap();
        let rhs = step.rhs().unwrap();
        let err = back.squared_distance(&rhs).unwrap().sqrt() / rhs.dot(&rhs).unwrap().sqrt();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn backends_agree_on_means() {
        let shape = Shape::new(16, 16, 1);
        let y = random_image(shape, 6);
        let t = random_image(shape, 7);
        let op = blur();
        let step = GaussianStep { op: &op, y: &y, noise_var: 1e-3, grids: 4, beta: 0.0, x_bar: &t, gamma: 0.5, t: &t };
        let xi = step.perturbation(&mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut b = step.rhs().unwrap();
        b.axpy(1.0, &xi).unwrap();
        let a = step.solve(&b, GaussianBackend::Spectral).unwrap();
        let c = step.solve(&b, GaussianBackend::Iterative).unwrap();
        let rel = a.squared_distance(&c).unwrap().sqrt() / a.dot(&a).unwrap().sqrt();
        assert!(rel < 1e-6, "{rel}");

        let mask = LinearOperator::Mask(Mask::new(16, 16, (0..256).map(|i| (i % 3 != 0) as u8 as f64).collect()).unwrap());
        let step = GaussianStep { op: &mask, ..step };
        let a = step.mean(GaussianBackend::Pointwise).unwrap();
        let c = step.mean(GaussianBackend::Iterative).unwrap();
        let rel = a.squared_distance(&c).unwrap().sqrt() / a.dot(&a).unwrap().sqrt();
        assert!(rel < 1e-6, "{rel}");
        assert!(step.mean(GaussianBackend::Spectral).is_err());
    }

    #[test]
    fn perturbation_covariance_is_precision() {
        // Monte Carlo check of E[ξ ξᵀ] = P on a tiny blurred image.
        let shape = Shape::new(3, 3, 1);
        let y = Image::zeros(shape);
        let op = LinearOperator::Convolution(crate::degradation::Kernel::new(1, 3, vec![0.2, 0.5, 0.3]).unwrap());
        let step = GaussianStep { op: &op, y: &y, noise_var: 0.5, grids: 2, beta: 0.3, x_bar: &y, gamma: 0.1, t: &y };
        let n = 60_000;
        let mut acc = vec![0.0; 81];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..n {
            let xi = step.perturbation(&mut rng).unwrap();
            for i in 0..9 {
                for j in 0..9 {
                    acc[i * 9 + j] += xi.data()[i] * xi.data()[j] / n as f64;
                }
            }
        }
        for j in 0..9 {
            let mut e = Image::zeros(shape);
            e.data_mut()[j] = 1.0;
            let col = step.apply_precision(&e).unwrap();
            for i in 0..9 {
                let p = col.data()[i];
                assert!((acc[i * 9 + j] - p).abs() < 0.03, "({i},{j}): {} vs {p}", acc[i * 9 + j]);
            }
        }
    }
}
