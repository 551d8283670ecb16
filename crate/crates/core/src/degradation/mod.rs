//! Linear degradation operators `H` and the Gaussian conditional over an
//! image given `H`, the data and quadratic coupling terms.

mod fft;
mod gaussian;

pub use gaussian::{GaussianBackend, GaussianStep, PcgReport};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::image::{ensure_same_shape, Image, Shape};
use crate::rng::mix64;

/// A 2-D filter with odd dimensions, centered on its middle cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows % 2 == 0 || cols % 2 == 0 {
            return Err(invalid(format!("kernel dimensions must be odd and positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(invalid(format!("kernel has {} values, expected {}", data.len(), rows * cols)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("kernel has non-finite entries"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Parses rows of whitespace-separated decimals.
    pub fn parse(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("kernel line {}: {e}", n + 1)))?;
            match cols {
                None => cols = Some(row.len()),
                Some(c) if c != row.len() => {
                    return Err(Error::Format(format!("kernel line {} has {} values, expected {c}", n + 1, row.len())))
                }
                _ => {}
            }
            data.extend(row);
            rows += 1;
        }
        let cols = cols.ok_or_else(|| Error::Format("kernel file is empty".into()))?;
        Kernel::new(rows, cols, data).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Format(m),
            other => other,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Weight at offset `(dy, dx)` from the center.
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = (dy + (self.rows / 2) as isize) as usize;
        let c = (dx + (self.cols / 2) as isize) as usize;
        self.data[r * self.cols + c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn taps(&self) -> impl Iterator<Item = (isize, isize, f64)> + '_ {
        let (hr, hc) = ((self.rows / 2) as isize, (self.cols / 2) as isize);
        (0..self.rows).flat_map(move |r| {
            (0..self.cols).map(move |c| (r as isize - hr, c as isize - hc, self.data[r * self.cols + c]))
        })
    }
}

/// Elliptical Gaussian blur: `σ_x` along columns, `σ_y` along rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernelSpec {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

impl GaussianKernelSpec {
    pub fn isotropic(scale: f64) -> Self {
        Self { sigma_x: scale, sigma_y: scale, rho: 0.0 }
    }

    pub fn radius(&self) -> usize {
        (4.0 * self.sigma_x.max(self.sigma_y)).ceil() as usize
    }
}

/// Samples `exp(-½ [u v] C⁻¹ [u v]ᵀ)` on the integer grid within the
/// support radius and normalizes to unit sum.
pub fn build_gaussian_kernel(spec: &GaussianKernelSpec) -> Result<Kernel> {
    let GaussianKernelSpec { sigma_x: sx, sigma_y: sy, rho } = *spec;
    if !(sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite()) {
        return Err(invalid(format!("kernel widths must be positive, got σx={sx}, σy={sy}")));
    }
    if !(rho.abs() < 1.0) {
        return Err(invalid(format!("kernel correlation must lie in (-1, 1), got {rho}")));
    }
    let r = spec.radius() as isize;
    let det = sx * sx * sy * sy * (1.0 - rho * rho);
    let side = (2 * r + 1) as usize;
    let mut data = Vec::with_capacity(side * side);
    for v in -r..=r {
        for u in -r..=r {
            let (u, v) = (u as f64, v as f64);
            let q = (u * u * sy * sy - 2.0 * rho * sx * sy * u * v + v * v * sx * sx) / det;
            data.push((-0.5 * q).exp());
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Kernel::new(side, side, data)
}

/// Per-pixel observation mask: 1 observed, 0 missing. Applies to all
/// channels of a pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(invalid(format!("mask has {} values, expected {}", values.len(), height * width)));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, values })
    }

    /// Pixels whose first channel is zero are missing.
    pub fn from_image(img: &Image) -> Self {
        let values = (0..img.height() * img.width())
            .map(|i| if img.data()[i * img.channels()] == 0.0 { 0.0 } else { 1.0 })
            .collect();
        Self { height: img.height(), width: img.width(), values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// A mask with exactly `round(missing · h · w)` missing pixels at seeded
    /// random positions.
    pub fn random(height: usize, width: usize, missing: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&missing) {
            return Err(invalid(format!("missing fraction must be in [0,1], got {missing}")));
        }
        let n = height * width;
        let count = ((missing * n as f64).round() as usize).min(n);
        let mut values = vec![1.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
        for i in sample_indices(&mut rng, n, count) {
            values[i] = 0.0;
        }
        Self::new(height, width, values)
    }

    pub fn observed_fraction(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_image(&self) -> Image {
        Image::from_fn(Shape::new(self.height, self.width, 1), |r, c, _| self.values[r * self.width + c])
    }
}

/// The degradation `H` in `y = Hx + n`.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearOperator {
    Identity,
    /// Periodic convolution.
    Convolution(Kernel),
    Mask(Mask),
}

impl LinearOperator {
    pub fn check_shape(&self, shape: Shape) -> Result<()> {
        if let LinearOperator::Mask(m) = self {
            if m.height != shape.height || m.width != shape.width {
                return Err(invalid(format!(
                    "mask is {}x{} but image is {}x{}",
                    m.height, m.width, shape.height, shape.width
                )));
            }
        }
        Ok(())
    }

    /// `HᵀH` is diagonal for these operators.
    pub fn is_pointwise(&self) -> bool {
        !matches!(self, LinearOperator::Convolution(_))
    }

    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.check_shape(x.shape())?;
        Ok(match self {
            LinearOperator::Identity => x.clone(),
            LinearOperator::Convolution(k) => convolve(x, k, false),
            LinearOperator::Mask(m) => masked(x, m),
        })
    }

    pub fn apply_adjoint(&self, x: &Image) -> Result<Image> {
        self.check_shape(x.shape())?;
        Ok(match self {
            LinearOperator::Identity => x.clone(),
            LinearOperator::Convolution(k) => convolve(x, k, true),
            LinearOperator::Mask(m) => masked(x, m),
        })
    }

    /// `HᵀH x`.
    pub fn apply_normal(&self, x: &Image) -> Result<Image> {
        match self {
            LinearOperator::Convolution(_) => self.apply_adjoint(&self.apply(x)?),
            _ => self.apply(x),
        }
    }

    /// Diagonal of `HᵀH` per pixel.
    pub(crate) fn normal_diagonal(&self, shape: Shape) -> Vec<f64> {
        match self {
            LinearOperator::Identity => vec![1.0; shape.pixels()],
            LinearOperator::Convolution(k) => vec![k.squared_norm(); shape.pixels()],
            LinearOperator::Mask(m) => m.values.clone(),
        }
    }

    /// `‖Hx − y‖²`.
    pub fn residual_norm_sq(&self, x: &Image, y: &Image) -> Result<f64> {
        let hx = self.apply(x)?;
        ensure_same_shape(&hx, y)?;
        hx.squared_distance(y)
    }
}

/// `x + σ·n` with seeded standard normal `n`.
pub fn add_gaussian_noise(x: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("noise level must be finite and non-negative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
    let data = x
        .data()
        .iter()
        .map(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + sigma * n
        })
        .collect();
    Ok(Image::from_vec(x.shape(), data))
}

/// Periodic convolution (`adjoint = false`) or correlation.
fn convolve(x: &Image, k: &Kernel, adjoint: bool) -> Image {
    let Shape { height: h, width: w, channels: ch } = x.shape();
    let taps: Vec<(isize, isize, f64)> = k.taps().filter(|t| t.2 != 0.0).collect();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let o = (r * w + c) * ch;
            for &(dy, dx, v) in &taps {
                let (dy, dx) = if adjoint { (-dy, -dx) } else { (dy, dx) };
                let rr = (r as isize - dy).rem_euclid(h as isize) as usize;
                let cc = (c as isize - dx).rem_euclid(w as isize) as usize;
                let i = (rr * w + cc) * ch;
                for q in 0..ch {
                    out[o + q] += v * src[i + q];
                }
            }
        }
    }
    Image::from_vec(x.shape(), out)
}

fn masked(x: &Image, m: &Mask) -> Image {
    let ch = x.channels();
    let data = x.data().iter().enumerate().map(|(i, v)| v * m.values[i / ch]).collect();
    Image::from_vec(x.shape(), data)
}
