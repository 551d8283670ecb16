//! 2-D FFTs on row-major grids and cached kernel power spectra.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Kernel;

pub(crate) struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub(crate) fn get(height: usize, width: usize) -> Arc<Fft2> {
        static PLANS: OnceLock<Mutex<HashMap<(usize, usize), Arc<Fft2>>>> = OnceLock::new();
        let mut plans = PLANS.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
        plans
            .entry((height, width))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                Arc::new(Fft2 {
                    height,
                    width,
                    row_fwd: planner.plan_fft_forward(width),
                    row_inv: planner.plan_fft_inverse(width),
                    col_fwd: planner.plan_fft_forward(height),
                    col_inv: planner.plan_fft_inverse(height),
                })
            })
            .clone()
    }

    pub(crate) fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Unnormalized inverse; divide by `height·width` afterwards.
    pub(crate) fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_inv, &self.col_inv);
    }

    fn run(&self, buf: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(buf.len(), h * w);
        rows.process(buf);
        let mut t = vec![Complex64::default(); h * w];
        for r in 0..h {
            for c in 0..w {
                t[c * h + r] = buf[r * w + c];
            }
        }
        cols.process(&mut t);
        for r in 0..h {
            for c in 0..w {
                buf[r * w + c] = t[c * h + r];
            }
        }
    }
}

/// `|K̂|²` of the kernel wrapped onto an `height × width` torus: the
/// eigenvalues of `HᵀH` for periodic convolution.
pub(crate) fn kernel_power_spectrum(kernel: &Kernel, height: usize, width: usize) -> Arc<Vec<f64>> {
    type Key = (usize, usize, Vec<u64>, usize, usize);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<Vec<f64>>>>> = OnceLock::new();
    let key = (kernel.rows(), kernel.cols(), kernel.data().iter().map(|v| v.to_bits()).collect(), height, width);
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
        return hit.clone();
    }
    let mut buf = vec![Complex64::default(); height * width];
    for (dy, dx, v) in kernel.taps() {
        let r = dy.rem_euclid(height as isize) as usize;
        let c = dx.rem_euclid(width as isize) as usize;
        buf[r * width + c].re += v;
    }
    Fft2::get(height, width).forward(&mut buf);
    let power = Arc::new(buf.iter().map(|z| z.norm_sqr()).collect::<Vec<_>>());
    cache.lock().unwrap_or_else(|e| e.into_inner()).insert(key, power.clone());
    power
}
