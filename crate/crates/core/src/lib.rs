//! Posterior sampling for image restoration with patch priors.
//!
//! The sampler runs a Gibbs chain over several copies of the image, one per
//! grid of non-overlapping patches. Neighbouring copies are tied together by
//! a quadratic coupling whose weight grows over the iterations, so all
//! copies agree at the end and every patch of every grid is explained by the
//! prior.

pub mod degradation;
pub mod error;
pub mod image;
pub mod io;
pub mod prior;
pub mod rng;
pub mod sampler;

pub use degradation::{
    add_gaussian_noise, build_gaussian_kernel, GaussianBackend, GaussianKernelSpec, GaussianStep, Kernel, LinearOperator, Mask,
};
pub use error::{Error, Result};
pub use image::{make_grids, pad_reflect, psnr, sample_patches, GridSet, GridSpec, Image, Shape};
pub use io::{load_prior, read_image, save_prior, write_image, PriorFile};
pub use prior::{
    train_gmm_em, DictionaryPrior, EmFit, EmOptions, GmmPrior, NoiseModel, PatchPrior, Prior,
};
pub use sampler::{
    epll_energy, mmse_estimate, run_denoise, run_restore, Coupling, DataWeight, Mode, RestorationResult, SamplerConfig,
    Schedule,
};
