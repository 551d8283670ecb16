#![allow(dead_code)]

use std::path::PathBuf;

use patchpost::image::{extract_grid_patches, GridSpec};
use patchpost::{read_image, train_gmm_em, EmOptions, GmmPrior, Image, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

pub fn train_images() -> Vec<Image> {
    ["astronaut", "chelsea", "coffee", "rocket"]
        .iter()
        .map(|n| read_image(data_dir().join("train").join(format!("{n}.png"))).unwrap())
        .collect()
}

pub const TEST_IMAGES: [&str; 10] = [
    "camera_a", "camera_b", "camera_c", "coins", "brick", "grass", "moon", "motorcycle_a", "motorcycle_b", "gravel",
];

pub fn test_image(name: &str) -> Image {
    read_image(data_dir().join("test").join(format!("{name}.png"))).unwrap()
}

/// `n` random `p × p` patches drawn uniformly from `images`.
pub fn random_patches(images: &[Image], p: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let img = &images[rng.random_range(0..images.len())];
            let r = rng.random_range(0..=img.height() - p);
            let c = rng.random_range(0..=img.width() - p);
            let block = img.crop(r, c, p, p).unwrap();
            extract_grid_patches(&block, &GridSpec::new(p, 0, 0).unwrap()).unwrap().remove(0)
        })
        .collect()
}

/// A small GMM over gray 8×8 patches of the training fixtures.
pub fn small_gmm(components: usize, patches: usize, iterations: usize) -> GmmPrior {
    let data = random_patches(&train_images(), 8, patches, 1);
    let opts = EmOptions { components, iterations, seed: 7, ..EmOptions::default() };
    train_gmm_em(&data, &opts).unwrap().prior
}

pub fn add_noise(img: &Image, sigma: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = img
        .data()
        .iter()
        .map(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + sigma * n
        })
        .collect();
    Image::new(img.height(), img.width(), img.channels(), data).unwrap()
}

pub fn crop_center(img: &Image, size: usize) -> Image {
    let top = (img.height() - size) / 2;
    let left = (img.width() - size) / 2;
    img.crop(top, left, size, size).unwrap()
}

pub fn shape_of(img: &Image) -> Shape {
    img.shape()
}
