//! End-to-end acceptance checks. Runs as a plain binary (no test harness)
//! and prints one line per criterion; exits non-zero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use patchpost::image::extract_grid_patches;
use patchpost::prior::PatchPrior;
use patchpost::{
    add_gaussian_noise, build_gaussian_kernel, epll_energy, make_grids, mmse_estimate, pad_reflect, psnr, read_image,
    run_denoise, run_restore, sample_patches, train_gmm_em, write_image, DataWeight, DictionaryPrior, EmOptions,
    GaussianBackend, GaussianKernelSpec, GaussianStep, GmmPrior, GridSet, GridSpec, Image, LinearOperator, Mask, Mode,
    NoiseModel, SamplerConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data")
}

fn test_image(name: &str) -> Image {
    read_image(data_dir().join("test").join(format!("{name}.png"))).unwrap()
}

const TEST_IMAGES: [&str; 10] =
    ["camera_a", "camera_b", "camera_c", "coins", "brick", "grass", "moon", "motorcycle_a", "motorcycle_b", "gravel"];

fn train_images() -> Vec<Image> {
    ["astronaut", "chelsea", "coffee", "rocket"]
        .iter()
        .map(|n| read_image(data_dir().join("train").join(format!("{n}.png"))).unwrap().to_gray())
        .collect()
}

/// K = 20 GMM over gray 8×8 patches of the training images.
fn desk_gmm() -> GmmPrior {
    let patches = sample_patches(&train_images(), 8, 10_000, 1).unwrap();
    let opts = EmOptions { components: 20, iterations: 15, seed: 7, ..EmOptions::default() };
    train_gmm_em(&patches, &opts).unwrap().prior
}

fn crop_center(img: &Image, size: usize) -> Image {
    img.crop((img.height() - size) / 2, (img.width() - size) / 2, size, size).unwrap()
}

fn check(cond: bool, what: String) -> Outcome {
    if cond {
        Ok(what)
    } else {
        Err(what)
    }
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn gaussian_density(x: &[f64], mean: &[f64], inv: &DMatrix<f64>, log_norm: f64) -> f64 {
    let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for i in 0..d.len() {
        for j in 0..d.len() {
            q += d[i] * inv[(i, j)] * d[j];
        }
    }
    (log_norm - 0.5 * q).exp()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Exact mixture posterior mean and covariance from the library's closed forms.
fn closed_form_moments(g: &GmmPrior, y: &[f64], noise: &NoiseModel) -> (Vec<f64>, DMatrix<f64>) {
    let d = y.len();
    let resp = g.responsibilities(y, noise).unwrap();
    let mut mean = vec![0.0; d];
    let mut second = DMatrix::zeros(d, d);
    for (k, r) in resp.iter().enumerate() {
        let (m, c) = g.posterior_moments(k, y, noise).unwrap();
        for i in 0..d {
            mean[i] += r * m[i];
        }
        second += (c + &m * m.transpose()) * *r;
    }
    let mv = nalgebra::DVector::from_column_slice(&mean);
    (mean, second - &mv * mv.transpose())
}

fn total_variation(counts: &[f64], probs: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    0.5 * counts.iter().zip(probs).map(|(c, p)| (c / n - p).abs()).sum::<f64>()
}

fn conjugacy() -> Outcome {
    let p = 3;
    let d = p * p;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let cov = (&a * a.transpose()) * 0.02 + DMatrix::identity(d, d) * 0.01;
    let mu: Vec<f64> = (0..d).map(|i| 0.3 + 0.05 * i as f64).collect();
    let prior = GmmPrior::new(vec![1.0], vec![mu.clone()], vec![cov.clone()]).unwrap();
    let var = 0.05;
    let y = Image::new(p, p, 1, (0..d).map(|i| 0.5 + 0.1 * (i as f64).sin()).collect()).unwrap();

    // Oracle: N((Σ⁻¹ + I/σ²)⁻¹ (Σ⁻¹μ + y/σ²), (Σ⁻¹ + I/σ²)⁻¹).
    let sinv = cov.clone().try_inverse().unwrap();
    let post = (&sinv + DMatrix::identity(d, d) / var).try_inverse().unwrap();
    let rhs = &sinv * nalgebra::DVector::from_vec(mu) + nalgebra::DVector::from_column_slice(y.data()) / var;
    let mean = &post * rhs;

    let grids = GridSet::new(vec![GridSpec::new(p, 0, 0).unwrap()]).unwrap();
    let reps = 1000;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for seed in 0..reps {
        let mut cfg = SamplerConfig::denoising(var, grids.clone(), seed);
        cfg.iterations = 1;
        let x = run_denoise(&y, &NoiseModel::Spherical(var), &prior, &cfg).map_err(|e| e.to_string())?.estimate;
        for (i, v) in x.data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let n = reps as f64;
    let (mut worst_z, mut worst_v) = (0.0f64, 0.0f64);
    for i in 0..d {
        let m = sum[i] / n;
        let v = (sq[i] - n * m * m) / (n - 1.0);
        worst_z = worst_z.max((m - mean[i]).abs() / (post[(i, i)] / n).sqrt());
        worst_v = worst_v.max((v / post[(i, i)] - 1.0).abs());
    }
    check(
        worst_z < 4.0 && worst_v < 0.10,
        format!("{d} pixels, {reps} runs: worst mean error {worst_z:.2} SE, worst variance error {:.1}%", 100.0 * worst_v),
    )
}

fn patch_posterior() -> Outcome {
    let draws = 100_000;

    // 1-D: three components, oracle by midpoint quadrature of prior × likelihood.
    let (w, m, v) = ([0.5, 0.3, 0.2], [-1.0, 0.5, 2.0], [0.3, 0.05, 0.6]);
    let g1 = GmmPrior::new(
        w.to_vec(),
        m.iter().map(|x| vec![*x]).collect(),
        v.iter().map(|x| DMatrix::from_element(1, 1, *x)).collect(),
    )
    .unwrap();
    let (y, s) = (0.8, 0.4);
    let (lo, hi, cells, per_bin) = (-8.0, 8.0, 16_000, 400);
    let h = (hi - lo) / cells as f64;
    let dens: Vec<f64> = (0..cells)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            (0..3).map(|k| w[k] * normal_pdf(x, m[k], v[k])).sum::<f64>() * normal_pdf(y, x, s)
        })
        .collect();
    let z: f64 = dens.iter().sum::<f64>() * h;
    let probs: Vec<f64> = dens.chunks(per_bin).map(|c| c.iter().sum::<f64>() * h / z).collect();
    let q_mean = (0..cells).map(|i| (lo + (i as f64 + 0.5) * h) * dens[i]).sum::<f64>() * h / z;
    let q_var = (0..cells).map(|i| (lo + (i as f64 + 0.5) * h - q_mean).powi(2) * dens[i]).sum::<f64>() * h / z;

    let noise1 = NoiseModel::Spherical(s);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut counts = vec![0.0; probs.len()];
    for _ in 0..draws {
        let x = g1.sample_posterior(&[y], &noise1, &mut rng).unwrap()[0];
        let b = ((x - lo) / (h * per_bin as f64)).floor();
        if b >= 0.0 && (b as usize) < counts.len() {
            counts[b as usize] += 1.0;
        }
    }
    let tv1 = total_variation(&counts, &probs);
    let (cm, cv) = closed_form_moments(&g1, &[y], &noise1);
    let moment1 = rel_err(&[cm[0]], &[q_mean]).max(rel_err(&[cv[(0, 0)]], &[q_var]));

    // 3-D: one coordinate unobserved, the others with different variances.
    let mut crng = ChaCha8Rng::seed_from_u64(22);
    let covs: Vec<DMatrix<f64>> = (0..3)
        .map(|_| {
            let a: DMatrix<f64> = DMatrix::from_fn(3, 3, |_, _| StandardNormal.sample(&mut crng));
            (&a * a.transpose()) * 0.15 + DMatrix::identity(3, 3) * 0.05
        })
        .collect();
    let means = vec![vec![-0.8, 0.4, 0.1], vec![0.6, -0.5, 0.9], vec![0.2, 1.0, -0.7]];
    let weights = vec![0.4, 0.35, 0.25];
    let g3 = GmmPrior::new(weights.clone(), means.clone(), covs.clone()).unwrap();
    let noise_var = [0.3, f64::INFINITY, 0.1];
    let y3 = [0.5, 0.0, -0.3];
    let noise3 = NoiseModel::Diagonal(noise_var.to_vec());

    let (lo3, hi3, n3, per3) = (-5.0, 5.0, 160, 8);
    let h3 = (hi3 - lo3) / n3 as f64;
    let comps: Vec<(DMatrix<f64>, f64)> = covs
        .iter()
        .map(|c| {
            let inv = c.clone().try_inverse().unwrap();
            (inv, -0.5 * (c.determinant() * (2.0 * std::f64::consts::PI).powi(3)).ln())
        })
        .collect();
    let axis = |i: usize| lo3 + (i as f64 + 0.5) * h3;
    let mut marg = vec![vec![0.0; n3]; 3];
    let mut mass = 0.0;
    let mut first = [0.0; 3];
    let mut second = [[0.0; 3]; 3];
    for i in 0..n3 {
        for j in 0..n3 {
            for l in 0..n3 {
                let x = [axis(i), axis(j), axis(l)];
                let prior: f64 = (0..3).map(|k| weights[k] * gaussian_density(&x, &means[k], &comps[k].0, comps[k].1)).sum();
                let lik = normal_pdf(y3[0], x[0], noise_var[0]) * normal_pdf(y3[2], x[2], noise_var[2]);
                let p = prior * lik;
                mass += p;
                marg[0][i] += p;
                marg[1][j] += p;
                marg[2][l] += p;
                for a in 0..3 {
                    first[a] += p * x[a];
                    for b in 0..3 {
                        second[a][b] += p * x[a] * x[b];
                    }
                }
            }
        }
    }
    let q_mean3: Vec<f64> = first.iter().map(|f| f / mass).collect();
    let q_cov3: Vec<f64> =
        (0..9).map(|e| second[e / 3][e % 3] / mass - q_mean3[e / 3] * q_mean3[e % 3]).collect();
    let (cm3, cc3) = closed_form_moments(&g3, &y3, &noise3);
    let moment3 = rel_err(&cm3, &q_mean3).max(rel_err(cc3.as_slice(), &q_cov3));

    let bins = n3 / per3;
    let mut hist = vec![vec![0.0; bins]; 3];
    for _ in 0..draws {
        let x = g3.sample_posterior(&y3, &noise3, &mut rng).unwrap();
        for a in 0..3 {
            let b = ((x[a] - lo3) / (h3 * per3 as f64)).floor();
            if b >= 0.0 && (b as usize) < bins {
                hist[a][b as usize] += 1.0;
            }
        }
    }
    let tv3 = (0..3)
        .map(|a| {
            let probs: Vec<f64> = marg[a].chunks(per3).map(|c| c.iter().sum::<f64>() / mass).collect();
            total_variation(&hist[a], &probs)
        })
        .fold(0.0f64, f64::max);

    check(
        tv1 < 0.02 && tv3 < 0.02 && moment1 < 1e-3 && moment3 < 1e-3,
        format!(
            "1-D TV {tv1:.4}, moments rel err {moment1:.1e}; 3-D worst marginal TV {tv3:.4}, moments rel err {moment3:.1e}"
        ),
    )
}

fn em_training() -> Outcome {
    let patches = sample_patches(&train_images(), 8, 10_000, 3).unwrap();
    let fit = train_gmm_em(&patches, &EmOptions { components: 20, iterations: 30, seed: 0, ..EmOptions::default() })
        .map_err(|e| e.to_string())?;
    let smallest_step = fit.log_likelihood.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);

    // Two clusters with known parameters.
    let truth = [
        (0.3, [-2.0, 1.0], [[0.5, 0.2], [0.2, 0.3]]),
        (0.7, [2.0, -1.0], [[0.4, -0.1], [-0.1, 0.6]]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 10_000;
    let mut points = Vec::with_capacity(n);
    for (c, (w, mean, cov)) in truth.iter().enumerate() {
        let l = nalgebra::Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]).cholesky().unwrap().l();
        let count = if c == 0 { (w * n as f64) as usize } else { n - points.len() };
        for _ in 0..count {
            let z = nalgebra::Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            let x = l * z;
            points.push(vec![mean[0] + x[0], mean[1] + x[1]]);
        }
    }
    let two = train_gmm_em(&points, &EmOptions { components: 2, iterations: 30, seed: 1, ..EmOptions::default() })
        .map_err(|e| e.to_string())?
        .prior;
    let mut worst = 0.0f64;
    for (w, mean, cov) in &truth {
        let k = (0..2)
            .min_by(|&a, &b| {
                let da = (two.mean(a)[0] - mean[0]).powi(2) + (two.mean(a)[1] - mean[1]).powi(2);
                let db = (two.mean(b)[0] - mean[0]).powi(2) + (two.mean(b)[1] - mean[1]).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        worst = worst.max((two.weights()[k] - w).abs());
        for i in 0..2 {
            worst = worst.max((two.mean(k)[i] - mean[i]).abs());
            for j in 0..2 {
                worst = worst.max((two.covariance(k)[(i, j)] - cov[i][j]).abs());
            }
        }
    }
    check(
        smallest_step >= -1e-8 && worst < 0.05,
        format!(
            "smallest per-iteration log-likelihood change {smallest_step:+.2e} over 30 iterations ({} re-seeds); two-cluster max parameter error {worst:.4}",
            fit.reseeded
        ),
    )
}

fn dictionary_consistency() -> Outcome {
    let p = 8;
    let clean = crop_center(&test_image("gravel"), 64);
    let padded = pad_reflect(&clean, p).unwrap();
    let one = GridSpec::new(p, 0, 0).unwrap();
    let mut atoms = Vec::new();
    for r in 0..=padded.height() - p {
        for c in 0..=padded.width() - p {
            atoms.extend(extract_grid_patches(&padded.crop(r, c, p, p).unwrap(), &one).unwrap());
        }
    }
    let dict = DictionaryPrior::new(atoms).unwrap();
    let sigma = 15.0 / 255.0;
    let y = add_gaussian_noise(&clean, sigma, 3).unwrap();
    let grids = make_grids(p, 8, 0).unwrap();
    let cfg = SamplerConfig::denoising(sigma * sigma, grids.clone(), 1);
    let x = run_denoise(&y, &NoiseModel::Spherical(sigma * sigma), &dict, &cfg).map_err(|e| e.to_string())?.estimate;
    let out = pad_reflect(&x, p).unwrap();
    let (mut hits, mut total) = (0, 0);
    for g in grids.grids() {
        for patch in extract_grid_patches(&out, g).unwrap() {
            total += 1;
            hits += usize::from(dict.find_atom(&patch, 1e-3).is_some());
        }
    }
    check(
        hits == total,
        format!("{hits}/{total} patches over {} grids within 1e-3 of an atom ({} atoms)", grids.count(), dict.len()),
    )
}

fn energy_ordering(gmm: &GmmPrior) -> Outcome {
    let sigma = 25.0 / 255.0;
    let var = sigma * sigma;
    let clean = test_image("camera_a");
    let grids = make_grids(8, patchpost::sampler::DEFAULT_GRIDS, 0).unwrap();
    let seeds = 10;
    let mut sums = [0.0; 3];
    for seed in 0..seeds {
        let y = add_gaussian_noise(&clean, sigma, 100 + seed).unwrap();
        let energy = |x: &Image| epll_energy(x, &y, &LinearOperator::Identity, var, &grids, gmm).unwrap();
        sums[2] += energy(&y);
        for (slot, mode) in [(0, Mode::Map), (1, Mode::Sample)] {
            let mut cfg = SamplerConfig::denoising(var, grids.clone(), seed);
            cfg.mode = mode;
            let x = run_denoise(&y, &NoiseModel::Spherical(var), gmm, &cfg).map_err(|e| e.to_string())?.estimate;
            sums[slot] += energy(&x);
        }
    }
    let [map, sample, noisy] = sums.map(|s| s / seeds as f64);
    check(
        map <= sample && sample <= noisy,
        format!("mean energy over {seeds} seeds: MAP {map:.4e}, sample {sample:.4e}, noisy {noisy:.4e}"),
    )
}

fn mmse_ordering(gmm: &GmmPrior) -> Outcome {
    let sigma = 25.0 / 255.0;
    let var = sigma * sigma;
    let (iters, grid_count) = (10, 4);
    let grids = make_grids(8, grid_count, 0).unwrap();
    let config = |seed: u64| {
        let mut cfg = SamplerConfig::denoising(var, grids.clone(), seed);
        cfg.iterations = iters;
        cfg.beta.tau *= iters as f64 / patchpost::sampler::DEFAULT_ITERATIONS as f64;
        cfg
    };
    let (mut wins, mut gain_sum, mut noisy_sum) = (0, 0.0, 0.0);
    let mut worst_gain = f64::INFINITY;
    for (i, name) in TEST_IMAGES.iter().enumerate() {
        let clean = test_image(name);
        let y = add_gaussian_noise(&clean, sigma, 200 + i as u64).unwrap();
        let run = |seed: u64| run_denoise(&y, &NoiseModel::Spherical(var), gmm, &config(seed)).map(|r| r.estimate);
        let single = psnr(&run(0).map_err(|e| e.to_string())?, &clean, 1.0).unwrap();
        let mmse = psnr(&mmse_estimate(20, 0, run).map_err(|e| e.to_string())?, &clean, 1.0).unwrap();
        let noisy = psnr(&y, &clean, 1.0).unwrap();
        wins += usize::from(mmse >= single);
        gain_sum += mmse - noisy;
        noisy_sum += noisy;
        worst_gain = worst_gain.min(mmse - noisy);
    }
    let n = TEST_IMAGES.len() as f64;
    let mean_gain = gain_sum / n;
    check(
        wins >= 9 && mean_gain >= 5.0,
        format!(
            "T={iters}, G={grid_count}: MMSE(20) >= one sample on {wins}/10 crops; mean gain over noisy ({:.2} dB) {mean_gain:.2} dB, smallest {worst_gain:.2} dB",
            noisy_sum / n
        ),
    )
}

/// Not a criterion: what the default schedule gives on one crop.
fn default_scale_denoising(gmm: &GmmPrior) -> String {
    let sigma = 25.0 / 255.0;
    let var = sigma * sigma;
    let clean = test_image("camera_a");
    let y = add_gaussian_noise(&clean, sigma, 200).unwrap();
    let grids = make_grids(8, patchpost::sampler::DEFAULT_GRIDS, 0).unwrap();
    let mut out = format!("noisy {:.2} dB", psnr(&y, &clean, 1.0).unwrap());
    for (label, weight) in [("split data weight", DataWeight::Split), ("full data weight", DataWeight::Full)] {
        let mut cfg = SamplerConfig::denoising(var, grids.clone(), 0);
        cfg.data_weight = weight;
        let x = run_denoise(&y, &NoiseModel::Spherical(var), gmm, &cfg).unwrap().estimate;
        out.push_str(&format!(", {label} {:.2} dB", psnr(&x, &clean, 1.0).unwrap()));
    }
    out
}

fn deblurring(gmm: &GmmPrior) -> Outcome {
    let sigma = 2.5 / 255.0;
    let clean = test_image("camera_a");
    let kernel = build_gaussian_kernel(&GaussianKernelSpec { sigma_x: 1.5, sigma_y: 1.0, rho: 0.75 }).unwrap();
    let op = LinearOperator::Convolution(kernel);
    let y = add_gaussian_noise(&op.apply(&clean).unwrap(), sigma, 5).unwrap();
    let mut cfg = SamplerConfig::deblurring(make_grids(8, patchpost::sampler::DEFAULT_GRIDS, 0).unwrap(), 0);
    cfg.mode = Mode::Map;
    let x = run_restore(&y, &op, sigma * sigma, gmm, &cfg).map_err(|e| e.to_string())?.estimate;
    let fit = op.residual_norm_sq(&x, &y).unwrap() / x.data().len() as f64;
    let (before, after) = (psnr(&y, &clean, 1.0).unwrap(), psnr(&x, &clean, 1.0).unwrap());
    check(
        fit <= 2.0 * sigma * sigma && after > before,
        format!("data fit {:.2} σ², PSNR {before:.2} dB -> {after:.2} dB", fit / (sigma * sigma)),
    )
}

fn solver_agreement() -> Outcome {
    let sigma = 2.5 / 255.0;
    let clean = crop_center(&test_image("camera_b"), 64);
    let kernel = build_gaussian_kernel(&GaussianKernelSpec { sigma_x: 1.5, sigma_y: 1.0, rho: 0.75 }).unwrap();
    let op = LinearOperator::Convolution(kernel);
    let y = add_gaussian_noise(&op.apply(&clean).unwrap(), sigma, 8).unwrap();
    let x_bar = add_gaussian_noise(&clean, 0.05, 9).unwrap();
    let t = add_gaussian_noise(&clean, 0.1, 10).unwrap();
    let cfg = SamplerConfig::deblurring(make_grids(8, 32, 0).unwrap(), 0);
    let gamma = cfg.gamma.unwrap();
    let step = GaussianStep {
        op: &op,
        y: &y,
        noise_var: sigma * sigma,
        grids: 32,
        beta: cfg.beta.eval(50.0),
        x_bar: &x_bar,
        gamma: gamma.eval(50.0),
        t: &t,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut b = step.rhs().unwrap();
    b.axpy(1.0, &step.perturbation(&mut rng).unwrap()).unwrap();
    let spectral = step.solve(&b, GaussianBackend::Spectral).map_err(|e| e.to_string())?;
    let (iterative, report) = step.solve_iterative(&b).map_err(|e| e.to_string())?;
    let sample_err = rel_err(iterative.data(), spectral.data());
    let mean_err = rel_err(
        step.mean(GaussianBackend::Iterative).unwrap().data(),
        step.mean(GaussianBackend::Spectral).unwrap().data(),
    );
    check(
        sample_err < 1e-6 && mean_err < 1e-6,
        format!(
            "relative difference {sample_err:.1e} with shared perturbation, {mean_err:.1e} for the mean ({} CG iterations)",
            report.iterations
        ),
    )
}

fn determinism(gmm: &GmmPrior) -> Outcome {
    // In-process: results must not depend on the worker count.
    let clean = crop_center(&test_image("coins"), 48);
    let sigma = 25.0 / 255.0;
    let y = add_gaussian_noise(&clean, sigma, 1).unwrap();
    let kernel = build_gaussian_kernel(&GaussianKernelSpec::isotropic(1.2)).unwrap();
    let op = LinearOperator::Convolution(kernel);
    let blurred = add_gaussian_noise(&op.apply(&clean).unwrap(), 0.01, 2).unwrap();
    let grids = make_grids(8, 4, 0).unwrap();
    let run_all = || {
        let mut cfg = SamplerConfig::denoising(sigma * sigma, grids.clone(), 3);
        cfg.iterations = 5;
        let a = run_denoise(&y, &NoiseModel::Spherical(sigma * sigma), gmm, &cfg).unwrap();
        let mut cfg = SamplerConfig::deblurring(grids.clone(), 4);
        cfg.iterations = 5;
        let b = run_restore(&blurred, &op, 1e-4, gmm, &cfg).unwrap();
        (a.estimate.into_data(), a.stream_digest, b.estimate.into_data(), b.stream_digest)
    };
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let one = pool(1).install(run_all);
    let four = pool(4).install(run_all);
    if one != four {
        return Err("in-process results differ between 1 and 4 worker threads".into());
    }

    // End to end: every manifest-writing command, at two thread counts, then replayed.
    let dirs = [TempDir::new().unwrap(), TempDir::new().unwrap()];
    let train = data_dir().join("train");
    let fast = ["--iters", "4", "--grids", "3", "--beta-tau", "1"];
    let kernel = ["--kernel-sx", "1.5", "--kernel-sy", "1", "--kernel-rho", "0.75"];
    let commands: Vec<Vec<&str>> = vec![
        vec!["train-prior", train.to_str().unwrap(), "-k", "4", "--patches", "2000", "--iters", "4", "--gray", "--out", "prior.bin"],
        vec!["make-mask", "clean.png", "--missing", "0.6", "--seed", "1", "--out", "mask.png"],
        vec!["degrade", "clean.png", "--sigma", "25", "--seed", "2", "--out", "noisy.png"],
        [&["degrade", "clean.png", "--sigma", "2.5", "--out", "blurred.png"][..], &kernel[..]].concat(),
        vec!["sample-prior", "--prior", "prior.bin", "--count", "3", "--out-dir", "atoms"],
        [&["denoise", "noisy.png", "--prior", "prior.bin", "--sigma", "25", "--out", "s.png"][..], &fast[..]].concat(),
        [&["denoise", "noisy.png", "--prior", "prior.bin", "--sigma", "25", "--mode", "map", "--out", "m.png"][..], &fast[..]]
            .concat(),
        [&["denoise", "noisy.png", "--prior", "prior.bin", "--sigma", "25", "--mode", "mmse", "--samples", "3", "--out", "e.png"][..], &fast[..]]
            .concat(),
        [&["deblur", "blurred.png", "--prior", "prior.bin", "--sigma", "2.5", "--out", "b.png"][..], &kernel[..], &fast[..]].concat(),
        [&["inpaint", "clean.png", "--mask", "mask.png", "--prior", "prior.bin", "--out", "i.png"][..], &fast[..]].concat(),
    ];
    let manifests = [
        "prior.bin.manifest",
        "mask.png.manifest",
        "noisy.png.manifest",
        "blurred.png.manifest",
        "atoms/patches.manifest",
        "s.png.manifest",
        "m.png.manifest",
        "e.png.manifest",
        "b.png.manifest",
        "i.png.manifest",
    ];
    for (dir, threads) in dirs.iter().zip(["1", "4"]) {
        write_image(&clean, dir.path().join("clean.png")).unwrap();
        for args in &commands {
            let out = Command::new(env!("CARGO_BIN_EXE_patchpost"))
                .current_dir(dir.path())
                .args(["--threads", threads])
                .args(args.iter())
                .output()
                .unwrap();
            if !out.status.success() {
                return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
            }
        }
    }
    let outputs = ["prior.bin", "mask.png", "noisy.png", "blurred.png", "s.png", "m.png", "e.png", "b.png", "i.png"];
    let atoms = (0..3).map(|i| format!("atoms/patch-{i:04}.png"));
    for f in outputs.iter().map(|s| s.to_string()).chain(atoms) {
        if fs::read(dirs[0].path().join(&f)).unwrap() != fs::read(dirs[1].path().join(&f)).unwrap() {
            return Err(format!("{f} differs between 1 and 4 threads"));
        }
    }
    for m in manifests {
        let out = Command::new(env!("CARGO_BIN_EXE_patchpost"))
            .current_dir(dirs[1].path())
            .args(["replay", m])
            .output()
            .unwrap();
        if !out.status.success() {
            return Err(format!("replay of {m} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(format!(
        "identical across 1 and 4 threads in process and for {} commands; {} manifests replayed bit-identically",
        commands.len(),
        manifests.len()
    ))
}

fn inpainting(gmm: &GmmPrior) -> Outcome {
    let size = 64;
    let clean = crop_center(&test_image("camera_a"), size);
    let mask = Mask::random(size, size, 0.95, 7).unwrap();
    let sigma = 1.0 / 255.0;
    let observed: Vec<f64> =
        clean.data().iter().zip(mask.values()).filter(|(_, &m)| m > 0.0).map(|(v, _)| *v).collect();
    let fill_value = observed.iter().sum::<f64>() / observed.len() as f64;
    let filled = Image::from_fn(clean.shape(), |r, c, _| {
        if mask.values()[r * size + c] > 0.0 {
            clean.get(r, c, 0)
        } else {
            fill_value
        }
    });
    let y = add_gaussian_noise(&LinearOperator::Mask(mask.clone()).apply(&clean).unwrap(), sigma, 2).unwrap();
    let noise =
        NoiseModel::Diagonal(mask.values().iter().map(|&m| if m > 0.0 { sigma * sigma } else { f64::INFINITY }).collect());
    let cfg = SamplerConfig::inpainting(make_grids(8, patchpost::sampler::DEFAULT_GRIDS, 0).unwrap(), 3);
    let x = run_denoise(&y, &noise, gmm, &cfg).map_err(|e| e.to_string())?.estimate;
    let (base, out) = (psnr(&filled, &clean, 1.0).unwrap(), psnr(&x, &clean, 1.0).unwrap());
    check(
        out >= base + 3.0,
        format!("{} of {} pixels missing: mean fill {base:.2} dB, sampler {out:.2} dB", size * size - observed.len(), size * size),
    )
}

fn main() {
    let gmm_start = Instant::now();
    let gmm = desk_gmm();
    println!("trained K = 20 GMM on 10000 patches in {:.1} s", gmm_start.elapsed().as_secs_f64());

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(usize, &str, Option<u64>, Check)> = vec![
        (1, "Gaussian conjugacy", Some(60), Box::new(conjugacy)),
        (2, "patch posterior vs quadrature", Some(60), Box::new(patch_posterior)),
        (3, "EM monotonicity and recovery", Some(120), Box::new(em_training)),
        (4, "dictionary consistency", Some(60), Box::new(dictionary_consistency)),
        (5, "energy ordering", Some(600), Box::new(|| energy_ordering(&gmm))),
        (6, "MMSE ordering", Some(1800), Box::new(|| mmse_ordering(&gmm))),
        (7, "deblurring consistency", Some(300), Box::new(|| deblurring(&gmm))),
        (8, "spectral vs iterative solver", Some(60), Box::new(solver_agreement)),
        (9, "determinism", None, Box::new(|| determinism(&gmm))),
        (10, "inpainting", Some(300), Box::new(|| inpainting(&gmm))),
    ];
    let mut failed = 0;
    for (n, name, limit, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let over = limit.is_some_and(|l| elapsed > Duration::from_secs(l));
        let (verdict, detail) = match outcome {
            Ok(d) if !over => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {} s budget", limit.unwrap())),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(verdict == "FAIL");
        println!("criterion {n} {name}: {verdict} ({detail}; {:.1} s)", elapsed.as_secs_f64());
        if n == 6 {
            println!("  default schedule, T=100, G=32, one sample on camera_a: {}", default_scale_denoising(&gmm));
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
