use rand::{Rng, RngCore};

use super::{
    argmax, check_dim, normalize_log_weights, sample_categorical, NoiseForm, NoiseModel, PatchPrior,
    DICTIONARY_TOLERANCE,
};
use crate::error::{invalid, Result};

/// Uniform distribution over a finite set of patches (atoms).
#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryPrior {
    dim: usize,
    atoms: Vec<Vec<f64>>,
}

impl DictionaryPrior {
    pub fn new(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let dim = atoms.first().map(|a| a.len()).ok_or_else(|| invalid("a dictionary needs at least one atom"))?;
        if dim == 0 {
            return Err(invalid("patch dimension must be positive"));
        }
        for (i, a) in atoms.iter().enumerate() {
            if a.len() != dim {
                return Err(invalid(format!("atom {i} has dimension {}, expected {dim}", a.len())));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("atom {i} has non-finite entries")));
            }
        }
        Ok(Self { dim, atoms })
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Index of the first atom within `tol` of `x` in max-norm.
    pub fn find_atom(&self, x: &[f64], tol: f64) -> Option<usize> {
        self.atoms
            .iter()
            .position(|a| a.iter().zip(x).all(|(u, v)| (u - v).abs() <= tol))
    }

    /// `log p(y | d_i)` up to a shared constant.
    fn log_likelihoods(&self, y: &[f64], form: &NoiseForm) -> Vec<f64> {
        self.atoms
            .iter()
            .map(|a| match form {
                NoiseForm::Spherical(s) if s.is_infinite() => 0.0,
                NoiseForm::Spherical(s) => {
                    -0.5 * a.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / s
                }
                NoiseForm::Diagonal { observed, variances } => {
                    -0.5 * observed
                        .iter()
                        .zip(variances)
                        .map(|(&j, v)| (a[j] - y[j]) * (a[j] - y[j]) / v)
                        .sum::<f64>()
                }
            })
            .collect()
    }

    /// Posterior probabilities of each atom.
    pub fn posterior_weights(&self, y: &[f64], noise: &NoiseModel) -> Result<Vec<f64>> {
        check_dim("observation", y.len(), self.dim)?;
        let form = noise.classify(self.dim)?;
        Ok(normalize_log_weights(&self.log_likelihoods(y, &form)))
    }
}

impl PatchPrior for DictionaryPrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim("patch", x.len(), self.dim)?;
        Ok(match self.find_atom(x, DICTIONARY_TOLERANCE) {
            Some(_) => 0.0,
            None => f64::NEG_INFINITY,
        })
    }

    fn sample_posterior(&self, y: &[f64], noise: &NoiseModel, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let probs = self.posterior_weights(y, noise)?;
        Ok(self.atoms[sample_categorical(&probs, rng)].clone())
    }

    fn map_posterior(&self, y: &[f64], noise: &NoiseModel) -> Result<Vec<f64>> {
        check_dim("observation", y.len(), self.dim)?;
        let form = noise.classify(self.dim)?;
        Ok(self.atoms[argmax(&self.log_likelihoods(y, &form))].clone())
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.atoms[rng.random_range(0..self.atoms.len())].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_atom_is_always_returned() {
        let d = DictionaryPrior::new(vec![vec![0.25, 0.5]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::Spherical(0.1);
        assert_eq!(d.sample_posterior(&[9.0, -9.0], &noise, &mut rng).unwrap(), vec![0.25, 0.5]);
        assert_eq!(d.map_posterior(&[9.0, -9.0], &noise).unwrap(), vec![0.25, 0.5]);
        assert_eq!(d.sample_prior(&mut rng), vec![0.25, 0.5]);
    }

    #[test]
    fn map_picks_nearest_atom_and_breaks_ties_low() {
        let d = DictionaryPrior::new(vec![vec![0.0], vec![10.0]]).unwrap();
        assert_eq!(d.map_posterior(&[1.0], &NoiseModel::Spherical(1.0)).unwrap(), vec![0.0]);
        assert_eq!(d.map_posterior(&[5.0], &NoiseModel::Spherical(1.0)).unwrap(), vec![0.0]);
    }

    #[test]
    fn membership_density() {
        let d = DictionaryPrior::new(vec![vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(d.log_density(&[2.0, 3.0 + 5e-7]).unwrap(), 0.0);
        assert_eq!(d.log_density(&[2.0, 3.1]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn posterior_weights_match_direct_arithmetic() {
        let d = DictionaryPrior::new(vec![vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let (y, s) = (0.8, 0.5);
        let raw: Vec<f64> = [0.0f64, 1.0, 3.0].iter().map(|a| (-(y - a) * (y - a) / (2.0 * s)).exp()).collect();
        let total: f64 = raw.iter().sum();
        let w = d.posterior_weights(&[y], &NoiseModel::Spherical(s)).unwrap();
        for (a, b) in w.iter().zip(&raw) {
            assert!((a - b / total).abs() < 1e-15);
        }
    }

    #[test]
    fn unobserved_coordinates_are_ignored() {
        let d = DictionaryPrior::new(vec![vec![0.0, 5.0], vec![1.0, 0.0]]).unwrap();
        let noise = NoiseModel::Diagonal(vec![1.0, f64::INFINITY]);
        assert_eq!(d.map_posterior(&[0.1, 0.0], &noise).unwrap(), vec![0.0, 5.0]);
    }

    #[test]
    fn samples_are_atoms_with_posterior_frequencies() {
        let d = DictionaryPrior::new(vec![vec![0.0], vec![1.0]]).unwrap();
        let noise = NoiseModel::Spherical(1.0);
        let p1 = d.posterior_weights(&[0.7], &noise).unwrap()[1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let mut ones = 0;
        for _ in 0..n {
            let x = d.sample_posterior(&[0.7], &noise, &mut rng).unwrap();
            assert!(x == vec![0.0] || x == vec![1.0]);
            ones += (x[0] == 1.0) as usize;
        }
        let se = (p1 * (1.0 - p1) / n as f64).sqrt();
        assert!((ones as f64 / n as f64 - p1).abs() < 4.0 * se);
    }

    #[test]
    fn rejects_bad_atoms() {
        assert!(DictionaryPrior::new(vec![]).is_err());
        assert!(DictionaryPrior::new(vec![vec![0.0], vec![0.0, 1.0]]).is_err());
        assert!(DictionaryPrior::new(vec![vec![f64::NAN]]).is_err());
    }
}
