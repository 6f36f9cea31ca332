//! Multivariate Gaussian models of action parameters that led to success, trained from
//! recorded episodes and used as samplers for later attempts.

use crate::neem::{successful_action_params, Episode, NeemError};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MODEL_FORMAT: &str = "mentalsim-gaussian/1";
/// Smallest eigenvalue a fitted covariance may have before it is regularized.
pub const MIN_EIGENVALUE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("need at least 2 samples to fit, got {0}")]
    InsufficientData(usize),
    #[error("sample {index} has dimension {found}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("sample {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Neem(#[from] NeemError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    chol: DMatrix<f64>,
    regularized: bool,
}

impl Gaussian {
    /// Builds a Gaussian from a mean and a covariance, which must be symmetric positive
    /// definite.
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self, LearnError> {
        let d = mean.len();
        if d == 0 || cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(LearnError::Format(format!("covariance must be {d}x{d}")));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
        Self::from_parts(DVector::from_vec(mean), cov, false)
    }

    fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>, regularized: bool) -> Result<Self, LearnError> {
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(LearnError::NonFinite(0));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(LearnError::NotPositiveDefinite)?
            .l();
        Ok(Self {
            mean,
            cov,
            chol,
            regularized,
        })
    }

    /// Maximum-likelihood mean and unbiased (n-1) covariance. If the covariance is
    /// singular or nearly so, its diagonal is lifted until the smallest eigenvalue is
    /// [`MIN_EIGENVALUE`].
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self, LearnError> {
        let n = samples.len();
        if n < 2 {
            return Err(LearnError::InsufficientData(n));
        }
        let d = samples[0].len();
        if d == 0 {
            return Err(LearnError::DimensionMismatch {
                index: 0,
                expected: 1,
                found: 0,
            });
        }
        for (i, s) in samples.iter().enumerate() {
            if s.len() != d {
                return Err(LearnError::DimensionMismatch {
                    index: i,
                    expected: d,
                    found: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(LearnError::NonFinite(i));
            }
        }
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        let min_eig = cov
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let regularized = min_eig < MIN_EIGENVALUE;
        if regularized {
            let lift = MIN_EIGENVALUE - min_eig;
            for i in 0..d {
                cov[(i, i)] += lift;
            }
        }
        Self::from_parts(mean, cov, regularized)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mean.iter().copied().collect()
    }

    pub fn cov(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| self.cov.row(i).iter().copied().collect())
            .collect()
    }

    pub fn regularized(&self) -> bool {
        self.regularized
    }

    /// One draw `mean + L z` with `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.mean + &self.chol * z).iter().copied().collect()
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "dimension mismatch");
        let diff = DVector::from_column_slice(x) - &self.mean;
        let y = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        let log_det: f64 = self.chol.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        -0.5 * (y.norm_squared() + log_det + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// A Gaussian together with what it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub action: String,
    pub param: String,
    pub n_samples: usize,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub regularized: bool,
}

impl ModelFile {
    pub fn from_gaussian(g: &Gaussian, action: &str, param: &str, n_samples: usize) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            action: action.into(),
            param: param.into(),
            n_samples,
            mean: g.mean(),
            cov: g.cov(),
            regularized: g.regularized(),
        }
    }

    pub fn gaussian(&self) -> Result<Gaussian, LearnError> {
        let mut g = Gaussian::new(self.mean.clone(), self.cov.clone())?;
        g.regularized = self.regularized;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| LearnError::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LearnError> {
        let text = std::fs::read_to_string(path)?;
        let m: ModelFile = serde_json::from_str(&text).map_err(|e| LearnError::Format(e.to_string()))?;
        if m.format != MODEL_FORMAT {
            return Err(LearnError::Format(format!("unsupported format '{}'", m.format)));
        }
        m.gaussian()?;
        Ok(m)
    }
}

/// Fits the parameters of every successful `action` in `episodes`.
pub fn train_from_neems(episodes: &[Episode], action: &str, param: &str) -> Result<ModelFile, LearnError> {
    let samples = successful_action_params(episodes, action, param)?;
    let g = Gaussian::fit(&samples)?;
    Ok(ModelFile::from_gaussian(&g, action, param, samples.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_corners() {
        let g = Gaussian::fit(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(g.mean(), vec![1.0, 1.0]);
        assert!((g.cov()[0][0] - 4.0 / 3.0).abs() < 1e-12);
        assert!(g.cov()[0][1].abs() < 1e-12);
        assert!(!g.regularized());
    }

    #[test]
    fn degenerate_is_regularized() {
        let g = Gaussian::fit(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(g.regularized());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = g.sample(&mut rng);
        assert!((s[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn errors() {
        assert!(matches!(Gaussian::fit(&[vec![1.0]]), Err(LearnError::InsufficientData(1))));
        assert!(matches!(
            Gaussian::fit(&[vec![1.0], vec![1.0, 2.0]]),
            Err(LearnError::DimensionMismatch { index: 1, .. })
        ));
        assert!(matches!(Gaussian::fit(&[vec![1.0], vec![f64::NAN]]), Err(LearnError::NonFinite(1))));
    }

    #[test]
    fn standard_normal_density() {
        let g = Gaussian::new(vec![0.0], vec![vec![1.0]]).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((g.log_density(&[0.0]) - expected).abs() < 1e-12);
    }
}
