//! Fréchet distance between Gaussians fitted to feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues down to this are treated as round-off and clipped to zero.
pub const EIGEN_CLIP: f64 = -1e-8;
/// Diagonal load added to both covariances when either is near-singular.
pub const REGULARIZATION_EPS: f64 = 1e-6;

/// Mean and (unbiased) covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianMoments {
    /// Fits moments to `features` (rows). Sums run in input order over
    /// mean-centred values in 64-bit.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Metric(format!("need at least 2 feature vectors for a covariance, got {n}")));
        }
        let d = features[0].len();
        if let Some(bad) = features.iter().position(|f| f.len() != d) {
            return Err(Error::Metric(format!("feature {bad} has dimension {}, expected {d}", features[bad].len())));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Metric("non-finite feature values".into()));
        }
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let c = DVector::from_column_slice(f) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov, count: n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetResult {
    pub distance: f64,
    /// Whether the diagonal load was applied.
    pub regularized: bool,
}

fn symmetric_sqrt(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(v) = eig.eigenvalues.iter().find(|&&v| v < EIGEN_CLIP * scale) {
        return Err(Error::Metric(format!("{what} is not positive semidefinite (eigenvalue {v:.3e})")));
    }
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok((&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose(), min))
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the cross term taken
/// as `tr((S1^(1/2) S2 S1^(1/2))^(1/2))`, which is symmetric and has the
/// same trace.
pub fn frechet_distance_detailed(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<FrechetResult> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Metric(format!(
            "moment dimensions disagree: {d}, {}, {:?}, {:?}",
            mu2.len(),
            s1.shape(),
            s2.shape()
        )));
    }
    let tol = 1e-8 * (1.0 + s1.amax().max(s2.amax()));
    if (s1 - s1.transpose()).amax() > tol || (s2 - s2.transpose()).amax() > tol {
        return Err(Error::Metric("covariance matrices must be symmetric".into()));
    }
    let (mut r1, min1) = symmetric_sqrt(s1, "first covariance")?;
    let (_, min2) = symmetric_sqrt(s2, "second covariance")?;
    let near_singular = |m: f64, s: &DMatrix<f64>| m <= 1e-12 * (1.0 + s.amax());
    let regularized = d > 1 && (near_singular(min1, s1) || near_singular(min2, s2));
    let (s1, s2) = if regularized {
        let load = DMatrix::identity(d, d) * REGULARIZATION_EPS;
        let a = s1 + &load;
        r1 = symmetric_sqrt(&a, "first covariance")?.0;
        (a, s2 + load)
    } else {
        (s1.clone(), s2.clone())
    };
    let inner = &r1 * &s2 * &r1;
    let cross = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    let diff = mu1 - mu2;
    let distance = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross;
    if !distance.is_finite() {
        return Err(Error::Metric("Fréchet distance is not finite".into()));
    }
    Ok(FrechetResult { distance: distance.max(0.0), regularized })
}

pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    frechet_distance_detailed(mu1, s1, mu2, s2).map(|r| r.distance)
}

pub fn moments_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<FrechetResult> {
    frechet_distance_detailed(&a.mean, &a.cov, &b.mean, &b.cov)
}
