use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Diagonal loading applied to both covariances before the matrix square root.
pub const FD_EPSILON: f64 = 1e-6;

/// Probability floor used by [`paired_kl`].
pub const KL_EPSILON: f64 = 1e-10;

fn gaussian_fit(set: &[Vec<f64>], eps: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(Error::Input(format!("Fréchet distance needs at least 2 vectors per set, got {}", set.len())));
    }
    let d = set[0].len();
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::Input("embedding sets must share one nonzero dimension".into()));
    }
    let n = set.len() as f64;
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    Ok((mean, cov))
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between Gaussian fits of two embedding sets,
/// `|μa - μb|² + Tr(Σa + Σb - 2 (Σa Σb)^½)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    frechet_distance_with(a, b, FD_EPSILON)
}

pub fn frechet_distance_with(a: &[Vec<f64>], b: &[Vec<f64>], eps: f64) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(a, eps)?;
    let (mu_b, cov_b) = gaussian_fit(b, eps)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Input(format!(
            "embedding dimensions differ: {} vs {}",
            mu_a.len(),
            mu_b.len()
        )));
    }
    // Tr((Σa Σb)^½) equals Tr((Σa^½ Σb Σa^½)^½), whose argument is symmetric.
    let root_a = psd_sqrt(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fd = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    if fd < -1e-6 {
        return Err(Error::Numeric(format!("Fréchet distance came out negative ({fd:e})")));
    }
    Ok(fd.max(0.0))
}

fn check_distribution(p: &[f64], which: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("{which} posterior is not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// `KL(p_ref ‖ p_est)` with both sides floored at `eps`.
pub fn paired_kl(p_ref: &[f64], p_est: &[f64], eps: f64) -> Result<f64> {
    if p_ref.len() != p_est.len() || p_ref.is_empty() {
        return Err(Error::Input(format!(
            "posteriors cover different label sets ({} vs {} classes)",
            p_ref.len(),
            p_est.len()
        )));
    }
    check_distribution(p_ref, "reference")?;
    check_distribution(p_est, "estimate")?;
    let kl: f64 = p_ref
        .iter()
        .zip(p_est)
        .map(|(&p, &q)| {
            let (p, q) = (p.max(eps), q.max(eps));
            p * (p / q).ln()
        })
        .sum();
    Ok(kl.max(0.0))
}

pub fn embedding_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("embedding dimensions differ: {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Numeric("cosine of a zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
