use nalgebra::{DMatrix, SymmetricEigen};

use crate::{CurationError, Result};

/// A fitted principal-component projection.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit-length rows of length `d`, by decreasing eigenvalue. Each
    /// row's largest-magnitude entry is positive.
    pub components: Vec<Vec<f64>>,
    /// All `d` covariance eigenvalues, descending and clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Share of total variance per kept component.
    pub explained_variance_ratio: Vec<f64>,
    pub projected: Vec<Vec<f64>>,
}

impl Pca {
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v.iter().zip(&self.mean)).map(|(w, (x, m))| w * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, p: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &coef) in self.components.iter().zip(p) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += coef * w;
            }
        }
        out
    }
}

/// Projects mean-centered vectors onto the top `k` eigenvectors of their
/// sample covariance (divisor `n - 1`).
pub fn pca_reduce(vectors: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = vectors.len();
    if n < 2 {
        return Err(CurationError::Input(format!("pca needs at least 2 vectors, got {n}")));
    }
    let d = vectors[0].len();
    if k == 0 || k > d {
        return Err(CurationError::Config(format!("pca k = {k} must be in 1..={d}")));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(CurationError::Input("vectors have different lengths".into()));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(CurationError::Input("non-finite vector entry".into()));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&i| {
            let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let pivot = c.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if pivot < 0.0 {
                c.iter_mut().for_each(|x| *x = -*x);
            }
            c
        })
        .collect();
    let explained_variance_ratio = eigenvalues[..k]
        .iter()
        .map(|&e| if total > 0.0 { e / total } else { 0.0 })
        .collect();
    let mut pca = Pca {
        mean,
        components,
        eigenvalues,
        explained_variance_ratio,
        projected: Vec::new(),
    };
    pca.projected = vectors.iter().map(|v| pca.project(v)).collect();
    Ok(pca)
}
