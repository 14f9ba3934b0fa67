use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points projected onto the leading principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    /// One row per input point, `out_dim` coordinates each.
    pub points: Vec<Vec<f64>>,
    /// Share of total variance per axis, descending.
    pub explained_variance_ratio: Vec<f64>,
    /// Unit principal axes in input space.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Mean-centred PCA through a symmetric eigendecomposition.
///
/// Decomposes the d x d covariance, or the n x n Gram matrix when there are
/// fewer points than dimensions; both share the non-zero spectrum. Each axis
/// is signed so that its largest-magnitude entry is positive.
pub fn pca_project<P: AsRef<[f64]>>(points: &[P], out_dim: usize) -> Result<PcaProjection> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 points, got {n}")));
    }
    let d = points[0].as_ref().len();
    if let Some(bad) = points.iter().find(|p| p.as_ref().len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.as_ref().len(),
        });
    }
    if out_dim == 0 || out_dim > d {
        return Err(Error::invalid(format!("out_dim must be in 1..={d}")));
    }

    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p.as_ref()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| points[i].as_ref()[j] - mean[j]);
    let scale = 1.0 / (n as f64 - 1.0);

    let (values, axes) = if n <= d {
        let gram = (&centered * centered.transpose()) * scale;
        let eig = SymmetricEigen::new(gram);
        let order = descending(&eig.eigenvalues);
        let mut axes = Vec::with_capacity(out_dim);
        for &i in order.iter().take(out_dim) {
            let v = centered.transpose() * eig.eigenvectors.column(i);
            let norm = v.norm();
            axes.push(if norm > 0.0 {
                (v / norm).iter().copied().collect()
            } else {
                vec![0.0; d]
            });
        }
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        (values, axes)
    } else {
        let cov = (centered.transpose() * &centered) * scale;
        let eig = SymmetricEigen::new(cov);
        let order = descending(&eig.eigenvalues);
        let axes = order
            .iter()
            .take(out_dim)
            .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
            .collect();
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        (values, axes)
    };

    let total: f64 = values.iter().sum();
    let explained_variance_ratio = values
        .iter()
        .take(out_dim)
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let components: Vec<Vec<f64>> = axes.into_iter().map(orient).collect();
    let projected = points
        .iter()
        .map(|p| {
            components
                .iter()
                .map(|axis| {
                    axis.iter()
                        .zip(p.as_ref())
                        .zip(&mean)
                        .map(|((a, x), m)| a * (x - m))
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(PcaProjection {
        points: projected,
        explained_variance_ratio,
        components,
        mean,
    })
}

fn descending(values: &nalgebra::DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

fn orient(mut axis: Vec<f64>) -> Vec<f64> {
    let mut pivot = 0;
    for (i, v) in axis.iter().enumerate() {
        if v.abs() > axis[pivot].abs() {
            pivot = i;
        }
    }
    if axis[pivot] < 0.0 {
        axis.iter_mut().for_each(|v| *v = -*v);
    }
    axis
}
