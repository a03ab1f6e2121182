use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogate::normalize_stiffness;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// `(PC1, PC2)` per design.
    pub coords: Vec<[f64; 2]>,
    /// Variance fraction of every component, descending.
    pub explained: Vec<f64>,
    /// Unit loadings of PC1 and PC2.
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
    pub metric: Vec<f64>,
}

/// Projects log-normalized stiffness vectors onto the top two principal
/// axes of their covariance. Each axis is signed so that its first nonzero
/// loading is positive.
pub fn pca_project(designs: &[Vec<f64>], metric: &[f64]) -> Result<PcaResult> {
    let n = designs.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 3 designs, got {n}")));
    }
    if metric.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: metric.len() });
    }
    let dim = designs[0].len();
    if designs.iter().any(|d| d.len() != dim) {
        return Err(Error::InvalidArgument("designs differ in length".into()));
    }
    let x = DMatrix::from_fn(n, dim, |i, j| normalize_stiffness(designs[i][j]));
    let mean: Vec<f64> = (0..dim).map(|j| x.column(j).mean()).collect();
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if !(total > 0.0) || values[1] <= 1e-12 * values[0] {
        return Err(Error::Fit("design spread has rank below 2".into()));
    }
    let components: [Vec<f64>; 2] = std::array::from_fn(|c| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[c]).iter().copied().collect();
        let tol = 1e-12 * v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if v.iter().find(|x| x.abs() > tol).is_some_and(|x| *x < 0.0) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    });
    let coords = (0..n)
        .map(|i| {
            std::array::from_fn(|c| (0..dim).map(|j| centered[(i, j)] * components[c][j]).sum())
        })
        .collect();
    Ok(PcaResult {
        coords,
        explained: values.iter().map(|v| v / total).collect(),
        components,
        mean,
        metric: metric.to_vec(),
    })
}

impl PcaResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,pc1,pc2,metric\n");
        for (i, (c, m)) in self.coords.iter().zip(&self.metric).enumerate() {
            out.push_str(&format!("{i},{:e},{:e},{:e}\n", c[0], c[1], m));
        }
        out.push_str(&format!("# explained_pc1={:e}\n", self.explained[0]));
        out.push_str(&format!("# explained_pc2={:e}\n", self.explained[1]));
        out
    }
}
