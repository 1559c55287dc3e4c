use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` rows of length `d`, orthonormal.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn retained_variance(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }

    pub fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "PCA expects {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }

    pub fn inverse_row(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.k() {
            return Err(Error::DimensionMismatch(format!(
                "PCA expects {} coefficients, got {}",
                self.k(),
                coeffs.len()
            )));
        }
        let mut out = self.mean.clone();
        for (c, comp) in coeffs.iter().zip(&self.components) {
            for (o, v) in out.iter_mut().zip(comp) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    pub fn transform(&self, frames: &Mat) -> Result<Mat> {
        let mut out = Vec::with_capacity(frames.rows * self.k());
        for r in 0..frames.rows {
            let x: Vec<f64> = frames.row(r).iter().map(|&v| v as f64).collect();
            out.extend(self.transform_row(&x)?.into_iter().map(|v| v as f32));
        }
        Mat::new(frames.rows, self.k(), out)
    }

    pub fn inverse(&self, coeffs: &Mat) -> Result<Mat> {
        let mut out = Vec::with_capacity(coeffs.rows * self.dim());
        for r in 0..coeffs.rows {
            let c: Vec<f64> = coeffs.row(r).iter().map(|&v| v as f64).collect();
            out.extend(self.inverse_row(&c)?.into_iter().map(|v| v as f32));
        }
        Mat::new(coeffs.rows, self.dim(), out)
    }
}

/// Eigendecomposition of the sample covariance; the largest-magnitude entry
/// of each component is made positive.
pub fn pca_fit(data: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let n = data.len();
    let d = data.first().map_or(0, |r| r.len());
    if k == 0 || n <= k || k > d {
        return Err(Error::DegenerateData(format!(
            "PCA needs N > k >= 1 and k <= d, got N = {n}, k = {k}, d = {d}"
        )));
    }
    if data.iter().any(|r| r.len() != d) {
        return Err(Error::DimensionMismatch("ragged PCA input".into()));
    }
    let mut mean = vec![0.0; d];
    for r in data {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in data {
        for (c, (v, m)) in centered.iter_mut().zip(r.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total: f64 = cov.diagonal().iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateData("covariance is all zero".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut ratios = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let big = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[big] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        ratios.push(eig.eigenvalues[idx].max(0.0) / total);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance_ratio: ratios,
    })
}
