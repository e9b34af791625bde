//! Per-class streaming feature covariance for class-aware sampling.
//!
//! Each class keeps `(n, mean, M2)`; batches are folded in with the pairwise
//! merge `M2 = M2_a + M2_b + δδᵀ·n_a n_b / n`, which is independent of how
//! the data was split into batches.

use nalgebra::{DMatrix, DVector};

use crate::array::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Row-major `D×D` sum of centered outer products.
    pub m2: Vec<f64>,
}

impl ClassStats {
    fn empty(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim * dim] }
    }

    /// Two-pass statistics of the given rows.
    fn from_rows(feats: &Array, rows: &[usize]) -> Self {
        let d = feats.cols();
        let n = rows.len();
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (m, x) in mean.iter_mut().zip(feats.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut m2 = vec![0.0; d * d];
        for &i in rows {
            let r = feats.row(i);
            for a in 0..d {
                let da = r[a] - mean[a];
                for b in 0..d {
                    m2[a * d + b] += da * (r[b] - mean[b]);
                }
            }
        }
        Self { count: n, mean, m2 }
    }

    fn merge(&mut self, other: &ClassStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let d = self.mean.len();
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for a in 0..d {
            for b in 0..d {
                self.m2[a * d + b] += other.m2[a * d + b] + delta[a] * delta[b] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.count += other.count;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCovarianceTracker {
    dim: usize,
    classes: Vec<ClassStats>,
}

impl ClassCovarianceTracker {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self { dim, classes: vec![ClassStats::empty(dim); num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stats(&self, class: usize) -> &ClassStats {
        &self.classes[class]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.count).collect()
    }

    /// Folds the features of each pseudo-class into its running statistics.
    pub fn update(&mut self, feats: &Array, pseudo_labels: &[usize]) -> Result<()> {
        if feats.cols() != self.dim || feats.rows() != pseudo_labels.len() {
            return Err(Error::ShapeMismatch {
                op: "update_covariances",
                left: feats.shape().to_vec(),
                right: vec![pseudo_labels.len(), self.dim],
            });
        }
        let mut members = vec![Vec::new(); self.classes.len()];
        for (i, &c) in pseudo_labels.iter().enumerate() {
            if c >= self.classes.len() {
                return Err(Error::IndexOutOfRange {
                    op: "update_covariances",
                    position: i,
                    index: c,
                    bound: self.classes.len(),
                });
            }
            members[c].push(i);
        }
        for (stats, rows) in self.classes.iter_mut().zip(&members) {
            if !rows.is_empty() {
                stats.merge(&ClassStats::from_rows(feats, rows));
            }
        }
        Ok(())
    }

    /// Unbiased covariance of a class, symmetrized; the identity when fewer
    /// than two samples have been seen.
    pub fn covariance(&self, class: usize) -> Vec<f64> {
        let d = self.dim;
        let s = &self.classes[class];
        if s.count < 2 {
            let mut eye = vec![0.0; d * d];
            (0..d).for_each(|i| eye[i * d + i] = 1.0);
            return eye;
        }
        let denom = (s.count - 1) as f64;
        let mut cov = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] = 0.5 * (s.m2[a * d + b] + s.m2[b * d + a]) / denom;
            }
        }
        cov
    }

    /// Lower-triangular factor of `Σ_k + λI`, with
    /// `λ = max(1e-8, 1e-6·tr(Σ_k)/D)` doubled up to 8 times on failure.
    pub fn factor(&self, class: usize) -> Result<DMatrix<f64>> {
        let d = self.dim;
        let cov = DMatrix::from_row_slice(d, d, &self.covariance(class));
        let trace = cov.trace();
        let mut jitter = (1e-6 * trace / d as f64).max(1e-8);
        for _ in 0..=8 {
            let jittered = &cov + DMatrix::identity(d, d) * jitter;
            if let Some(chol) = jittered.cholesky() {
                return Ok(chol.l());
            }
            jitter *= 2.0;
        }
        Err(Error::Factorization { class })
    }

    /// `L z` for a standard-normal vector `z`.
    pub fn correlate(factor: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
        (factor * DVector::from_column_slice(z)).iter().copied().collect()
    }
}
