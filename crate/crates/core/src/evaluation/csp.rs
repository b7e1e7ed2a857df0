use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{bail, Result};
use crate::signal::Trial;

pub const DEFAULT_FILTERS: usize = 6;
const RIDGE: f64 = 1e-6;

/// Trace-normalized spatial covariance `X Xᵀ / tr(X Xᵀ)` of one trial.
pub fn trial_covariance(t: &Trial) -> DMatrix<f64> {
    let (n_c, n_t) = (t.n_c(), t.n_t());
    let x = DMatrix::from_row_iterator(n_c, n_t, t.data().iter().map(|&v| v as f64));
    let c = &x * x.transpose();
    let tr = c.trace();
    if tr > 0.0 {
        c / tr
    } else {
        c
    }
}

/// Average covariance of each class.
pub fn class_covariances(trials: &[&Trial]) -> Result<[DMatrix<f64>; 2]> {
    let Some(first) = trials.first() else {
        bail!(BatchSize, "CSP needs training trials");
    };
    let n_c = first.n_c();
    let mut sums = [DMatrix::zeros(n_c, n_c), DMatrix::zeros(n_c, n_c)];
    let mut counts = [0usize; 2];
    for t in trials {
        if t.n_c() != n_c {
            bail!(Dimension, "CSP trials disagree on channel count: {n_c} vs {}", t.n_c());
        }
        sums[t.label()] += trial_covariance(t);
        counts[t.label()] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            bail!(Protocol, "CSP training set has no trials of class {c}");
        }
    }
    let [a, b] = sums;
    Ok([a / counts[0] as f64, b / counts[1] as f64])
}

/// Spatial filters as matrix columns, plus the generalized eigenvalue of
/// each (variance share of class 0).
#[derive(Clone, Debug)]
pub struct CspFilters {
    pub w: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Solves `Σ₀ w = λ (Σ₀ + Σ₁) w` by whitening the composite covariance and
/// diagonalizing the whitened class-0 covariance. Filters come back sorted by
/// descending eigenvalue; all of them satisfy `Wᵀ(Σ₀+Σ₁)W = I`.
pub fn csp_filters(sigma: &[DMatrix<f64>; 2]) -> Result<CspFilters> {
    let n_c = sigma[0].nrows();
    let mut composite = &sigma[0] + &sigma[1];
    let mut s0 = sigma[0].clone();
    let eig = SymmetricEigen::new(composite.clone());
    let tr = composite.trace();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * tr.max(f64::MIN_POSITIVE)) {
        let r = RIDGE * tr.max(1.0) / n_c as f64;
        warn!("singular CSP covariance (min eigenvalue {min:.3e}); adding ridge {r:.3e}");
        let eye = DMatrix::<f64>::identity(n_c, n_c);
        // Split the ridge across classes so the composite gets exactly `r`.
        s0 += &eye * (r / 2.0);
        composite += eye * r;
    }
    let eig = SymmetricEigen::new(composite);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        bail!(Numeric, "CSP composite covariance is not positive definite");
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let p = &inv_sqrt * eig.eigenvectors.transpose();
    let whitened = &p * s0 * p.transpose();
    let inner = SymmetricEigen::new((&whitened + whitened.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..n_c).collect();
    order.sort_by(|&a, &b| inner.eigenvalues[b].total_cmp(&inner.eigenvalues[a]));
    let full = p.transpose() * &inner.eigenvectors;
    let w = DMatrix::from_fn(n_c, n_c, |r, c| full[(r, order[c])]);
    let eigenvalues = order.iter().map(|&i| inner.eigenvalues[i]).collect();
    Ok(CspFilters { w, eigenvalues })
}

/// Keep `n_filters / 2` filters from each end of the spectrum, clamped to the
/// channel count (at least one per end).
pub fn select_filters(f: &CspFilters, n_filters: usize) -> DMatrix<f64> {
    let n_c = f.w.ncols();
    let per_end = (n_filters / 2).clamp(1, (n_c / 2).max(1));
    let mut cols: Vec<usize> = (0..per_end).collect();
    cols.extend((n_c - per_end..n_c).filter(|c| *c >= per_end));
    DMatrix::from_fn(n_c, cols.len(), |r, c| f.w[(r, cols[c])])
}

/// Normalized log-variance of each filtered signal.
pub fn log_variance_features(w: &DMatrix<f64>, t: &Trial) -> DVector<f64> {
    let x = DMatrix::from_row_iterator(t.n_c(), t.n_t(), t.data().iter().map(|&v| v as f64));
    let z = w.transpose() * x;
    let var: Vec<f64> = z.row_iter().map(|r| r.norm_squared()).collect();
    let total: f64 = var.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    DVector::from_iterator(var.len(), var.iter().map(|v| (v / total).max(1e-300).ln()))
}

/// Two-class Fisher discriminant: predict class 1 when `w·x > threshold`.
#[derive(Clone, Debug)]
pub struct Lda {
    pub w: DVector<f64>,
    pub threshold: f64,
}

impl Lda {
    pub fn fit(features: &[DVector<f64>], labels: &[usize]) -> Result<Self> {
        let d = features.first().map_or(0, |f| f.len());
        let mut mean = [DVector::zeros(d), DVector::zeros(d)];
        let mut n = [0usize; 2];
        for (f, &y) in features.iter().zip(labels) {
            mean[y] += f;
            n[y] += 1;
        }
        if n[0] == 0 || n[1] == 0 {
            bail!(Protocol, "LDA needs both classes, got counts {n:?}");
        }
        mean[0] /= n[0] as f64;
        mean[1] /= n[1] as f64;
        let mut sw = DMatrix::<f64>::zeros(d, d);
        for (f, &y) in features.iter().zip(labels) {
            let c = f - &mean[y];
            sw += &c * c.transpose();
        }
        sw /= (features.len() - 1).max(1) as f64;
        let ridge = RIDGE * sw.trace().max(1e-12) / d as f64;
        sw += DMatrix::identity(d, d) * ridge;
        let diff = &mean[1] - &mean[0];
        let Some(w) = sw.cholesky().map(|c| c.solve(&diff)) else {
            bail!(Numeric, "LDA within-class scatter is not positive definite");
        };
        let threshold = w.dot(&((&mean[0] + &mean[1]) * 0.5));
        Ok(Lda { w, threshold })
    }

    pub fn predict(&self, x: &DVector<f64>) -> usize {
        usize::from(self.w.dot(x) > self.threshold)
    }
}

/// Fitted CSP + LDA pipeline.
#[derive(Clone, Debug)]
pub struct CspLda {
    pub filters: DMatrix<f64>,
    pub lda: Lda,
}

impl CspLda {
    pub fn fit(train: &[&Trial], n_filters: usize) -> Result<Self> {
        let sigma = class_covariances(train)?;
        let filters = select_filters(&csp_filters(&sigma)?, n_filters);
        let feats: Vec<_> = train.iter().map(|t| log_variance_features(&filters, t)).collect();
        let labels: Vec<usize> = train.iter().map(|t| t.label()).collect();
        let lda = Lda::fit(&feats, &labels)?;
        Ok(CspLda { filters, lda })
    }

    pub fn predict(&self, t: &Trial) -> usize {
        self.lda.predict(&log_variance_features(&self.filters, t))
    }
}

/// Pooled CSP + LDA: fit on `train`, return accuracy on `test`.
pub fn csp_lda_baseline(train: &[&Trial], test: &[&Trial], n_filters: usize) -> Result<f64> {
    if test.is_empty() {
        bail!(BatchSize, "CSP baseline needs test trials");
    }
    let m = CspLda::fit(train, n_filters)?;
    let hits = test.iter().filter(|t| m.predict(t) == t.label()).count();
    Ok(hits as f64 / test.len() as f64)
}
