//! Empirical orthogonal functions: a fixed spatial basis from the leading
//! right-singular vectors of the centered data matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default retention threshold on the fraction of variance explained.
pub const DEFAULT_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct EofBasis {
    /// p x k, orthonormal columns.
    pub theta: DMatrix<f64>,
    /// Fraction of total variance explained by each retained column.
    pub explained: Vec<f64>,
    /// Temporal mean of every series.
    pub col_means: DVector<f64>,
    /// Standard deviation of every series when the basis was built on
    /// standardized data.
    pub col_scales: Option<DVector<f64>>,
    /// All squared singular values, in decreasing order.
    pub singular_sq: Vec<f64>,
}

impl EofBasis {
    pub fn k(&self) -> usize {
        self.theta.ncols()
    }

    /// Apply the centering (and scaling) used to build the basis.
    pub fn prepare(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.ncols() != self.col_means.len() {
            return Err(Error::dim("data columns", self.col_means.len(), data.ncols()));
        }
        let mut out = data.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.col_means[j]);
            if let Some(s) = &self.col_scales {
                col /= s[j];
            }
        }
        Ok(out)
    }
}

/// Leading EOFs of `data` (n x p). Keeps the largest `k <= k_max` whose k-th
/// fraction of explained variance is at least `threshold`. With
/// `standardize`, each series is scaled to unit variance first.
pub fn compute_eof(data: &DMatrix<f64>, threshold: f64, k_max: usize, standardize: bool) -> Result<EofBasis> {
    let (n, p) = data.shape();
    if n < 2 || p < 1 {
        return Err(Error::InvalidParameter(format!("need at least 2 time points and 1 series, got {n} x {p}")));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!("threshold {threshold} is outside [0, 1]")));
    }
    let col_means = DVector::from_fn(p, |j, _| data.column(j).mean());
    let col_scales = if standardize {
        let s = DVector::from_fn(p, |j, _| {
            let m = col_means[j];
            (data.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        if let Some(j) = s.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::DegenerateBasis(format!("series {} is constant and cannot be standardized", j + 1)));
        }
        Some(s)
    } else {
        None
    };
    let mut basis = EofBasis {
        theta: DMatrix::zeros(p, 0),
        explained: Vec::new(),
        col_means,
        col_scales,
        singular_sq: Vec::new(),
    };
    let x = basis.prepare(data)?;
    let total = x.norm_squared();
    if !(total > 0.0) {
        return Err(Error::DegenerateBasis("data have zero variance".into()));
    }

    // right-singular vectors either directly from X'X or, when p > n, from
    // the left ones of the n x n Gram matrix: v = X'u / s
    let small = if p <= n { x.transpose() * &x } else { &x * x.transpose() };
    let eig = SymmetricEigen::new(small);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let singular_sq: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let explained_all: Vec<f64> = singular_sq.iter().map(|s| s / total).collect();
    let k = explained_all
        .iter()
        .take(k_max.min(n.min(p)))
        .take_while(|&&e| e >= threshold && e > 1e-12)
        .count();
    if k == 0 {
        return Err(Error::DegenerateBasis(format!(
            "no component explains at least {threshold} of the variance"
        )));
    }
    let mut theta = DMatrix::zeros(p, k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let v: DVector<f64> = if p <= n {
            eig.eigenvectors.column(i).into_owned()
        } else {
            let u = eig.eigenvectors.column(i);
            let v = x.transpose() * u;
            let norm = v.norm();
            v / norm
        };
        let (imax, _) = v.iter().enumerate().fold((0, 0.0), |acc, (j, &e)| if e.abs() > acc.1 { (j, e.abs()) } else { acc });
        let sign = if v[imax] < 0.0 { -1.0 } else { 1.0 };
        theta.set_column(c, &(v * sign));
    }
    basis.theta = theta;
    basis.explained = explained_all[..k].to_vec();
    basis.singular_sq = singular_sq;
    Ok(basis)
}
