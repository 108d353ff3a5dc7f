//! Small dense linear-algebra helpers shared by the filter, the backward
//! recursions and the samplers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

/// Relative eigenvalue cutoff used by [`psd_sqrt`].
pub const EIGEN_CUTOFF: f64 = 1e-12;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// If the plain factorization fails, a single jitter of
/// `1e-10 * trace / dim` is added to the diagonal before giving up.
pub fn spd_factor(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c);
    }
    let dim = m.nrows().max(1) as f64;
    let jitter = 1e-10 * m.trace().abs() / dim;
    if jitter == 0.0 || !jitter.is_finite() {
        return None;
    }
    let mut jittered = m.clone();
    for i in 0..m.nrows() {
        jittered[(i, i)] += jitter;
    }
    jittered.cholesky()
}

pub fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Rank-revealing square root of a symmetric PSD matrix: returns `C` with
/// `C C' = M`, keeping only eigen-directions with eigenvalue above
/// `EIGEN_CUTOFF * max_eigenvalue`. `C` may have zero columns.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrized(m.clone()));
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > EIGEN_CUTOFF * max)
        .collect();
    let mut c = DMatrix::zeros(n, keep.len());
    for (col, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for r in 0..n {
            c[(r, col)] = eig.eigenvectors[(r, i)] * s;
        }
    }
    c
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrized(m.clone()))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draw from `N(mean, precision^{-1})` given the Cholesky factor of the precision.
pub fn sample_from_precision<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    precision: &Cholesky<f64, Dyn>,
) -> DVector<f64> {
    let z = standard_normal_vec(rng, mean.len());
    // P = L L'  =>  L'^{-1} z ~ N(0, P^{-1})
    let lt = precision.l().transpose();
    let offset = lt
        .solve_upper_triangular(&z)
        .expect("triangular factor of a Cholesky decomposition is invertible");
    mean + offset
}

/// Log density of `N(mean, cov)` at `x`, computed from a Cholesky factor of `cov`.
pub fn mvn_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let c = spd_factor(cov)?;
    let d = x - mean;
    let sol = c.solve(&d);
    let k = x.len() as f64;
    Some(-0.5 * (k * (2.0 * std::f64::consts::PI).ln() + chol_log_det(&c) + d.dot(&sol)))
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}
