//! Dense linear-algebra helpers shared by the estimators.
//!
//! Everything here works on `nalgebra` dynamic matrices. The only routine
//! that is not a thin wrapper is [`PivotedQr`], a Householder QR with
//! column-norm pivoting used for rank-revealing least squares.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MegaError, Result};

/// Largest condition number accepted before an SPD solve is refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Column covariance of `data` (rows are observations) with denominator `n - ddof`.
pub fn covariance(data: &DMatrix<f64>, ddof: usize) -> DMatrix<f64> {
    let n = data.nrows();
    let means = data.row_mean();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    let mut cov = centered.transpose() * &centered / (n - ddof) as f64;
    symmetrize(&mut cov);
    cov
}

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

/// Eigen-decomposition of a symmetric matrix with eigenvalues in descending order.
///
/// Column `i` of the returned matrix is the eigenvector of `values[i]`.
pub fn eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Ratio of extreme eigenvalues; infinite when the smallest is not positive.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let (values, _) = eigen_desc(m);
    let max = values[0];
    let min = values[values.len() - 1];
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `m x = b` for symmetric positive-definite `m` through Cholesky.
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let cond = condition_number(m);
    if !(cond < MAX_CONDITION) {
        return Err(MegaError::IllConditioned { condition: cond });
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or(MegaError::IllConditioned { condition: cond })?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive-definite matrix through Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cond = condition_number(m);
    if !(cond < MAX_CONDITION) {
        return Err(MegaError::IllConditioned { condition: cond });
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or(MegaError::IllConditioned { condition: cond })?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix.
///
/// Eigenvalues below `rel_tol * max_eigenvalue` are treated as zero.
pub fn pinv_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let (values, vectors) = eigen_desc(m);
    let cutoff = rel_tol * values[0].abs().max(f64::MIN_POSITIVE);
    let mut out = DMatrix::zeros(n, n);
    for (k, &v) in values.iter().enumerate() {
        if v > cutoff {
            let col = vectors.column(k);
            out += col * col.transpose() / v;
        }
    }
    out
}

/// Log-determinant and inverse of an SPD matrix, or `None` if Cholesky fails.
pub fn logdet_inverse(m: &DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
    let chol = m.clone().cholesky()?;
    let l = chol.l_dirty();
    let mut logdet = 0.0;
    for i in 0..m.nrows() {
        logdet += 2.0 * l[(i, i)].ln();
    }
    Some((logdet, chol.inverse()))
}

/// Householder QR with column-norm pivoting (Businger-Golub).
///
/// `X P = Q R` with `|R[0,0]| >= |R[1,1]| >= ...`, which makes the numerical
/// rank visible on the diagonal of `R`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Householder vectors below the diagonal, `R` on and above it.
    packed: DMatrix<f64>,
    tau: Vec<f64>,
    /// `perm[j]` is the original column index at pivot position `j`.
    pub perm: Vec<usize>,
    pub rank: usize,
}

impl PivotedQr {
    /// Factorizes `x`; columns whose residual norm falls below
    /// `rel_tol * ||x||_F` are counted as rank-deficient.
    pub fn new(x: &DMatrix<f64>, rel_tol: f64) -> Self {
        let (n, p) = x.shape();
        let mut a = x.clone();
        let mut perm: Vec<usize> = (0..p).collect();
        let mut tau = vec![0.0; p.min(n)];
        let tol = rel_tol * x.norm();
        let mut norms: Vec<f64> = (0..p).map(|j| a.column(j).norm_squared()).collect();
        let mut rank = 0;

        for k in 0..p.min(n) {
            // Recompute the trailing norms exactly; downdating loses accuracy on
            // nearly collinear designs and p is small here.
            for (j, norm) in norms.iter_mut().enumerate().skip(k) {
                *norm = a.view((k, j), (n - k, 1)).norm_squared();
            }
            let (best, best_norm) = (k..p)
                .map(|j| (j, norms[j]))
                .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            if best != k {
                a.swap_columns(k, best);
                perm.swap(k, best);
                norms.swap(k, best);
            }
            let alpha_norm = best_norm.sqrt();
            if alpha_norm <= tol {
                break;
            }
            rank += 1;

            let x0 = a[(k, k)];
            let alpha = if x0 >= 0.0 { -alpha_norm } else { alpha_norm };
            let v0 = x0 - alpha;
            for i in (k + 1)..n {
                a[(i, k)] /= v0;
            }
            tau[k] = (alpha - x0) / alpha;
            a[(k, k)] = alpha;

            for j in (k + 1)..p {
                let mut dot = a[(k, j)];
                for i in (k + 1)..n {
                    dot += a[(i, k)] * a[(i, j)];
                }
                let s = tau[k] * dot;
                a[(k, j)] -= s;
                for i in (k + 1)..n {
                    let vik = a[(i, k)];
                    a[(i, j)] -= s * vik;
                }
            }
        }

        PivotedQr {
            packed: a,
            tau,
            perm,
            rank,
        }
    }

    pub fn ncols(&self) -> usize {
        self.packed.ncols()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.ncols()
    }

    /// Original index of the first column judged collinear, if any.
    pub fn first_deficient_column(&self) -> Option<usize> {
        (!self.is_full_rank()).then(|| self.perm[self.rank])
    }

    /// Applies `Q^T` to `y`.
    fn qt_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.packed.nrows();
        let mut out = y.clone();
        for k in 0..self.rank {
            let mut dot = out[k];
            for i in (k + 1)..n {
                dot += self.packed[(i, k)] * out[i];
            }
            let s = self.tau[k] * dot;
            out[k] -= s;
            for i in (k + 1)..n {
                out[i] -= s * self.packed[(i, k)];
            }
        }
        out
    }

    /// Upper-triangular `R` restricted to the leading rank block.
    fn r(&self) -> DMatrix<f64> {
        let r = self.rank;
        DMatrix::from_fn(r, r, |i, j| if j >= i { self.packed[(i, j)] } else { 0.0 })
    }

    /// Least-squares coefficients in the original column order.
    ///
    /// Requires full column rank.
    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let p = self.ncols();
        let qty = self.qt_mul(y);
        let rhs = qty.rows(0, self.rank).into_owned();
        let z = self
            .r()
            .solve_upper_triangular(&rhs)
            .expect("R has a nonzero diagonal on the rank block");
        let mut beta = DVector::zeros(p);
        for (j, &orig) in self.perm.iter().take(self.rank).enumerate() {
            beta[orig] = z[j];
        }
        beta
    }

    /// `(X^T X)^{-1}` in the original column order, from `R^{-1} R^{-T}`.
    pub fn xtx_inverse(&self) -> DMatrix<f64> {
        let p = self.ncols();
        let r = self.r();
        let rinv = r
            .solve_upper_triangular(&DMatrix::identity(self.rank, self.rank))
            .expect("R has a nonzero diagonal on the rank block");
        let inner = &rinv * rinv.transpose();
        let mut out = DMatrix::zeros(p, p);
        for a in 0..self.rank {
            for b in 0..self.rank {
                out[(self.perm[a], self.perm[b])] = inner[(a, b)];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_of_shifted_copy_equals_variance() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 4.0, 2.0, 5.0, 4.0, 7.0, 7.0, 10.0]);
        let cov = covariance(&x, 1);
        assert!((cov[(0, 1)] - cov[(0, 0)]).abs() < 1e-12);
        assert!((cov[(1, 1)] - cov[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn eigen_desc_is_sorted() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0]);
        let (v, _) = eigen_desc(&m);
        assert_eq!(v, vec![5.0, 2.0, 1.0]);
    }

    #[test]
    fn spd_solve_rejects_singular() {
        let m = DMatrix::from_element(2, 2, 1.0);
        let b = DVector::from_element(2, 1.0);
        assert!(matches!(spd_solve(&m, &b), Err(MegaError::IllConditioned { .. })));
    }

    #[test]
    fn pivoted_qr_matches_normal_equations() {
        let x = DMatrix::from_fn(20, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 + (j as f64) * 0.5 + (i as f64).sin());
        let y = DVector::from_fn(20, |i, _| (i as f64).cos() * 3.0 + i as f64);
        let qr = PivotedQr::new(&x, 1e-10);
        assert!(qr.is_full_rank());
        let beta = qr.solve(&y);
        let xtx = x.transpose() * &x;
        let direct = xtx.clone().lu().solve(&(x.transpose() * &y)).unwrap();
        assert!((beta - direct).amax() < 1e-9);
        let inv = qr.xtx_inverse();
        assert!((inv * xtx - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn pivoted_qr_flags_collinear_column() {
        let x = DMatrix::from_fn(10, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64 + 3.0,
        });
        let qr = PivotedQr::new(&x, 1e-10);
        assert_eq!(qr.rank, 2);
        assert!(qr.first_deficient_column().is_some());
    }

    #[test]
    fn pinv_of_rank_one() {
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let m = &v * v.transpose();
        let p = pinv_symmetric(&m, 1e-12);
        let back = &m * &p * &m;
        assert!((back - m).amax() < 1e-12);
    }
}
