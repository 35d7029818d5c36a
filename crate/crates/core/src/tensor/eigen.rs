//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Each rotation annihilates one off-diagonal pair `(p, q)`; sweeping all pairs
//! repeatedly drives the off-diagonal mass to zero. Accumulating the rotations
//! gives the eigenvectors. The method is slow for large `n` compared to
//! tridiagonal QR, but it is simple and very accurate, and the matrices handled
//! here are at most a few hundred rows.

use super::mat::Mat;
use crate::error::{FopError, Result};

const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct EigenResult {
    /// Sorted in descending order.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, ordered like `eigenvalues`.
    pub eigenvectors: Mat,
}

impl EigenResult {
    pub fn min(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// `Q Λ Qᵀ`
    pub fn reconstruct(&self) -> Mat {
        let q = &self.eigenvectors;
        let mut ql = q.clone();
        for r in 0..ql.rows() {
            for (v, l) in ql.row_mut(r).iter_mut().zip(&self.eigenvalues) {
                *v *= l;
            }
        }
        ql.matmul_t(q).expect("square")
    }
}

fn check_symmetric(a: &Mat) -> Result<()> {
    if !a.is_square() {
        return Err(FopError::Contract(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let tol = 1e-9 * a.frobenius_norm().max(1.0);
    let asym = a.asymmetry();
    if !(asym < tol) {
        return Err(FopError::Contract(format!(
            "matrix is not symmetric: ‖A − Aᵀ‖_F = {asym:e}"
        )));
    }
    if !a.is_finite() {
        return Err(FopError::NonFinite("eigendecomposition input"));
    }
    Ok(())
}

/// Full decomposition `A = Q Λ Qᵀ` of a symmetric matrix.
pub fn sym_eigendecompose(a: &Mat) -> Result<EigenResult> {
    check_symmetric(a)?;
    let (vals, vt) = jacobi(a, true);
    let vt = vt.expect("vectors requested");
    let n = a.rows();
    let order = descending_order(&vals);
    let mut q = Mat::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        // row `src` of Vᵀ is the eigenvector for vals[src]
        for (r, &v) in vt.row(src).iter().enumerate() {
            q[(r, col)] = v;
        }
    }
    Ok(EigenResult {
        eigenvalues: order.iter().map(|&i| vals[i]).collect(),
        eigenvectors: q,
    })
}

/// Eigenvalues only, sorted descending. Skips the eigenvector accumulation.
pub fn sym_eigenvalues(a: &Mat) -> Result<Vec<f64>> {
    check_symmetric(a)?;
    let (vals, _) = jacobi(a, false);
    let order = descending_order(&vals);
    Ok(order.iter().map(|&i| vals[i]).collect())
}

/// `λ_max` of a symmetric positive semi-definite matrix, i.e. its spectral norm.
pub fn spectral_norm_psd(a: &Mat) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(sym_eigenvalues(a)?[0])
}

fn descending_order(vals: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    order
}

/// Returns the unsorted eigenvalues and, if requested, `Vᵀ` whose rows are the eigenvectors.
fn jacobi(input: &Mat, want_vectors: bool) -> (Vec<f64>, Option<Mat>) {
    let n = input.rows();
    // symmetrize so tiny asymmetries do not bias the rotations
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = 0.5 * (input[(i, j)] + input[(j, i)]);
        }
    }
    let mut vt = want_vectors.then(|| Mat::identity(n));
    let scale = a.frobenius_norm();
    if n < 2 || scale == 0.0 {
        return (a.diag(), vt);
    }
    let target = 1e-15 * scale;

    for sweep in 0..MAX_SWEEPS {
        let off = off_diagonal_norm(&a);
        if off <= target {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // after a few sweeps, drop elements too small to change the diagonal
                if sweep > 3
                    && (app.abs() + 100.0 * apq.abs() == app.abs())
                    && (aqq.abs() + 100.0 * apq.abs() == aqq.abs())
                {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, p, q, c, s);
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                if let Some(v) = vt.as_mut() {
                    rotate_rows(v, p, q, c, s);
                }
            }
        }
    }
    (a.diag(), vt)
}

fn off_diagonal_norm(a: &Mat) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += 2.0 * a[(i, j)] * a[(i, j)];
        }
    }
    s.sqrt()
}

/// `A ← Jᵀ A J` for the plane rotation `J` in `(p, q)`.
fn rotate(a: &mut Mat, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    // columns p and q
    let data = a.data_mut();
    for k in 0..n {
        let akp = data[k * n + p];
        let akq = data[k * n + q];
        data[k * n + p] = c * akp - s * akq;
        data[k * n + q] = s * akp + c * akq;
    }
    rotate_rows(a, p, q, c, s);
}

fn rotate_rows(a: &mut Mat, p: usize, q: usize, c: f64, s: f64) {
    let n = a.cols();
    let (head, tail) = a.data_mut().split_at_mut(q * n);
    let row_p = &mut head[p * n..(p + 1) * n];
    let row_q = &mut tail[..n];
    for (x, y) in row_p.iter_mut().zip(row_q.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_mat, Rng};

    fn orthonormality_error(q: &Mat) -> f64 {
        q.t_matmul(q)
            .unwrap()
            .sub(&Mat::identity(q.cols()))
            .unwrap()
            .frobenius_norm()
    }

    #[test]
    fn diagonal_sorted_descending() {
        let r = sym_eigendecompose(&Mat::from_diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(r.eigenvalues, vec![3.0, 2.0, 1.0]);
        assert!(orthonormality_error(&r.eigenvectors) < 1e-15);
    }

    #[test]
    fn identity_four() {
        let r = sym_eigendecompose(&Mat::identity(4)).unwrap();
        assert_eq!(r.eigenvalues, vec![1.0; 4]);
        assert!(orthonormality_error(&r.eigenvectors) < 1e-15);
    }

    #[test]
    fn two_by_two_from_characteristic_polynomial() {
        // λ² − 4λ + 3 = 0
        let a = Mat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        let r = sym_eigendecompose(&a).unwrap();
        assert!((r.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((r.eigenvalues[1] - 1.0).abs() < 1e-14);
        assert!((spectral_norm_psd(&a).unwrap() - 3.0).abs() < 1e-14);
    }

    #[test]
    fn spectral_norm_examples() {
        assert_eq!(spectral_norm_psd(&Mat::from_diag(&[4.0, 1.0])).unwrap(), 4.0);
        assert_eq!(spectral_norm_psd(&Mat::identity(5)).unwrap(), 1.0);
        let skew = Mat::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap();
        assert!(matches!(spectral_norm_psd(&skew), Err(FopError::Contract(_))));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(sym_eigendecompose(&Mat::zeros(2, 3)).is_err());
        let a = Mat::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eigendecompose(&a), Err(FopError::Contract(_))));
    }

    #[test]
    fn random_symmetric_reconstruction() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(seed);
            let n = 1 + (seed as usize * 7) % 40;
            let b = gaussian_mat(n, n, 1.0, &mut rng).unwrap();
            let a = b.add(&b.transpose()).unwrap();
            let r = sym_eigendecompose(&a).unwrap();
            assert_eq!(r.eigenvalues.len(), n);
            assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            assert!(orthonormality_error(&r.eigenvectors) < 1e-9);
            let rec = r.reconstruct().sub(&a).unwrap().frobenius_norm();
            assert!(rec < 1e-8 * a.frobenius_norm(), "seed {seed}: {rec}");
            let vals = sym_eigenvalues(&a).unwrap();
            for (x, y) in vals.iter().zip(&r.eigenvalues) {
                assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn repeated_and_zero_eigenvalues() {
        let mut rng = Rng::new(11);
        let m = gaussian_mat(12, 3, 1.0, &mut rng).unwrap();
        let p = m.gram_outer();
        let vals = sym_eigenvalues(&p).unwrap();
        for v in &vals[3..] {
            assert!(v.abs() < 1e-12);
        }
    }
}
