//! Cholesky factorization and solve for symmetric positive definite systems.
//!
//! Both ridge normal-equation routes produce SPD systems whenever the
//! regularizer is positive (or the data has full rank), so a Cholesky solve
//! covers every case the decoder needs. A non-positive pivot means the system
//! is singular at working precision and is reported as such rather than
//! patched over.

use crate::matrix::Matrix;

/// Solves `A X = B` for SPD `A`, or returns `None` when `A` is not positive
/// definite at working precision.
pub(crate) fn cholesky_solve(a: &Matrix, b: &Matrix) -> Option<Matrix> {
    let factor = cholesky_factor(a)?;
    let n = a.rows();
    let mut x = b.clone();
    // Forward substitution: L Y = B, processing all right-hand sides at once.
    for i in 0..n {
        for k in 0..i {
            let l = factor.get(i, k);
            if l == 0.0 {
                continue;
            }
            let (head, tail) = x.data_mut().split_at_mut(i * b.cols());
            let yk = &head[k * b.cols()..(k + 1) * b.cols()];
            let yi = &mut tail[..b.cols()];
            for (v, w) in yi.iter_mut().zip(yk) {
                *v -= l * w;
            }
        }
        let d = factor.get(i, i);
        for v in x.row_mut(i) {
            *v /= d;
        }
    }
    // Back substitution: Lᵀ X = Y.
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let l = factor.get(k, i);
            if l == 0.0 {
                continue;
            }
            let (head, tail) = x.data_mut().split_at_mut(k * b.cols());
            let yi = &mut head[i * b.cols()..(i + 1) * b.cols()];
            let yk = &tail[..b.cols()];
            for (v, w) in yi.iter_mut().zip(yk) {
                *v -= l * w;
            }
        }
        let d = factor.get(i, i);
        for v in x.row_mut(i) {
            *v /= d;
        }
    }
    Some(x)
}

/// Lower-triangular Cholesky factor, or `None` if a pivot is non-positive or
/// non-finite.
fn cholesky_factor(a: &Matrix) -> Option<Matrix> {
    assert_eq!(a.rows(), a.cols(), "matrix must be square");
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let root = d.sqrt();
        l.set(j, j, root);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / root);
        }
    }
    Some(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_a_known_spd_system() {
        // A = [[4,2],[2,3]], b = [8, 7] has solution [1.25, 1.5].
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let b = Matrix::from_rows(&[vec![8.0], vec![7.0]]);
        let x = cholesky_solve(&a, &b).unwrap();
        assert!((x.get(0, 0) - 1.25).abs() < 1e-14);
        assert!((x.get(1, 0) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn identity_system_returns_rhs_exactly() {
        let a = Matrix::identity(3);
        let b = Matrix::from_rows(&[vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 6.0]]);
        let x = cholesky_solve(&a, &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn residual_vanishes_on_a_random_spd_system() {
        use crate::rng;
        let mut r = rng::stream(1, 0);
        let mut base = Matrix::zeros(6, 6);
        rng::fill_normal(&mut r, base.data_mut());
        let mut a = base.gram();
        a.add_scaled_identity(0.5);
        let mut b = Matrix::zeros(6, 2);
        rng::fill_normal(&mut r, b.data_mut());
        let x = cholesky_solve(&a, &b).unwrap();
        let residual = a.matmul(&x);
        for i in 0..6 {
            for j in 0..2 {
                assert!((residual.get(i, j) - b.get(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_matrix_is_detected() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        assert!(cholesky_solve(&a, &b).is_none());
    }

    #[test]
    fn indefinite_matrix_is_detected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        assert!(cholesky_solve(&a, &b).is_none());
    }
}
