use nalgebra::{DMatrix, DVector};

use super::Geom3Error;
use crate::scalar::Scalar;

/// Symmetric eigendecomposition by cyclic Jacobi sweeps.
///
/// The input is symmetrized internally. Returns eigenvalues in ascending
/// order and the matching orthonormal eigenvectors as columns.
pub fn eigh_sym<R: Scalar>(m: &DMatrix<R>) -> Result<(DVector<R>, DMatrix<R>), Geom3Error> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "eigh_sym requires a square matrix");
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Geom3Error::NonFinite);
    }
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = (m[(i, j)] + m[(j, i)]) / R::c(2.0);
        }
    }
    let mut v = DMatrix::<R>::identity(n, n);

    let tol = R::c(1e-14) * a.norm().max(R::one());
    for _sweep in 0..100 {
        let mut off = R::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= tol * R::c(1e-2) {
                    continue;
                }
                // Classic Jacobi rotation annihilating a[(p, q)].
                let theta = (a[(q, q)] - a[(p, p)]) / (R::c(2.0) * apq);
                let t = {
                    let s = if theta >= R::zero() { R::one() } else { -R::one() };
                    s / (theta.abs() + (theta * theta + R::one()).sqrt())
                };
                let c = R::one() / (t * t + R::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap());
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &v.column(src));
    }
    Ok((eigenvalues, eigenvectors))
}
