use nalgebra::{Matrix3, Vector3};

use super::Geom3Error;
use crate::scalar::Scalar;

/// SVD of a 3x3 matrix: `m == u * diag(s) * v^T` with `u`, `v` orthogonal
/// and singular values descending and non-negative.
pub fn svd3<R: Scalar>(m: &Matrix3<R>) -> Result<(Matrix3<R>, Vector3<R>, Matrix3<R>), Geom3Error> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Geom3Error::NonFinite);
    }
    let svd = nalgebra::SVD::new(*m, true, true);
    let u = svd.u.ok_or(Geom3Error::SvdFailed)?;
    let v_t = svd.v_t.ok_or(Geom3Error::SvdFailed)?;
    Ok((u, svd.singular_values, v_t.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identity() {
        let (_, s, _) = svd3(&Matrix3::<f64>::identity()).unwrap();
        assert!((s - Vector3::new(1.0, 1.0, 1.0)).norm() < 1e-14);
    }

    #[test]
    fn diagonal() {
        let (u, s, v) = svd3(&Matrix3::<f64>::from_diagonal(&Vector3::new(3.0, 2.0, 1.0))).unwrap();
        assert!((s - Vector3::new(3.0, 2.0, 1.0)).norm() < 1e-12);
        assert!((u * Matrix3::from_diagonal(&s) * v.transpose()
            - Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 1.0)))
        .norm()
            < 1e-12);
    }

    #[test]
    fn reconstructs_random() {
        let mut rng = StdRng::seed_from_u64(33);
        for _ in 0..100 {
            let m = Matrix3::<f64>::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let (u, s, v) = svd3(&m).unwrap();
            assert!((u * Matrix3::from_diagonal(&s) * v.transpose() - m).norm() < 1e-9);
            assert!((u.transpose() * u - Matrix3::identity()).norm() < 1e-10);
            assert!((v.transpose() * v - Matrix3::identity()).norm() < 1e-10);
            assert!(s.x >= s.y && s.y >= s.z && s.z >= 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Matrix3::<f64>::identity();
        m[(2, 2)] = f64::INFINITY;
        assert!(svd3(&m).is_err());
    }
}
