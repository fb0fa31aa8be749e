use nalgebra::Vector3;

use super::Geom3Error;
use crate::scalar::Scalar;

/// Deterministic farthest point sampling.
///
/// The seed is always index 0; each subsequent pick maximizes the minimum
/// distance to the already-selected set, ties broken by lowest index.
pub fn farthest_point_sampling<R: Scalar>(
    points: &[Vector3<R>],
    m: usize,
) -> Result<Vec<usize>, Geom3Error> {
    if points.is_empty() {
        return Err(Geom3Error::EmptyPointSet);
    }
    if m > points.len() || m == 0 {
        return Err(Geom3Error::TooManySamples {
            requested: m,
            available: points.len(),
        });
    }
    let n = points.len();
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_dist: Vec<R> = vec![R::max_value().unwrap(); n];
    let mut current = 0usize;
    selected.push(current);
    taken[current] = true;
    for _ in 1..m {
        let mut best = (R::min_value().unwrap(), usize::MAX);
        for i in 0..n {
            let d = (points[i] - points[current]).norm_squared();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if !taken[i] && min_dist[i] > best.0 {
                best = (min_dist[i], i);
            }
        }
        current = best.1;
        selected.push(current);
        taken[current] = true;
    }
    Ok(selected)
}
