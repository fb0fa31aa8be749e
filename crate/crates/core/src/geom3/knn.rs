use nalgebra::Vector3;

use crate::scalar::Scalar;

/// Indices of the `k` nearest points in `sources` to `query`, sorted by
/// distance (ties by lowest index). `exclude` skips one source index, used
/// when the query is itself a member of the source set.
pub fn k_nearest<R: Scalar>(
    sources: &[Vector3<R>],
    query: &Vector3<R>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<usize> {
    let mut dists: Vec<(R, usize)> = sources
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    dists.truncate(k);
    dists.into_iter().map(|(_, i)| i).collect()
}
