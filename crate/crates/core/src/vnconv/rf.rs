use crate::geom3::k_nearest;
use crate::Vec3;

/// Receptive field: for each point, the indices of its `m` nearest
/// neighbors and the relative directions `d_mn = x_m - x_n`.
#[derive(Debug, Clone)]
pub struct ReceptiveField {
    pub neighbors: Vec<Vec<usize>>,
    pub dirs: Vec<Vec<Vec3>>,
    pub unit_dirs: Vec<Vec<Vec3>>,
}

impl ReceptiveField {
    pub fn build(positions: &[Vec3], m: usize) -> Self {
        let m = m.min(positions.len().saturating_sub(1));
        let mut neighbors = Vec::with_capacity(positions.len());
        let mut dirs = Vec::with_capacity(positions.len());
        let mut unit_dirs = Vec::with_capacity(positions.len());
        for (i, p) in positions.iter().enumerate() {
            let nn = k_nearest(positions, p, m, Some(i));
            let d: Vec<Vec3> = nn.iter().map(|&j| positions[j] - p).collect();
            let u: Vec<Vec3> = d
                .iter()
                .map(|v| {
                    let n = v.norm();
                    if n < 1e-12 {
                        Vec3::zeros()
                    } else {
                        v / n
                    }
                })
                .collect();
            neighbors.push(nn);
            dirs.push(d);
            unit_dirs.push(u);
        }
        ReceptiveField {
            neighbors,
            dirs,
            unit_dirs,
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}
