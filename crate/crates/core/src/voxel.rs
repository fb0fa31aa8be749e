//! Cubic voxel grid centered on an input point cloud.

use crate::Vec3;

/// An `h^3` grid of cells. The linear cell index is `(ix * h + iy) * h + iz`.
///
/// By construction the cube is centered on the cloud with side twice the
/// bounding-box diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    pub h: usize,
    pub origin: Vec3,
    pub side: f64,
    pub values: Vec<T>,
}

pub type LogitGrid = VoxelGrid<f64>;
pub type LabelGrid = VoxelGrid<bool>;

/// Axis-aligned bounding box of a cloud: (min, max).
pub fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::MAX);
    let mut hi = Vec3::repeat(f64::MIN);
    for p in points {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    (lo, hi)
}

impl<T: Clone + Default> VoxelGrid<T> {
    pub fn new(h: usize, origin: Vec3, side: f64) -> Self {
        VoxelGrid {
            h,
            origin,
            side,
            values: vec![T::default(); h * h * h],
        }
    }

    /// Grid covering a cloud: cube centered on the bounding-box center with
    /// side twice the bounding-box diagonal.
    pub fn fit(points: &[Vec3], h: usize) -> Self {
        let (lo, hi) = bounding_box(points);
        let center = (lo + hi) * 0.5;
        let side = 2.0 * (hi - lo).norm();
        VoxelGrid::new(h, center - Vec3::repeat(side * 0.5), side)
    }
}

impl<T> VoxelGrid<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cell_size(&self) -> f64 {
        self.side / self.h as f64
    }

    pub fn index_of(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.h + iy) * self.h + iz
    }

    /// Center coordinate of a cell by linear index.
    pub fn center(&self, idx: usize) -> Vec3 {
        let h = self.h;
        let iz = idx % h;
        let iy = (idx / h) % h;
        let ix = idx / (h * h);
        let cs = self.cell_size();
        self.origin + Vec3::new((ix as f64 + 0.5) * cs, (iy as f64 + 0.5) * cs, (iz as f64 + 0.5) * cs)
    }

    /// Linear cell index containing a point, or None if outside the cube.
    pub fn cell_of(&self, p: &Vec3) -> Option<usize> {
        let rel = (p - self.origin) / self.cell_size();
        let mut idx = [0usize; 3];
        for i in 0..3 {
            if rel[i] < 0.0 || rel[i] >= self.h as f64 {
                return None;
            }
            idx[i] = rel[i] as usize;
        }
        Some(self.index_of(idx[0], idx[1], idx[2]))
    }

    pub fn same_geometry<U>(&self, other: &VoxelGrid<U>) -> bool {
        self.h == other.h
            && (self.origin - other.origin).norm() < 1e-12
            && (self.side - other.side).abs() < 1e-12
    }

    pub fn with_values<U>(&self, values: Vec<U>) -> VoxelGrid<U> {
        assert_eq!(values.len(), self.len());
        VoxelGrid {
            h: self.h,
            origin: self.origin,
            side: self.side,
            values,
        }
    }
}
