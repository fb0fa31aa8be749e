use nalgebra::Vector3;

use super::{Geom3Error, Rotation};
use crate::scalar::Scalar;

/// A finite rotation group with a precomputed Cayley table.
#[derive(Debug, Clone)]
pub struct RotationGroup<R: Scalar> {
    pub elements: Vec<Rotation<R>>,
    /// `cayley[i][j]` is the index of `elements[i] * elements[j]`.
    pub cayley: Vec<Vec<usize>>,
    /// Index of the inverse of each element.
    pub inverses: Vec<usize>,
}

impl<R: Scalar> RotationGroup<R> {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn identity_index(&self) -> usize {
        self.elements
            .iter()
            .position(|r| r.angle() < R::c(1e-9))
            .expect("group contains identity")
    }

    /// Index of the member closest to `r`, or an error if none is within
    /// angular distance 1e-9.
    pub fn index_of(&self, r: &Rotation<R>) -> Result<usize, Geom3Error> {
        let tol = R::c(1e-9);
        let mut best = (R::max_value().unwrap(), usize::MAX);
        for (i, e) in self.elements.iter().enumerate() {
            let d = e.angle_to(r);
            if d < best.0 {
                best = (d, i);
            }
        }
        if best.0 < tol {
            Ok(best.1)
        } else {
            Err(Geom3Error::GroupClosure)
        }
    }

    /// Multiplicative order of element `i`.
    pub fn element_order(&self, i: usize) -> usize {
        let id = self.identity_index();
        let mut cur = i;
        for n in 1..=self.len() {
            if cur == id {
                return n;
            }
            cur = self.cayley[cur][i];
        }
        unreachable!("element order exceeds group size");
    }

    fn from_elements(mut elements: Vec<Rotation<R>>) -> Result<Self, Geom3Error> {
        // Deterministic canonical order: angle, then axis lexicographically.
        elements.sort_by(|a, b| {
            let ka = sort_key(a);
            let kb = sort_key(b);
            ka.partial_cmp(&kb).unwrap()
        });
        let n = elements.len();
        let mut cayley = vec![vec![0usize; n]; n];
        let mut group = RotationGroup {
            elements,
            cayley: Vec::new(),
            inverses: vec![0; n],
        };
        for i in 0..n {
            for j in 0..n {
                let prod = group.elements[i].compose(&group.elements[j]);
                cayley[i][j] = group.index_of(&prod)?;
            }
        }
        group.cayley = cayley;
        let id = group.identity_index();
        for i in 0..n {
            group.inverses[i] = (0..n)
                .find(|&j| group.cayley[i][j] == id)
                .ok_or(Geom3Error::GroupClosure)?;
        }
        Ok(group)
    }
}

fn sort_key<R: Scalar>(r: &Rotation<R>) -> (f64, f64, f64, f64) {
    let a = r.axis();
    let to = |x: R| num_traits::NumCast::from(x).unwrap();
    (to(r.angle()), to(a.x), to(a.y), to(a.z))
}

/// The 60 proper rotations of the regular icosahedron, generated from a
/// 5-fold and a 2-fold generator and closed under composition.
pub fn icosahedral_group<R: Scalar>() -> RotationGroup<R> {
    let phi = (R::one() + R::c(5.0).sqrt()) / R::c(2.0);
    // 5-fold axis through the vertex (0, 1, phi); 2-fold axis along z
    // (an edge-midpoint axis for this vertex convention).
    let g5 = Rotation::from_axis_angle(
        &Vector3::new(R::zero(), R::one(), phi),
        R::two_pi() / R::c(5.0),
    );
    let g2 = Rotation::from_axis_angle(&Vector3::z(), R::pi());

    let tol = R::c(1e-9);
    let mut elements: Vec<Rotation<R>> = vec![Rotation::identity()];
    let mut frontier = vec![Rotation::identity()];
    while let Some(cur) = frontier.pop() {
        for g in [&g5, &g2] {
            let next = cur.compose(g);
            if !elements.iter().any(|e| e.angle_to(&next) < tol) {
                elements.push(next);
                frontier.push(next);
            }
        }
    }
    RotationGroup::from_elements(elements).expect("icosahedral group closes")
}
