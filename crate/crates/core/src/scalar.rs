//! Scalar abstraction for the math kernels: f32 or f64.

/// Real scalar the geometry kernels are generic over.
pub trait Scalar:
    nalgebra::RealField + Copy + num_traits::FromPrimitive + num_traits::NumCast
{
    /// Lift an `f64` constant into the scalar type.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
