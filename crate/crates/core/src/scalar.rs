//! Floating point abstraction shared by the geometry, reward and network code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for the two implementors.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    #[inline]
    fn from_usize_exact(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sums `values` in fixed-size blocks and combines the block partials pairwise.
///
/// The grouping depends only on the length of the input, so the result is
/// bit-reproducible regardless of how the partials are produced.
pub fn fixed_tree_sum<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    const BLOCK: usize = 1024;
    let mut partials = Vec::new();
    let mut acc = T::zero();
    let mut n = 0;
    for v in values {
        acc += v;
        n += 1;
        if n == BLOCK {
            partials.push(acc);
            acc = T::zero();
            n = 0;
        }
    }
    if n > 0 || partials.is_empty() {
        partials.push(acc);
    }
    while partials.len() > 1 {
        partials = partials
            .chunks(2)
            .map(|c| if c.len() == 2 { c[0] + c[1] } else { c[0] })
            .collect();
    }
    partials[0]
}
