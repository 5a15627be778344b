//! Scalar abstraction shared by the generic parts of the crate.
//!
//! Score transforms, the per-component anomalousness formulas, threshold
//! rules and evaluation metrics are written against [`Real`], so they run
//! on `f32` as well as `f64`. The variational fit and the samplers depend on
//! special functions and random distributions that only exist for `f64` and
//! are therefore concrete.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

/// Arithmetic mean; zero for an empty slice.
pub fn mean<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().sum::<T>() / T::of_usize(xs.len())
}

/// Standard deviation with `1/(n - ddof)` normalisation.
pub fn std_dev<T: Real>(xs: &[T], ddof: usize) -> T {
    if xs.len() <= ddof {
        return T::zero();
    }
    let m = mean(xs);
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    (ss / T::of_usize(xs.len() - ddof)).sqrt()
}

/// Linear-interpolation (type 7) quantile of an already sorted slice.
pub fn quantile_sorted<T: Real>(sorted: &[T], q: T) -> T {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    if n == 1 {
        return sorted[0];
    }
    let q = q.max(T::zero()).min(T::one());
    let h = T::of_usize(n - 1) * q;
    let lo = h.floor();
    let lo_idx = lo.to_usize().unwrap_or(0).min(n - 1);
    let hi_idx = (lo_idx + 1).min(n - 1);
    sorted[lo_idx] + (h - lo) * (sorted[hi_idx] - sorted[lo_idx])
}

/// Type 7 quantile of an unsorted slice.
pub fn quantile<T: Real>(xs: &[T], q: T) -> T {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("quantile input must not contain NaN"));
    quantile_sorted(&v, q)
}

pub fn median<T: Real>(xs: &[T]) -> T {
    quantile(xs, T::lit(0.5))
}
