//! Scalar abstraction so the whole engine can run in `f32` (normal use) or
//! `f64` (gradient checking).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

pub trait Real: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    /// Narrow (or pass through) an `f64` value.
    fn of(v: f64) -> Self;
    /// Widen to `f64`.
    fn wide(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn wide(self) -> f64 {
        self
    }
}
