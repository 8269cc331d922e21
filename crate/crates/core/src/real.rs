//! Floating-point abstraction so the model can run in `f32` (training) and `f64`
//! (gradient checks) from one implementation.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag used in checkpoints.
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// `e^x`; the `f32` version is a branch-free polynomial that vectorizes.
    fn exp_fast(self) -> Self;

    /// `tanh(x)` built on [`Real::exp_fast`].
    #[inline]
    fn tanh_fast(self) -> Self {
        let two = Self::one() + Self::one();
        Self::one() - two / ((two * self).exp_fast() + Self::one())
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    /// Range reduction `x = k·ln2 + r`, degree-6 polynomial for `e^r`
    /// (relative error about 2e-7), then scaling by `2^k`.
    #[inline]
    fn exp_fast(self) -> Self {
        const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
        let x = self.clamp(-87.0, 88.0);
        let k = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
        let r = x - k * 0.693_359_4 + k * 2.121_944_4e-4;
        let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
            + 1.666_666_5e-1)
            * r
            + 5.000_000_1e-1;
        let y = p * r * r + r + 1.0;
        f32::from_bits(((k as i32 + 127) << 23) as u32) * y
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}
