//! Scalar arithmetic the plaintext layers are generic over.

use std::fmt;
use std::marker::PhantomData;

use num_traits::Float;

use crate::error::Result;
use crate::ring::FixedConfig;

/// Element arithmetic for plaintext layers.
///
/// Products are formed at double scale with `mul_wide`, summed with `add`,
/// and brought back with one `rescale`, so a fixed-point dot product is
/// truncated once per output.
pub trait Arith: Clone + Send + Sync + fmt::Debug + 'static {
    type Elem: Copy + PartialEq + fmt::Debug + Send + Sync + 'static;

    fn zero(&self) -> Self::Elem;
    fn add(&self, a: Self::Elem, b: Self::Elem) -> Self::Elem;
    fn sub(&self, a: Self::Elem, b: Self::Elem) -> Self::Elem;
    fn mul_wide(&self, a: Self::Elem, b: Self::Elem) -> Self::Elem;
    fn rescale(&self, wide: Self::Elem) -> Self::Elem;
    /// Division by a positive integer, rounded to nearest.
    fn div_int(&self, a: Self::Elem, k: usize) -> Self::Elem;
    fn non_negative(&self, a: Self::Elem) -> bool;
    fn greater(&self, a: Self::Elem, b: Self::Elem) -> bool;
    fn from_f64(&self, x: f64) -> Result<Self::Elem>;
    fn to_f64(&self, a: Self::Elem) -> f64;

    fn mul(&self, a: Self::Elem, b: Self::Elem) -> Self::Elem {
        self.rescale(self.mul_wide(a, b))
    }
}

/// Fixed-point arithmetic in Z_{2^n}; elements are raw ring words.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedArith {
    pub cfg: FixedConfig,
}

impl FixedArith {
    pub fn new(cfg: FixedConfig) -> Self {
        Self { cfg }
    }
}

impl Arith for FixedArith {
    type Elem = u64;

    #[inline]
    fn zero(&self) -> u64 {
        0
    }

    #[inline]
    fn add(&self, a: u64, b: u64) -> u64 {
        a.wrapping_add(b) & self.cfg.mask()
    }

    #[inline]
    fn sub(&self, a: u64, b: u64) -> u64 {
        a.wrapping_sub(b) & self.cfg.mask()
    }

    #[inline]
    fn mul_wide(&self, a: u64, b: u64) -> u64 {
        a.wrapping_mul(b) & self.cfg.mask()
    }

    #[inline]
    fn rescale(&self, wide: u64) -> u64 {
        self.cfg.round_shift_raw(wide)
    }

    fn div_int(&self, a: u64, k: usize) -> u64 {
        let v = self.cfg.to_signed(a) as i128;
        let k = k as i128;
        let q = if v >= 0 { (2 * v + k) / (2 * k) } else { -((-2 * v + k) / (2 * k)) };
        self.cfg.from_signed(q as i64)
    }

    #[inline]
    fn non_negative(&self, a: u64) -> bool {
        !self.cfg.msb(a)
    }

    #[inline]
    fn greater(&self, a: u64, b: u64) -> bool {
        self.cfg.to_signed(a) > self.cfg.to_signed(b)
    }

    fn from_f64(&self, x: f64) -> Result<u64> {
        self.cfg.encode_raw(x)
    }

    fn to_f64(&self, a: u64) -> f64 {
        self.cfg.decode_raw(a)
    }
}

/// Floating-point reference arithmetic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FloatArith<F> {
    _f: PhantomData<F>,
}

impl<F> FloatArith<F> {
    pub fn new() -> Self {
        Self { _f: PhantomData }
    }
}

impl<F: Float + fmt::Debug + Send + Sync + 'static> Arith for FloatArith<F> {
    type Elem = F;

    fn zero(&self) -> F {
        F::zero()
    }

    fn add(&self, a: F, b: F) -> F {
        a + b
    }

    fn sub(&self, a: F, b: F) -> F {
        a - b
    }

    fn mul_wide(&self, a: F, b: F) -> F {
        a * b
    }

    fn rescale(&self, wide: F) -> F {
        wide
    }

    fn div_int(&self, a: F, k: usize) -> F {
        a / F::from(k).expect("integer fits the float type")
    }

    fn non_negative(&self, a: F) -> bool {
        a >= F::zero()
    }

    fn greater(&self, a: F, b: F) -> bool {
        a > b
    }

    fn from_f64(&self, x: f64) -> Result<F> {
        Ok(F::from(x).expect("finite f64 converts"))
    }

    fn to_f64(&self, a: F) -> f64 {
        a.to_f64().expect("float converts to f64")
    }
}
