//! Scalar backends for the training datapath.
//!
//! [`Arithmetic`] abstracts over the number representation. [`FloatArith`]
//! is exact IEEE arithmetic over any `num_traits::Float`; [`FixedArith`]
//! carries raw `i32` words through the saturating operations of
//! [`crate::fixedpoint`] and looks activations up in precomputed tables.

use std::cell::Cell;
use std::fmt::Debug;
use std::marker::PhantomData;

use num_traits::{Float, FromPrimitive};

use super::activation::{ActivationKind, ActivationTable};
use crate::fixedpoint::{tree_reduce_raw, FixedFormat, RoundingMode};

pub trait Arithmetic {
    type Scalar: Copy + Debug + Default + PartialOrd + Send + Sync + 'static;

    fn name(&self) -> String;

    /// Convert an offline constant (initial value, input pixel) into the
    /// representation.
    #[allow(clippy::wrong_self_convention)] // conversion depends on the format
    fn from_f64(&self, x: f64) -> Self::Scalar;
    fn to_f64(&self, s: Self::Scalar) -> f64;

    fn zero(&self) -> Self::Scalar;
    fn add(&self, a: Self::Scalar, b: Self::Scalar) -> Self::Scalar;
    fn sub(&self, a: Self::Scalar, b: Self::Scalar) -> Self::Scalar;
    fn mul(&self, a: Self::Scalar, b: Self::Scalar) -> Self::Scalar;
    /// `a * 2^-shift`.
    fn scale_pow2(&self, a: Self::Scalar, shift: u32) -> Self::Scalar;

    /// Balanced adjacent-pair reduction; `buf` is scratch and is clobbered.
    fn tree_sum(&self, buf: &mut [Self::Scalar]) -> Self::Scalar {
        let mut n = buf.len();
        if n == 0 {
            return self.zero();
        }
        while n > 1 {
            let half = n / 2;
            for i in 0..half {
                buf[i] = self.add(buf[2 * i], buf[2 * i + 1]);
            }
            if n % 2 == 1 {
                buf[half] = buf[n - 1];
                n = half + 1;
            } else {
                n = half;
            }
        }
        buf[0]
    }

    /// Activation value and derivative at pre-activation `s`.
    fn activate(&self, kind: ActivationKind, s: Self::Scalar) -> (Self::Scalar, Self::Scalar);

    /// Count of saturating operations since construction (zero for floats).
    fn clip_events(&self) -> u64 {
        0
    }

    fn abs_f64(&self, s: Self::Scalar) -> f64 {
        self.to_f64(s).abs()
    }
}

/// Reference backend: plain floating point, no clipping.
#[derive(Debug, Clone, Copy, Default)]
pub struct FloatArith<T> {
    _scalar: PhantomData<T>,
}

impl<T> FloatArith<T> {
    pub fn new() -> Self {
        Self { _scalar: PhantomData }
    }
}

impl<T> Arithmetic for FloatArith<T>
where
    T: Float + FromPrimitive + Debug + Default + Send + Sync + 'static,
{
    type Scalar = T;

    fn name(&self) -> String {
        format!("float{}", std::mem::size_of::<T>() * 8)
    }

    #[inline(always)]
    fn from_f64(&self, x: f64) -> T {
        T::from_f64(x).expect("representable constant")
    }

    #[inline(always)]
    fn to_f64(&self, s: T) -> f64 {
        s.to_f64().unwrap_or(f64::NAN)
    }

    #[inline(always)]
    fn zero(&self) -> T {
        T::zero()
    }

    #[inline(always)]
    fn add(&self, a: T, b: T) -> T {
        a + b
    }

    #[inline(always)]
    fn sub(&self, a: T, b: T) -> T {
        a - b
    }

    #[inline(always)]
    fn mul(&self, a: T, b: T) -> T {
        a * b
    }

    #[inline(always)]
    fn scale_pow2(&self, a: T, shift: u32) -> T {
        a * T::from_f64((-(shift as f64)).exp2()).unwrap()
    }

    #[inline]
    fn activate(&self, kind: ActivationKind, s: T) -> (T, T) {
        let one = T::one();
        match kind {
            ActivationKind::Sigmoid => {
                let v = one / (one + (-s).exp());
                (v, v * (one - v))
            }
            ActivationKind::ReluClip1 | ActivationKind::ReluClip8 => {
                let cap = T::from_f64(kind.relu_cap().unwrap()).unwrap();
                if s <= T::zero() {
                    (T::zero(), T::zero())
                } else if s >= cap {
                    (cap, T::zero())
                } else {
                    (s, one)
                }
            }
        }
    }
}

/// Hardware backend: every value is a raw word of one [`FixedFormat`].
#[derive(Debug, Clone)]
pub struct FixedArith {
    format: FixedFormat,
    min: i64,
    max: i64,
    frac: u32,
    mode: RoundingMode,
    sigmoid: Option<ActivationTable>,
    clips: Cell<u64>,
}

impl FixedArith {
    pub fn new(format: FixedFormat) -> Self {
        let sigmoid = ActivationTable::tabulated(ActivationKind::Sigmoid, format);
        Self {
            format,
            min: format.min_raw(),
            max: format.max_raw(),
            frac: format.frac_bits(),
            mode: format.rounding(),
            sigmoid,
            clips: Cell::new(0),
        }
    }

    pub fn format(&self) -> FixedFormat {
        self.format
    }

    #[inline(always)]
    fn sat(&self, wide: i64) -> i32 {
        if wide > self.max {
            self.clips.set(self.clips.get() + 1);
            self.max as i32
        } else if wide < self.min {
            self.clips.set(self.clips.get() + 1);
            self.min as i32
        } else {
            wide as i32
        }
    }
}

impl Arithmetic for FixedArith {
    type Scalar = i32;

    fn name(&self) -> String {
        format!("fixed{}-{}", self.format, self.mode)
    }

    /// Offline constants round to nearest; only the datapath truncates.
    fn from_f64(&self, x: f64) -> i32 {
        self.format
            .quantize_raw_with(x, RoundingMode::NearestEven)
            .expect("finite constant")
            .0
    }

    #[inline(always)]
    fn to_f64(&self, s: i32) -> f64 {
        self.format.to_real(s)
    }

    #[inline(always)]
    fn zero(&self) -> i32 {
        0
    }

    #[inline(always)]
    fn add(&self, a: i32, b: i32) -> i32 {
        self.sat(a as i64 + b as i64)
    }

    #[inline(always)]
    fn sub(&self, a: i32, b: i32) -> i32 {
        self.sat(a as i64 - b as i64)
    }

    #[inline(always)]
    fn mul(&self, a: i32, b: i32) -> i32 {
        let wide = a as i64 * b as i64;
        self.sat(crate::fixedpoint::round_shift(wide, self.frac, self.mode))
    }

    #[inline(always)]
    fn scale_pow2(&self, a: i32, shift: u32) -> i32 {
        self.format.shift_raw(a, shift)
    }

    fn tree_sum(&self, buf: &mut [i32]) -> i32 {
        let (root, clips) = tree_reduce_raw(&self.format, buf);
        self.clips.set(self.clips.get() + clips);
        root
    }

    #[inline]
    fn activate(&self, kind: ActivationKind, s: i32) -> (i32, i32) {
        match (kind, &self.sigmoid) {
            (ActivationKind::Sigmoid, Some(t)) => t.lookup(s),
            _ => ActivationTable::evaluate_raw(kind, self.format, s),
        }
    }

    fn clip_events(&self) -> u64 {
        self.clips.get()
    }
}
