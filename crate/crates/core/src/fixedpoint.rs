//! Saturating two's-complement fixed-point arithmetic.
//!
//! A [`FixedFormat`] is the bit triplet `(b_w, b_n, b_f)` with one sign bit,
//! so `b_w = b_n + b_f + 1`. Every operation keeps its result inside the
//! format: results beyond the range pin to the nearest extreme, and products
//! are requantized back to `b_f` fractional bits.
//!
//! The raw-level functions on [`FixedFormat`] (`add_raw`, `mul_raw`, ...) are
//! what the training datapath uses; [`FixedValue`] wraps a raw sample with its
//! format for checked use at API boundaries.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_TOTAL_BITS: u32 = 4;
pub const MAX_TOTAL_BITS: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FixedError {
    #[error("non-finite operand")]
    NonFinite,
    #[error("format mismatch: {0} vs {1}")]
    FormatMismatch(FixedFormat, FixedFormat),
    #[error("invalid format ({total}, {int}, {frac}): {reason}")]
    InvalidFormat {
        total: u32,
        int: u32,
        frac: u32,
        reason: &'static str,
    },
    #[error("shift {shift} exceeds total bits {total}")]
    ShiftTooLarge { shift: u32, total: u32 },
    #[error("tree sum expects {expected} values, got {got}")]
    TreeLength { expected: usize, got: usize },
    #[error("tree fan-in {0} is not a power of two")]
    TreeFanIn(usize),
    #[error("unknown rounding mode `{0}`")]
    UnknownRounding(String),
}

/// How bits below the retained LSB are discarded when a result is narrowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum RoundingMode {
    /// Drop the low bits of the two's-complement word (round toward -inf).
    #[default]
    #[serde(rename = "truncate")]
    Truncate,
    #[serde(rename = "nearest-even", alias = "round-nearest-even")]
    NearestEven,
    /// Drop the low bits of the magnitude (round toward zero).
    #[serde(rename = "toward-zero")]
    TowardZero,
}

impl RoundingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoundingMode::Truncate => "truncate",
            RoundingMode::NearestEven => "nearest-even",
            RoundingMode::TowardZero => "toward-zero",
        }
    }
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RoundingMode {
    type Err = FixedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "truncate" => Ok(RoundingMode::Truncate),
            "nearest-even" | "round-nearest-even" => Ok(RoundingMode::NearestEven),
            "toward-zero" => Ok(RoundingMode::TowardZero),
            other => Err(FixedError::UnknownRounding(other.to_string())),
        }
    }
}

/// Shift `wide` right by `shift` bits under `mode`.
#[inline(always)]
pub fn round_shift(wide: i64, shift: u32, mode: RoundingMode) -> i64 {
    if shift == 0 {
        return wide;
    }
    match mode {
        RoundingMode::Truncate => wide >> shift,
        RoundingMode::TowardZero => {
            if wide < 0 {
                -((-wide) >> shift)
            } else {
                wide >> shift
            }
        }
        RoundingMode::NearestEven => {
            let floor = wide >> shift;
            let rem = wide - (floor << shift);
            let half = 1i64 << (shift - 1);
            if rem > half || (rem == half && floor & 1 == 1) {
                floor + 1
            } else {
                floor
            }
        }
    }
}

/// The bit triplet `(b_w, b_n, b_f)` plus the requantization rule.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FormatRepr", into = "FormatRepr")]
pub struct FixedFormat {
    total_bits: u32,
    int_bits: u32,
    frac_bits: u32,
    rounding: RoundingMode,
}

impl FixedFormat {
    pub fn new(total_bits: u32, int_bits: u32, frac_bits: u32) -> Result<Self, FixedError> {
        Self::with_rounding(total_bits, int_bits, frac_bits, RoundingMode::default())
    }

    pub fn with_rounding(
        total_bits: u32,
        int_bits: u32,
        frac_bits: u32,
        rounding: RoundingMode,
    ) -> Result<Self, FixedError> {
        let invalid = |reason| FixedError::InvalidFormat {
            total: total_bits,
            int: int_bits,
            frac: frac_bits,
            reason,
        };
        if int_bits + frac_bits + 1 != total_bits {
            return Err(invalid("total bits must equal integer + fraction + sign"));
        }
        if !(MIN_TOTAL_BITS..=MAX_TOTAL_BITS).contains(&total_bits) {
            return Err(invalid("total bits must lie in 4..=32"));
        }
        Ok(Self {
            total_bits,
            int_bits,
            frac_bits,
            rounding,
        })
    }

    /// The (12, 3, 8) triplet used by the reference hardware.
    pub fn reference_default() -> Self {
        Self::new(12, 3, 8).expect("valid triplet")
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn rounding(&self) -> RoundingMode {
        self.rounding
    }

    pub fn with_mode(mut self, rounding: RoundingMode) -> Self {
        self.rounding = rounding;
        self
    }

    #[inline(always)]
    pub fn min_raw(&self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    #[inline(always)]
    pub fn max_raw(&self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    /// Value of one LSB, `2^-b_f`.
    pub fn precision(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_value(&self) -> f64 {
        self.min_raw() as f64 * self.precision()
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.precision()
    }

    /// Pin a wide result into range; the flag reports whether it was clipped.
    #[inline(always)]
    pub fn saturate(&self, wide: i64) -> (i32, bool) {
        let (lo, hi) = (self.min_raw(), self.max_raw());
        if wide > hi {
            (hi as i32, true)
        } else if wide < lo {
            (lo as i32, true)
        } else {
            (wide as i32, false)
        }
    }

    #[inline(always)]
    pub fn add_raw(&self, a: i32, b: i32) -> (i32, bool) {
        self.saturate(a as i64 + b as i64)
    }

    #[inline(always)]
    pub fn sub_raw(&self, a: i32, b: i32) -> (i32, bool) {
        self.saturate(a as i64 - b as i64)
    }

    #[inline(always)]
    pub fn mul_raw(&self, a: i32, b: i32) -> (i32, bool) {
        let wide = a as i64 * b as i64;
        self.saturate(round_shift(wide, self.frac_bits, self.rounding))
    }

    /// Multiply by `2^-shift` with the product requantization rule.
    #[inline(always)]
    pub fn shift_raw(&self, a: i32, shift: u32) -> i32 {
        // A right shift never leaves the range, so no saturation is needed.
        round_shift(a as i64, shift, self.rounding) as i32
    }

    /// Quantize a real number with an explicit rounding rule.
    pub fn quantize_raw_with(&self, x: f64, mode: RoundingMode) -> Result<(i32, bool), FixedError> {
        if !x.is_finite() {
            return Err(FixedError::NonFinite);
        }
        let scaled = x * (self.frac_bits as f64).exp2();
        let rounded = match mode {
            RoundingMode::Truncate => scaled.floor(),
            RoundingMode::NearestEven => scaled.round_ties_even(),
            RoundingMode::TowardZero => scaled.trunc(),
        };
        let (lo, hi) = (self.min_raw() as f64, self.max_raw() as f64);
        Ok(if rounded > hi {
            (hi as i32, true)
        } else if rounded < lo {
            (lo as i32, true)
        } else {
            (rounded as i32, false)
        })
    }

    pub fn quantize_raw(&self, x: f64) -> Result<(i32, bool), FixedError> {
        self.quantize_raw_with(x, self.rounding)
    }

    #[inline(always)]
    pub fn to_real(&self, raw: i32) -> f64 {
        raw as f64 * self.precision()
    }

    pub fn value(&self, raw: i32) -> Result<FixedValue, FixedError> {
        FixedValue::from_raw(raw, *self)
    }
}

impl fmt::Debug for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FixedFormat({}, {}, {}; {})",
            self.total_bits, self.int_bits, self.frac_bits, self.rounding
        )
    }
}

impl fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.total_bits, self.int_bits, self.frac_bits)
    }
}

/// Config-file form: `bits = [b_w, b_n, b_f]` plus a rounding string.
#[derive(Serialize, Deserialize)]
struct FormatRepr {
    bits: [u32; 3],
    #[serde(default)]
    rounding: RoundingMode,
}

impl TryFrom<FormatRepr> for FixedFormat {
    type Error = FixedError;

    fn try_from(r: FormatRepr) -> Result<Self, Self::Error> {
        FixedFormat::with_rounding(r.bits[0], r.bits[1], r.bits[2], r.rounding)
    }
}

impl From<FixedFormat> for FormatRepr {
    fn from(f: FixedFormat) -> Self {
        FormatRepr {
            bits: [f.total_bits, f.int_bits, f.frac_bits],
            rounding: f.rounding,
        }
    }
}

/// A raw sample in units of `2^-b_f`, tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedValue {
    raw: i32,
    format: FixedFormat,
}

impl FixedValue {
    pub fn from_raw(raw: i32, format: FixedFormat) -> Result<Self, FixedError> {
        let r = raw as i64;
        if r < format.min_raw() || r > format.max_raw() {
            return Err(FixedError::InvalidFormat {
                total: format.total_bits,
                int: format.int_bits,
                frac: format.frac_bits,
                reason: "raw value outside the format's word",
            });
        }
        Ok(Self { raw, format })
    }

    pub fn zero(format: FixedFormat) -> Self {
        Self { raw: 0, format }
    }

    pub fn raw(&self) -> i32 {
        self.raw
    }

    pub fn format(&self) -> FixedFormat {
        self.format
    }

    pub fn to_f64(&self) -> f64 {
        self.format.to_real(self.raw)
    }

    fn same_format(&self, other: &Self) -> Result<FixedFormat, FixedError> {
        if self.format == other.format {
            Ok(self.format)
        } else {
            Err(FixedError::FormatMismatch(self.format, other.format))
        }
    }
}

impl fmt::Display for FixedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// Nearest in-range value to `x` under the format's rounding mode.
pub fn quantize(x: f64, fmt: FixedFormat) -> Result<FixedValue, FixedError> {
    let (raw, _) = fmt.quantize_raw(x)?;
    Ok(FixedValue { raw, format: fmt })
}

pub fn clip_add(a: FixedValue, b: FixedValue) -> Result<FixedValue, FixedError> {
    let format = a.same_format(&b)?;
    let (raw, _) = format.add_raw(a.raw, b.raw);
    Ok(FixedValue { raw, format })
}

pub fn clip_sub(a: FixedValue, b: FixedValue) -> Result<FixedValue, FixedError> {
    let format = a.same_format(&b)?;
    let (raw, _) = format.sub_raw(a.raw, b.raw);
    Ok(FixedValue { raw, format })
}

pub fn clip_mul(a: FixedValue, b: FixedValue) -> Result<FixedValue, FixedError> {
    let format = a.same_format(&b)?;
    let (raw, _) = format.mul_raw(a.raw, b.raw);
    Ok(FixedValue { raw, format })
}

/// `a * 2^-shift`, used for power-of-two learning rates.
pub fn shift_scale(a: FixedValue, shift: u32) -> Result<FixedValue, FixedError> {
    if shift > a.format.total_bits {
        return Err(FixedError::ShiftTooLarge {
            shift,
            total: a.format.total_bits,
        });
    }
    Ok(FixedValue {
        raw: a.format.shift_raw(a.raw, shift),
        format: a.format,
    })
}

/// Balanced adder tree, saturating at every node. Pairs are formed
/// left-to-right from adjacent elements at each level.
pub fn tree_sum(vals: &[FixedValue], fan_in: usize) -> Result<FixedValue, FixedError> {
    if !fan_in.is_power_of_two() {
        return Err(FixedError::TreeFanIn(fan_in));
    }
    if vals.len() != fan_in {
        return Err(FixedError::TreeLength {
            expected: fan_in,
            got: vals.len(),
        });
    }
    let format = vals[0].format;
    let mut level = Vec::with_capacity(fan_in);
    for v in vals {
        level.push(v.same_format(&vals[0]).map(|_| v.raw)?);
    }
    let (raw, _) = tree_reduce_raw(&format, &mut level);
    Ok(FixedValue { raw, format })
}

/// In-place adjacent-pair reduction over raws; returns the root and the
/// number of saturating nodes. An odd element at a level passes through.
pub fn tree_reduce_raw(format: &FixedFormat, buf: &mut [i32]) -> (i32, u64) {
    let mut n = buf.len();
    if n == 0 {
        return (0, 0);
    }
    let mut clips = 0;
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            let (s, c) = format.add_raw(buf[2 * i], buf[2 * i + 1]);
            clips += c as u64;
            buf[i] = s;
        }
        if n % 2 == 1 {
            buf[half] = buf[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    (buf[0], clips)
}
