use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::fixedpoint::{FixedFormat, RoundingMode};

/// Derivative tables keep this many fractional bits (sigmoid' lies in [0, 1/4]).
pub const DERIVATIVE_FRAC_BITS: u32 = 6;

/// Widest word for which a full table is materialized.
pub const MAX_TABLE_BITS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationKind {
    #[serde(rename = "sigmoid")]
    Sigmoid,
    #[serde(rename = "relu_clip1", alias = "relu-clip1")]
    ReluClip1,
    #[serde(rename = "relu_clip8", alias = "relu-clip8")]
    ReluClip8,
}

impl ActivationKind {
    pub fn relu_cap(self) -> Option<f64> {
        match self {
            ActivationKind::Sigmoid => None,
            ActivationKind::ReluClip1 => Some(1.0),
            ActivationKind::ReluClip8 => Some(8.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::ReluClip1 => "relu_clip1",
            ActivationKind::ReluClip8 => "relu_clip8",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "relu_clip1" | "relu-clip1" => Ok(Self::ReluClip1),
            "relu_clip8" | "relu-clip8" => Ok(Self::ReluClip8),
            other => Err(EngineError::UnknownActivation(other.to_string())),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Precomputed value and derivative for every raw input pattern of a format.
/// Entry `i` holds the result for the input whose two's-complement word is `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationTable {
    kind: ActivationKind,
    format: FixedFormat,
    values: Vec<i32>,
    derivs: Vec<i32>,
}

impl ActivationTable {
    pub fn build(kind: ActivationKind, format: FixedFormat) -> Result<Self, EngineError> {
        if format.total_bits() > MAX_TABLE_BITS {
            return Err(EngineError::TableTooLarge(format.total_bits()));
        }
        let size = 1usize << format.total_bits();
        let mut values = Vec::with_capacity(size);
        let mut derivs = Vec::with_capacity(size);
        for index in 0..size {
            let (v, d) = Self::evaluate_raw(kind, format, Self::raw_of_index(format, index));
            values.push(v);
            derivs.push(d);
        }
        Ok(Self {
            kind,
            format,
            values,
            derivs,
        })
    }

    /// Table for formats up to 16 bits; wider formats evaluate on the fly.
    pub fn tabulated(kind: ActivationKind, format: FixedFormat) -> Option<Self> {
        (format.total_bits() <= 16).then(|| Self::build(kind, format).expect("small table"))
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn format(&self) -> FixedFormat {
        self.format
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of_raw(format: FixedFormat, raw: i32) -> usize {
        (raw as u32 & ((1u64 << format.total_bits()) - 1) as u32) as usize
    }

    pub fn raw_of_index(format: FixedFormat, index: usize) -> i32 {
        let bits = format.total_bits();
        let shift = 32 - bits;
        ((index as u32) << shift) as i32 >> shift
    }

    #[inline(always)]
    pub fn lookup(&self, raw: i32) -> (i32, i32) {
        let i = Self::index_of_raw(self.format, raw);
        (self.values[i], self.derivs[i])
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn derivs(&self) -> &[i32] {
        &self.derivs
    }

    /// Exact evaluation, quantized: value to the format's `b_f` bits, the
    /// sigmoid derivative to [`DERIVATIVE_FRAC_BITS`] (or `b_f` if fewer).
    /// Clipped ReLU is evaluated with comparators, no rounding involved.
    pub fn evaluate_raw(kind: ActivationKind, format: FixedFormat, raw: i32) -> (i32, i32) {
        let nearest = |x: f64| {
            format
                .quantize_raw_with(x, RoundingMode::NearestEven)
                .expect("finite")
                .0
        };
        match kind {
            ActivationKind::Sigmoid => {
                let s = sigmoid(format.to_real(raw));
                let value = nearest(s);
                let keep = DERIVATIVE_FRAC_BITS.min(format.frac_bits());
                let scale = (keep as f64).exp2();
                let coarse = (s * (1.0 - s) * scale).round_ties_even() / scale;
                (value, nearest(coarse))
            }
            ActivationKind::ReluClip1 | ActivationKind::ReluClip8 => {
                let cap = kind.relu_cap().unwrap();
                let cap_wide = (cap * (format.frac_bits() as f64).exp2()) as i64;
                let cap_raw = cap_wide.min(format.max_raw()) as i32;
                let one = (1i64 << format.frac_bits()).min(format.max_raw()) as i32;
                if raw <= 0 {
                    (0, 0)
                } else if (raw as i64) >= cap_wide {
                    (cap_raw, 0)
                } else {
                    (raw.min(cap_raw), one)
                }
            }
        }
    }

    /// CSV: `index,input_raw,input,value_raw,value,deriv_raw,deriv`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "index",
            "input_raw",
            "input",
            "value_raw",
            "value",
            "deriv_raw",
            "deriv",
        ])?;
        for (i, (&v, &d)) in self.values.iter().zip(&self.derivs).enumerate() {
            let raw = Self::raw_of_index(self.format, i);
            w.write_record(&[
                i.to_string(),
                raw.to_string(),
                self.format.to_real(raw).to_string(),
                v.to_string(),
                self.format.to_real(v).to_string(),
                d.to_string(),
                self.format.to_real(d).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ActivationTable {
        ActivationTable::build(ActivationKind::Sigmoid, FixedFormat::reference_default()).unwrap()
    }

    #[test]
    fn sigmoid_anchor_values() {
        let t = table();
        let f = t.format();
        assert_eq!(t.len(), 4096);
        let (v, d) = t.lookup(0);
        assert_eq!(f.to_real(v), 0.5);
        assert_eq!(f.to_real(d), 0.25);
        let (v, _) = t.lookup(f.quantize_raw(-8.0).unwrap().0);
        assert_eq!(v, 0);
    }

    #[test]
    fn sigmoid_ranges() {
        let t = table();
        let f = t.format();
        for (&v, &d) in t.values().iter().zip(t.derivs()) {
            assert!((0.0..=1.0).contains(&f.to_real(v)));
            assert!((0.0..=0.25).contains(&f.to_real(d)));
            // derivative keeps only 6 fractional bits
            assert_eq!(d % 4, 0);
        }
    }

    #[test]
    fn index_is_bit_pattern() {
        let f = FixedFormat::reference_default();
        assert_eq!(ActivationTable::index_of_raw(f, -1), 4095);
        assert_eq!(ActivationTable::raw_of_index(f, 4095), -1);
        assert_eq!(ActivationTable::raw_of_index(f, 2048), -2048);
        assert_eq!(ActivationTable::raw_of_index(f, 2047), 2047);
        for raw in [-2048, -5, 0, 7, 2047] {
            assert_eq!(
                ActivationTable::raw_of_index(f, ActivationTable::index_of_raw(f, raw)),
                raw
            );
        }
    }

    #[test]
    fn relu_clipping() {
        let f = FixedFormat::reference_default();
        let one = 256;
        assert_eq!(ActivationTable::evaluate_raw(ActivationKind::ReluClip1, f, -3), (0, 0));
        assert_eq!(
            ActivationTable::evaluate_raw(ActivationKind::ReluClip1, f, 100),
            (100, one)
        );
        assert_eq!(
            ActivationTable::evaluate_raw(ActivationKind::ReluClip1, f, 256),
            (256, 0)
        );
        assert_eq!(
            ActivationTable::evaluate_raw(ActivationKind::ReluClip1, f, 900),
            (256, 0)
        );
        // cap 8 is beyond the (12,3,8) range, so the output never clips below it
        assert_eq!(
            ActivationTable::evaluate_raw(ActivationKind::ReluClip8, f, 2047),
            (2047, one)
        );
    }

    #[test]
    fn narrow_derivative_precision() {
        let f = FixedFormat::new(8, 2, 5).unwrap();
        let t = ActivationTable::build(ActivationKind::Sigmoid, f).unwrap();
        assert_eq!(t.len(), 256);
        assert_eq!(f.to_real(t.lookup(0).1), 0.25);
    }

    #[test]
    fn unknown_kind() {
        assert!("tanh".parse::<ActivationKind>().is_err());
        assert_eq!(
            "relu-clip8".parse::<ActivationKind>().unwrap(),
            ActivationKind::ReluClip8
        );
    }

    #[test]
    fn wide_tables_rejected() {
        let f = FixedFormat::new(24, 7, 16).unwrap();
        assert!(matches!(
            ActivationTable::build(ActivationKind::Sigmoid, f),
            Err(EngineError::TableTooLarge(24))
        ));
    }
}
