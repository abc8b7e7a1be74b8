//! Closed-form hardware cost: arithmetic units, memory bits, block-cycle
//! timing, and whether a design fits a device.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DEFAULT_EPOCH_SIZE;
use crate::fixedpoint::FixedFormat;
use crate::pipeline::{block_cycle_clocks, queue_depth};
use crate::topology::{build_network, NetworkSpec, TopologyError};

/// Ground-truth words are 10 bits, one bit per class.
pub const GROUND_TRUTH_BITS: u64 = 10;

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("device profile: {0}")]
    Profile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub dsp_count: u64,
    /// Block RAM capacity in kilobits (1000 bits).
    pub bram_kbits: f64,
    #[serde(default)]
    pub logic_note: String,
}

impl DeviceProfile {
    /// Artix-7 XC7A100T: 240 DSP slices, 4.86 Mb of block RAM.
    pub fn artix7() -> Self {
        Self {
            name: "xc7a100t".into(),
            dsp_count: 240,
            bram_kbits: 4860.0,
            logic_note: "Artix-7 100T; LUT and flip-flop use are not estimated".into(),
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "artix7" | "xc7a100t" | "artix7-100t" => Some(Self::artix7()),
            _ => None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ResourceError> {
        let p: Self = toml::from_str(s).map_err(|e| ResourceError::Profile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ResourceError> {
        if self.dsp_count == 0 {
            return Err(ResourceError::Profile("dsp_count must be positive".into()));
        }
        if self.bram_kbits.is_nan() || self.bram_kbits <= 0.0 {
            return Err(ResourceError::Profile("bram_kbits must be positive".into()));
        }
        Ok(())
    }

    pub fn bram_bits(&self) -> f64 {
        self.bram_kbits * 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeAdders {
    pub junction: usize,
    /// Two-input adders: `z/d_in` trees of `d_in - 1` each.
    pub count: usize,
    pub depth: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryBits {
    /// `sum (W_i + N_i) b_w`.
    pub params_logical: u64,
    /// Banked layout: `z_i (W_i/z_i + ceil(N_i/z_i)) b_w`, biases appended
    /// to each weight bank.
    pub params: u64,
    /// Left-activation queues, `D_i N_{i-1} b_w`.
    pub activations: u64,
    /// Derivative queues for junctions that run BP.
    pub act_derivs: u64,
    /// Ping-pong delta memories, `2 N_i b_w` per layer.
    pub deltas: u64,
    pub ground_truth: u64,
}

impl MemoryBits {
    pub fn total(&self) -> u64 {
        self.params + self.activations + self.act_derivs + self.deltas + self.ground_truth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub z: Vec<usize>,
    pub ff_multipliers: usize,
    pub bp_multipliers: usize,
    pub up_multipliers: usize,
    pub ff_tree_adders: Vec<TreeAdders>,
    pub bp_partial_sums: usize,
    pub up_adders: usize,
    pub sigmoid_lut_count: usize,
    pub memory_bits: MemoryBits,
    /// Bank count and words per bank, per junction.
    pub weight_banks: Vec<(usize, usize)>,
    pub block_cycle_clocks: usize,
    pub clock_hz: f64,
    pub block_cycle_seconds: f64,
    pub throughput: f64,
}

impl ResourceEstimate {
    /// Multipliers placed on DSP slices under `policy`.
    pub fn dsp_mapped(&self, policy: DspPolicy) -> usize {
        match policy {
            DspPolicy::FfBp => self.ff_multipliers + self.bp_multipliers,
            DspPolicy::All => self.ff_multipliers + self.bp_multipliers + self.up_multipliers,
        }
    }

    pub fn z_total(&self) -> usize {
        self.z.iter().sum()
    }
}

impl fmt::Display for ResourceEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "z                    {:?} (total {})", self.z, self.z_total())?;
        writeln!(f, "FF multipliers       {}", self.ff_multipliers)?;
        writeln!(f, "BP multipliers       {}", self.bp_multipliers)?;
        writeln!(f, "UP multipliers       {}", self.up_multipliers)?;
        writeln!(f, "DSP-mapped (FF+BP)   {}", self.dsp_mapped(DspPolicy::FfBp))?;
        for t in &self.ff_tree_adders {
            writeln!(f, "FF tree adders J{}    {} (depth {})", t.junction, t.count, t.depth)?;
        }
        writeln!(f, "BP partial sums      {}", self.bp_partial_sums)?;
        writeln!(f, "UP adders            {}", self.up_adders)?;
        writeln!(f, "sigmoid LUTs         {}", self.sigmoid_lut_count)?;
        writeln!(f, "memory bits          {}", self.memory_bits.total())?;
        writeln!(f, "block cycle          {} clocks", self.block_cycle_clocks)?;
        writeln!(f, "block cycle time     {:.4} us", self.block_cycle_seconds * 1e6)?;
        write!(f, "throughput           {:.0} samples/s", self.throughput)
    }
}

/// Build and validate `spec`, then count.
pub fn estimate(spec: &NetworkSpec, fmt: FixedFormat) -> Result<ResourceEstimate, ResourceError> {
    let net = build_network(spec)?;
    let layers = net.num_junctions();
    let bw = fmt.total_bits() as u64;
    let js = net.junctions();
    let sizes = net.layer_sizes();

    let mut mem = MemoryBits::default();
    let mut weight_banks = Vec::new();
    for (idx, j) in js.iter().enumerate() {
        let i = idx + 1;
        let words = j.weight_sets() + j.n_right.div_ceil(j.z);
        weight_banks.push((j.z, words));
        mem.params_logical += (j.weights() + j.n_right) as u64 * bw;
        mem.params += (j.z * words) as u64 * bw;
        let q = (queue_depth(i, layers) * j.n_left) as u64 * bw;
        mem.activations += q;
        if i >= 2 {
            mem.act_derivs += q;
        }
        mem.deltas += 2 * j.n_right as u64 * bw;
    }
    mem.ground_truth = DEFAULT_EPOCH_SIZE as u64 * GROUND_TRUTH_BITS;

    let clocks = js.iter().map(block_cycle_clocks).max().unwrap_or(0);
    let seconds = clocks as f64 / net.clock_hz();
    debug_assert_eq!(sizes.len(), layers + 1);
    Ok(ResourceEstimate {
        z: js.iter().map(|j| j.z).collect(),
        ff_multipliers: js.iter().map(|j| j.z).sum(),
        bp_multipliers: 2 * js.iter().skip(1).map(|j| j.z).sum::<usize>(),
        up_multipliers: js.iter().map(|j| j.z).sum(),
        ff_tree_adders: js
            .iter()
            .enumerate()
            .map(|(idx, j)| TreeAdders {
                junction: idx + 1,
                count: j.neurons_per_clock() * (j.d_in - 1),
                depth: j.d_in.trailing_zeros(),
            })
            .collect(),
        bp_partial_sums: js.iter().skip(1).map(|j| j.z).sum(),
        up_adders: js.iter().map(|j| j.z + j.neurons_per_clock()).sum(),
        sigmoid_lut_count: js.iter().map(|j| j.neurons_per_clock()).sum(),
        memory_bits: mem,
        weight_banks,
        block_cycle_clocks: clocks,
        clock_hz: net.clock_hz(),
        block_cycle_seconds: seconds,
        throughput: 1.0 / seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DspPolicy {
    /// FF and BP multipliers on DSP slices, UP multipliers in logic.
    #[default]
    #[serde(rename = "ff-bp")]
    FfBp,
    #[serde(rename = "all")]
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub device: String,
    pub dsp_required: usize,
    pub dsp_available: u64,
    pub dsp_fits: bool,
    pub memory_bits: u64,
    pub bram_bits: f64,
    pub memory_fits: bool,
    /// Bits needed to keep one epoch of input images on chip.
    pub input_bits: u64,
    pub must_stream_inputs: bool,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn fits(&self) -> bool {
        self.dsp_fits && self.memory_fits
    }
}

/// Bits of one epoch of 8-bit 784-pixel images.
pub fn input_data_bits(samples: usize) -> u64 {
    samples as u64 * 784 * 8
}

pub fn fit_check(est: &ResourceEstimate, dev: &DeviceProfile, policy: DspPolicy) -> FitReport {
    let dsp_required = est.dsp_mapped(policy);
    let memory_bits = est.memory_bits.total();
    let input_bits = input_data_bits(DEFAULT_EPOCH_SIZE);
    let mut warnings = Vec::new();
    let dsp_fits = dsp_required as u64 <= dev.dsp_count;
    if !dsp_fits {
        warnings.push(format!(
            "over capacity: {dsp_required} DSP-mapped multipliers, device has {}",
            dev.dsp_count
        ));
    }
    let memory_fits = memory_bits as f64 <= dev.bram_bits();
    if !memory_fits {
        warnings.push(format!(
            "over capacity: {memory_bits} memory bits, device has {}",
            dev.bram_bits()
        ));
    }
    let must_stream_inputs = memory_bits as f64 + input_bits as f64 > dev.bram_bits();
    if must_stream_inputs {
        warnings.push(format!(
            "must stream inputs: {:.2} Mb of input data vs {:.2} Mb on chip",
            input_bits as f64 / 1e6,
            dev.bram_bits() / 1e6
        ));
    }
    FitReport {
        device: dev.name.clone(),
        dsp_required,
        dsp_available: dev.dsp_count,
        dsp_fits,
        memory_bits,
        bram_bits: dev.bram_bits(),
        memory_fits,
        input_bits,
        must_stream_inputs,
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub z: Vec<usize>,
    pub z_total: usize,
    pub block_cycle_clocks: usize,
    pub block_cycle_seconds: f64,
    pub ff_multipliers: usize,
    pub bp_multipliers: usize,
    pub up_multipliers: usize,
    pub weight_banks: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Skipped {
    pub z: Vec<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<Skipped>,
}

/// Estimate `template` with each `z` vector; invalid candidates are listed
/// with the reason rather than aborting the sweep.
pub fn sweep_z(template: &NetworkSpec, candidates: &[Vec<usize>], fmt: FixedFormat) -> Sweep {
    let mut out = Sweep::default();
    for z in candidates {
        let spec = NetworkSpec {
            z: z.clone(),
            ..template.clone()
        };
        match estimate(&spec, fmt) {
            Ok(e) => out.rows.push(SweepRow {
                z_total: e.z_total(),
                z: e.z,
                block_cycle_clocks: e.block_cycle_clocks,
                block_cycle_seconds: e.block_cycle_seconds,
                ff_multipliers: e.ff_multipliers,
                bp_multipliers: e.bp_multipliers,
                up_multipliers: e.up_multipliers,
                weight_banks: e.weight_banks,
            }),
            Err(err) => out.skipped.push(Skipped {
                z: z.clone(),
                reason: err.to_string(),
            }),
        }
    }
    out
}

/// The template's `z` doubled `0..steps` times.
pub fn doubling_candidates(base: &[usize], steps: u32) -> Vec<Vec<usize>> {
    (0..steps).map(|s| base.iter().map(|&z| z << s).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_counts() {
        let e = estimate(&NetworkSpec::reference(), FixedFormat::reference_default()).unwrap();
        assert_eq!(e.ff_multipliers, 160);
        assert_eq!(e.bp_multipliers, 64);
        assert_eq!(e.dsp_mapped(DspPolicy::FfBp), 224);
        assert_eq!(e.up_multipliers, 160);
        assert_eq!(e.sigmoid_lut_count, 3);
        assert_eq!(e.block_cycle_clocks, 34);
        assert!((e.block_cycle_seconds * 1e6 - 2.2667).abs() < 1e-4);
        assert!((e.throughput - 441_176.47).abs() < 0.1);
        assert_eq!(e.bp_partial_sums, 32);
        assert_eq!(e.up_adders, 128 + 2 + 32 + 1);
        assert_eq!(
            e.ff_tree_adders[0],
            TreeAdders {
                junction: 1,
                count: 126,
                depth: 6
            }
        );
    }

    #[test]
    fn large_z_point() {
        let spec = NetworkSpec {
            z: vec![1024, 256],
            ..NetworkSpec::reference()
        };
        let e = estimate(&spec, FixedFormat::reference_default()).unwrap();
        assert_eq!(e.block_cycle_clocks, 6);
        assert!((e.block_cycle_seconds * 1e6 - 0.4).abs() < 1e-12);
        let fit = fit_check(&e, &DeviceProfile::artix7(), DspPolicy::FfBp);
        assert!(!fit.dsp_fits);
        assert!(fit.warnings.iter().any(|w| w.starts_with("over capacity")));
    }

    #[test]
    fn table_one_fits_and_streams() {
        let e = estimate(&NetworkSpec::reference(), FixedFormat::reference_default()).unwrap();
        let fit = fit_check(&e, &DeviceProfile::artix7(), DspPolicy::FfBp);
        assert!(fit.dsp_fits && fit.memory_fits);
        assert_eq!(fit.input_bits, 78_675_968);
        assert!(fit.must_stream_inputs);
        assert!(fit
            .warnings
            .iter()
            .any(|w| w.contains("must stream inputs") && w.contains("78.68") && w.contains("4.86")));
    }

    #[test]
    fn single_junction_has_no_bp() {
        let spec = NetworkSpec {
            layer_sizes: vec![16, 4],
            d_out: vec![2],
            z: vec![8],
            clock_hz: 1e6,
        };
        let e = estimate(&spec, FixedFormat::reference_default()).unwrap();
        assert_eq!(e.bp_multipliers, 0);
        assert_eq!(e.bp_partial_sums, 0);
        assert_eq!(e.memory_bits.act_derivs, 0);
    }

    #[test]
    fn sweep_block_cycles() {
        let s = sweep_z(
            &NetworkSpec::reference(),
            &doubling_candidates(&[128, 32], 4),
            FixedFormat::reference_default(),
        );
        let totals: Vec<_> = s.rows.iter().map(|r| r.z_total).collect();
        let clocks: Vec<_> = s.rows.iter().map(|r| r.block_cycle_clocks).collect();
        assert_eq!(totals, vec![160, 320, 640, 1280]);
        assert_eq!(clocks, vec![34, 18, 10, 6]);
        let bad = sweep_z(
            &NetworkSpec::reference(),
            &[vec![128, 64], vec![256, 64]],
            FixedFormat::reference_default(),
        );
        assert_eq!(bad.skipped.len(), 1);
        assert_eq!(bad.rows[0].z, vec![256, 64]);
    }

    #[test]
    fn profile_toml() {
        let p = DeviceProfile::from_toml_str("name = \"x\"\ndsp_count = 10\nbram_kbits = 100.0\n").unwrap();
        assert_eq!(p.dsp_count, 10);
        assert!(DeviceProfile::from_toml_str("name = \"x\"\ndsp_count = 0\nbram_kbits = 1.0\n").is_err());
    }
}
