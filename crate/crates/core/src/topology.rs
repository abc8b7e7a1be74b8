//! Pre-defined sparse connectivity.
//!
//! Junction `i` joins layer `i-1` (left) to layer `i` (right). Every left
//! neuron has exactly `d_out` edges and every right neuron exactly `d_in`, so
//! `N_{i-1} * d_out = N_i * d_in = W_i`. Weights are numbered sequentially on
//! the right: slots `[j*d_in, (j+1)*d_in)` feed right neuron `j`, and an
//! [`Interleaver`] maps each slot to the left neuron it reads.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("junction {junction}: {invariant}")]
    Junction { junction: usize, invariant: String },
    #[error("network: {0}")]
    Network(String),
    #[error("clock {clock} out of range (junction has {clocks} clocks)")]
    ClockOutOfRange { clock: usize, clocks: usize },
    #[error("interleaver map: {0}")]
    Map(String),
}

/// One junction's shape and degree of parallelism `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JunctionSpec {
    pub n_left: usize,
    pub n_right: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub z: usize,
}

impl JunctionSpec {
    /// Derives `d_in` from the weight count; fails if it is not integral.
    pub fn new(n_left: usize, n_right: usize, d_out: usize, z: usize) -> Result<Self, TopologyError> {
        let fail = |s: &str| TopologyError::Junction {
            junction: 0,
            invariant: s.to_string(),
        };
        if n_left == 0 || n_right == 0 || d_out == 0 || z == 0 {
            return Err(fail("neuron counts, d_out and z must be positive"));
        }
        let weights = n_left * d_out;
        if !weights.is_multiple_of(n_right) {
            return Err(fail("N_left * d_out must be divisible by N_right"));
        }
        Ok(Self {
            n_left,
            n_right,
            d_out,
            d_in: weights / n_right,
            z,
        })
    }

    pub fn weights(&self) -> usize {
        self.n_left * self.d_out
    }

    /// Clocks needed to sweep the weights once, `W / z`.
    pub fn weight_sets(&self) -> usize {
        self.weights() / self.z
    }

    /// Right neurons completed per clock, `z / d_in`.
    pub fn neurons_per_clock(&self) -> usize {
        self.z / self.d_in
    }

    pub fn density(&self) -> f64 {
        self.weights() as f64 / (self.n_left * self.n_right) as f64
    }

    pub fn is_fully_connected(&self) -> bool {
        self.d_out == self.n_right && self.d_in == self.n_left
    }

    /// Check every junction invariant. `power_of_two` enforces the hardware's
    /// power-of-two sizing on all five parameters.
    pub fn validate(&self, power_of_two: bool) -> Result<(), String> {
        let w = self.weights();
        if self.n_left * self.d_out != self.n_right * self.d_in {
            return Err("N_left * d_out must equal N_right * d_in".into());
        }
        if self.d_out < 1 || self.d_out > self.n_right {
            return Err(format!("d_out {} must lie in 1..={}", self.d_out, self.n_right));
        }
        if self.d_in < 1 || self.d_in > self.n_left {
            return Err(format!("d_in {} must lie in 1..={}", self.d_in, self.n_left));
        }
        if self.z < self.d_in {
            return Err(format!("z {} must be at least d_in {}", self.z, self.d_in));
        }
        if !self.z.is_multiple_of(self.d_in) {
            return Err(format!("d_in {} must divide z {}", self.d_in, self.z));
        }
        if !w.is_multiple_of(self.z) {
            return Err(format!("z {} must divide W {}", self.z, w));
        }
        if power_of_two {
            for (name, v) in [
                ("N_left", self.n_left),
                ("N_right", self.n_right),
                ("d_out", self.d_out),
                ("d_in", self.d_in),
                ("z", self.z),
            ] {
                if !v.is_power_of_two() {
                    return Err(format!("{name} = {v} is not a power of two"));
                }
            }
        }
        Ok(())
    }
}

fn default_clock_hz() -> f64 {
    15.0e6
}

/// User-facing network description: layer sizes, per-junction `d_out` and `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub d_out: Vec<usize>,
    pub z: Vec<usize>,
    #[serde(default = "default_clock_hz")]
    pub clock_hz: f64,
}

impl NetworkSpec {
    /// The implemented configuration: 1024-64-32 with fan-out (4, 16), z (128, 32).
    pub fn reference() -> Self {
        Self {
            layer_sizes: vec![1024, 64, 32],
            d_out: vec![4, 16],
            z: vec![128, 32],
            clock_hz: default_clock_hz(),
        }
    }

    /// Same layer sizes with every junction fully connected. `z` is set to
    /// `N_left` per junction, which violates the equal-block-cycle rule, so
    /// build it with [`BuildOptions::relaxed`].
    pub fn fully_connected_counterpart(&self) -> Self {
        let n = &self.layer_sizes;
        Self {
            layer_sizes: n.clone(),
            d_out: n[1..].to_vec(),
            z: n[..n.len() - 1].to_vec(),
            clock_hz: self.clock_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub require_power_of_two: bool,
    pub require_equal_block_cycles: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            require_power_of_two: true,
            require_equal_block_cycles: true,
        }
    }
}

impl BuildOptions {
    /// Keeps the degree constraints but allows unequal block cycles; used for
    /// software-only studies such as the fully connected comparison.
    pub fn relaxed() -> Self {
        Self {
            require_power_of_two: true,
            require_equal_block_cycles: false,
        }
    }
}

/// A validated network with its derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Network {
    layer_sizes: Vec<usize>,
    junctions: Vec<JunctionSpec>,
    clock_hz: f64,
}

pub fn build_network(spec: &NetworkSpec) -> Result<Network, TopologyError> {
    build_network_with(spec, BuildOptions::default())
}

pub fn build_network_with(spec: &NetworkSpec, opts: BuildOptions) -> Result<Network, TopologyError> {
    let n = &spec.layer_sizes;
    if n.len() < 2 {
        return Err(TopologyError::Network("need at least two layers".into()));
    }
    let l = n.len() - 1;
    if spec.d_out.len() != l || spec.z.len() != l {
        return Err(TopologyError::Network(format!(
            "{l} junctions need {l} d_out and z entries (got {} and {})",
            spec.d_out.len(),
            spec.z.len()
        )));
    }
    if !(spec.clock_hz.is_finite() && spec.clock_hz > 0.0) {
        return Err(TopologyError::Network("clock_hz must be positive".into()));
    }
    let mut junctions = Vec::with_capacity(l);
    for i in 0..l {
        let tag = |e: TopologyError| match e {
            TopologyError::Junction { invariant, .. } => TopologyError::Junction {
                junction: i + 1,
                invariant,
            },
            other => other,
        };
        let j = JunctionSpec::new(n[i], n[i + 1], spec.d_out[i], spec.z[i]).map_err(tag)?;
        j.validate(opts.require_power_of_two)
            .map_err(|invariant| TopologyError::Junction {
                junction: i + 1,
                invariant,
            })?;
        junctions.push(j);
    }
    if opts.require_equal_block_cycles {
        let first = junctions[0].weight_sets();
        if let Some((i, j)) = junctions.iter().enumerate().find(|(_, j)| j.weight_sets() != first) {
            return Err(TopologyError::Junction {
                junction: i + 1,
                invariant: format!(
                    "W/z = {} differs from junction 1's {first}; all junctions need equal block cycles",
                    j.weight_sets()
                ),
            });
        }
    }
    Ok(Network {
        layer_sizes: n.clone(),
        junctions,
        clock_hz: spec.clock_hz,
    })
}

impl Network {
    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn junctions(&self) -> &[JunctionSpec] {
        &self.junctions
    }

    /// Junction `i`, 1-based as in the layer numbering.
    pub fn junction(&self, i: usize) -> &JunctionSpec {
        &self.junctions[i - 1]
    }

    pub fn num_junctions(&self) -> usize {
        self.junctions.len()
    }

    pub fn clock_hz(&self) -> f64 {
        self.clock_hz
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn total_weights(&self) -> usize {
        self.junctions.iter().map(JunctionSpec::weights).sum()
    }

    pub fn overall_density(&self) -> f64 {
        let dense: usize = self.junctions.iter().map(|j| j.n_left * j.n_right).sum();
        self.total_weights() as f64 / dense as f64
    }

    /// Weights plus one bias per non-input neuron.
    pub fn param_count(&self) -> usize {
        self.total_weights() + self.layer_sizes[1..].iter().sum::<usize>()
    }

    pub fn to_spec(&self) -> NetworkSpec {
        NetworkSpec {
            layer_sizes: self.layer_sizes.clone(),
            d_out: self.junctions.iter().map(|j| j.d_out).collect(),
            z: self.junctions.iter().map(|j| j.z).collect(),
            clock_hz: self.clock_hz,
        }
    }
}

/// Location of a value in a bank of `z` memories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BankAddress {
    pub bank: usize,
    pub address: usize,
}

impl BankAddress {
    pub fn of(index: usize, z: usize) -> Self {
        Self {
            bank: index % z,
            address: index / z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClashReport {
    pub clash_free: bool,
    pub first_violation: Option<usize>,
}

/// Right-sequential weight slot to left neuron map for one junction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interleaver {
    junction: JunctionSpec,
    map: Vec<u32>,
    seed: u64,
}

/// Residue-class construction: slot `m` only holds left neurons `l` with
/// `l = m (mod z)`. Within each class the `W/z` slots receive a seeded
/// shuffle of the class's `N_left/z` neurons, each repeated `d_out` times.
pub fn build_interleaver(j: &JunctionSpec, seed: u64) -> Result<Interleaver, TopologyError> {
    j.validate(false)
        .map_err(|invariant| TopologyError::Junction { junction: 0, invariant })?;
    if !j.n_left.is_multiple_of(j.z) {
        return Err(TopologyError::Junction {
            junction: 0,
            invariant: format!(
                "z {} must divide N_left {} to build a clash-free interleaver",
                j.z, j.n_left
            ),
        });
    }
    let z = j.z;
    let per_class_slots = j.weights() / z;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = vec![0u32; j.weights()];
    let mut class = Vec::with_capacity(per_class_slots);
    for r in 0..z {
        class.clear();
        for l in (r..j.n_left).step_by(z) {
            class.extend(std::iter::repeat_n(l as u32, j.d_out));
        }
        debug_assert_eq!(class.len(), per_class_slots);
        class.shuffle(&mut rng);
        for (k, &l) in class.iter().enumerate() {
            map[k * z + r] = l;
        }
    }
    Ok(Interleaver {
        junction: *j,
        map,
        seed,
    })
}

impl Interleaver {
    /// Wrap an arbitrary map; checks shape and index range only.
    pub fn from_map(junction: JunctionSpec, map: Vec<u32>) -> Result<Self, TopologyError> {
        if map.len() != junction.weights() {
            return Err(TopologyError::Map(format!(
                "length {} differs from W = {}",
                map.len(),
                junction.weights()
            )));
        }
        if let Some(bad) = map.iter().find(|&&l| l as usize >= junction.n_left) {
            return Err(TopologyError::Map(format!("left index {bad} out of range")));
        }
        Ok(Self { junction, map, seed: 0 })
    }

    pub fn junction(&self) -> &JunctionSpec {
        &self.junction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn map(&self) -> &[u32] {
        &self.map
    }

    #[inline(always)]
    pub fn left_of(&self, slot: usize) -> usize {
        self.map[slot] as usize
    }

    pub fn clocks(&self) -> usize {
        self.junction.weight_sets()
    }

    /// The `z` left neurons read in clock `k`, in slot order.
    pub fn left_indices_for_clock(&self, k: usize) -> Result<&[u32], TopologyError> {
        if k >= self.clocks() {
            return Err(TopologyError::ClockOutOfRange {
                clock: k,
                clocks: self.clocks(),
            });
        }
        let z = self.junction.z;
        Ok(&self.map[k * z..(k + 1) * z])
    }

    pub fn bank_addresses_for_clock(&self, k: usize) -> Result<Vec<BankAddress>, TopologyError> {
        let z = self.junction.z;
        Ok(self
            .left_indices_for_clock(k)?
            .iter()
            .map(|&l| BankAddress::of(l as usize, z))
            .collect())
    }

    pub fn verify_clash_free(&self) -> ClashReport {
        let z = self.junction.z;
        let mut seen = vec![usize::MAX; z];
        for k in 0..self.clocks() {
            for &l in &self.map[k * z..(k + 1) * z] {
                let bank = l as usize % z;
                if seen[bank] == k {
                    return ClashReport {
                        clash_free: false,
                        first_violation: Some(k),
                    };
                }
                seen[bank] = k;
            }
        }
        ClashReport {
            clash_free: true,
            first_violation: None,
        }
    }

    /// Number of slots each left neuron occupies.
    pub fn fan_out_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.junction.n_left];
        for &l in &self.map {
            counts[l as usize] += 1;
        }
        counts
    }

    /// CSV with columns `slot,left_index,bank,address`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["slot", "left_index", "bank", "address"])?;
        let z = self.junction.z;
        for (slot, &l) in self.map.iter().enumerate() {
            let ba = BankAddress::of(l as usize, z);
            w.write_record(&[
                slot.to_string(),
                l.to_string(),
                ba.bank.to_string(),
                ba.address.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Interleavers for every junction; junction `i` uses `seed + i - 1`.
pub fn build_interleavers(net: &Network, seed: u64) -> Result<Vec<Interleaver>, TopologyError> {
    net.junctions()
        .iter()
        .enumerate()
        .map(|(i, j)| {
            build_interleaver(j, seed.wrapping_add(i as u64)).map_err(|e| match e {
                TopologyError::Junction { invariant, .. } => TopologyError::Junction {
                    junction: i + 1,
                    invariant,
                },
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_network_numbers() {
        let net = build_network(&NetworkSpec::reference()).unwrap();
        let w: Vec<_> = net.junctions().iter().map(|j| j.weights()).collect();
        let d_in: Vec<_> = net.junctions().iter().map(|j| j.d_in).collect();
        assert_eq!(w, vec![4096, 1024]);
        assert_eq!(d_in, vec![64, 32]);
        assert_eq!(net.junction(1).density(), 0.0625);
        assert_eq!(net.junction(2).density(), 0.5);
        assert_eq!(net.junction(1).weight_sets(), 32);
        assert_eq!(net.junction(2).weight_sets(), 32);
        assert_eq!(net.param_count(), 5216);
        assert_eq!(format!("{:.3}", net.overall_density() * 100.0), "7.576");
    }

    #[test]
    fn fully_connected_density() {
        let j = JunctionSpec::new(4, 4, 4, 4).unwrap();
        j.validate(true).unwrap();
        assert!(j.is_fully_connected());
        assert_eq!(j.density(), 1.0);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let spec = NetworkSpec {
            layer_sizes: vec![12, 4],
            d_out: vec![3],
            z: vec![9],
            clock_hz: 1.0,
        };
        let err = build_network(&spec).unwrap_err();
        assert!(err.to_string().contains("power of two"), "{err}");
        let relaxed = BuildOptions {
            require_power_of_two: false,
            require_equal_block_cycles: true,
        };
        build_network_with(&spec, relaxed).unwrap();
    }

    #[test]
    fn rejects_unequal_block_cycles() {
        let mut spec = NetworkSpec::reference();
        spec.z = vec![64, 32];
        let err = build_network(&spec).unwrap_err();
        assert!(matches!(err, TopologyError::Junction { junction: 2, .. }), "{err}");
        build_network_with(&spec, BuildOptions::relaxed()).unwrap();
    }

    #[test]
    fn rejects_small_z() {
        let mut spec = NetworkSpec::reference();
        spec.z = vec![32, 8];
        let err = build_network(&spec).unwrap_err();
        assert!(err.to_string().contains("at least d_in"), "{err}");
    }

    #[test]
    fn tiny_interleaver_is_forced() {
        let j = JunctionSpec::new(4, 2, 2, 4).unwrap();
        assert_eq!(j.d_in, 4);
        let ilv = build_interleaver(&j, 7).unwrap();
        assert_eq!(ilv.map(), &[0, 1, 2, 3, 0, 1, 2, 3]);
        let banks: Vec<_> = ilv
            .bank_addresses_for_clock(0)
            .unwrap()
            .iter()
            .map(|b| b.bank)
            .collect();
        assert_eq!(banks, vec![0, 1, 2, 3]);
        assert_eq!(ilv.fan_out_histogram(), vec![2; 4]);
        assert!(ilv.left_indices_for_clock(2).is_err());
    }

    #[test]
    fn manufactured_clash_detected() {
        let j = JunctionSpec::new(4, 2, 1, 2).unwrap();
        let ilv = Interleaver::from_map(j, vec![0, 2, 1, 3]).unwrap();
        assert_eq!(
            ilv.verify_clash_free(),
            ClashReport {
                clash_free: false,
                first_violation: Some(0)
            }
        );
        let ok = Interleaver::from_map(j, vec![0, 1, 2, 3]).unwrap();
        assert!(ok.verify_clash_free().clash_free);
        assert!(Interleaver::from_map(j, vec![0, 1, 2]).is_err());
        assert!(Interleaver::from_map(j, vec![0, 1, 2, 4]).is_err());
    }

    #[test]
    fn fc_with_z_equal_left_is_permutation() {
        let j = JunctionSpec::new(8, 4, 4, 8).unwrap();
        let ilv = build_interleaver(&j, 3).unwrap();
        for k in 0..ilv.clocks() {
            let mut idx = ilv.left_indices_for_clock(k).unwrap().to_vec();
            idx.sort_unstable();
            assert_eq!(idx, (0..8).collect::<Vec<u32>>());
        }
    }

    #[test]
    fn interleaver_requires_z_dividing_left() {
        let j = JunctionSpec::new(64, 32, 16, 256).unwrap();
        assert!(build_interleaver(&j, 0).is_err());
    }

    #[test]
    fn csv_export() {
        let j = JunctionSpec::new(4, 2, 2, 4).unwrap();
        let ilv = build_interleaver(&j, 1).unwrap();
        let mut buf = Vec::new();
        ilv.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "slot,left_index,bank,address");
        assert_eq!(lines[5], "4,0,0,0");
        assert_eq!(lines.len(), 9);
    }
}
