//! Dynamic-range study of the first hidden layer's pre-activations.
//!
//! A float network is trained sequentially for a few epochs. After that,
//! `|sum w a + b|` is collected for every layer-1 neuron over a window of
//! training samples, to see how much of it would saturate in a format
//! with `b_n` integer bits.

use serde::{Deserialize, Serialize};

use super::init::{init_params, InitScheme};
use super::train::LrSchedule;
use super::{ActivationKind, Arithmetic, CostKind, Engine, EngineError, FloatArith, NetState, ParamStore};
use crate::data::{Dataset, Encoder, NUM_CLASSES};
use crate::topology::{build_interleavers, build_network_with, BuildOptions, Network, NetworkSpec};

/// Running summary of magnitudes against a clipping bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipStats {
    pub bound: f64,
    pub count: u64,
    pub clipped: u64,
    pub mean: f64,
    /// Sum of squared deviations (Welford).
    m2: f64,
    pub max: f64,
    pub bin_width: f64,
    /// Counts of `|s|` per `bin_width` bucket; the last bucket is open-ended.
    pub histogram: Vec<u64>,
}

impl ClipStats {
    pub fn new(bound: f64, bin_width: f64, bins: usize) -> Self {
        Self {
            bound,
            count: 0,
            clipped: 0,
            mean: 0.0,
            m2: 0.0,
            max: 0.0,
            bin_width,
            histogram: vec![0; bins.max(1)],
        }
    }

    pub fn push(&mut self, s: f64) {
        let m = s.abs();
        self.count += 1;
        self.clipped += (m >= self.bound) as u64;
        let d = m - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (m - self.mean);
        self.max = self.max.max(m);
        let last = self.histogram.len() - 1;
        self.histogram[((m / self.bin_width) as usize).min(last)] += 1;
    }

    /// Share of magnitudes at or above the bound, in `[0, 1]`.
    pub fn fraction(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.clipped as f64 / self.count as f64
        }
    }

    /// Unbiased sample variance of the magnitudes.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

/// Collect layer-1 pre-activation magnitudes for `samples` forward passes.
pub fn clip_statistics<A: Arithmetic>(
    engine: &Engine<A>,
    params: &ParamStore<A::Scalar>,
    data: &Dataset,
    range: std::ops::Range<usize>,
    bound: f64,
) -> Result<ClipStats, EngineError> {
    let encoder = Encoder::new(
        engine.arith(),
        engine.network().inputs(),
        engine.network().outputs(),
        data.pixels_per_image(),
    )?;
    let mut stats = ClipStats::new(bound, 0.5, 64);
    let mut state = engine.new_state();
    let mut a0 = vec![engine.arith().zero(); engine.network().inputs()];
    let mut y = vec![engine.arith().zero(); engine.network().outputs()];
    for idx in range {
        encoder.encode_into(&data.sample(idx % data.len()), &mut a0, &mut y);
        engine.load_input(&mut state, &a0)?;
        engine.feedforward_junction(params, &mut state, 1);
        observe(engine.arith(), &state, &mut stats);
    }
    Ok(stats)
}

fn observe<A: Arithmetic>(arith: &A, state: &NetState<A::Scalar>, stats: &mut ClipStats) {
    for &s in &state.pre_activations[1] {
        stats.push(arith.to_f64(s));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Sparse,
    /// Same layer sizes, every junction fully connected.
    Fc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipStudyConfig {
    /// Training epochs before measuring.
    pub train_epochs: u32,
    pub epoch_size: usize,
    /// Samples measured, starting at `window_start`.
    pub window: usize,
    pub window_start: usize,
    /// Integer bits of the target format; the bound is `2^int_bits`.
    pub int_bits: u32,
    pub init_seed: u64,
    pub interleaver_seed: u64,
    pub lr_schedule: LrSchedule,
}

impl Default for ClipStudyConfig {
    fn default() -> Self {
        Self {
            train_epochs: 1,
            epoch_size: crate::data::DEFAULT_EPOCH_SIZE,
            window: 1000,
            window_start: 0,
            int_bits: 3,
            init_seed: 1,
            interleaver_seed: 1,
            lr_schedule: LrSchedule::reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipStudyResult {
    pub which: Which,
    pub layer_sizes: Vec<usize>,
    pub d_out: Vec<usize>,
    pub stats: ClipStats,
}

pub fn study_network(spec: &NetworkSpec, which: Which) -> Result<Network, EngineError> {
    Ok(match which {
        Which::Sparse => build_network_with(spec, BuildOptions::default())?,
        Which::Fc => build_network_with(&spec.fully_connected_counterpart(), BuildOptions::relaxed())?,
    })
}

/// Train a float network of the requested kind, then measure.
pub fn clip_study(
    spec: &NetworkSpec,
    which: Which,
    data: &Dataset,
    cfg: &ClipStudyConfig,
) -> Result<ClipStudyResult, EngineError> {
    let net = study_network(spec, which)?;
    let interleavers = build_interleavers(&net, cfg.interleaver_seed)?;
    let engine = Engine::new(
        FloatArith::<f64>::new(),
        net.clone(),
        interleavers,
        ActivationKind::Sigmoid,
        CostKind::CrossEntropy,
    )?;
    let mut params = init_params(engine.arith(), &net, cfg.init_seed, InitScheme::Repeated);
    let encoder = Encoder::new(engine.arith(), net.inputs(), net.outputs(), data.pixels_per_image())?;
    let mut state = engine.new_state();
    let mut a0 = vec![0.0; net.inputs()];
    let mut y = vec![0.0; net.outputs()];
    for epoch in 1..=cfg.train_epochs {
        let shift = cfg.lr_schedule.exponent(epoch);
        for sample in crate::data::epoch_stream(data, cfg.epoch_size)? {
            encoder.encode_into(&sample, &mut a0, &mut y);
            engine.train_step(&mut params, &mut state, &a0, &y, shift, NUM_CLASSES)?;
        }
    }
    let range = cfg.window_start..cfg.window_start + cfg.window;
    let stats = clip_statistics(&engine, &params, data, range, 2f64.powi(cfg.int_bits as i32))?;
    Ok(ClipStudyResult {
        which,
        layer_sizes: net.layer_sizes().to_vec(),
        d_out: net.junctions().iter().map(|j| j.d_out).collect(),
        stats,
    })
}
