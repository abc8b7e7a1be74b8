//! Epoch loop, learning-rate schedule, and run metrics.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::init::{init_params, InitScheme};
use super::{ActivationKind, Arithmetic, CostKind, Engine, EngineError, FixedArith, FloatArith, NetState, ParamStore};
use crate::data::{Dataset, Encoder, DEFAULT_EPOCH_SIZE, NUM_CLASSES};
use crate::fixedpoint::FixedFormat;
use crate::pipeline::{self, Slot};
use crate::topology::{build_interleavers, Network};

/// Piecewise-constant learning rate `2^-e`, given as `(first_epoch, e)` steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u32, u32)>", into = "Vec<(u32, u32)>")]
pub struct LrSchedule {
    steps: Vec<(u32, u32)>,
}

impl LrSchedule {
    pub fn new(steps: Vec<(u32, u32)>) -> Result<Self, EngineError> {
        if steps.first().map(|s| s.0) != Some(1) {
            return Err(EngineError::Schedule("first step must start at epoch 1".into()));
        }
        if steps.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(EngineError::Schedule("epochs must be strictly increasing".into()));
        }
        if steps.iter().any(|s| s.1 > 31) {
            return Err(EngineError::Schedule("exponent above 31".into()));
        }
        Ok(Self { steps })
    }

    /// `2^-3` for two epochs, then halved every four epochs down to `2^-7`.
    pub fn reference() -> Self {
        Self::new(vec![(1, 3), (3, 4), (7, 5), (11, 6), (15, 7)]).unwrap()
    }

    pub fn constant(exponent: u32) -> Self {
        Self::new(vec![(1, exponent)]).unwrap()
    }

    /// Exponent for a 1-based epoch.
    pub fn exponent(&self, epoch: u32) -> u32 {
        self.steps
            .iter()
            .take_while(|s| s.0 <= epoch.max(1))
            .last()
            .map(|s| s.1)
            .unwrap()
    }

    pub fn steps(&self) -> &[(u32, u32)] {
        &self.steps
    }
}

impl TryFrom<Vec<(u32, u32)>> for LrSchedule {
    type Error = EngineError;

    fn try_from(v: Vec<(u32, u32)>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<LrSchedule> for Vec<(u32, u32)> {
    fn from(s: LrSchedule) -> Self {
        s.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum UpdateSemantics {
    /// FF, BP and UP of one sample finish before the next sample starts.
    #[default]
    #[serde(rename = "sequential")]
    Sequential,
    /// Junction-pipelined: FF in block cycle `t` sees parameters as of the
    /// end of `t - 1`.
    #[serde(rename = "pipelined-stale", alias = "pipelined")]
    PipelinedStale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    Float,
    Fixed { format: FixedFormat },
}

impl Backend {
    pub fn label(&self) -> String {
        match self {
            Backend::Float => "float64".into(),
            Backend::Fixed { format } => format!("fixed{}-{}", format, format.rounding()),
        }
    }
}

fn default_window() -> usize {
    1000
}

fn default_log_every() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    #[serde(default = "default_epoch_size")]
    pub epoch_size: usize,
    #[serde(default = "LrSchedule::reference")]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub cost: CostKind,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    /// Last-layer activation when it differs from `activation`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_activation: Option<ActivationKind>,
    pub backend: Backend,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub interleaver_seed: u64,
    #[serde(default)]
    pub init_scheme: InitScheme,
    #[serde(default)]
    pub update_semantics: UpdateSemantics,
    /// Accuracy is measured over this many most recent training samples.
    #[serde(default = "default_window")]
    pub rolling_window: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_epoch_size() -> usize {
    DEFAULT_EPOCH_SIZE
}

fn default_activation() -> ActivationKind {
    ActivationKind::Sigmoid
}

impl TrainConfig {
    /// Reference protocol: 15 epochs of 12544 samples, sigmoid,
    /// cross-entropy, sequential updates.
    pub fn reference(backend: Backend) -> Self {
        Self {
            epochs: 15,
            epoch_size: DEFAULT_EPOCH_SIZE,
            lr_schedule: LrSchedule::reference(),
            cost: CostKind::CrossEntropy,
            activation: ActivationKind::Sigmoid,
            output_activation: None,
            backend,
            init_seed: 1,
            interleaver_seed: 1,
            init_scheme: InitScheme::Repeated,
            update_semantics: UpdateSemantics::Sequential,
            rolling_window: default_window(),
            log_every: default_log_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: u32,
    /// Samples completed within the epoch.
    pub sample_index: usize,
    pub rolling_accuracy: f64,
    pub eta_exponent: u32,
    pub max_abs_w: f64,
    pub max_abs_b: f64,
    /// Largest delta magnitude since the previous row.
    pub max_abs_delta: f64,
    /// Saturation events since the start of the run.
    pub clip_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: u32,
    pub rolling_accuracy: f64,
    pub eta_exponent: u32,
    pub max_abs_w: f64,
    pub max_abs_b: f64,
    pub max_abs_delta: f64,
    pub clip_events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RunMetrics {
    pub backend: String,
    pub rows: Vec<MetricsRow>,
    pub epochs: Vec<EpochSummary>,
    pub samples_seen: u64,
    pub max_abs_w: f64,
    pub max_abs_b: f64,
    pub max_abs_delta: f64,
    pub clip_events: u64,
}

impl RunMetrics {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.rolling_accuracy)
    }

    pub fn epoch_accuracy(&self, epoch: u32) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == epoch)
            .map(|e| e.rolling_accuracy)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "epoch",
                "sample_index",
                "rolling_accuracy",
                "eta_exponent",
                "max_abs_w",
                "max_abs_b",
                "max_abs_delta",
                "clip_count",
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rolling classification accuracy over the last `window` samples.
#[derive(Debug, Clone)]
pub struct RollingAccuracy {
    window: usize,
    hits: VecDeque<bool>,
    correct: usize,
}

impl RollingAccuracy {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            hits: VecDeque::with_capacity(window.max(1)),
            correct: 0,
        }
    }

    pub fn push(&mut self, hit: bool) {
        if self.hits.len() == self.window && self.hits.pop_front() == Some(true) {
            self.correct -= 1;
        }
        self.hits.push_back(hit);
        self.correct += hit as usize;
    }

    /// Percentage; zero before any sample.
    pub fn percent(&self) -> f64 {
        if self.hits.is_empty() {
            0.0
        } else {
            100.0 * self.correct as f64 / self.hits.len() as f64
        }
    }
}

struct Recorder<'a, A: Arithmetic> {
    engine: &'a Engine<A>,
    cfg: &'a TrainConfig,
    rolling: RollingAccuracy,
    metrics: RunMetrics,
    delta_since_row: f64,
    delta_in_epoch: f64,
}

impl<'a, A: Arithmetic> Recorder<'a, A> {
    fn new(engine: &'a Engine<A>, cfg: &'a TrainConfig) -> Self {
        Self {
            engine,
            cfg,
            rolling: RollingAccuracy::new(cfg.rolling_window),
            metrics: RunMetrics {
                backend: engine.arith().name(),
                ..RunMetrics::default()
            },
            delta_since_row: 0.0,
            delta_in_epoch: 0.0,
        }
    }

    fn observe_deltas(&mut self, state: &NetState<A::Scalar>) {
        let d = self.engine.max_abs_delta(state);
        self.delta_since_row = self.delta_since_row.max(d);
        self.delta_in_epoch = self.delta_in_epoch.max(d);
        self.metrics.max_abs_delta = self.metrics.max_abs_delta.max(d);
    }

    /// Record a prediction for the `seen`-th sample (1-based, whole run).
    fn prediction(&mut self, params: &ParamStore<A::Scalar>, seen: u64, hit: bool) {
        self.rolling.push(hit);
        self.metrics.samples_seen = seen;
        let size = self.cfg.epoch_size as u64;
        let epoch = ((seen - 1) / size) as u32 + 1;
        let in_epoch = ((seen - 1) % size + 1) as usize;
        let epoch_end = in_epoch == self.cfg.epoch_size;
        if epoch_end || (self.cfg.log_every > 0 && in_epoch.is_multiple_of(self.cfg.log_every)) {
            self.row(params, epoch, in_epoch);
        }
        if epoch_end {
            let last = self.metrics.rows.last().unwrap().clone();
            self.metrics.epochs.push(EpochSummary {
                epoch,
                rolling_accuracy: last.rolling_accuracy,
                eta_exponent: last.eta_exponent,
                max_abs_w: last.max_abs_w,
                max_abs_b: last.max_abs_b,
                max_abs_delta: self.delta_in_epoch,
                clip_events: last.clip_count,
            });
            self.delta_in_epoch = 0.0;
        }
    }

    fn row(&mut self, params: &ParamStore<A::Scalar>, epoch: u32, in_epoch: usize) {
        let a = self.engine.arith();
        let w = params.max_abs_weight(a);
        let b = params.max_abs_bias(a);
        self.metrics.max_abs_w = self.metrics.max_abs_w.max(w);
        self.metrics.max_abs_b = self.metrics.max_abs_b.max(b);
        self.metrics.rows.push(MetricsRow {
            epoch,
            sample_index: in_epoch,
            rolling_accuracy: self.rolling.percent(),
            eta_exponent: self.cfg.lr_schedule.exponent(epoch),
            max_abs_w: w,
            max_abs_b: b,
            max_abs_delta: self.delta_since_row,
            clip_count: a.clip_events(),
        });
        self.delta_since_row = 0.0;
    }

    fn finish(mut self) -> RunMetrics {
        self.metrics.clip_events = self.engine.arith().clip_events();
        self.metrics
    }
}

/// Train `params` in place over `epochs * epoch_size` samples.
pub fn train<A: Arithmetic>(
    engine: &Engine<A>,
    params: &mut ParamStore<A::Scalar>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunMetrics, EngineError> {
    if cfg.epochs > 0 {
        let _ = crate::data::epoch_stream(data, cfg.epoch_size)?;
    }
    let encoder = Encoder::new(
        engine.arith(),
        engine.network().inputs(),
        engine.network().outputs(),
        data.pixels_per_image(),
    )?;
    match cfg.update_semantics {
        UpdateSemantics::Sequential => train_sequential(engine, params, data, cfg, &encoder),
        UpdateSemantics::PipelinedStale => train_pipelined(engine, params, data, cfg, &encoder),
    }
}

fn train_sequential<A: Arithmetic>(
    engine: &Engine<A>,
    params: &mut ParamStore<A::Scalar>,
    data: &Dataset,
    cfg: &TrainConfig,
    encoder: &Encoder<A::Scalar>,
) -> Result<RunMetrics, EngineError> {
    let mut rec = Recorder::new(engine, cfg);
    let mut state = engine.new_state();
    let mut a0 = vec![engine.arith().zero(); engine.network().inputs()];
    let mut y = vec![engine.arith().zero(); engine.network().outputs()];
    let mut seen = 0u64;
    for epoch in 1..=cfg.epochs {
        let shift = cfg.lr_schedule.exponent(epoch);
        for sample in crate::data::epoch_stream(data, cfg.epoch_size)? {
            encoder.encode_into(&sample, &mut a0, &mut y);
            let predicted = engine.train_step(params, &mut state, &a0, &y, shift, NUM_CLASSES)?;
            seen += 1;
            state.sample = Some(seen - 1);
            rec.observe_deltas(&state);
            rec.prediction(params, seen, predicted == sample.label as usize);
        }
    }
    Ok(rec.finish())
}

/// Block-cycle simulation of the pipelined datapath. Within a block cycle
/// every FF and BP reads parameters first; all UPs land afterwards.
fn train_pipelined<A: Arithmetic>(
    engine: &Engine<A>,
    params: &mut ParamStore<A::Scalar>,
    data: &Dataset,
    cfg: &TrainConfig,
    encoder: &Encoder<A::Scalar>,
) -> Result<RunMetrics, EngineError> {
    let layers = engine.num_junctions();
    let total = cfg.epochs as u64 * cfg.epoch_size as u64;
    let mut rec = Recorder::new(engine, cfg);
    if total == 0 {
        return Ok(rec.finish());
    }
    let ring = 2 * layers;
    let mut states: Vec<NetState<A::Scalar>> = (0..ring).map(|_| engine.new_state()).collect();
    let mut a0 = vec![engine.arith().zero(); engine.network().inputs()];
    let mut y = vec![engine.arith().zero(); engine.network().outputs()];
    let mut truths = vec![vec![engine.arith().zero(); engine.network().outputs()]; ring];
    let mut applied = vec![0u64; layers];
    let mut seen = 0u64;
    let last_cycle = total - 1 + (2 * layers - 1) as u64;
    for t in 0..=last_cycle {
        let slot = pipeline::schedule_at(t, layers);
        for i in 1..=layers {
            let js = slot.junction(i);
            if let Slot::Active(s) = js.ff {
                if s < total {
                    debug_assert_eq!(
                        applied[i - 1],
                        pipeline::update_horizon(t, i, layers).map_or(0, |h| h + 1).min(total)
                    );
                    let st = &mut states[s as usize % ring];
                    if i == 1 {
                        let sample = data.sample((s % cfg.epoch_size as u64) as usize);
                        encoder.encode_into(&sample, &mut a0, &mut y);
                        engine.load_input(st, &a0)?;
                        st.sample = Some(s);
                        truths[s as usize % ring].copy_from_slice(&y);
                    }
                    engine.feedforward_junction(params, st, i);
                    if i == layers {
                        let predicted = engine.predict(st, NUM_CLASSES);
                        engine.cost_delta(st, &truths[s as usize % ring])?;
                        let label = data.sample((s % cfg.epoch_size as u64) as usize).label;
                        seen += 1;
                        rec.prediction(params, seen, predicted == label as usize);
                    }
                }
            }
            if let Slot::Active(s) = js.bp {
                if s < total {
                    engine.backprop_junction(params, &mut states[s as usize % ring], i);
                }
            }
        }
        for i in 1..=layers {
            if let Slot::Active(s) = slot.junction(i).up {
                if s < total {
                    let epoch = (s / cfg.epoch_size as u64) as u32 + 1;
                    let st = &states[s as usize % ring];
                    engine.update_junction(params, st, i, cfg.lr_schedule.exponent(epoch));
                    applied[i - 1] += 1;
                    if i == 1 {
                        rec.observe_deltas(st);
                    }
                }
            }
        }
    }
    Ok(rec.finish())
}

/// Outcome of [`run`]: metrics plus final parameters as real numbers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub params: ParamSnapshot,
    /// Forward-only accuracy on a separate dataset, when one was given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_accuracy: Option<f64>,
}

/// Parameters as reals (plus raw words in fixed mode), junction by junction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSnapshot {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_weights: Option<Vec<Vec<i32>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_biases: Option<Vec<Vec<i32>>>,
}

impl ParamSnapshot {
    pub fn of<A: Arithmetic>(arith: &A, params: &ParamStore<A::Scalar>) -> Self {
        let conv = |v: &Vec<A::Scalar>| v.iter().map(|&x| arith.to_f64(x)).collect();
        Self {
            weights: params.junctions.iter().map(|j| conv(&j.weights)).collect(),
            biases: params.junctions.iter().map(|j| conv(&j.biases)).collect(),
            raw_weights: None,
            raw_biases: None,
        }
    }
}

/// Build an engine for `cfg.backend`, initialize, and train.
pub fn run(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<RunOutcome, EngineError> {
    run_with_held_out(net, data, None, cfg)
}

/// [`run`], then evaluate the trained parameters on `held_out`.
pub fn run_with_held_out(
    net: &Network,
    data: &Dataset,
    held_out: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<RunOutcome, EngineError> {
    let interleavers = build_interleavers(net, cfg.interleaver_seed)?;
    match cfg.backend {
        Backend::Float => {
            let engine = Engine::new(
                FloatArith::<f64>::new(),
                net.clone(),
                interleavers,
                cfg.activation,
                cfg.cost,
            )?
            .with_output_activation(cfg.output_activation.unwrap_or(cfg.activation));
            let mut params = init_params(engine.arith(), net, cfg.init_seed, cfg.init_scheme);
            let metrics = train(&engine, &mut params, data, cfg)?;
            Ok(RunOutcome {
                metrics,
                params: ParamSnapshot::of(engine.arith(), &params),
                held_out_accuracy: held_out.map(|d| evaluate(&engine, &params, d)).transpose()?,
            })
        }
        Backend::Fixed { format } => {
            let engine = Engine::new(
                FixedArith::new(format),
                net.clone(),
                interleavers,
                cfg.activation,
                cfg.cost,
            )?
            .with_output_activation(cfg.output_activation.unwrap_or(cfg.activation));
            let mut params = init_params(engine.arith(), net, cfg.init_seed, cfg.init_scheme);
            let metrics = train(&engine, &mut params, data, cfg)?;
            let mut snap = ParamSnapshot::of(engine.arith(), &params);
            snap.raw_weights = Some(params.junctions.iter().map(|j| j.weights.clone()).collect());
            snap.raw_biases = Some(params.junctions.iter().map(|j| j.biases.clone()).collect());
            Ok(RunOutcome {
                metrics,
                params: snap,
                held_out_accuracy: held_out.map(|d| evaluate(&engine, &params, d)).transpose()?,
            })
        }
    }
}

/// Forward-only accuracy (percent) over a dataset; used for the optional
/// held-out metric.
pub fn evaluate<A: Arithmetic>(
    engine: &Engine<A>,
    params: &ParamStore<A::Scalar>,
    data: &Dataset,
) -> Result<f64, EngineError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let encoder = Encoder::new(
        engine.arith(),
        engine.network().inputs(),
        engine.network().outputs(),
        data.pixels_per_image(),
    )?;
    let mut state = engine.new_state();
    let mut a0 = vec![engine.arith().zero(); engine.network().inputs()];
    let mut y = vec![engine.arith().zero(); engine.network().outputs()];
    let mut correct = 0usize;
    for sample in data.iter() {
        encoder.encode_into(&sample, &mut a0, &mut y);
        engine.feedforward(params, &a0, &mut state)?;
        correct += (engine.predict(&state, NUM_CLASSES) == sample.label as usize) as usize;
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}
