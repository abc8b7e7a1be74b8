//! Feedforward, backpropagation and update over a pre-defined sparse network.
//!
//! The same code runs on every [`Arithmetic`] backend. Left operands are
//! fetched through each junction's [`Interleaver`]; weights are stored in
//! right-sequential slot order.
//!
//! Hardware ordering rules, which matter because saturating addition is
//! not associative:
//!
//! * FF: the `d_in` products of a right neuron go through a balanced tree,
//!   then the bias is added once at the root.
//! * BP: partial sums for each left neuron accumulate in ascending slot
//!   order, then multiply by the stored activation derivative.
//! * UP: `b -= 2^-e * delta` and `w -= 2^-e * (a * delta)`, the product
//!   requantized before the shift.

pub mod activation;
pub mod arith;
pub mod clipstats;
pub mod init;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use activation::{ActivationKind, ActivationTable};
pub use arith::{Arithmetic, FixedArith, FloatArith};

use crate::data::DataError;
use crate::topology::{Interleaver, Network, TopologyError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("unknown cost `{0}`")]
    UnknownCost(String),
    #[error("activation table for {0}-bit words is too large")]
    TableTooLarge(u32),
    #[error("missing state: {0}")]
    MissingState(&'static str),
    #[error("learning-rate schedule: {0}")]
    Schedule(String),
    #[error("interleavers do not match the network: {0}")]
    Interleaver(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum CostKind {
    #[default]
    #[serde(rename = "cross-entropy", alias = "cross_entropy")]
    CrossEntropy,
    #[serde(rename = "quadratic")]
    Quadratic,
}

impl std::str::FromStr for CostKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross-entropy" | "cross_entropy" => Ok(Self::CrossEntropy),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(EngineError::UnknownCost(other.to_string())),
        }
    }
}

/// Trainable values of one junction.
#[derive(Debug, Clone, PartialEq)]
pub struct JunctionParams<S> {
    /// Indexed by right-sequential slot `m`.
    pub weights: Vec<S>,
    /// Indexed by right neuron.
    pub biases: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    pub junctions: Vec<JunctionParams<S>>,
}

impl<S: Copy> ParamStore<S> {
    pub fn zeros(net: &Network, zero: S) -> Self {
        Self {
            junctions: net
                .junctions()
                .iter()
                .map(|j| JunctionParams {
                    weights: vec![zero; j.weights()],
                    biases: vec![zero; j.n_right],
                })
                .collect(),
        }
    }

    /// Junction `i`, 1-based.
    pub fn junction(&self, i: usize) -> &JunctionParams<S> {
        &self.junctions[i - 1]
    }

    pub fn junction_mut(&mut self, i: usize) -> &mut JunctionParams<S> {
        &mut self.junctions[i - 1]
    }

    pub fn count(&self) -> usize {
        self.junctions.iter().map(|j| j.weights.len() + j.biases.len()).sum()
    }

    pub fn max_abs_weight<A: Arithmetic<Scalar = S>>(&self, arith: &A) -> f64 {
        max_abs(arith, self.junctions.iter().flat_map(|j| j.weights.iter()))
    }

    pub fn max_abs_bias<A: Arithmetic<Scalar = S>>(&self, arith: &A) -> f64 {
        max_abs(arith, self.junctions.iter().flat_map(|j| j.biases.iter()))
    }
}

fn max_abs<'a, A: Arithmetic>(arith: &A, it: impl Iterator<Item = &'a A::Scalar>) -> f64 {
    it.map(|&v| arith.abs_f64(v)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    Empty,
    Input,
    FedForward,
    CostSet,
}

/// Per-sample working values. Vectors are indexed by layer `0..=L`; layer 0
/// has activations only.
#[derive(Debug, Clone)]
pub struct NetState<S> {
    pub activations: Vec<Vec<S>>,
    pub derivatives: Vec<Vec<S>>,
    /// Pre-activation sums, kept for clipping studies.
    pub pre_activations: Vec<Vec<S>>,
    pub deltas: Vec<Vec<S>>,
    pub sample: Option<u64>,
    /// Highest layer whose FF results are current.
    ff_layer: usize,
    stage: Stage,
    scratch: Vec<S>,
}

impl<S: Copy> NetState<S> {
    pub fn new(net: &Network, zero: S) -> Self {
        let sizes = net.layer_sizes();
        let layered = |skip_input: bool| {
            sizes
                .iter()
                .enumerate()
                .map(|(l, &n)| {
                    if skip_input && l == 0 {
                        Vec::new()
                    } else {
                        vec![zero; n]
                    }
                })
                .collect::<Vec<_>>()
        };
        let max_in = net.junctions().iter().map(|j| j.d_in).max().unwrap_or(1);
        Self {
            activations: layered(false),
            derivatives: layered(true),
            pre_activations: layered(true),
            deltas: layered(true),
            sample: None,
            ff_layer: 0,
            stage: Stage::Empty,
            scratch: vec![zero; max_in],
        }
    }

    pub fn output(&self) -> &[S] {
        self.activations.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }
}

/// One network bound to a backend.
#[derive(Debug, Clone)]
pub struct Engine<A: Arithmetic> {
    arith: A,
    network: Network,
    interleavers: Vec<Interleaver>,
    activation: ActivationKind,
    /// Activation of the last layer; the same as `activation` unless overridden.
    output_activation: ActivationKind,
    cost: CostKind,
}

impl<A: Arithmetic> Engine<A> {
    pub fn new(
        arith: A,
        network: Network,
        interleavers: Vec<Interleaver>,
        activation: ActivationKind,
        cost: CostKind,
    ) -> Result<Self, EngineError> {
        if interleavers.len() != network.num_junctions() {
            return Err(EngineError::Interleaver(format!(
                "{} interleavers for {} junctions",
                interleavers.len(),
                network.num_junctions()
            )));
        }
        for (i, (ilv, j)) in interleavers.iter().zip(network.junctions()).enumerate() {
            if ilv.junction() != j {
                return Err(EngineError::Interleaver(format!("junction {} shape differs", i + 1)));
            }
        }
        Ok(Self {
            arith,
            network,
            interleavers,
            activation,
            output_activation: activation,
            cost,
        })
    }

    pub fn with_output_activation(mut self, kind: ActivationKind) -> Self {
        self.output_activation = kind;
        self
    }

    pub fn arith(&self) -> &A {
        &self.arith
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn interleavers(&self) -> &[Interleaver] {
        &self.interleavers
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn output_activation(&self) -> ActivationKind {
        self.output_activation
    }

    pub fn cost(&self) -> CostKind {
        self.cost
    }

    pub fn num_junctions(&self) -> usize {
        self.network.num_junctions()
    }

    pub fn new_state(&self) -> NetState<A::Scalar> {
        NetState::new(&self.network, self.arith.zero())
    }

    pub fn zero_params(&self) -> ParamStore<A::Scalar> {
        ParamStore::zeros(&self.network, self.arith.zero())
    }

    fn check_params(&self, params: &ParamStore<A::Scalar>) -> Result<(), EngineError> {
        if params.junctions.len() != self.num_junctions() {
            return Err(EngineError::Dimension {
                what: "parameter junctions",
                expected: self.num_junctions(),
                got: params.junctions.len(),
            });
        }
        for (p, j) in params.junctions.iter().zip(self.network.junctions()) {
            if p.weights.len() != j.weights() {
                return Err(EngineError::Dimension {
                    what: "weights",
                    expected: j.weights(),
                    got: p.weights.len(),
                });
            }
            if p.biases.len() != j.n_right {
                return Err(EngineError::Dimension {
                    what: "biases",
                    expected: j.n_right,
                    got: p.biases.len(),
                });
            }
        }
        Ok(())
    }

    pub fn load_input(&self, state: &mut NetState<A::Scalar>, a0: &[A::Scalar]) -> Result<(), EngineError> {
        if a0.len() != self.network.inputs() {
            return Err(EngineError::Dimension {
                what: "input",
                expected: self.network.inputs(),
                got: a0.len(),
            });
        }
        state.activations[0].copy_from_slice(a0);
        state.ff_layer = 0;
        state.stage = Stage::Input;
        Ok(())
    }

    /// Compute layer `i` from layer `i - 1` (junction `i`, 1-based).
    pub fn feedforward_junction(&self, params: &ParamStore<A::Scalar>, state: &mut NetState<A::Scalar>, i: usize) {
        debug_assert!(state.stage >= Stage::Input && state.ff_layer + 1 >= i);
        let a = &self.arith;
        let j = self.network.junction(i);
        let ilv = &self.interleavers[i - 1];
        let p = params.junction(i);
        let (lower, upper) = state.activations.split_at_mut(i);
        let left = &lower[i - 1];
        let right = &mut upper[0];
        let derivs = &mut state.derivatives[i];
        let pre = &mut state.pre_activations[i];
        let buf = &mut state.scratch[..j.d_in];
        let kind = if i == self.network.num_junctions() {
            self.output_activation
        } else {
            self.activation
        };
        for n in 0..j.n_right {
            let base = n * j.d_in;
            for (f, slot) in buf.iter_mut().enumerate() {
                let m = base + f;
                *slot = a.mul(p.weights[m], left[ilv.left_of(m)]);
            }
            let s = a.add(a.tree_sum(buf), p.biases[n]);
            let (v, d) = a.activate(kind, s);
            pre[n] = s;
            right[n] = v;
            derivs[n] = d;
        }
        state.ff_layer = i;
        if i == self.num_junctions() {
            state.stage = Stage::FedForward;
        }
    }

    pub fn feedforward(
        &self,
        params: &ParamStore<A::Scalar>,
        a0: &[A::Scalar],
        state: &mut NetState<A::Scalar>,
    ) -> Result<(), EngineError> {
        self.check_params(params)?;
        self.load_input(state, a0)?;
        for i in 1..=self.num_junctions() {
            self.feedforward_junction(params, state, i);
        }
        Ok(())
    }

    /// Output deltas from the ground truth `y`.
    pub fn cost_delta(&self, state: &mut NetState<A::Scalar>, y: &[A::Scalar]) -> Result<(), EngineError> {
        if state.stage < Stage::FedForward {
            return Err(EngineError::MissingState("feedforward has not run"));
        }
        let l = self.num_junctions();
        let (head, tail) = state.deltas.split_at_mut(l);
        let _ = head;
        cost_delta(
            &self.arith,
            self.cost,
            &state.activations[l],
            y,
            &state.derivatives[l],
            &mut tail[0],
        )?;
        state.stage = Stage::CostSet;
        Ok(())
    }

    /// Deltas of layer `i - 1` from junction `i` (requires `i >= 2`).
    pub fn backprop_junction(&self, params: &ParamStore<A::Scalar>, state: &mut NetState<A::Scalar>, i: usize) {
        debug_assert!(i >= 2);
        let a = &self.arith;
        let j = self.network.junction(i);
        let ilv = &self.interleavers[i - 1];
        let w = &params.junction(i).weights;
        let (lower, upper) = state.deltas.split_at_mut(i);
        let right = &upper[0];
        let acc = &mut lower[i - 1];
        acc.fill(a.zero());
        for (m, &wm) in w.iter().enumerate() {
            let l = ilv.left_of(m);
            acc[l] = a.add(acc[l], a.mul(wm, right[m / j.d_in]));
        }
        for (d, &ad) in acc.iter_mut().zip(&state.derivatives[i - 1]) {
            *d = a.mul(ad, *d);
        }
    }

    /// All hidden-layer deltas, `delta_{L-1}` down to `delta_1`.
    pub fn backprop(&self, params: &ParamStore<A::Scalar>, state: &mut NetState<A::Scalar>) -> Result<(), EngineError> {
        if state.stage < Stage::CostSet {
            return Err(EngineError::MissingState("output deltas are not set"));
        }
        self.check_params(params)?;
        for i in (2..=self.num_junctions()).rev() {
            self.backprop_junction(params, state, i);
        }
        Ok(())
    }

    /// Gradient step on junction `i` with learning rate `2^-shift`.
    pub fn update_junction(
        &self,
        params: &mut ParamStore<A::Scalar>,
        state: &NetState<A::Scalar>,
        i: usize,
        shift: u32,
    ) {
        let a = &self.arith;
        let j = self.network.junction(i);
        let ilv = &self.interleavers[i - 1];
        let p = params.junction_mut(i);
        let delta = &state.deltas[i];
        let left = &state.activations[i - 1];
        for (b, &d) in p.biases.iter_mut().zip(delta) {
            *b = a.sub(*b, a.scale_pow2(d, shift));
        }
        for (n, chunk) in p.weights.chunks_exact_mut(j.d_in).enumerate() {
            let d = delta[n];
            let base = n * j.d_in;
            for (f, w) in chunk.iter_mut().enumerate() {
                let grad = a.mul(left[ilv.left_of(base + f)], d);
                *w = a.sub(*w, a.scale_pow2(grad, shift));
            }
        }
    }

    pub fn update(
        &self,
        params: &mut ParamStore<A::Scalar>,
        state: &NetState<A::Scalar>,
        shift: u32,
    ) -> Result<(), EngineError> {
        if state.stage < Stage::CostSet {
            return Err(EngineError::MissingState("deltas are not available"));
        }
        self.check_params(params)?;
        for i in 1..=self.num_junctions() {
            self.update_junction(params, state, i, shift);
        }
        Ok(())
    }

    /// Index of the largest of the first `classes` outputs; ties go low.
    pub fn predict(&self, state: &NetState<A::Scalar>, classes: usize) -> usize {
        let out = state.output();
        let mut best = 0;
        for k in 1..classes.min(out.len()) {
            if out[k] > out[best] {
                best = k;
            }
        }
        best
    }

    /// One sequential FF, cost, BP, UP step. Returns the prediction made
    /// before the update.
    pub fn train_step(
        &self,
        params: &mut ParamStore<A::Scalar>,
        state: &mut NetState<A::Scalar>,
        a0: &[A::Scalar],
        y: &[A::Scalar],
        shift: u32,
        classes: usize,
    ) -> Result<usize, EngineError> {
        self.feedforward(params, a0, state)?;
        let prediction = self.predict(state, classes);
        self.cost_delta(state, y)?;
        self.backprop(params, state)?;
        self.update(params, state, shift)?;
        Ok(prediction)
    }

    pub fn max_abs_delta(&self, state: &NetState<A::Scalar>) -> f64 {
        max_abs(&self.arith, state.deltas.iter().flatten())
    }
}

/// Cross-entropy: `a - y`. Quadratic: `(a - y) * a'`.
pub fn cost_delta<A: Arithmetic>(
    arith: &A,
    cost: CostKind,
    a_out: &[A::Scalar],
    y: &[A::Scalar],
    deriv_out: &[A::Scalar],
    delta_out: &mut [A::Scalar],
) -> Result<(), EngineError> {
    for (what, len) in [
        ("ground truth", y.len()),
        ("output derivatives", deriv_out.len()),
        ("output deltas", delta_out.len()),
    ] {
        if len != a_out.len() {
            return Err(EngineError::Dimension {
                what,
                expected: a_out.len(),
                got: len,
            });
        }
    }
    for k in 0..a_out.len() {
        let diff = arith.sub(a_out[k], y[k]);
        delta_out[k] = match cost {
            CostKind::CrossEntropy => diff,
            CostKind::Quadratic => arith.mul(diff, deriv_out[k]),
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::FixedFormat;
    use crate::topology::{build_interleavers, build_network, BuildOptions, JunctionSpec, NetworkSpec};

    fn float_engine(spec: &NetworkSpec, opts: BuildOptions) -> Engine<FloatArith<f64>> {
        let net = crate::topology::build_network_with(spec, opts).unwrap();
        let ilv = build_interleavers(&net, 1).unwrap();
        Engine::new(
            FloatArith::new(),
            net,
            ilv,
            ActivationKind::Sigmoid,
            CostKind::CrossEntropy,
        )
        .unwrap()
    }

    #[test]
    fn zero_params_give_half() {
        let spec = NetworkSpec {
            layer_sizes: vec![16, 8, 4],
            d_out: vec![2, 2],
            z: vec![8, 4],
            clock_hz: 1.0,
        };
        let e = float_engine(&spec, BuildOptions::default());
        let p = e.zero_params();
        let mut st = e.new_state();
        let a0: Vec<f64> = (0..16).map(|k| k as f64 / 16.0).collect();
        e.feedforward(&p, &a0, &mut st).unwrap();
        for l in 1..3 {
            assert!(st.activations[l].iter().all(|&v| v == 0.5));
            assert!(st.derivatives[l].iter().all(|&v| v == 0.25));
        }
        assert!(e.feedforward(&p, &a0[..3], &mut st).is_err());
    }

    #[test]
    fn single_neuron_forward() {
        let j = JunctionSpec::new(2, 1, 1, 2).unwrap();
        let spec = NetworkSpec {
            layer_sizes: vec![2, 1],
            d_out: vec![1],
            z: vec![2],
            clock_hz: 1.0,
        };
        let e = float_engine(&spec, BuildOptions::default());
        assert_eq!(e.network().junction(1), &j);
        let mut p = e.zero_params();
        p.junctions[0].weights = vec![1.0, 1.0];
        let mut st = e.new_state();
        e.feedforward(&p, &[0.5, 0.5], &mut st).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((st.output()[0] - expected).abs() < 1e-15);
        assert!((st.output()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn cost_examples() {
        let a = FloatArith::<f64>::new();
        let mut d = [0.0; 2];
        cost_delta(&a, CostKind::CrossEntropy, &[0.9, 0.1], &[1.0, 0.0], &[0.0; 2], &mut d).unwrap();
        assert!((d[0] + 0.1).abs() < 1e-15 && (d[1] - 0.1).abs() < 1e-15);
        cost_delta(&a, CostKind::Quadratic, &[0.9, 0.1], &[1.0, 0.0], &[0.09, 0.09], &mut d).unwrap();
        assert!((d[0] + 0.009).abs() < 1e-15 && (d[1] - 0.009).abs() < 1e-15);
        cost_delta(&a, CostKind::CrossEntropy, &[0.3, 0.7], &[0.3, 0.7], &[0.0; 2], &mut d).unwrap();
        assert_eq!(d, [0.0, 0.0]);
        assert!(cost_delta(&a, CostKind::CrossEntropy, &[0.3], &[0.3, 0.7], &[0.0], &mut d[..1]).is_err());
    }

    #[test]
    fn backprop_hand_example() {
        // N = (2, 2, 1): junction 2 has d_out = 1, d_in = 2.
        let spec = NetworkSpec {
            layer_sizes: vec![2, 2, 1],
            d_out: vec![1, 1],
            z: vec![2, 2],
            clock_hz: 1.0,
        };
        let net = build_network(&spec).unwrap();
        let j2 = *net.junction(2);
        let ilv2 = crate::topology::Interleaver::from_map(j2, vec![0, 1]).unwrap();
        let ilv1 = crate::topology::Interleaver::from_map(*net.junction(1), vec![0, 1]).unwrap();
        let e = Engine::new(
            FloatArith::<f64>::new(),
            net,
            vec![ilv1, ilv2],
            ActivationKind::Sigmoid,
            CostKind::CrossEntropy,
        )
        .unwrap();
        let mut p = e.zero_params();
        p.junctions[1].weights = vec![2.0, -1.0];
        let mut st = e.new_state();
        e.feedforward(&p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(st.derivatives[1], vec![0.25, 0.25]);
        st.deltas[2] = vec![0.5];
        st.stage = Stage::CostSet;
        e.backprop(&p, &mut st).unwrap();
        assert_eq!(st.deltas[1], vec![0.25, -0.125]);
    }

    #[test]
    fn backprop_requires_cost() {
        let spec = NetworkSpec {
            layer_sizes: vec![4, 2],
            d_out: vec![1],
            z: vec![2],
            clock_hz: 1.0,
        };
        let e = float_engine(&spec, BuildOptions::default());
        let p = e.zero_params();
        let mut st = e.new_state();
        assert!(matches!(e.backprop(&p, &mut st), Err(EngineError::MissingState(_))));
        e.feedforward(&p, &[0.0; 4], &mut st).unwrap();
        assert!(e.backprop(&p, &mut st).is_err());
        e.cost_delta(&mut st, &[0.0, 1.0]).unwrap();
        e.backprop(&p, &mut st).unwrap();
    }

    #[test]
    fn fixed_update_hand_example() {
        // w = 1, a_left = 0.5, delta = 0.5, lr 2^-3: w -> 0.96875
        let fmt = FixedFormat::reference_default();
        let spec = NetworkSpec {
            layer_sizes: vec![1, 1],
            d_out: vec![1],
            z: vec![1],
            clock_hz: 1.0,
        };
        let net = build_network(&spec).unwrap();
        let ilv = build_interleavers(&net, 0).unwrap();
        let e = Engine::new(
            FixedArith::new(fmt),
            net,
            ilv,
            ActivationKind::Sigmoid,
            CostKind::CrossEntropy,
        )
        .unwrap();
        let a = e.arith();
        let mut p = e.zero_params();
        p.junctions[0].weights = vec![a.from_f64(1.0)];
        let mut st = e.new_state();
        e.feedforward(&p, &[a.from_f64(0.5)], &mut st).unwrap();
        st.deltas[1] = vec![a.from_f64(0.5)];
        st.stage = Stage::CostSet;
        let bias_before = p.junctions[0].biases[0];
        e.update(&mut p, &st, 3).unwrap();
        assert_eq!(a.to_f64(p.junctions[0].weights[0]), 0.96875);
        assert_eq!(a.to_f64(p.junctions[0].biases[0]), a.to_f64(bias_before) - 0.0625);

        let frozen = p.clone();
        st.deltas[1] = vec![0];
        e.update(&mut p, &st, 3).unwrap();
        assert_eq!(p, frozen);
    }

    #[test]
    fn predict_ties_go_low() {
        let spec = NetworkSpec {
            layer_sizes: vec![4, 4],
            d_out: vec![1],
            z: vec![1],
            clock_hz: 1.0,
        };
        let e = float_engine(&spec, BuildOptions::default());
        let mut st = e.new_state();
        st.activations[1] = vec![0.2, 0.9, 0.9, 0.95];
        assert_eq!(e.predict(&st, 3), 1);
        assert_eq!(e.predict(&st, 4), 3);
    }
}
