//! Textbook dense-matrix model of the float engine.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsetrain::engine::{ActivationKind, CostKind, Engine, FloatArith, ParamStore};
use sparsetrain::topology::{build_interleavers, build_network_with, BuildOptions, Network, NetworkSpec};
use sparsetrain::FloatEngine;

pub fn random_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let layers = rng.gen_range(1..=3);
    let sizes: Vec<usize> = (0..=layers).map(|_| 1 << rng.gen_range(1..=6)).collect();
    let mut d_out = Vec::new();
    let mut z = Vec::new();
    for i in 0..layers {
        let (nl, nr) = (sizes[i], sizes[i + 1]);
        // d_in = nl * d_out / nr must be a whole number of at least 1
        let min_exp = (nr / nl).max(1).trailing_zeros();
        let d = 1 << rng.gen_range(min_exp..=nr.trailing_zeros());
        let d_in = nl * d / nr;
        let zz = d_in << rng.gen_range(0..=(nl / d_in).trailing_zeros());
        d_out.push(d);
        z.push(zz);
    }
    NetworkSpec {
        layer_sizes: sizes,
        d_out,
        z,
        clock_hz: 1.0,
    }
}

pub fn float_engine(net: &Network, seed: u64) -> FloatEngine {
    float_engine_with(net, seed, ActivationKind::Sigmoid)
}

pub fn float_engine_with(net: &Network, seed: u64, kind: ActivationKind) -> FloatEngine {
    let ilv = build_interleavers(net, seed).unwrap();
    Engine::new(FloatArith::new(), net.clone(), ilv, kind, CostKind::CrossEntropy).unwrap()
}

fn random_params(net: &Network, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut p = ParamStore::zeros(net, 0.0);
    for j in &mut p.junctions {
        for w in j.weights.iter_mut().chain(j.biases.iter_mut()) {
            *w = rng.gen_range(-1.0..1.0);
        }
    }
    p
}

/// Dense `N_right x N_left` matrices with the sparse weights scattered in.
fn dense(engine: &FloatEngine, p: &ParamStore<f64>) -> Vec<Vec<Vec<f64>>> {
    engine
        .network()
        .junctions()
        .iter()
        .zip(engine.interleavers())
        .zip(&p.junctions)
        .map(|((j, ilv), jp)| {
            let mut m = vec![vec![0.0; j.n_left]; j.n_right];
            for (slot, &w) in jp.weights.iter().enumerate() {
                m[slot / j.d_in][ilv.left_of(slot)] += w;
            }
            m
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Value and derivative of the activation at pre-activation `x`.
fn act(kind: ActivationKind, x: f64) -> (f64, f64) {
    match kind.relu_cap() {
        None => (sigmoid(x), sigmoid(x) * (1.0 - sigmoid(x))),
        Some(_) if x <= 0.0 => (0.0, 0.0),
        Some(cap) if x >= cap => (cap, 0.0),
        Some(_) => (x, 1.0),
    }
}

struct DenseRun {
    a: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

fn dense_forward(mats: &[Vec<Vec<f64>>], p: &ParamStore<f64>, a0: &[f64]) -> Vec<Vec<f64>> {
    dense_forward_with(ActivationKind::Sigmoid, mats, p, a0).0
}

/// Activations and derivatives, layer by layer.
fn dense_forward_with(
    kind: ActivationKind,
    mats: &[Vec<Vec<f64>>],
    p: &ParamStore<f64>,
    a0: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut a = vec![a0.to_vec()];
    let mut d = vec![vec![0.0; a0.len()]];
    for (m, jp) in mats.iter().zip(&p.junctions) {
        let prev = a.last().unwrap();
        let (next, deriv): (Vec<f64>, Vec<f64>) = m
            .iter()
            .zip(&jp.biases)
            .map(|(row, b)| act(kind, row.iter().zip(prev).map(|(w, x)| w * x).sum::<f64>() + b))
            .unzip();
        a.push(next);
        d.push(deriv);
    }
    (a, d)
}

fn dense_run(kind: ActivationKind, mats: &[Vec<Vec<f64>>], p: &ParamStore<f64>, a0: &[f64], y: &[f64]) -> DenseRun {
    let (a, da) = dense_forward_with(kind, mats, p, a0);
    let l = mats.len();
    let mut deltas = vec![Vec::new(); l + 1];
    deltas[l] = a[l].iter().zip(y).map(|(a, y)| a - y).collect();
    for i in (1..l).rev() {
        let m = &mats[i];
        deltas[i] = (0..a[i].len())
            .map(|k| {
                let back: f64 = m.iter().zip(&deltas[i + 1]).map(|(row, d)| row[k] * d).sum();
                da[i][k] * back
            })
            .collect();
    }
    DenseRun { a, deltas }
}

fn cross_entropy(a: &[f64], y: &[f64]) -> f64 {
    a.iter()
        .zip(y)
        .map(|(a, y)| -(y * a.ln() + (1.0 - y) * (1.0 - a).ln()))
        .sum()
}

fn random_sample(net: &Network, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let a0 = (0..net.inputs()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut y = vec![0.0; net.outputs()];
    y[rng.gen_range(0..net.outputs())] = 1.0;
    (a0, y)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest FF/BP/UP discrepancy against the dense model over `nets` random networks.
pub fn dense_discrepancy(kind: ActivationKind, seed: u64, nets: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < nets {
        let spec = random_spec(&mut rng);
        let Ok(net) = build_network_with(&spec, BuildOptions::relaxed()) else {
            continue;
        };
        let engine = float_engine_with(&net, rng.gen(), kind);
        let mut p = random_params(&net, &mut rng);
        let (a0, y) = random_sample(&net, &mut rng);
        let mats = dense(&engine, &p);
        let reference = dense_run(kind, &mats, &p, &a0, &y);

        let mut st = engine.new_state();
        engine.feedforward(&p, &a0, &mut st).unwrap();
        for l in 0..=net.num_junctions() {
            worst = worst.max(max_diff(&st.activations[l], &reference.a[l]));
        }
        engine.cost_delta(&mut st, &y).unwrap();
        engine.backprop(&p, &mut st).unwrap();
        for l in 1..=net.num_junctions() {
            worst = worst.max(max_diff(&st.deltas[l], &reference.deltas[l]));
        }

        let e = rng.gen_range(0..6);
        let before = p.clone();
        engine.update(&mut p, &st, e).unwrap();
        let eta = 2f64.powi(-(e as i32));
        for (i, j) in net.junctions().iter().enumerate() {
            let ilv = &engine.interleavers()[i];
            for m in 0..j.weights() {
                let want = before.junctions[i].weights[m]
                    - eta * reference.a[i][ilv.left_of(m)] * reference.deltas[i + 1][m / j.d_in];
                worst = worst.max((p.junctions[i].weights[m] - want).abs());
            }
            for n in 0..j.n_right {
                let want = before.junctions[i].biases[n] - eta * reference.deltas[i + 1][n];
                worst = worst.max((p.junctions[i].biases[n] - want).abs());
            }
        }
        checked += 1;
    }
    worst
}

/// Worst relative error of backprop gradients against central differences
/// of the cross-entropy cost, over `count` sigmoid-network parameters.
pub fn worst_gradient_error(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < count {
        let spec = random_spec(&mut rng);
        let Ok(net) = build_network_with(&spec, BuildOptions::relaxed()) else {
            continue;
        };
        let engine = float_engine(&net, rng.gen());
        let p = random_params(&net, &mut rng);
        let (a0, y) = random_sample(&net, &mut rng);
        let mut st = engine.new_state();
        engine.feedforward(&p, &a0, &mut st).unwrap();
        engine.cost_delta(&mut st, &y).unwrap();
        engine.backprop(&p, &mut st).unwrap();

        for _ in 0..8 {
            let i = rng.gen_range(0..net.num_junctions());
            let j = net.junction(i + 1);
            let bias = rng.gen_bool(0.2);
            let idx = if bias {
                rng.gen_range(0..j.n_right)
            } else {
                rng.gen_range(0..j.weights())
            };
            let analytic = if bias {
                st.deltas[i + 1][idx]
            } else {
                st.activations[i][engine.interleavers()[i].left_of(idx)] * st.deltas[i + 1][idx / j.d_in]
            };
            let cost_at = |delta: f64| {
                let mut q = p.clone();
                let slot = if bias {
                    &mut q.junctions[i].biases[idx]
                } else {
                    &mut q.junctions[i].weights[idx]
                };
                *slot += delta;
                let a = dense_forward(&dense(&engine, &q), &q, &a0);
                cross_entropy(a.last().unwrap(), &y)
            };
            let numeric = (cost_at(eps) - cost_at(-eps)) / (2.0 * eps);
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-7 {
                // flat direction: both sides must agree it is zero
                if (analytic - numeric).abs() >= 1e-9 {
                    return f64::INFINITY;
                }
                continue;
            }
            worst = worst.max((analytic - numeric).abs() / scale);
            checked += 1;
        }
    }
    worst
}
