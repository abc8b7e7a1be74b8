//! Glorot-normal initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Arithmetic, JunctionParams, ParamStore};
use crate::topology::{JunctionSpec, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum InitScheme {
    /// `W/z` draws per junction; every weight bank holds that same sequence,
    /// so slot `m` gets draw `m / z`. Biases sit after the weights in the
    /// banks and reuse the sequence.
    #[default]
    #[serde(rename = "repeated")]
    Repeated,
    /// Every weight and bias drawn independently.
    #[serde(rename = "independent")]
    Independent,
}

/// Standard deviation `sqrt(2 / (d_out + d_in))`.
pub fn glorot_std(j: &JunctionSpec) -> f64 {
    (2.0 / (j.d_out + j.d_in) as f64).sqrt()
}

pub fn init_params<A: Arithmetic>(arith: &A, net: &Network, seed: u64, scheme: InitScheme) -> ParamStore<A::Scalar> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let junctions = net
        .junctions()
        .iter()
        .map(|j| {
            let normal = Normal::new(0.0, glorot_std(j)).expect("positive std");
            let mut draw = || arith.from_f64(normal.sample(&mut rng));
            match scheme {
                InitScheme::Repeated => {
                    let depth = j.weight_sets();
                    let values: Vec<A::Scalar> = (0..depth).map(|_| draw()).collect();
                    JunctionParams {
                        weights: (0..j.weights()).map(|m| values[m / j.z]).collect(),
                        biases: (0..j.n_right).map(|n| values[(n / j.z) % depth]).collect(),
                    }
                }
                InitScheme::Independent => JunctionParams {
                    weights: (0..j.weights()).map(|_| draw()).collect(),
                    biases: (0..j.n_right).map(|_| draw()).collect(),
                },
            }
        })
        .collect();
    ParamStore { junctions }
}
