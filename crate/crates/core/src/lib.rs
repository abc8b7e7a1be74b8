//! Bit-accurate simulation of training pre-defined sparse MLPs on a
//! junction-pipelined, edge-processing hardware architecture.
//!
//! The training mathematics in [`engine`] is generic over the scalar
//! representation through [`engine::Arithmetic`]; the aliases below name the
//! two backends actually used.

pub mod data;
pub mod engine;
pub mod fixedpoint;
pub mod pipeline;
pub mod resources;
pub mod topology;

/// Exact `f64` reference backend.
pub type FloatEngine = engine::Engine<engine::FloatArith<f64>>;
/// Saturating fixed-point hardware backend over raw `i32` words.
pub type FixedEngine = engine::Engine<engine::FixedArith>;
pub type FloatParams = engine::ParamStore<f64>;
pub type FixedParams = engine::ParamStore<i32>;
pub type FloatState = engine::NetState<f64>;
pub type FixedState = engine::NetState<i32>;
