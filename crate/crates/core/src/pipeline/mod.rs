//! Junction pipelining at block-cycle granularity.
//!
//! In block cycle `t` junction `i` (1-based, of `L`) runs FF on sample
//! `t - (i - 1)` and BP plus UP on sample `t - (2L - i)`. Junction 1 has no
//! BP. Negative sample ids are pipeline fill and do nothing.

pub mod trace;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::engine::ParamStore;
use crate::topology::JunctionSpec;

/// What one operation slot works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Slot {
    Active(u64),
    /// Pipeline fill: the sample would be negative.
    Fill,
    /// The operation does not exist here (BP in junction 1).
    Absent,
}

impl Slot {
    fn from_id(id: i64) -> Self {
        if id < 0 {
            Slot::Fill
        } else {
            Slot::Active(id as u64)
        }
    }

    pub fn sample(self) -> Option<u64> {
        match self {
            Slot::Active(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct JunctionSlot {
    pub ff: Slot,
    pub bp: Slot,
    pub up: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScheduleSlot {
    pub t: u64,
    /// Index 0 is junction 1.
    pub junctions: Vec<JunctionSlot>,
}

impl ScheduleSlot {
    pub fn junction(&self, i: usize) -> &JunctionSlot {
        &self.junctions[i - 1]
    }
}

pub fn ff_input(t: u64, i: usize) -> i64 {
    t as i64 - (i as i64 - 1)
}

pub fn up_input(t: u64, i: usize, layers: usize) -> i64 {
    t as i64 - (2 * layers as i64 - i as i64)
}

/// Block cycle in which junction `i` runs FF on `sample`.
pub fn ff_block_cycle(sample: u64, i: usize) -> u64 {
    sample + i as u64 - 1
}

/// Block cycle in which junction `i` runs BP and UP on `sample`.
pub fn up_block_cycle(sample: u64, i: usize, layers: usize) -> u64 {
    sample + (2 * layers - i) as u64
}

pub fn schedule_at(t: u64, layers: usize) -> ScheduleSlot {
    let junctions = (1..=layers)
        .map(|i| {
            let up = Slot::from_id(up_input(t, i, layers));
            JunctionSlot {
                ff: Slot::from_id(ff_input(t, i)),
                bp: if i == 1 { Slot::Absent } else { up },
                up,
            }
        })
        .collect();
    ScheduleSlot { t, junctions }
}

/// Clocks per block cycle: one per weight set plus two for the address
/// stages of the three-clock operation.
pub fn block_cycle_clocks(j: &JunctionSpec) -> usize {
    j.weight_sets() + 2
}

/// Activation (and derivative) queue banks in front of junction `i`.
///
/// A sample's left activations are written during block cycle `t - 1`,
/// read by FF in `t` and by UP `2(L - i) + 1` cycles later, so
/// `2(L - i) + 3` samples are resident at once.
pub fn queue_depth(i: usize, layers: usize) -> usize {
    2 * (layers - i) + 3
}

/// Last sample whose UP on junction `i` is visible to the FF issued in
/// block cycle `t`. Updates land at the end of their block cycle, so the UP
/// running concurrently with this FF is not yet visible. `None` means
/// FF still sees the initial parameters.
pub fn update_horizon(t: u64, i: usize, layers: usize) -> Option<u64> {
    let s = t as i64 - 1 - (2 * layers as i64 - i as i64);
    (s >= 0).then_some(s as u64)
}

/// Parameter snapshots taken at the end of each block cycle.
#[derive(Debug, Clone)]
pub struct ParamHistory<S> {
    initial: ParamStore<S>,
    snapshots: BTreeMap<u64, ParamStore<S>>,
}

impl<S: Clone> ParamHistory<S> {
    pub fn new(initial: ParamStore<S>) -> Self {
        Self {
            initial,
            snapshots: BTreeMap::new(),
        }
    }

    pub fn record_end_of(&mut self, t: u64, params: &ParamStore<S>) {
        self.snapshots.insert(t, params.clone());
    }

    /// Parameters FF reads in block cycle `t`: the state at the end of `t - 1`.
    pub fn stale_update_view(&self, t: u64) -> &ParamStore<S> {
        if t == 0 {
            return &self.initial;
        }
        self.snapshots
            .range(..t)
            .next_back()
            .map(|(_, p)| p)
            .unwrap_or(&self.initial)
    }

    /// Drop snapshots older than `t`.
    pub fn prune_before(&mut self, t: u64) {
        self.snapshots = self.snapshots.split_off(&t);
    }
}
