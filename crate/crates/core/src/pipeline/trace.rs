//! Clock-level memory access trace of the pipelined datapath.
//!
//! One block cycle is `max_i(W_i/z_i) + 2` clocks. In clock `k` of a block
//! cycle, junction `i` handles weight set `k`:
//!
//! * FF reads weight cell `k` of every bank, the bias cell for its right
//!   neurons, and the `z` left activations picked by the interleaver; the
//!   finished right neurons are written two clocks later into the next
//!   junction's activation and derivative queues (or, for the output
//!   layer, straight into the output delta memory).
//! * UP reads the same weight cell (one shared read port), the left
//!   activations of its older sample and the right deltas, and writes the
//!   new weight back one clock later, while cell `k + 1` is being read.
//! * BP reads the same weights and right deltas plus the left activation
//!   derivatives, and read-modify-writes the left partial sums.
//!
//! The input loader fills junction 1's queue with the next sample.
//!
//! Reads of one address in one clock are a single port access. Writes
//! become visible in the following clock. Every read carries the tag its
//! consumer expects (sample id, or number of updates for parameters), so
//! queue overwrites and stale reads are caught as well as port conflicts.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;

use super::{block_cycle_clocks, queue_depth, schedule_at, Slot};
use crate::topology::{Interleaver, Network, TopologyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Weight,
    Bias,
    Activation,
    ActDeriv,
    Delta,
}

impl MemoryKind {
    pub fn port_model(self) -> PortModel {
        match self {
            MemoryKind::Weight | MemoryKind::Bias => PortModel::SimpleDualPort,
            MemoryKind::Activation | MemoryKind::ActDeriv => PortModel::SinglePort,
            MemoryKind::Delta => PortModel::TrueDualPort,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MemoryKind::Weight => "weight",
            MemoryKind::Bias => "bias",
            MemoryKind::Activation => "activation",
            MemoryKind::ActDeriv => "act_deriv",
            MemoryKind::Delta => "delta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PortModel {
    /// One access per clock, read or write.
    SinglePort,
    /// One read port and one write port, on different addresses.
    SimpleDualPort,
    /// Two independent ports.
    TrueDualPort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dir {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Op {
    Load,
    FF,
    BP,
    UP,
}

/// One physical memory. `junction` is the junction that reads it: weights,
/// biases and the activation queues belong to their own junction; the
/// delta memory of layer `j` belongs to junction `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct MemoryId {
    pub junction: u16,
    pub kind: MemoryKind,
    /// Queue bank for activations, ping-pong half for deltas, else 0.
    pub queue: u16,
    pub bank: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Access {
    pub clock: u64,
    pub block_cycle: u64,
    pub memory: MemoryId,
    pub address: u32,
    pub dir: Dir,
    pub op: Op,
    /// Written tag, or the tag a read expects to find.
    pub tag: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ViolationKind {
    /// More accesses than the memory has ports.
    PortConflict { reads: usize, writes: usize },
    /// Simple dual-port memory read and written at one address.
    ReadWriteSameAddress { address: u32 },
    /// A read found data other than what its consumer needs.
    StaleData {
        address: u32,
        expected: u64,
        found: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub clock: u64,
    pub block_cycle: u64,
    pub memory: MemoryId,
    pub kind: ViolationKind,
    pub accesses: Vec<Access>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceOptions {
    pub block_cycles: u64,
    /// Force every activation queue to this many banks.
    pub queue_depth: Option<usize>,
    /// Per-junction queue banks; takes precedence over `queue_depth`.
    pub queue_depths: Option<Vec<usize>>,
    /// Violations kept in the report; all are counted.
    pub max_violations: usize,
}

impl TraceOptions {
    pub fn new(block_cycles: u64) -> Self {
        Self {
            block_cycles,
            queue_depth: None,
            queue_depths: None,
            max_violations: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceReport {
    pub block_cycles: u64,
    pub clocks_per_block_cycle: u64,
    pub accesses: u64,
    pub queue_depths: Vec<usize>,
    pub clean: bool,
    pub violation_count: u64,
    pub violations: Vec<Violation>,
}

impl TraceReport {
    pub fn first_violation(&self) -> Option<&Violation> {
        self.violations.first()
    }
}

/// A fully materialized trace; only sensible for small runs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub accesses: Vec<Access>,
}

impl AccessTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut sink = CsvSink::new(out)?;
        for a in &self.accesses {
            sink.push(a)?;
        }
        sink.finish()
    }
}

/// Streams accesses as CSV rows.
pub struct CsvSink<W: Write> {
    w: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(out: W) -> csv::Result<Self> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "clock",
            "block_cycle",
            "junction",
            "memory",
            "queue",
            "bank",
            "address",
            "dir",
            "op",
            "tag",
        ])?;
        Ok(Self { w })
    }

    pub fn push(&mut self, a: &Access) -> csv::Result<()> {
        let dir = match a.dir {
            Dir::Read => "read",
            Dir::Write => "write",
        };
        self.w.write_record(&[
            a.clock.to_string(),
            a.block_cycle.to_string(),
            a.memory.junction.to_string(),
            a.memory.kind.as_str().to_string(),
            a.memory.queue.to_string(),
            a.memory.bank.to_string(),
            a.address.to_string(),
            dir.to_string(),
            format!("{:?}", a.op),
            a.tag.to_string(),
        ])
    }

    pub fn finish(mut self) -> csv::Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

struct Geometry<'a> {
    net: &'a Network,
    ilv: &'a [Interleaver],
    depth: Vec<usize>,
    clocks: u64,
}

impl Geometry<'_> {
    fn layers(&self) -> usize {
        self.net.num_junctions()
    }

    /// Banks of the delta memory of layer `j`.
    fn delta_banks(&self, j: usize) -> usize {
        if j < self.layers() {
            self.net.junction(j + 1).z
        } else {
            self.net.junction(j).neurons_per_clock()
        }
    }
}

/// Generate the accesses of one clock into `out`.
struct Generator<'a> {
    g: Geometry<'a>,
    /// Left partial sums already started by BP in the current block cycle.
    touched: Vec<Vec<bool>>,
}

impl Generator<'_> {
    fn clock(&mut self, t: u64, c: usize, out: &mut Vec<Access>) {
        let layers = self.g.layers();
        let slot = schedule_at(t, layers);
        let clock = t * self.g.clocks + c as u64;
        let mut push = |memory: MemoryId, address: usize, dir: Dir, op: Op, tag: u64| {
            out.push(Access {
                clock,
                block_cycle: t,
                memory,
                address: address as u32,
                dir,
                op,
                tag,
            })
        };
        let mem = |junction: usize, kind: MemoryKind, queue: usize, bank: usize| MemoryId {
            junction: junction as u16,
            kind,
            queue: queue as u16,
            bank: bank as u32,
        };

        // Loader: sample t + 1 into junction 1's queue, z values per clock.
        let j1 = self.g.net.junction(1);
        let inputs = j1.n_left;
        let lo = c * j1.z;
        if lo < inputs {
            let s = t + 1;
            let q = (s % self.g.depth[0] as u64) as usize;
            for idx in lo..(lo + j1.z).min(inputs) {
                push(
                    mem(1, MemoryKind::Activation, q, idx % j1.z),
                    idx / j1.z,
                    Dir::Write,
                    Op::Load,
                    s,
                );
            }
        }

        for i in 1..=layers {
            let j = self.g.net.junction(i);
            let ilv = &self.g.ilv[i - 1];
            let sets = j.weight_sets();
            let npc = j.neurons_per_clock();
            let d_i = self.g.depth[i - 1];
            let js = slot.junction(i);
            let version = (t as i64 - (2 * layers - i) as i64).max(0) as u64;
            let read_params = |push: &mut dyn FnMut(MemoryId, usize, Dir, Op, u64), k: usize, op: Op| {
                for b in 0..j.z {
                    push(mem(i, MemoryKind::Weight, 0, b), k, Dir::Read, op, version);
                }
                for b in 0..npc {
                    push(mem(i, MemoryKind::Bias, 0, b), k, Dir::Read, op, version);
                }
            };

            if let Slot::Active(s) = js.ff {
                if c < sets {
                    read_params(&mut push, c, Op::FF);
                    let q = (s % d_i as u64) as usize;
                    for &l in ilv.left_indices_for_clock(c).unwrap() {
                        let l = l as usize;
                        push(
                            mem(i, MemoryKind::Activation, q, l % j.z),
                            l / j.z,
                            Dir::Read,
                            Op::FF,
                            s,
                        );
                    }
                }
                if c >= 2 && c - 2 < sets {
                    let k = c - 2;
                    for n in k * npc..(k + 1) * npc {
                        if i < layers {
                            let zn = self.g.net.junction(i + 1).z;
                            let q = (s % self.g.depth[i] as u64) as usize;
                            push(
                                mem(i + 1, MemoryKind::Activation, q, n % zn),
                                n / zn,
                                Dir::Write,
                                Op::FF,
                                s,
                            );
                            push(
                                mem(i + 1, MemoryKind::ActDeriv, q, n % zn),
                                n / zn,
                                Dir::Write,
                                Op::FF,
                                s,
                            );
                        } else {
                            let b = self.g.delta_banks(i);
                            push(
                                mem(i, MemoryKind::Delta, (s % 2) as usize, n % b),
                                n / b,
                                Dir::Write,
                                Op::FF,
                                s,
                            );
                        }
                    }
                }
            }

            if let Slot::Active(s) = js.up {
                let q = (s % d_i as u64) as usize;
                let db = self.g.delta_banks(i);
                let has_bp = js.bp != Slot::Absent;
                if c < sets {
                    read_params(&mut push, c, Op::UP);
                    let lefts = ilv.left_indices_for_clock(c).unwrap();
                    for &l in lefts {
                        let l = l as usize;
                        push(
                            mem(i, MemoryKind::Activation, q, l % j.z),
                            l / j.z,
                            Dir::Read,
                            Op::UP,
                            s,
                        );
                    }
                    let ops: &[Op] = if has_bp { &[Op::UP, Op::BP] } else { &[Op::UP] };
                    for &op in ops {
                        for n in c * npc..(c + 1) * npc {
                            push(
                                mem(i, MemoryKind::Delta, (s % 2) as usize, n % db),
                                n / db,
                                Dir::Read,
                                op,
                                s,
                            );
                        }
                    }
                    if has_bp {
                        read_params(&mut push, c, Op::BP);
                        let touched = &mut self.touched[i - 1];
                        if c == 0 {
                            touched.fill(false);
                        }
                        for &l in lefts {
                            let l = l as usize;
                            let (bank, addr) = (l % j.z, l / j.z);
                            push(mem(i, MemoryKind::ActDeriv, q, bank), addr, Dir::Read, Op::BP, s);
                            let partial = mem(i - 1, MemoryKind::Delta, (s % 2) as usize, bank);
                            if touched[l] {
                                push(partial, addr, Dir::Read, Op::BP, s);
                            }
                            touched[l] = true;
                            push(partial, addr, Dir::Write, Op::BP, s);
                        }
                    }
                }
                if c >= 1 && c - 1 < sets {
                    let k = c - 1;
                    for b in 0..j.z {
                        push(mem(i, MemoryKind::Weight, 0, b), k, Dir::Write, Op::UP, s + 1);
                    }
                    for b in 0..npc {
                        push(mem(i, MemoryKind::Bias, 0, b), k, Dir::Write, Op::UP, s + 1);
                    }
                }
            }
        }
    }
}

/// Check one clock's accesses against port rules and stored tags, then
/// apply its writes.
struct Checker {
    tags: HashMap<(MemoryId, u32), u64>,
    count: u64,
    kept: Vec<Violation>,
    max_kept: usize,
}

impl Checker {
    fn report(&mut self, v: Violation) {
        self.count += 1;
        if self.kept.len() < self.max_kept {
            self.kept.push(v);
        }
    }

    fn clock(&mut self, accesses: &mut [Access]) {
        accesses.sort_unstable_by_key(|a| (a.memory, a.dir, a.address));
        let mut start = 0;
        while start < accesses.len() {
            let memory = accesses[start].memory;
            let end = start + accesses[start..].iter().take_while(|a| a.memory == memory).count();
            self.check_ports(&accesses[start..end]);
            start = end;
        }
        for a in accesses.iter().filter(|a| a.dir == Dir::Read) {
            let found = self.tags.get(&(a.memory, a.address)).copied().or(match a.memory.kind {
                // Parameters are loaded before training starts.
                MemoryKind::Weight | MemoryKind::Bias => Some(0),
                _ => None,
            });
            if found != Some(a.tag) {
                self.report(Violation {
                    clock: a.clock,
                    block_cycle: a.block_cycle,
                    memory: a.memory,
                    kind: ViolationKind::StaleData {
                        address: a.address,
                        expected: a.tag,
                        found,
                    },
                    accesses: vec![*a],
                });
            }
        }
        for a in accesses.iter().filter(|a| a.dir == Dir::Write) {
            self.tags.insert((a.memory, a.address), a.tag);
        }
    }

    fn check_ports(&mut self, group: &[Access]) {
        let mut read_addrs: Vec<u32> = group.iter().filter(|a| a.dir == Dir::Read).map(|a| a.address).collect();
        read_addrs.dedup();
        let writes: Vec<u32> = group
            .iter()
            .filter(|a| a.dir == Dir::Write)
            .map(|a| a.address)
            .collect();
        let (reads, nw) = (read_addrs.len(), writes.len());
        let first = group[0];
        let over = match first.memory.kind.port_model() {
            PortModel::SinglePort => reads + nw > 1,
            PortModel::SimpleDualPort => reads > 1 || nw > 1,
            PortModel::TrueDualPort => reads + nw > 2,
        };
        if over {
            self.report(Violation {
                clock: first.clock,
                block_cycle: first.block_cycle,
                memory: first.memory,
                kind: ViolationKind::PortConflict { reads, writes: nw },
                accesses: group.to_vec(),
            });
        } else if first.memory.kind.port_model() == PortModel::SimpleDualPort {
            if let Some(&address) = writes.iter().find(|w| read_addrs.contains(w)) {
                self.report(Violation {
                    clock: first.clock,
                    block_cycle: first.block_cycle,
                    memory: first.memory,
                    kind: ViolationKind::ReadWriteSameAddress { address },
                    accesses: group.to_vec(),
                });
            }
        }
    }
}

fn check_inputs(net: &Network, ilv: &[Interleaver]) -> Result<(), TopologyError> {
    if ilv.len() != net.num_junctions() {
        return Err(TopologyError::Map(format!(
            "{} interleavers for {} junctions",
            ilv.len(),
            net.num_junctions()
        )));
    }
    for (i, (m, j)) in ilv.iter().zip(net.junctions()).enumerate() {
        if m.junction() != j {
            return Err(TopologyError::Map(format!(
                "interleaver {} does not match its junction",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Run the trace, handing every access to `sink` in clock order.
pub fn simulate_trace_with(
    net: &Network,
    interleavers: &[Interleaver],
    opts: &TraceOptions,
    mut sink: impl FnMut(&Access),
) -> Result<TraceReport, TopologyError> {
    check_inputs(net, interleavers)?;
    let layers = net.num_junctions();
    let depth: Vec<usize> = (1..=layers)
        .map(|i| {
            opts.queue_depths
                .as_ref()
                .and_then(|d| d.get(i - 1).copied())
                .or(opts.queue_depth)
                .unwrap_or_else(|| queue_depth(i, layers))
                .max(1)
        })
        .collect();
    let clocks = net.junctions().iter().map(block_cycle_clocks).max().unwrap_or(0) as u64;
    let mut gen = Generator {
        g: Geometry {
            net,
            ilv: interleavers,
            depth: depth.clone(),
            clocks,
        },
        touched: net.junctions().iter().map(|j| vec![false; j.n_left]).collect(),
    };
    let mut checker = Checker {
        tags: HashMap::new(),
        count: 0,
        kept: Vec::new(),
        max_kept: opts.max_violations,
    };
    // Sample 0 is loaded before the first block cycle.
    let j1 = net.junction(1);
    for idx in 0..j1.n_left {
        let m = MemoryId {
            junction: 1,
            kind: MemoryKind::Activation,
            queue: 0,
            bank: (idx % j1.z) as u32,
        };
        checker.tags.insert((m, (idx / j1.z) as u32), 0);
    }
    let mut buf = Vec::new();
    let mut total = 0u64;
    for t in 0..opts.block_cycles {
        for c in 0..clocks as usize {
            buf.clear();
            gen.clock(t, c, &mut buf);
            total += buf.len() as u64;
            for a in &buf {
                sink(a);
            }
            checker.clock(&mut buf);
        }
    }
    Ok(TraceReport {
        block_cycles: opts.block_cycles,
        clocks_per_block_cycle: clocks,
        accesses: total,
        queue_depths: depth,
        clean: checker.count == 0,
        violation_count: checker.count,
        violations: checker.kept,
    })
}

pub fn simulate_trace(
    net: &Network,
    interleavers: &[Interleaver],
    opts: &TraceOptions,
) -> Result<TraceReport, TopologyError> {
    simulate_trace_with(net, interleavers, opts, |_| {})
}

/// Run the trace and keep every access.
pub fn collect_trace(
    net: &Network,
    interleavers: &[Interleaver],
    opts: &TraceOptions,
) -> Result<(AccessTrace, TraceReport), TopologyError> {
    let mut trace = AccessTrace::default();
    let report = simulate_trace_with(net, interleavers, opts, |a| trace.accesses.push(*a))?;
    Ok((trace, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_interleavers, build_network, NetworkSpec};

    fn tiny() -> Network {
        build_network(&NetworkSpec {
            layer_sizes: vec![16, 8, 4],
            d_out: vec![2, 2],
            z: vec![8, 4],
            clock_hz: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn tiny_net_is_clean() {
        let net = tiny();
        let ilv = build_interleavers(&net, 3).unwrap();
        let r = simulate_trace(&net, &ilv, &TraceOptions::new(50)).unwrap();
        assert!(r.clean, "{:?}", r.first_violation());
        assert_eq!(r.queue_depths, vec![5, 3]);
    }

    #[test]
    fn undersized_queue_is_caught() {
        let net = tiny();
        let ilv = build_interleavers(&net, 3).unwrap();
        let mut opts = TraceOptions::new(20);
        opts.queue_depth = Some(1);
        let r = simulate_trace(&net, &ilv, &opts).unwrap();
        assert!(!r.clean);
        let v = r.first_violation().unwrap();
        assert_eq!(v.memory.kind, MemoryKind::Activation);
    }

    #[test]
    fn clashing_map_is_caught() {
        let net = tiny();
        let mut ilv = build_interleavers(&net, 3).unwrap();
        let j = *net.junction(1);
        // every slot of clock 0 reads bank 0
        let mut map = ilv[0].map().to_vec();
        map[..8].copy_from_slice(&[0, 8, 0, 8, 0, 8, 0, 8]);
        ilv[0] = Interleaver::from_map(j, map).unwrap();
        let r = simulate_trace(&net, &ilv, &TraceOptions::new(3)).unwrap();
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v.kind, ViolationKind::PortConflict { .. })));
    }

    #[test]
    fn streamed_and_collected_agree() {
        let net = tiny();
        let ilv = build_interleavers(&net, 0).unwrap();
        let (trace, report) = collect_trace(&net, &ilv, &TraceOptions::new(6)).unwrap();
        assert_eq!(trace.accesses.len() as u64, report.accesses);
        assert!(trace.accesses.windows(2).all(|w| w[0].clock <= w[1].clock));
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("clock,block_cycle,junction,memory"));
        assert_eq!(text.lines().count() as u64, report.accesses + 1);
    }
}
