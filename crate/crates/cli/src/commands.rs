use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use sparsetrain::data::{load_mnist, Dataset, Split};
use sparsetrain::engine::activation::ActivationTable;
use sparsetrain::engine::clipstats::{clip_study, ClipStudyResult, Which};
use sparsetrain::engine::train::{run_with_held_out, Backend, RunOutcome};
use sparsetrain::fixedpoint::{FixedFormat, RoundingMode};
use sparsetrain::pipeline::trace::{simulate_trace_with, CsvSink, TraceOptions};
use sparsetrain::resources::{self, doubling_candidates, fit_check, DeviceProfile};
use sparsetrain::topology::{build_interleavers, build_network, NetworkSpec};

use crate::config::RunConfig;

fn out_dir(dir: &Path) -> Result<&Path> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("writing {}", path.display()))?,
    ))
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let train = load_mnist(&cfg.data.dir, Split::Train)?;
    let test = if cfg.data.held_out {
        Some(load_mnist(&cfg.data.dir, Split::Test)?)
    } else {
        None
    };
    Ok((train, test))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

/// Result of one training run, as kept by sweeps.
#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    backend: String,
    epochs: u32,
    epoch_size: usize,
    final_accuracy: Option<f64>,
    epoch1_accuracy: Option<f64>,
    clip_events: u64,
    wall_time_s: f64,
}

/// Train under `cfg` and write `metrics.csv`, `summary.json` and
/// `params.json` into `dir`.
fn train_into(cfg: &RunConfig, data: &Dataset, held_out: Option<&Dataset>, dir: &Path) -> Result<RunSummary> {
    let net = build_network(&cfg.network)?;
    let start = Instant::now();
    let RunOutcome {
        metrics,
        params,
        held_out_accuracy,
    } = run_with_held_out(&net, data, held_out, &cfg.train)?;
    let wall = start.elapsed().as_secs_f64();

    let dir = out_dir(dir)?;
    metrics.write_csv(create(&dir.join("metrics.csv"))?)?;
    write_json(&dir.join("params.json"), &params)?;
    let summary = RunSummary {
        backend: metrics.backend.clone(),
        epochs: cfg.train.epochs,
        epoch_size: cfg.train.epoch_size,
        final_accuracy: metrics.final_accuracy(),
        epoch1_accuracy: metrics.epoch_accuracy(1),
        clip_events: metrics.clip_events,
        wall_time_s: wall,
    };
    let per_epoch: Vec<_> = metrics
        .epochs
        .iter()
        .map(|e| json!({"epoch": e.epoch, "rolling_accuracy": e.rolling_accuracy, "eta_exponent": e.eta_exponent, "clip_events": e.clip_events}))
        .collect();
    write_json(
        &dir.join("summary.json"),
        &json!({
            "backend": summary.backend,
            "network": cfg.network,
            "update_semantics": cfg.train.update_semantics,
            "epochs": summary.epochs,
            "epoch_size": summary.epoch_size,
            "rolling_window": cfg.train.rolling_window,
            "final_accuracy": summary.final_accuracy,
            "per_epoch": per_epoch,
            "samples_seen": metrics.samples_seen,
            "clip_events": metrics.clip_events,
            "max_abs_w": metrics.max_abs_w,
            "max_abs_b": metrics.max_abs_b,
            "max_abs_delta": metrics.max_abs_delta,
            "test_split_accuracy_extra": held_out_accuracy,
            "wall_time_s": wall,
        }),
    )?;
    Ok(summary)
}

pub fn train(cfg: &RunConfig) -> Result<ExitCode> {
    let (data, test) = load_data(cfg)?;
    let s = train_into(cfg, &data, test.as_ref(), &cfg.out)?;
    match s.final_accuracy {
        Some(acc) => println!(
            "{}: {} epochs, final rolling accuracy {acc:.2}%, {} clip events, {:.1} s",
            s.backend, s.epochs, s.clip_events, s.wall_time_s
        ),
        None => println!("{}: no epochs run", s.backend),
    }
    println!("wrote {}", cfg.out.display());
    Ok(ExitCode::SUCCESS)
}

fn split_values(values: Option<&str>, default: &str) -> Vec<String> {
    values
        .unwrap_or(default)
        .split(';')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A prepared sweep point, or the reason it was skipped.
type Point<T> = (T, std::result::Result<RunConfig, String>);

/// Run every valid point on `threads` workers; per-run outputs go under
/// `<out>/sweep-<axis>/<label>`.
fn run_points<T: Sync>(
    base: &RunConfig,
    axis: &str,
    points: &[Point<T>],
    label: impl Fn(&T) -> String + Sync,
    threads: usize,
) -> Result<Vec<std::result::Result<RunSummary, String>>> {
    let (data, _) = load_data(base)?;
    let root = base.out.join(format!("sweep-{axis}"));
    let results = pool(threads)?.install(|| {
        points
            .par_iter()
            .map(|(key, cfg)| {
                let cfg = cfg.as_ref().map_err(Clone::clone)?;
                let name = label(key);
                let r = train_into(cfg, &data, None, &root.join(&name)).map_err(|e| format!("{e:#}"));
                if let Ok(s) = &r {
                    eprintln!("{axis} {name}: final {:.2}%", s.final_accuracy.unwrap_or(f64::NAN));
                }
                r
            })
            .collect()
    });
    Ok(results)
}

#[derive(Serialize)]
struct BitsRow {
    value: String,
    b_w: Option<u32>,
    b_n: Option<u32>,
    b_f: Option<u32>,
    rounding: Option<String>,
    epoch1_accuracy: Option<f64>,
    final_accuracy: Option<f64>,
    clip_events: Option<u64>,
    note: String,
}

fn parse_format(v: &str, rounding: RoundingMode) -> std::result::Result<FixedFormat, String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if !(3..=4).contains(&parts.len()) {
        return Err("expected b_w,b_n,b_f[,rounding]".into());
    }
    let mut bits = [0u32; 3];
    for (b, p) in bits.iter_mut().zip(&parts) {
        *b = p.parse().map_err(|_| format!("bad bit count {p:?}"))?;
    }
    let mode = match parts.get(3) {
        Some(m) => m.parse().map_err(|e| format!("{e}"))?,
        None => rounding,
    };
    FixedFormat::with_rounding(bits[0], bits[1], bits[2], mode).map_err(|e| e.to_string())
}

pub fn sweep_bits(cfg: &RunConfig, values: Option<&str>, threads: usize) -> Result<ExitCode> {
    let rounding = cfg.format().rounding();
    let points: Vec<Point<String>> = split_values(values, "8,2,5;10,2,7;10,3,6;12,3,8;16,4,11")
        .into_iter()
        .map(|v| {
            let c = parse_format(&v, rounding).map(|format| {
                let mut c = cfg.clone();
                c.train.backend = Backend::Fixed { format };
                c
            });
            (v, c)
        })
        .collect();
    let results = run_points(cfg, "bits", &points, |v| v.replace(',', "-"), threads)?;
    let rows: Vec<BitsRow> = points
        .iter()
        .zip(results)
        .map(|((v, c), r)| {
            let fmt = c.as_ref().ok().map(RunConfig::format);
            let (s, note) = split_result(r);
            BitsRow {
                value: v.clone(),
                b_w: fmt.map(|f| f.total_bits()),
                b_n: fmt.map(|f| f.int_bits()),
                b_f: fmt.map(|f| f.frac_bits()),
                rounding: fmt.map(|f| f.rounding().to_string()),
                epoch1_accuracy: s.as_ref().and_then(|s| s.epoch1_accuracy),
                final_accuracy: s.as_ref().and_then(|s| s.final_accuracy),
                clip_events: s.as_ref().map(|s| s.clip_events),
                note,
            }
        })
        .collect();
    for r in &rows {
        println!(
            "{:>10}  epoch 1 {:>6}  final {:>6}  {}",
            r.value,
            pct(r.epoch1_accuracy),
            pct(r.final_accuracy),
            r.note
        );
    }
    finish_sweep(cfg, "bits", &rows)
}

fn split_result(r: std::result::Result<RunSummary, String>) -> (Option<RunSummary>, String) {
    match r {
        Ok(s) => (Some(s), String::new()),
        Err(e) => {
            eprintln!("skipped: {e}");
            (None, format!("skipped: {e}"))
        }
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.2}")).unwrap_or_else(|| "-".into())
}

fn finish_sweep<T: Serialize>(cfg: &RunConfig, axis: &str, rows: &[T]) -> Result<ExitCode> {
    let path = out_dir(&cfg.out)?.join(format!("sweep_{axis}.csv"));
    write_rows(&path, rows)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct DensityRow {
    value: String,
    density_j1: f64,
    density_j2: Option<f64>,
    d_out_j2: Option<usize>,
    z_j2: Option<usize>,
    epoch1_accuracy: Option<f64>,
    final_accuracy: Option<f64>,
    note: String,
}

fn parse_density(v: &str) -> std::result::Result<f64, String> {
    let (num, scale) = match v.strip_suffix('%') {
        Some(n) => (n, 0.01),
        None => (v, 1.0),
    };
    let d = num.trim().parse::<f64>().map_err(|_| format!("bad density {v:?}"))? * scale;
    if !(d > 0.0 && d <= 1.0) {
        return Err(format!("density {v} outside (0, 1]"));
    }
    Ok(d)
}

/// Junction 2 at `density`, with `z` chosen so its block cycle matches
/// junction 1.
fn density_spec(base: &NetworkSpec, density: f64) -> std::result::Result<NetworkSpec, String> {
    if base.layer_sizes.len() < 3 {
        return Err("need at least two junctions".into());
    }
    let (n0, n1, n2) = (base.layer_sizes[0], base.layer_sizes[1], base.layer_sizes[2]);
    let exact = density * n2 as f64;
    let d_out = exact.round() as usize;
    if d_out == 0 || (exact - d_out as f64).abs() > 1e-9 {
        return Err(format!(
            "density {density} of {n2} right neurons is not a whole fan-out"
        ));
    }
    let clocks = n0 * base.d_out[0] / base.z[0];
    let weights = n1 * d_out;
    if !weights.is_multiple_of(clocks) {
        return Err(format!("{weights} weights do not split into {clocks} clocks"));
    }
    let mut spec = base.clone();
    spec.d_out[1] = d_out;
    spec.z[1] = weights / clocks;
    build_network(&spec).map_err(|e| e.to_string())?;
    Ok(spec)
}

pub fn sweep_density(cfg: &RunConfig, values: Option<&str>, threads: usize) -> Result<ExitCode> {
    let points: Vec<Point<String>> = split_values(values, "12.5%;25%;50%")
        .into_iter()
        .map(|v| {
            let c = parse_density(&v)
                .and_then(|d| density_spec(&cfg.network, d))
                .map(|network| RunConfig { network, ..cfg.clone() });
            (v, c)
        })
        .collect();
    let results = run_points(cfg, "density", &points, |v| v.replace('%', "pct"), threads)?;
    let n = &cfg.network;
    let density_j1 = n.d_out[0] as f64 / n.layer_sizes[1] as f64;
    let rows: Vec<DensityRow> = points
        .iter()
        .zip(results)
        .map(|((v, c), r)| {
            let spec = c.as_ref().ok().map(|c| &c.network);
            let (s, note) = split_result(r);
            DensityRow {
                value: v.clone(),
                density_j1,
                density_j2: spec.map(|s| s.d_out[1] as f64 / s.layer_sizes[2] as f64),
                d_out_j2: spec.map(|s| s.d_out[1]),
                z_j2: spec.map(|s| s.z[1]),
                epoch1_accuracy: s.as_ref().and_then(|s| s.epoch1_accuracy),
                final_accuracy: s.as_ref().and_then(|s| s.final_accuracy),
                note,
            }
        })
        .collect();
    for r in &rows {
        println!(
            "junction 2 at {:>6}: final {:>6}  {}",
            r.value,
            pct(r.final_accuracy),
            r.note
        );
    }
    finish_sweep(cfg, "density", &rows)
}

#[derive(Serialize)]
struct SeedRow {
    seed: String,
    epoch1_accuracy: Option<f64>,
    final_accuracy: Option<f64>,
    clip_events: Option<u64>,
    note: String,
}

pub fn sweep_seed(cfg: &RunConfig, values: Option<&str>, threads: usize) -> Result<ExitCode> {
    let points: Vec<Point<String>> = split_values(values, "1;2;3;4;5")
        .into_iter()
        .map(|v| {
            let c = v.parse::<u64>().map_err(|_| format!("bad seed {v:?}")).map(|seed| {
                let mut c = cfg.clone();
                c.set_seed(seed);
                c
            });
            (v, c)
        })
        .collect();
    let results = run_points(cfg, "seed", &points, Clone::clone, threads)?;
    let rows: Vec<SeedRow> = points
        .iter()
        .zip(results)
        .map(|((v, _), r)| {
            let (s, note) = split_result(r);
            SeedRow {
                seed: v.clone(),
                epoch1_accuracy: s.as_ref().and_then(|s| s.epoch1_accuracy),
                final_accuracy: s.as_ref().and_then(|s| s.final_accuracy),
                clip_events: s.as_ref().map(|s| s.clip_events),
                note,
            }
        })
        .collect();
    let finals: Vec<f64> = rows.iter().filter_map(|r| r.final_accuracy).collect();
    if !finals.is_empty() {
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        let (lo, hi) = finals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &a| (l.min(a), h.max(a)));
        println!("{} seeds: mean {mean:.2}%, range {lo:.2}..{hi:.2}", finals.len());
    }
    finish_sweep(cfg, "seed", &rows)
}

#[derive(Serialize)]
struct ZRow {
    z: String,
    z_total: Option<usize>,
    block_cycle_clocks: Option<usize>,
    block_cycle_us: Option<f64>,
    ff_multipliers: Option<usize>,
    bp_multipliers: Option<usize>,
    up_multipliers: Option<usize>,
    dsp_required: Option<usize>,
    dsp_fits: Option<bool>,
    note: String,
}

fn join(z: &[usize]) -> String {
    z.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

pub fn sweep_z(cfg: &RunConfig, values: Option<&str>) -> Result<ExitCode> {
    let mut rows = Vec::new();
    let candidates = match values {
        None => doubling_candidates(&cfg.network.z, cfg.estimate.z_steps),
        Some(v) => {
            let mut c = Vec::new();
            for item in split_values(Some(v), "") {
                match item
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                {
                    Ok(z) => c.push(z),
                    Err(_) => rows.push(ZRow::skipped(item, "not a list of integers".into())),
                }
            }
            c
        }
    };
    let device = device(cfg)?;
    let sweep = resources::sweep_z(&cfg.network, &candidates, cfg.format());
    for r in &sweep.rows {
        let dsp = r.ff_multipliers
            + r.bp_multipliers
            + if cfg.estimate.policy == resources::DspPolicy::All {
                r.up_multipliers
            } else {
                0
            };
        rows.push(ZRow {
            z: join(&r.z),
            z_total: Some(r.z_total),
            block_cycle_clocks: Some(r.block_cycle_clocks),
            block_cycle_us: Some(r.block_cycle_seconds * 1e6),
            ff_multipliers: Some(r.ff_multipliers),
            bp_multipliers: Some(r.bp_multipliers),
            up_multipliers: Some(r.up_multipliers),
            dsp_required: Some(dsp),
            dsp_fits: Some(dsp as u64 <= device.dsp_count),
            note: String::new(),
        });
    }
    for s in &sweep.skipped {
        eprintln!("skipped z {}: {}", join(&s.z), s.reason);
        rows.push(ZRow::skipped(join(&s.z), s.reason.clone()));
    }
    for r in &rows {
        match r.block_cycle_clocks {
            Some(c) => println!(
                "z {:>12}: {c:>3} clocks/block cycle, {:>4} DSP{}",
                r.z,
                r.dsp_required.unwrap(),
                if r.dsp_fits == Some(true) {
                    ""
                } else {
                    " (over capacity)"
                }
            ),
            None => println!("z {:>12}: {}", r.z, r.note),
        }
    }
    finish_sweep(cfg, "z", &rows)
}

impl ZRow {
    fn skipped(z: String, reason: String) -> Self {
        Self {
            z,
            z_total: None,
            block_cycle_clocks: None,
            block_cycle_us: None,
            ff_multipliers: None,
            bp_multipliers: None,
            up_multipliers: None,
            dsp_required: None,
            dsp_fits: None,
            note: format!("skipped: {reason}"),
        }
    }
}

fn device(cfg: &RunConfig) -> Result<DeviceProfile> {
    let name = &cfg.estimate.device;
    if let Some(d) = DeviceProfile::builtin(name) {
        return Ok(d);
    }
    let path = PathBuf::from(name);
    if !path.exists() {
        bail!("estimate.device: {name:?} is neither a built-in device nor a file");
    }
    Ok(DeviceProfile::from_toml_str(&fs::read_to_string(&path)?)?)
}

pub fn estimate(cfg: &RunConfig) -> Result<ExitCode> {
    let est = resources::estimate(&cfg.network, cfg.format())?;
    let dev = device(cfg)?;
    let fit = fit_check(&est, &dev, cfg.estimate.policy);
    println!(
        "multipliers: {} FF, {} BP, {} UP; {} activation LUTs",
        est.ff_multipliers, est.bp_multipliers, est.up_multipliers, est.sigmoid_lut_count
    );
    println!(
        "block cycle: {} clocks, {:.4} us at {:.1} MHz ({:.0} samples/s)",
        est.block_cycle_clocks,
        est.block_cycle_seconds * 1e6,
        est.clock_hz / 1e6,
        est.throughput
    );
    println!(
        "memory: {} bits ({:.0} kbit available)",
        fit.memory_bits,
        fit.bram_bits / 1000.0
    );
    let verdict = if fit.dsp_fits { "fits" } else { "does not fit" };
    println!("{verdict}: {}/{} DSP", fit.dsp_required, fit.dsp_available);
    for w in &fit.warnings {
        println!("warning: {w}");
    }
    let path = out_dir(&cfg.out)?.join("estimate.json");
    write_json(
        &path,
        &json!({"device": dev, "policy": cfg.estimate.policy, "estimate": est, "fit": fit}),
    )?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn trace(cfg: &RunConfig, csv_out: bool) -> Result<ExitCode> {
    let net = build_network(&cfg.network)?;
    let ilv = build_interleavers(&net, cfg.train.interleaver_seed)?;
    let mut opts = TraceOptions::new(cfg.trace.block_cycles);
    opts.queue_depth = cfg.trace.queue_depth;
    opts.max_violations = cfg.trace.max_violations;
    let dir = out_dir(&cfg.out)?;
    let report = if csv_out {
        let mut sink = CsvSink::new(create(&dir.join("trace.csv"))?)?;
        let mut failed = None;
        let report = simulate_trace_with(&net, &ilv, &opts, |a| {
            if failed.is_none() {
                failed = sink.push(a).err();
            }
        })?;
        if let Some(e) = failed {
            return Err(e).context("writing trace.csv");
        }
        sink.finish()?;
        report
    } else {
        simulate_trace_with(&net, &ilv, &opts, |_| {})?
    };
    write_json(&dir.join("trace_report.json"), &report)?;
    println!(
        "{} block cycles x {} clocks, {} accesses, queue depths {:?}",
        report.block_cycles, report.clocks_per_block_cycle, report.accesses, report.queue_depths
    );
    if report.clean {
        println!("clean: no conflicts or stale reads");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{} violations", report.violation_count);
        if let Some(v) = report.first_violation() {
            println!("first: clock {} junction {} {:?}", v.clock, v.memory.junction, v.kind);
        }
        Ok(ExitCode::FAILURE)
    }
}

#[derive(Serialize)]
struct HistRow {
    bin_start: f64,
    sparse: u64,
    fc: u64,
}

pub fn clipstats(cfg: &RunConfig, threads: usize) -> Result<ExitCode> {
    let (data, _) = load_data(cfg)?;
    let study = |which| clip_study(&cfg.network, which, &data, &cfg.clip);
    let (sparse, fc) = if threads > 1 {
        pool(threads)?.join(|| study(Which::Sparse), || study(Which::Fc))
    } else {
        (study(Which::Sparse), study(Which::Fc))
    };
    let (sparse, fc): (ClipStudyResult, ClipStudyResult) = (sparse?, fc?);
    for r in [&sparse, &fc] {
        println!(
            "{:>6}: {:.2}% of |s| >= {} clipped, variance {:.3}",
            format!("{:?}", r.which).to_lowercase(),
            100.0 * r.stats.fraction(),
            r.stats.bound,
            r.stats.variance()
        );
    }
    println!(
        "sparse clips {} than fully connected",
        if sparse.stats.fraction() < fc.stats.fraction() {
            "less"
        } else {
            "no less"
        }
    );
    let dir = out_dir(&cfg.out)?;
    write_json(
        &dir.join("clipstats.json"),
        &json!({"config": cfg.clip, "sparse": sparse, "fc": fc}),
    )?;
    let rows: Vec<HistRow> = sparse
        .stats
        .histogram
        .iter()
        .zip(&fc.stats.histogram)
        .enumerate()
        .map(|(i, (&s, &f))| HistRow {
            bin_start: i as f64 * sparse.stats.bin_width,
            sparse: s,
            fc: f,
        })
        .collect();
    write_rows(&dir.join("clip_histogram.csv"), &rows)?;
    println!("wrote {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn lut_dump(cfg: &RunConfig) -> Result<ExitCode> {
    let kind = cfg.train.activation;
    let fmt = cfg.format();
    let table = ActivationTable::build(kind, fmt)?;
    let path = out_dir(&cfg.out)?.join(format!("lut_{}.csv", kind.as_str()));
    table.write_csv(create(&path)?)?;
    let (v, d) = table.lookup(0);
    println!(
        "{} {fmt}: {} rows; input 0 -> value {}, derivative {}",
        kind.as_str(),
        table.len(),
        fmt.to_real(v),
        fmt.to_real(d)
    );
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}
