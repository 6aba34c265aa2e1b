//! One function per subcommand. Each writes its files under an output directory.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use swarmsim_core::netsim::{self, write_summary_csv, World};
use swarmsim_core::scenario::formation::RunRecord;
use swarmsim_core::scenario::{self, dataset::is_schema_line, gen_world, run_formation, run_homing, sample_groups};

use crate::report::{self, ingest, reduce};
use crate::{CliError, Format, RunConfig};

pub const NETBENCH_STEADY_HEADER: &str = "window_start_s,window_end_s,frames,collided,loss,mean_divisor,max_divisor";
pub const SUPERFRAME_HEADER: &str = "superframe,t,frames,expected_rx,delivered_rx,collided";
pub const DIVISOR_HEADER: &str = "t,node_id,divisor";
pub const HOMING_SUMMARY_HEADER: &str = "keyframes,completed,max_arrival_error_m,max_cross_track_m";
pub const TRACE_HEADER: &str = "# t node_id x y yaw_deg";

fn create(out: &Path, name: &str) -> Result<(BufWriter<File>, PathBuf), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join(name);
    let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    Ok((BufWriter::new(f), path))
}

/// Writes a file through `body`, mapping I/O failures to the file's path.
fn write_file(out: &Path, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<PathBuf, CliError> {
    let (mut w, path) = create(out, name)?;
    body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn write_jsonl<T: Serialize>(w: &mut impl Write, items: &[T]) -> std::io::Result<()> {
    for it in items {
        serde_json::to_writer(&mut *w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn open_input(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn scenario_err(e: scenario::ScenarioError) -> CliError {
    match e {
        scenario::ScenarioError::Config(m) | scenario::ScenarioError::Infeasible(m) => CliError::Config(m),
        other => CliError::Validation(other.to_string()),
    }
}

/// Closed-loop formation run: `runlog.jsonl` and `summary.<fmt>`.
pub fn simulate(cfg: &RunConfig, out: &Path, format: Format) -> Result<(), CliError> {
    cfg.validate()?;
    let log = run_formation(&cfg.formation(), cfg.seed).map_err(scenario_err)?;
    write_file(out, "runlog.jsonl", |w| log.write_jsonl(w))?;
    write_file(out, &format!("summary.{}", format.ext()), |w| match format {
        Format::Csv => log.write_summary_csv(w),
        Format::Jsonl => write_jsonl(w, &log.summary),
    })?;
    for s in &log.summary {
        log::info!("follower {}: median {:.3} m / {:.2} deg, {:.2} m/s", s.node_id, s.median_pos_m, s.median_rot_deg, s.mean_vel_mps);
    }
    Ok(())
}

/// Metric report over any JSONL input: `report.<fmt>` and `categories.csv`.
pub fn metrics(cfg: &RunConfig, input: &Path, out: &Path, format: Format) -> Result<(), CliError> {
    cfg.validate()?;
    let data = ingest(open_input(input)?, cfg).map_err(|e| CliError::io(input, e))?;
    for (line, reason) in &data.malformed {
        log::warn!("{}:{line}: {reason}", input.display());
    }
    let reduced = reduce(&data, cfg)?;
    write_file(out, &format!("report.{}", format.ext()), |w| match format {
        Format::Csv => report::write_report_csv(w, &reduced.report),
        Format::Jsonl => write_jsonl(w, std::slice::from_ref(&reduced.report)),
    })?;
    write_file(out, "categories.csv", |w| report::write_categories_csv(w, &reduced))?;
    if data.malformed_fraction() > cfg.max_malformed {
        return Err(CliError::Validation(format!(
            "{} of {} lines malformed (limit {:.1}%)",
            data.malformed.len(),
            data.lines,
            100.0 * cfg.max_malformed
        )));
    }
    Ok(())
}

/// Sampled observation groups: `dataset.jsonl`.
pub fn datagen(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    let plan = gen_world(cfg.seed, cfg.world_extent, cfg.n_rooms).map_err(scenario_err)?;
    let groups = sample_groups(&plan, cfg.n_groups, &cfg.sample(), cfg.seed).map_err(scenario_err)?;
    write_file(out, "dataset.jsonl", |w| scenario::write_groups(w, &groups))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SteadyState {
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub frames: u64,
    pub collided: u64,
    pub loss: f64,
    pub mean_divisor: f64,
    pub max_divisor: u32,
}

/// Pure network stress run: per-node summary, per-superframe trace, divisor
/// trace, the last-window steady state and the event log.
pub fn netbench(cfg: &RunConfig, out: &Path, format: Format) -> Result<SteadyState, CliError> {
    cfg.validate()?;
    let world = World::new(cfg.n_nodes, cfg.medium(), cfg.tdma(), cfg.payload_bytes);
    let run = netsim::run(&world, cfg.duration, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let period = 1.0 / cfg.superframe_hz;
    let n_sf = run.superframes.len();
    let window = ((cfg.loss_window / period).round() as usize).clamp(1, n_sf.max(1));
    let tail = &run.superframes[n_sf.saturating_sub(window)..];
    let (mut frames, mut collided, mut expected, mut delivered) = (0, 0, 0, 0);
    for s in tail {
        frames += s.frames;
        collided += s.collided;
        expected += s.expected_rx;
        delivered += s.delivered_rx;
    }
    let t0 = n_sf.saturating_sub(window) as f64 * period;
    // The trace records changes only; every node starts at divisor 1.
    let mut current = vec![1u32; usize::from(cfg.n_nodes)];
    let mut trace = run.divisor_trace.iter().peekable();
    let (mut sum, mut count, mut max_div) = (0u64, 0u64, 0u32);
    for k in 0..n_sf {
        let tk = k as f64 * period;
        while let Some(&(_, node, d)) = trace.next_if(|e| e.0 <= tk + 1e-9) {
            if let Some(c) = current.get_mut(usize::from(node)) {
                *c = d;
            }
        }
        if tk >= t0 - 1e-9 {
            sum += current.iter().map(|&d| u64::from(d)).sum::<u64>();
            count += current.len() as u64;
            max_div = max_div.max(current.iter().copied().max().unwrap_or(1));
        }
    }
    let steady = SteadyState {
        window_start_s: t0,
        window_end_s: n_sf as f64 * period,
        frames,
        collided,
        loss: if expected == 0 { 0.0 } else { 1.0 - delivered as f64 / expected as f64 },
        mean_divisor: if count == 0 { 0.0 } else { sum as f64 / count as f64 },
        max_divisor: max_div,
    };

    write_file(out, &format!("summary.{}", format.ext()), |w| match format {
        Format::Csv => write_summary_csv(w, &run.stats),
        Format::Jsonl => write_jsonl(w, &run.stats),
    })?;
    write_file(out, "superframes.csv", |w| {
        writeln!(w, "{SUPERFRAME_HEADER}")?;
        for (k, s) in run.superframes.iter().enumerate() {
            writeln!(w, "{k},{:.6},{},{},{},{}", k as f64 * period, s.frames, s.expected_rx, s.delivered_rx, s.collided)?;
        }
        Ok(())
    })?;
    write_file(out, "divisors.csv", |w| {
        writeln!(w, "{DIVISOR_HEADER}")?;
        for (t, node, d) in &run.divisor_trace {
            writeln!(w, "{t:.6},{node},{d}")?;
        }
        Ok(())
    })?;
    write_file(out, "steady.csv", |w| {
        writeln!(w, "{NETBENCH_STEADY_HEADER}")?;
        writeln!(
            w,
            "{:.6},{:.6},{},{},{:.6},{:.6},{}",
            steady.window_start_s, steady.window_end_s, steady.frames, steady.collided, steady.loss, steady.mean_divisor, steady.max_divisor
        )
    })?;
    write_file(out, "events.jsonl", |w| w.write_all(&run.log))?;
    let collisions: u64 = run.stats.iter().map(|s| s.collisions).sum();
    log::info!("{collisions} collisions; steady-state mean divisor {:.2}", steady.mean_divisor);
    Ok(steady)
}

/// Teach-and-repeat run: per-keyframe arrivals and a one-line summary.
pub fn homing(cfg: &RunConfig, out: &Path, format: Format) -> Result<scenario::HomingReport, CliError> {
    cfg.validate()?;
    let rep = run_homing(&cfg.homing(), cfg.seed).map_err(scenario_err)?;
    write_file(out, "arrivals.csv", |w| rep.write_csv(w))?;
    write_file(out, &format!("homing.{}", format.ext()), |w| match format {
        Format::Csv => {
            writeln!(w, "{HOMING_SUMMARY_HEADER}")?;
            let max = rep.max_arrival_error().map(|e| format!("{e:.6}")).unwrap_or_default();
            writeln!(w, "{},{},{max},{:.6}", rep.keyframes.len(), rep.completed, rep.max_cross_track)
        }
        Format::Jsonl => write_jsonl(w, std::slice::from_ref(&rep)),
    })?;
    if !rep.completed {
        log::warn!("replay did not reach the last keyframe within the timeout");
    }
    Ok(rep)
}

/// Plot-ready position traces from a run log: one whitespace-separated block
/// per node, blocks separated by two blank lines (gnuplot `index`).
pub fn traces(input: &Path, out: &Path) -> Result<(), CliError> {
    let reader = open_input(input)?;
    let mut by_node: std::collections::BTreeMap<u16, Vec<RunRecord>> = Default::default();
    let mut bad = 0usize;
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<serde_json::Value, _> = serde_json::from_str(&line);
        match parsed {
            Ok(v) if is_schema_line(&v) => continue,
            Ok(v) => match serde_json::from_value::<RunRecord>(v) {
                Ok(r) => by_node.entry(r.node_id).or_default().push(r),
                Err(e) => {
                    bad += 1;
                    log::warn!("{}:{}: {e}", input.display(), k + 1);
                }
            },
            Err(e) => {
                bad += 1;
                log::warn!("{}:{}: {e}", input.display(), k + 1);
            }
        }
    }
    if by_node.is_empty() {
        return Err(CliError::Validation(format!("{}: no run-log records", input.display())));
    }
    write_file(out, "traces.dat", |w| {
        writeln!(w, "{TRACE_HEADER}")?;
        for (i, (node, recs)) in by_node.iter().enumerate() {
            if i > 0 {
                writeln!(w, "\n")?;
            }
            for r in recs {
                let p = r.pose_truth.position;
                writeln!(w, "{:.4} {node} {:.4} {:.4} {:.3}", r.t, p.x, p.y, r.pose_truth.yaw().to_degrees())?;
            }
        }
        Ok(())
    })?;
    if bad > 0 {
        log::warn!("skipped {bad} malformed lines");
    }
    Ok(())
}

/// The full default configuration as TOML.
pub fn defaults() -> String {
    RunConfig::default().to_toml()
}
