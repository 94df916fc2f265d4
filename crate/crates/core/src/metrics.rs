//! Experiment driver: builds workloads, runs simulations and turns their
//! results into reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{RunConfig, Variant, WorkloadKind};
use crate::dmms::write_decision_log;
use crate::engine::write_event_log;
use crate::epm::{memory_footprint, MemoryFootprint};
use crate::error::{ConfigError, SimError, TraceError};
use crate::ftl::{RunResult, ShadowStats, Snapshot, Ssd};
use crate::workload::{
    generate_append_random, generate_synthetic, parse_trace, validate_bounds, IoRequest,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MigrationSummary {
    pub total: u64,
    pub copyback: u64,
    pub offchip: u64,
    pub foreground_copyback: u64,
    pub foreground_offchip: u64,
    pub background_copyback: u64,
    pub background_offchip: u64,
    pub forced_offchip: u64,
    /// Share of migrations done as copyback; 0 without migrations.
    pub copyback_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseMetrics {
    pub elapsed_us: u64,
    pub host_bytes: u64,
    /// Bytes per microsecond, i.e. MB/s.
    pub throughput_mb_s: f64,
    pub waf: f64,
    pub migrations: MigrationSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub migrations: u32,
    pub pages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub workload: String,
    pub requests: u64,
    pub host_read_bytes: u64,
    pub host_write_bytes: u64,
    pub host_pages_written: u64,
    pub nand_pages_programmed: u64,
    pub elapsed_us: u64,
    pub throughput_mb_s: f64,
    pub iops: f64,
    pub waf: f64,
    pub migrations: MigrationSummary,
    /// Metrics after the warm-up fraction of requests.
    pub steady: PhaseMetrics,
    pub gc_foreground: u64,
    pub gc_background: u64,
    pub wear_level_runs: u64,
    pub erases: u64,
    pub decisions_rcopyback: u64,
    pub decisions_offchip: u64,
    pub buffer_hits: u64,
    pub nand_reads: u64,
    pub mean_read_latency_us: f64,
    pub mean_write_latency_us: f64,
    pub max_latency_us: u64,
    pub pages_migrated: u64,
    pub migration_histogram: Vec<HistogramRow>,
    pub shadow: ShadowStats,
    pub idle_periods: u64,
    pub mean_counter0_blocks_at_idle_end: f64,
    pub final_free_blocks: u64,
    pub full_blocks_by_counter: Vec<u64>,
    pub pe_min: u32,
    pub pe_max: u32,
    pub pe_mean: f64,
    pub channel_busy_us: u64,
    pub dram_busy_us: u64,
    pub chip_busy_us: u64,
    pub counter_memory: MemoryFootprint,
    /// Throughput relative to a reference run, filled in by sweeps.
    pub normalized_throughput: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn migration_summary(c: &crate::ftl::Counters) -> MigrationSummary {
    MigrationSummary {
        total: c.migrations(),
        copyback: c.migrations_copyback,
        offchip: c.migrations_offchip,
        foreground_copyback: c.fg_copyback,
        foreground_offchip: c.fg_offchip,
        background_copyback: c.bg_copyback,
        background_offchip: c.bg_offchip,
        forced_offchip: c.forced_offchip,
        copyback_fraction: ratio(c.migrations_copyback, c.migrations()),
    }
}

impl RunReport {
    pub fn new(cfg: &RunConfig, workload: &str, r: &RunResult) -> Self {
        let c = &r.counters;
        let elapsed = r.last_completion.saturating_sub(r.first_arrival);
        let host_bytes = c.read_bytes + c.write_bytes;
        let steady_elapsed = r.last_completion.saturating_sub(r.steady_start);
        let latency_count = r.read_latency.count + r.write_latency.count;
        RunReport {
            variant: cfg.variant.to_string(),
            seed: cfg.seed,
            workload: workload.to_string(),
            requests: r.requests,
            host_read_bytes: c.read_bytes,
            host_write_bytes: c.write_bytes,
            host_pages_written: c.host_pages_written,
            nand_pages_programmed: c.nand_pages_programmed(),
            elapsed_us: elapsed,
            throughput_mb_s: ratio(host_bytes, elapsed),
            iops: if elapsed == 0 { 0.0 } else { latency_count as f64 * 1e6 / elapsed as f64 },
            waf: ratio(c.nand_pages_programmed(), c.host_pages_written),
            migrations: migration_summary(c),
            steady: PhaseMetrics {
                elapsed_us: steady_elapsed,
                host_bytes: r.steady_bytes,
                throughput_mb_s: ratio(r.steady_bytes, steady_elapsed),
                waf: ratio(r.steady.nand_pages_programmed(), r.steady.host_pages_written),
                migrations: migration_summary(&r.steady),
            },
            gc_foreground: c.gc_foreground,
            gc_background: c.gc_background,
            wear_level_runs: c.wear_level_runs,
            erases: c.erases,
            decisions_rcopyback: c.decisions_rcopyback,
            decisions_offchip: c.decisions_offchip,
            buffer_hits: c.buffer_hits,
            nand_reads: c.nand_reads,
            mean_read_latency_us: r.read_latency.mean_us(),
            mean_write_latency_us: r.write_latency.mean_us(),
            max_latency_us: r.read_latency.max_us.max(r.write_latency.max_us),
            pages_migrated: r.migration_histogram.values().sum(),
            migration_histogram: r
                .migration_histogram
                .iter()
                .map(|(&migrations, &pages)| HistogramRow { migrations, pages })
                .collect(),
            shadow: r.shadow,
            idle_periods: r.counter0_at_idle_end.len() as u64,
            mean_counter0_blocks_at_idle_end: if r.counter0_at_idle_end.is_empty() {
                0.0
            } else {
                r.counter0_at_idle_end.iter().sum::<u64>() as f64 / r.counter0_at_idle_end.len() as f64
            },
            final_free_blocks: r.final_free_blocks,
            full_blocks_by_counter: r.full_blocks_by_counter.clone(),
            pe_min: r.pe_min,
            pe_max: r.pe_max,
            pe_mean: r.pe_mean,
            channel_busy_us: r.engine.channel_busy.iter().sum(),
            dram_busy_us: r.engine.dram_busy.iter().sum(),
            chip_busy_us: r.engine.chip_busy.iter().sum(),
            counter_memory: memory_footprint(&cfg.geometry, 3),
            normalized_throughput: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Scalar fields as `metric,value` rows, in declaration order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let value = serde_json::to_value(self).expect("report serializes");
        flatten_csv("", &value, &mut out);
        out
    }
}

fn flatten_csv(prefix: &str, v: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                if k == "migration_histogram" {
                    continue;
                }
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_csv(&key, child, out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten_csv(&format!("{prefix}.{i}"), child, out);
            }
        }
        Value::Null => out.push_str(&format!("{prefix},\n")),
        Value::String(s) => out.push_str(&format!("{prefix},{s}\n")),
        other => out.push_str(&format!("{prefix},{other}\n")),
    }
}

pub fn histogram_csv(report: &RunReport) -> String {
    let mut out = String::from("migrations,pages\n");
    for row in &report.migration_histogram {
        out.push_str(&format!("{},{}\n", row.migrations, row.pages));
    }
    out
}

pub const SNAPSHOT_HEADER: &str = "time,free_blocks,u,smoothed_u,host_pages_written,nand_pages_programmed,gc_foreground,gc_background,wear_level_runs,migrations_copyback,migrations_offchip";

pub fn snapshots_csv(snapshots: &[Snapshot]) -> String {
    let slots = snapshots.first().map_or(0, |s| s.slot_fill.len());
    let mut out = String::from(SNAPSHOT_HEADER);
    for i in 0..slots {
        out.push_str(&format!(",slot{i}_fill"));
    }
    out.push('\n');
    for s in snapshots {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{},{},{},{},{},{}",
            s.time,
            s.free_blocks,
            s.u,
            s.smoothed_u,
            s.host_pages_written,
            s.nand_pages_programmed,
            s.gc_foreground,
            s.gc_background,
            s.wear_level_runs,
            s.migrations_copyback,
            s.migrations_offchip
        ));
        for f in &s.slot_fill {
            out.push_str(&format!(",{f:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Requests described by the workload section, plus a short label.
pub fn build_workload(cfg: &RunConfig) -> Result<(Vec<IoRequest>, String), SimError> {
    let w = &cfg.workload;
    let logical = cfg.logical_bytes();
    let (reqs, label) = match w.kind {
        WorkloadKind::Synthetic => {
            let profile = w.resolved_profile(cfg.seed)?;
            let mix = w.resolved_mix()?;
            let label = format!("{}-{}", profile.name, mix.name);
            (generate_synthetic(&profile, &mix, w.requests, logical), label)
        }
        WorkloadKind::AppendRandom => {
            let ws = if w.profile.working_set == 0 { logical } else { w.profile.working_set.min(logical) };
            let reqs = generate_append_random(ws, w.profile.request_bytes, w.requests, w.overwrite_ratio, cfg.seed);
            (reqs, "append-random".to_string())
        }
        WorkloadKind::Trace => {
            let path = w.trace.as_ref().ok_or(ConfigError::Invalid {
                field: "workload.trace",
                reason: "trace workload without a trace path".into(),
            })?;
            let file = File::open(path).map_err(|e| TraceError::Io(format!("{}: {e}", path.display())))?;
            let parsed = parse_trace(BufReader::new(file))?;
            let label = path.file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned());
            (parsed.requests, label)
        }
    };
    validate_bounds(&reqs, logical)?;
    Ok((reqs, label))
}

/// Report plus the raw run data it came from.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub result: RunResult,
}

pub fn run_requests(cfg: &RunConfig, requests: &[IoRequest], label: &str) -> Result<RunArtifacts, SimError> {
    let ssd = Ssd::new(cfg)?;
    let result = match cfg.workload.closed_loop_depth() {
        Some(depth) => ssd.run_closed(requests, depth)?,
        None => ssd.run(requests)?,
    };
    let report = RunReport::new(cfg, label, &result);
    Ok(RunArtifacts { report, result })
}

pub fn run(cfg: &RunConfig) -> Result<RunArtifacts, SimError> {
    let (reqs, label) = build_workload(cfg)?;
    run_requests(cfg, &reqs, &label)
}

/// Writes report, histogram, snapshots and enabled logs into `dir`.
pub fn write_outputs(art: &RunArtifacts, cfg: &RunConfig, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: &str| -> std::io::Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put("report.json", &art.report.to_json())?;
    put("report.csv", &art.report.to_csv())?;
    put("histogram.csv", &histogram_csv(&art.report))?;
    if cfg.output.snapshot_interval_us > 0 {
        put("snapshots.csv", &snapshots_csv(&art.result.snapshots))?;
    }
    if cfg.output.decision_log {
        let path = dir.join("decisions.csv");
        write_decision_log(BufWriter::new(File::create(&path)?), &art.result.decisions)?;
        written.push(path);
    }
    if cfg.output.event_log {
        let path = dir.join("events.csv");
        let mut w = BufWriter::new(File::create(&path)?);
        write_event_log(&mut w, &art.result.event_log)?;
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub throughput_mb_s: f64,
    pub normalized_throughput: f64,
    pub steady_throughput_mb_s: f64,
    pub steady_normalized_throughput: f64,
    pub waf: f64,
    pub copyback_fraction: f64,
    pub migrations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub reference: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,throughput_mb_s,normalized_throughput,steady_throughput_mb_s,steady_normalized_throughput,waf,copyback_fraction,migrations\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.variant,
                r.throughput_mb_s,
                r.normalized_throughput,
                r.steady_throughput_mb_s,
                r.steady_normalized_throughput,
                r.waf,
                r.copyback_fraction,
                r.migrations
            ));
        }
        out
    }

    pub fn row(&self, variant: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Runs every variant on the same requests, in parallel, and normalizes
/// throughput against the baseline (or the first variant without one).
pub fn sweep(
    base: &RunConfig,
    variants: &[Variant],
    requests: &[IoRequest],
    label: &str,
) -> Result<(SweepTable, Vec<RunArtifacts>), SimError> {
    let results: Vec<Result<RunArtifacts, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&v| {
                let cfg = RunConfig { variant: v, ..base.clone() };
                s.spawn(move || run_requests(&cfg, requests, label))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut arts = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let ref_idx = variants.iter().position(|v| v.is_baseline()).unwrap_or(0);
    let (ref_tp, ref_steady) = arts
        .get(ref_idx)
        .map_or((0.0, 0.0), |a| (a.report.throughput_mb_s, a.report.steady.throughput_mb_s));
    let norm = |x: f64, r: f64| if r > 0.0 { x / r } else { 0.0 };
    let mut rows = Vec::with_capacity(arts.len());
    for a in &mut arts {
        let rep = &mut a.report;
        rep.normalized_throughput = Some(norm(rep.throughput_mb_s, ref_tp));
        rows.push(SweepRow {
            variant: rep.variant.clone(),
            throughput_mb_s: rep.throughput_mb_s,
            normalized_throughput: norm(rep.throughput_mb_s, ref_tp),
            steady_throughput_mb_s: rep.steady.throughput_mb_s,
            steady_normalized_throughput: norm(rep.steady.throughput_mb_s, ref_steady),
            waf: rep.waf,
            copyback_fraction: rep.migrations.copyback_fraction,
            migrations: rep.migrations.total,
        });
    }
    let reference = variants.get(ref_idx).map_or_else(String::new, |v| v.to_string());
    Ok((SweepTable { reference, rows }, arts))
}

/// Fraction of off-chip migrations avoidable with a copyback threshold of
/// `n`, given how many times pages migrate: every `(n+1)`-th migration of a
/// page still has to go off-chip. `None` for an empty histogram.
pub fn migration_histogram_analysis(histogram: &BTreeMap<u32, f64>, n: u32) -> Option<f64> {
    let (mut forced, mut total) = (0.0, 0.0);
    for (&k, &p) in histogram {
        forced += p * f64::from(k / (n + 1));
        total += p * f64::from(k);
    }
    (total > 0.0).then(|| 1.0 - forced / total)
}

/// Parses `migrations,weight` rows; a header line and `#` comments are skipped.
pub fn parse_histogram(text: &str) -> Result<BTreeMap<u32, f64>, TraceError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.chars().next().is_some_and(char::is_alphabetic)) {
            continue;
        }
        let malformed = |reason: String| TraceError::Malformed { line: i + 1, reason };
        let (k, p) = line.split_once(',').ok_or_else(|| malformed("expected `migrations,weight`".into()))?;
        let k: u32 = k.trim().parse().map_err(|e| malformed(format!("bad migration count: {e}")))?;
        let p: f64 = p.trim().parse().map_err(|e| malformed(format!("bad weight: {e}")))?;
        if p.is_nan() || p < 0.0 {
            return Err(malformed(format!("negative weight {p}")));
        }
        *out.entry(k).or_insert(0.0) += p;
    }
    Ok(out)
}
