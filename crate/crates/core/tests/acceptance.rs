//! Acceptance checks. Each test prints one `PASS`/`FAIL` line and then
//! asserts, so `cargo test --test acceptance -- --nocapture` gives a summary.

use std::collections::BTreeMap;

use rcsim::config::{RunConfig, Variant};
use rcsim::engine::{Engine, NandOpRequest, Notification, PhaseKind};
use rcsim::geometry::{Geometry, PhysAddr, TimingParams};
use rcsim::metrics::{self, migration_histogram_analysis, run_requests, write_outputs};
use rcsim::reliability::{CtTable, ErrorModel};

fn verdict(name: &str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn config(toml: &str) -> RunConfig {
    let cfg = RunConfig::from_toml(toml).expect("valid config");
    cfg.validate().expect("config validates");
    cfg
}

#[test]
fn reliability_safety_under_stress() {
    let cfg = config(
        r#"
        variant = "rcftl4"
        [geometry]
        channels = 2
        chips_per_channel = 4
        blocks_per_plane = 128
        [ftl]
        logical_ratio = 0.9
        initial_pe_min = 0
        initial_pe_max = 3600
        [output]
        decision_log = false
        snapshot_interval_us = 0
        [workload]
        requests = 1500000
        profile_name = "saturate"
        mix = "write-only"
        "#,
    );
    let outcome = metrics::run(&cfg);
    let (pass, detail) = match &outcome {
        Ok(art) => {
            let r = &art.report;
            let pass = r.migrations.total >= 10_000_000 && r.shadow.violations == 0 && r.shadow.copybacks_checked > 0;
            (
                pass,
                format!(
                    "migrations={} copybacks_checked={} violations={} max_hops={} data_loss=0 pe={}..{}",
                    r.migrations.total, r.shadow.copybacks_checked, r.shadow.violations, r.shadow.max_hops, r.pe_min, r.pe_max
                ),
            )
        }
        Err(e) => (false, format!("run aborted: {e}")),
    };
    verdict("reliability-safety", pass, detail);
    let r = outcome.unwrap().report;
    assert!(r.migrations.total >= 10_000_000);
    assert_eq!(r.shadow.violations, 0);
    assert!(r.pe_max > 3000, "aged blocks must reach the last bucket");
}

/// Applies copybacks to a fresh page until it is unreadable and returns the
/// last hop count that was still readable.
fn brute_force_safe_hops(m: &ErrorModel, pe: u32, months: f64) -> u32 {
    let mut s = m.fresh(pe, months);
    let mut hops = 0;
    loop {
        let next = m.apply_copyback(s, pe);
        if !m.is_readable(next) {
            return hops;
        }
        s = next;
        hops += 1;
        assert!(hops < 64);
    }
}

#[test]
fn threshold_table_derivation() {
    let model = ErrorModel::default();
    let derived = model.derive_ct(12.0);
    let got: Vec<(u32, u32, u32)> = derived.buckets.iter().map(|b| (b.pe_lo, b.pe_hi, b.threshold)).collect();
    let table_ok = got.iter().map(|&(_, hi, t)| (hi, t)).collect::<Vec<_>>() == vec![(1000, 4), (2000, 3), (3000, 2)];
    let matches_default = derived.buckets == CtTable::default().buckets;
    let boundaries = [1, 1000, 1001, 2000, 2001, 3000];
    let brute: Vec<u32> = boundaries.iter().map(|&pe| brute_force_safe_hops(&model, pe, 12.0)).collect();
    let brute_ok = brute == vec![4, 4, 3, 3, 2, 2];
    let lookups_ok = boundaries.iter().zip(&brute).all(|(&pe, &b)| derived.lookup(pe) == b);
    let pass = table_ok && matches_default && brute_ok && lookups_ok;
    verdict("threshold-table", pass, format!("derived={got:?} brute_force_at_boundaries={brute:?}"));
    assert!(pass);
}

fn completion_times(e: &mut Engine) -> Vec<u64> {
    e.take_notifications()
        .into_iter()
        .filter_map(|n| match n {
            Notification::Completed(t) => Some(t.completion_time),
            _ => None,
        })
        .collect()
}

#[test]
fn timing_timelines() {
    let fresh = || {
        let mut e = Engine::new(Geometry::default(), TimingParams::default(), 1);
        e.enable_log();
        e
    };
    let a = PhysAddr::new(0, 0, 0, 1, 0);
    let b = PhysAddr::new(0, 1, 0, 1, 0);

    let mut e = fresh();
    e.submit(NandOpRequest::offchip_copy(a, PhysAddr { block: 2, ..a })).unwrap();
    e.run_until(u64::MAX);
    let offchip = completion_times(&mut e);

    let mut e = fresh();
    e.submit(NandOpRequest::copyback(a, PhysAddr { block: 2, ..a })).unwrap();
    e.run_until(u64::MAX);
    let copyback = completion_times(&mut e);

    let mut e = fresh();
    e.submit(NandOpRequest::offchip_copy(a, PhysAddr { block: 2, ..a })).unwrap();
    e.submit(NandOpRequest::offchip_copy(b, PhysAddr { block: 2, ..b })).unwrap();
    e.run_until(u64::MAX);
    let mut pair = completion_times(&mut e);
    pair.sort_unstable();
    let log_end = e.log().iter().filter(|r| r.kind == PhaseKind::ProgramPhase).map(|r| r.end).max();

    let mut e = fresh();
    for chip in 0..8 {
        let src = PhysAddr::new(0, chip, 0, 1, 0);
        e.submit(NandOpRequest::copyback(src, PhysAddr { block: 2, ..src })).unwrap();
    }
    let stats = e.run_until(u64::MAX);
    let parallel = completion_times(&mut e);
    let t = TimingParams::default();
    let parallel_ok = parallel.len() == 8
        && parallel.iter().all(|&c| c == t.t_read + t.t_prog)
        && stats.channel_busy.iter().all(|&b| b == 0);

    let pass = offchip == vec![780] && copyback == vec![700] && pair == vec![820, 860] && log_end == Some(860) && parallel_ok;
    verdict(
        "timing",
        pass,
        format!(
            "offchip={offchip:?} copyback={copyback:?} same_channel_pair={pair:?} parallel_copybacks={parallel:?} channel0_busy={}",
            stats.channel_busy[0]
        ),
    );
    assert!(pass);
}

#[test]
fn greedy_copyback_fraction() {
    let cfg = config(
        r#"
        variant = "rcftl2-greedy"
        [geometry]
        channels = 1
        chips_per_channel = 8
        blocks_per_plane = 128
        pages_per_block = 64
        [ftl]
        logical_ratio = 0.93
        [output]
        warmup_fraction = 0.5
        decision_log = false
        [workload]
        requests = 262144
        profile_name = "saturate"
        mix = "write-only"
        "#,
    );
    let art = metrics::run(&cfg).unwrap();
    let steady = &art.report.steady.migrations;
    let f = steady.copyback_fraction;
    let pass = (f - 2.0 / 3.0).abs() <= 0.05;
    verdict(
        "greedy-copyback-fraction",
        pass,
        format!(
            "steady copyback fraction {f:.4} (target 0.6667 +/- 0.05), {} migrations, offchip DMA share {:.4}",
            steady.total,
            1.0 - f
        ),
    );
    assert!(pass);
}

#[test]
fn throughput_ordering() {
    let cfg = config(
        r#"
        [geometry]
        blocks_per_plane = 256
        pages_per_block = 32
        [output]
        decision_log = false
        snapshot_interval_us = 0
        [workload]
        requests = 1500000
        profile_name = "saturate"
        mix = "ntrx"
        queue_depth = 0
        "#,
    );
    let variants: Vec<Variant> = ["baseline", "rcftl2", "rcftl3", "rcftl4"].iter().map(|v| v.parse().unwrap()).collect();
    let (reqs, label) = metrics::build_workload(&cfg).unwrap();
    let (table, _) = metrics::sweep(&cfg, &variants, &reqs, &label).unwrap();
    let n = |v: &str| table.row(v).unwrap().normalized_throughput;
    let (b, r2, r3, r4) = (n("baseline"), n("rcftl2"), n("rcftl3"), n("rcftl4"));
    let pass = b == 1.0 && b < r2 && r2 < r3 && r3 <= r4 && r2 >= 1.10;
    verdict(
        "throughput-ordering",
        pass,
        format!("normalized baseline={b:.3} rcftl2={r2:.3} rcftl3={r3:.3} rcftl4={r4:.3}"),
    );
    assert!(pass);
}

#[test]
fn dmms_low_profile() {
    let cfg = config(
        r#"
        [geometry]
        blocks_per_plane = 128
        [output]
        decision_log = false
        [workload]
        requests = 200000
        profile_name = "low"
        mix = "ntrx"
        "#,
    );
    let variants: Vec<Variant> = ["rcftl2-greedy", "rcftl2"].iter().map(|v| v.parse().unwrap()).collect();
    let (reqs, label) = metrics::build_workload(&cfg).unwrap();
    let (_, arts) = metrics::sweep(&cfg, &variants, &reqs, &label).unwrap();
    let (greedy, dmms) = (&arts[0].report, &arts[1].report);
    let delta = dmms.throughput_mb_s / greedy.throughput_mb_s - 1.0;
    let blocks_ok = dmms.idle_periods > 0
        && greedy.idle_periods > 0
        && dmms.mean_counter0_blocks_at_idle_end > greedy.mean_counter0_blocks_at_idle_end;
    let throughput_ok = delta > 0.0;
    verdict(
        "dmms-low-profile",
        blocks_ok && throughput_ok,
        format!(
            "throughput greedy={:.3} dmms={:.3} delta={:+.3}% ({}); counter-0 blocks at idle end greedy={:.1} dmms={:.1} ({})",
            greedy.throughput_mb_s,
            dmms.throughput_mb_s,
            delta * 100.0,
            if throughput_ok { "ok" } else { "not positive" },
            greedy.mean_counter0_blocks_at_idle_end,
            dmms.mean_counter0_blocks_at_idle_end,
            if blocks_ok { "ok" } else { "not greater" },
        ),
    );
    assert!(blocks_ok, "DMMS must leave more counter-0 blocks after idle periods");
    assert!(throughput_ok, "DMMS throughput delta {delta:+.5} is not positive");
}

/// Walks every page through its migrations with a copyback counter that
/// resets on each forced off-chip copy.
fn brute_force_avoided(histogram: &BTreeMap<u32, f64>, n: u32) -> f64 {
    let (mut forced, mut total) = (0.0, 0.0);
    for (&k, &w) in histogram {
        let mut counter = 0;
        for _ in 0..k {
            if counter == n {
                forced += w;
                counter = 0;
            } else {
                counter += 1;
            }
            total += w;
        }
    }
    1.0 - forced / total
}

#[test]
fn histogram_analytics() {
    let single = |k: u32| BTreeMap::from([(k, 1.0)]);
    let exact = migration_histogram_analysis(&single(1), 4) == Some(1.0)
        && migration_histogram_analysis(&single(5), 4).is_some_and(|f| (f - 0.8).abs() < 1e-12)
        && migration_histogram_analysis(&single(2), 2) == Some(1.0);

    // 77% of page mass migrates one to four times; the rest spreads over 5..=29.
    let mut hist = BTreeMap::from([(1, 0.30), (2, 0.22), (3, 0.15), (4, 0.10)]);
    for k in 5..30 {
        hist.insert(k, 0.23 / 25.0);
    }
    let below5: f64 = hist.range(..5).map(|(_, w)| w).sum();
    let avoided = migration_histogram_analysis(&hist, 4).unwrap();
    let oracle = brute_force_avoided(&hist, 4);
    let oracles_agree = (1..=7).all(|n| {
        (migration_histogram_analysis(&hist, n).unwrap() - brute_force_avoided(&hist, n)).abs() < 1e-12
    });
    let pass = exact && (below5 - 0.77).abs() < 1e-12 && (avoided - 0.86).abs() <= 0.03 && oracles_agree;
    verdict(
        "histogram-analytics",
        pass,
        format!("examples exact={exact}; reconstructed histogram below-5 mass {below5:.2}, avoided n=4 {avoided:.4} (oracle {oracle:.4}, target 0.86 +/- 0.03)"),
    );
    assert!(pass);
}

fn small_config(variant: &str, extra: &str) -> RunConfig {
    config(&format!(
        r#"
        variant = "{variant}"
        [geometry]
        channels = 2
        chips_per_channel = 2
        blocks_per_plane = 128
        pages_per_block = 32
        [audit]
        mapping_check_interval = 32
        [output]
        decision_log = true
        {extra}
        "#
    ))
}

#[test]
fn end_to_end_integrity() {
    let workloads: [(&str, &str); 6] = [
        ("oltp-high", "[workload]\nrequests = 20000\nprofile_name = \"high\"\nmix = \"oltp\"\n"),
        ("ntrx-mid", "[workload]\nrequests = 20000\nprofile_name = \"mid\"\nmix = \"ntrx\"\n"),
        ("fileserver-low", "[workload]\nrequests = 20000\nprofile_name = \"low\"\nmix = \"fileserver\"\n"),
        ("varmail-saturate", "[workload]\nrequests = 20000\nprofile_name = \"saturate\"\nmix = \"varmail\"\n"),
        ("oltp-skewed", "[workload]\nrequests = 20000\nprofile_name = \"high\"\nmix = \"oltp\"\nqueue_depth = 0\n[workload.profile]\nskew = 1.0\nrequest_bytes = 40960\n"),
        ("append-random", "[workload]\nkind = \"append_random\"\nrequests = 20000\noverwrite_ratio = 0.6\n"),
    ];
    let mut failures = Vec::new();
    let mut runs = 0;
    let mut reads = 0;
    for (name, body) in workloads {
        for variant in ["baseline", "rcftl2", "rcftl4"] {
            let cfg = small_config(variant, body);
            match metrics::run(&cfg) {
                Ok(art) => {
                    runs += 1;
                    reads += art.result.counters.nand_reads;
                    if art.result.mapping_checks == 0 || art.report.shadow.violations != 0 {
                        failures.push(format!("{name}/{variant}: mapping checks {}", art.result.mapping_checks));
                    }
                }
                Err(e) => failures.push(format!("{name}/{variant}: {e}")),
            }
        }
    }
    let pass = failures.is_empty() && runs == 18 && reads > 0;
    verdict(
        "integrity",
        pass,
        format!("{runs} runs over 6 workloads x 3 variants, {reads} flash reads verified, failures: {failures:?}"),
    );
    assert!(pass);
}

#[test]
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        "rcftl3",
        "event_log = true\n[workload]\nrequests = 8000\nprofile_name = \"mid\"\nmix = \"oltp\"\n",
    );
    let mut files = Vec::new();
    for i in 0..2 {
        let art = metrics::run(&cfg).unwrap();
        let out = dir.path().join(format!("run{i}"));
        let written = write_outputs(&art, &cfg, &out).unwrap();
        let mut contents: Vec<(String, Vec<u8>)> = written
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
            .collect();
        contents.sort();
        files.push(contents);
    }
    let identical = files[0] == files[1];
    let has_events = files[0].iter().any(|(n, body)| n == "events.csv" && body.len() > 100);

    // Parallel sweeps must match independent sequential runs.
    let (reqs, label) = metrics::build_workload(&cfg).unwrap();
    let variants: Vec<Variant> = ["baseline", "rcftl3"].iter().map(|v| v.parse().unwrap()).collect();
    let (_, arts) = metrics::sweep(&cfg, &variants, &reqs, &label).unwrap();
    let sweep_ok = variants.iter().zip(&arts).all(|(&v, a)| {
        let solo = run_requests(&RunConfig { variant: v, ..cfg.clone() }, &reqs, &label).unwrap();
        let mut swept = a.report.clone();
        swept.normalized_throughput = None;
        swept.to_json() == solo.report.to_json() && a.result.event_log == solo.result.event_log
    });
    let pass = identical && has_events && sweep_ok;
    verdict(
        "determinism",
        pass,
        format!("{} output files byte-identical={identical}, event log present={has_events}, sweep matches solo runs={sweep_ok}", files[0].len()),
    );
    assert!(pass);
}
