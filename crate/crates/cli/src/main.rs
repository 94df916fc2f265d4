use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rcsim::config::{RunConfig, Variant, WorkloadKind};
use rcsim::epm::memory_footprint;
use rcsim::metrics::{self, migration_histogram_analysis, parse_histogram};
use rcsim::workload::write_trace;

#[derive(Parser)]
#[command(name = "rcsim", version, about = "SSD simulator with restricted copyback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replay this trace instead of the configured workload.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and write its report.
    Run {
        #[command(flatten)]
        common: Common,
        /// baseline, rcftlN or rcftlN-greedy.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Run several variants on the same workload and compare throughput.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "baseline,rcftl2,rcftl3,rcftl4")]
        variants: Vec<Variant>,
    },
    /// Write the configured synthetic workload as a trace file.
    GenTrace {
        #[command(flatten)]
        common: Common,
    },
    /// Avoidable off-chip migrations for a `migrations,weight` histogram.
    AnalyzeHistogram {
        histogram: PathBuf,
        /// Copyback threshold; all of 1..=7 when omitted.
        #[arg(long)]
        threshold: Option<u32>,
    },
    /// Print the copyback threshold table.
    PrintCtTable {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        retention_months: Option<f64>,
        /// Derive the table from the error model.
        #[arg(long)]
        derive: bool,
        /// Also print per-page versus per-block counter memory.
        #[arg(long)]
        footprint: bool,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(trace) = &common.trace {
        cfg.workload.kind = WorkloadKind::Trace;
        cfg.workload.trace = Some(trace.clone());
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(common: Common, variant: Option<Variant>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(v) = variant {
        cfg.variant = v;
    }
    let art = metrics::run(&cfg)?;
    let files = metrics::write_outputs(&art, &cfg, &cfg.output.dir)
        .with_context(|| format!("writing outputs to {}", cfg.output.dir.display()))?;
    let r = &art.report;
    println!(
        "{}: {} requests, {:.1} MB/s, WAF {:.3}, copyback fraction {:.3}",
        r.variant, r.requests, r.throughput_mb_s, r.waf, r.migrations.copyback_fraction
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn sweep(common: Common, variants: Vec<Variant>) -> Result<()> {
    if variants.len() < 2 {
        bail!("a sweep needs at least two variants");
    }
    let cfg = load_config(&common)?;
    let (reqs, label) = metrics::build_workload(&cfg)?;
    let (table, arts) = metrics::sweep(&cfg, &variants, &reqs, &label)?;
    let dir = &cfg.output.dir;
    for art in &arts {
        let sub = dir.join(&art.report.variant);
        let run_cfg = RunConfig { variant: art.report.variant.parse()?, ..cfg.clone() };
        metrics::write_outputs(art, &run_cfg, &sub).with_context(|| format!("writing {}", sub.display()))?;
    }
    let csv = table.to_csv();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn gen_trace(common: Common) -> Result<()> {
    let cfg = load_config(&common)?;
    if cfg.workload.kind == WorkloadKind::Trace {
        bail!("gen-trace needs a synthetic or append_random workload");
    }
    let (reqs, label) = metrics::build_workload(&cfg)?;
    std::fs::create_dir_all(&cfg.output.dir)?;
    let path = cfg.output.dir.join(format!("{label}.csv"));
    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_trace(std::io::BufWriter::new(file), &reqs)?;
    println!("wrote {} requests to {}", reqs.len(), path.display());
    Ok(())
}

fn analyze_histogram(path: &Path, threshold: Option<u32>) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let hist = parse_histogram(&text)?;
    let total: f64 = hist.values().sum();
    let below5: f64 = hist.range(..5).map(|(_, p)| p).sum();
    if total > 0.0 {
        println!("mass migrating fewer than 5 times: {:.4}", below5 / total);
    }
    println!("threshold,avoided_offchip_fraction");
    let thresholds = threshold.map_or_else(|| (1..=7).collect::<Vec<_>>(), |n| vec![n]);
    for n in thresholds {
        match migration_histogram_analysis(&hist, n) {
            Some(f) => println!("{n},{f:.6}"),
            None => println!("{n},n/a"),
        }
    }
    Ok(())
}

fn print_ct_table(config: Option<PathBuf>, months: Option<f64>, derive: bool, footprint: bool) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = months {
        cfg.reliability.retention_months = m;
    }
    cfg.reliability.derive_table |= derive;
    print!("{}", cfg.reliability.ct_table().to_csv());
    if footprint {
        println!("{}", memory_footprint(&cfg.geometry, 3).describe());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { common, variant } => run(common, variant),
        Command::Sweep { common, variants } => sweep(common, variants),
        Command::GenTrace { common } => gen_trace(common),
        Command::AnalyzeHistogram { histogram, threshold } => analyze_histogram(&histogram, threshold),
        Command::PrintCtTable { config, retention_months, derive, footprint } => {
            print_ct_table(config, retention_months, derive, footprint)
        }
    }
}
