use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vcash_core::config::{AttackMode, Framework, SimConfig};
use vcash_core::harness::{self, run_and_emit, run_checks, run_sweep};
use vcash_core::metrics;
use vcash_core::output::{self, EmitOptions};
use vcash_core::Mode;

#[derive(Parser)]
#[command(name = "vcash", version, about = "Event-trading reputation market simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over its replications.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write the message trace of the first seed to trace.jsonl.
        #[arg(long)]
        trace: bool,
        /// Keep each run's cash series under runs/seed_<s>/.
        #[arg(long)]
        archive_cash: bool,
    },
    /// Run the density-by-m grid with the baseline curves.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        archive_cash: bool,
    },
    /// Run the invariant suite on small scenarios.
    Check {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// First seed; replications use seed, seed+1, ...
    #[arg(long)]
    seed: u64,
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    road_length_m: Option<f64>,
    #[arg(long)]
    density_per_km: Option<f64>,
    #[arg(long)]
    sim_seconds: Option<u32>,
    #[arg(long)]
    replications: Option<u32>,
    #[arg(long)]
    initial_vcash: Option<f64>,
    #[arg(long)]
    c0: Option<f64>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    min_investment: Option<f64>,
    #[arg(long)]
    k_verify: Option<usize>,
    #[arg(long)]
    m_terminate: Option<usize>,
    #[arg(long)]
    sensing_range_m: Option<f64>,
    #[arg(long)]
    location_tolerance_m: Option<f64>,
    #[arg(long)]
    malicious_fraction: Option<f64>,
    /// bogus, selfish or mixed.
    #[arg(long)]
    attack_mode: Option<AttackMode>,
    /// vcash or vime.
    #[arg(long)]
    framework: Option<Framework>,
    #[arg(long)]
    vime_err: Option<f64>,
    #[arg(long)]
    bogus_period_s: Option<u32>,
    #[arg(long)]
    false_map_size: Option<usize>,
    #[arg(long)]
    vime_range_m: Option<f64>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident, $($f:ident),*) => {
        $(if let Some(v) = $o.$f { $cfg.$f = v; })*
    };
}

impl Common {
    fn config(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                SimConfig::from_toml_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => SimConfig::default(),
        };
        let o = &self.overrides;
        apply!(
            cfg, o, road_length_m, density_per_km, sim_seconds, replications, initial_vcash, c0, ratio,
            min_investment, k_verify, m_terminate, sensing_range_m, location_tolerance_m,
            malicious_fraction, attack_mode, framework, vime_err, bogus_period_s, false_map_size,
            vime_range_m
        );
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report_run(dir: &Path, reps: &harness::Replications) {
    let agg = &reps.aggregate;
    let (peak_t, peak) = metrics::peak(&agg.mean_ratio);
    println!("{}", dir.display());
    println!(
        "  mean ratio: peak {} at t={}, tail[500,1000] {}",
        output::fmt_g9(peak),
        peak_t,
        output::fmt_g9(output::tail_ratio(&agg.mean_ratio))
    );
    for mode in [Mode::Normal, Mode::Bogus, Mode::Selfish] {
        if let Some(series) = agg.mode_balance(mode) {
            let last = series.last().copied().unwrap_or(0.0);
            println!("  final mean balance {mode}: {}", output::fmt_g9(last));
        }
    }
    let worst = agg.runs.iter().map(|r| r.max_conservation_error).fold(0.0, f64::max);
    println!("  max conservation error: {worst:e}");
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { common, trace, archive_cash } => {
            let cfg = common.config()?;
            let reps = run_and_emit(&cfg, &common.out, EmitOptions { archive_cash }, trace)?;
            report_run(&common.out, &reps);
            Ok(true)
        }
        Command::Sweep { common, archive_cash } => {
            let cfg = common.config()?;
            let cells = run_sweep(&cfg, &common.out, EmitOptions { archive_cash })?;
            for c in &cells {
                println!(
                    "{}: peak {} tail {}",
                    c.dir.display(),
                    output::fmt_g9(c.peak_ratio),
                    output::fmt_g9(c.tail_ratio)
                );
            }
            Ok(true)
        }
        Command::Check { common } => {
            let cfg = common.config()?;
            let results = run_checks(&cfg);
            let mut ok = true;
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                if r.detail.is_empty() {
                    println!("{tag} {}", r.name);
                } else {
                    println!("{tag} {} ({})", r.name, r.detail);
                }
                ok &= r.passed;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
