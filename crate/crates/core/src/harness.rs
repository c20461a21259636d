//! Seeded replications, the density-by-m sweep and the quick invariant suite.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{AttackMode, ConfigError, Framework, SimConfig};
use crate::metrics::{self, Aggregate, RunMetrics};
use crate::output::{self, EmitOptions, OutputError};
use crate::protocol::{trace_to_jsonl, validate_session_trace};
use crate::sim::{self, SimError, SimOptions, CONSERVATION_TOLERANCE};
use crate::types::{Mode, VehicleId};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("seed {seed}: {source}")]
    Run {
        seed: u64,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Output(#[from] OutputError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replications {
    pub runs: Vec<RunMetrics>,
    pub aggregate: Aggregate,
}

/// Runs seeds `config.seed .. config.seed + n` in parallel; results are in
/// seed order.
pub fn run_replications(config: &SimConfig, n: u32) -> Result<Replications, HarnessError> {
    assert!(n >= 1, "at least one replication");
    config.validate()?;
    let runs: Vec<RunMetrics> = (0..u64::from(n))
        .into_par_iter()
        .map(|i| {
            let seed = config.seed + i;
            sim::run_simulation(config, seed).map_err(|source| HarnessError::Run { seed, source })
        })
        .collect::<Result<_, _>>()?;
    let aggregate = Aggregate::from_runs(&runs);
    Ok(Replications { runs, aggregate })
}

/// Runs `config.replications` seeds and writes every output file into
/// `out_dir`. With `trace`, the first seed is rerun with message tracing.
pub fn run_and_emit(
    config: &SimConfig,
    out_dir: &Path,
    emit: EmitOptions,
    trace: bool,
) -> Result<Replications, HarnessError> {
    let reps = run_replications(config, config.replications)?;
    output::emit_csv(config, &reps.runs, &reps.aggregate, out_dir, emit)?;
    if trace && config.framework == Framework::Vcash {
        let out = sim::simulate(config, config.seed, SimOptions { trace: true })
            .map_err(|source| HarnessError::Run { seed: config.seed, source })?;
        let messages = out.trace.expect("tracing enabled");
        output::write_text(&out_dir.join(output::TRACE_FILE), &trace_to_jsonl(&messages))?;
    }
    Ok(reps)
}

pub const SWEEP_DENSITIES: [f64; 3] = [10.0, 20.0, 30.0];
pub const SWEEP_M: [usize; 3] = [2, 3, 4];
pub const SWEEP_VIME_ERRS: [f64; 2] = [0.1, 0.01];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub density: f64,
    pub m_terminate: usize,
    pub framework: Framework,
    pub vime_err: Option<f64>,
    pub dir: PathBuf,
    pub peak_ratio: f64,
    pub tail_ratio: f64,
}

/// One variant label per framework curve of a grid cell.
pub fn sweep_variants(base: &SimConfig) -> Vec<(String, SimConfig)> {
    let mut out = vec![("vcash".to_string(), SimConfig { framework: Framework::Vcash, ..base.clone() })];
    for err in SWEEP_VIME_ERRS {
        out.push((
            format!("vime_err{err}"),
            SimConfig { framework: Framework::Vime, vime_err: err, ..base.clone() },
        ));
    }
    out
}

/// Runs the density-by-m grid, each cell with the Vcash curve and the two
/// reputation-baseline curves, into `out_dir/p{density}_m{m}/{variant}`.
pub fn run_sweep(base: &SimConfig, out_dir: &Path, emit: EmitOptions) -> Result<Vec<SweepCell>, HarnessError> {
    let mut cells = Vec::new();
    for density in SWEEP_DENSITIES {
        for m in SWEEP_M {
            let cell = SimConfig { density_per_km: density, m_terminate: m, ..base.clone() };
            for (label, cfg) in sweep_variants(&cell) {
                let dir = out_dir.join(format!("p{density}_m{m}")).join(&label);
                let reps = run_and_emit(&cfg, &dir, emit, false)?;
                let (_, peak_ratio) = metrics::peak(&reps.aggregate.mean_ratio);
                cells.push(SweepCell {
                    density,
                    m_terminate: m,
                    framework: cfg.framework,
                    vime_err: (cfg.framework == Framework::Vime).then_some(cfg.vime_err),
                    dir,
                    peak_ratio,
                    tail_ratio: output::tail_ratio(&reps.aggregate.mean_ratio),
                });
            }
        }
    }
    write_sweep_index(&out_dir.join("sweep_index.csv"), out_dir, &cells)?;
    Ok(cells)
}

fn write_sweep_index(path: &Path, root: &Path, cells: &[SweepCell]) -> Result<(), OutputError> {
    let mut body = String::from("density_per_km,m_terminate,framework,vime_err,dir,peak_mean_ratio,tail_mean_ratio\n");
    for c in cells {
        let fw = match c.framework {
            Framework::Vcash => "vcash",
            Framework::Vime => "vime",
        };
        let rel = c.dir.strip_prefix(root).unwrap_or(&c.dir);
        body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            output::fmt_g9(c.density),
            c.m_terminate,
            fw,
            c.vime_err.map(output::fmt_g9).unwrap_or_default(),
            rel.display(),
            output::fmt_g9(c.peak_ratio),
            output::fmt_g9(c.tail_ratio)
        ));
    }
    output::write_text(path, &body)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult { name: name.into(), passed, detail: detail.into() }
}

fn tiny(base: &SimConfig) -> SimConfig {
    SimConfig {
        road_length_m: 2000.0,
        density_per_km: 10.0,
        sim_seconds: 300,
        replications: 2,
        ..base.clone()
    }
}

/// Selfish vehicles: balance never rises, and no notification arrives once
/// the balance has dropped under the rate in force.
pub fn selfish_violations(run: &RunMetrics) -> Vec<String> {
    let mut out = Vec::new();
    for (i, mode) in run.modes.iter().enumerate() {
        if *mode != Mode::Selfish {
            continue;
        }
        let mut starved = false;
        let mut prev = f64::INFINITY;
        for t in 0..run.len() {
            let b = run.balances[t][i];
            if b > prev {
                out.push(format!("vehicle {i} balance rose at t={t}"));
            }
            if starved && run.notifications[t][i] > 0 {
                out.push(format!("vehicle {i} notified at t={t} after starving"));
            }
            if b < run.rates[t] {
                starved = true;
            }
            prev = b;
        }
    }
    out
}

/// Invariant suite on small scenarios, used by the `check` subcommand.
pub fn run_checks(base: &SimConfig) -> Vec<CheckResult> {
    let mut results = Vec::new();
    for (label, cfg) in [
        ("bogus", SimConfig { attack_mode: AttackMode::Bogus, ..tiny(base) }),
        ("selfish", SimConfig { attack_mode: AttackMode::Selfish, c0: 0.5, ..tiny(base) }),
        ("mixed", SimConfig { attack_mode: AttackMode::Mixed, malicious_fraction: 0.2, ..tiny(base) }),
        ("vime", SimConfig { framework: Framework::Vime, ..tiny(base) }),
    ] {
        let a = run_replications(&cfg, cfg.replications);
        let b = run_replications(&cfg, cfg.replications);
        let (a, b) = match (a, b) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                results.push(check(&format!("{label}: runs complete"), false, e.to_string()));
                continue;
            }
        };
        results.push(check(&format!("{label}: runs complete"), true, ""));
        results.push(check(&format!("{label}: deterministic"), a == b, ""));
        let worst = a.runs.iter().map(|r| r.max_conservation_error).fold(0.0, f64::max);
        results.push(check(
            &format!("{label}: cash conserved"),
            worst <= CONSERVATION_TOLERANCE,
            format!("max relative error {worst:e}"),
        ));
        let ratios_ok = a.runs.iter().all(|r| {
            r.len() == cfg.sim_seconds as usize && r.ratio.iter().all(|x| (0.0..=1.0).contains(x))
        });
        results.push(check(&format!("{label}: ratio series well formed"), ratios_ok, ""));
        let in_bounds = (0..a.aggregate.mean_ratio.len()).all(|t| {
            let lo = a.runs.iter().map(|r| r.ratio[t]).fold(f64::INFINITY, f64::min);
            let hi = a.runs.iter().map(|r| r.ratio[t]).fold(f64::NEG_INFINITY, f64::max);
            let m = a.aggregate.mean_ratio[t];
            m >= lo - 1e-12 && m <= hi + 1e-12
        });
        results.push(check(&format!("{label}: mean within run range"), in_bounds, ""));
        if cfg.framework == Framework::Vcash && cfg.attack_mode != AttackMode::Bogus {
            let v: Vec<String> = a.runs.iter().flat_map(selfish_violations).collect();
            results.push(check(&format!("{label}: selfish starvation"), v.is_empty(), v.join("; ")));
        }
    }
    let cfg = tiny(base);
    match sim::simulate(&cfg, cfg.seed, SimOptions { trace: true }) {
        Ok(out) => {
            let trace = out.trace.unwrap_or_default();
            let bad: Vec<String> = (0..out.metrics.modes.len() as u32)
                .filter_map(|i| validate_session_trace(&trace, VehicleId(i)).err())
                .map(|e| e.to_string())
                .collect();
            results.push(check("trace: sessions follow the choreography", bad.is_empty(), bad.join("; ")));
        }
        Err(e) => results.push(check("trace: sessions follow the choreography", false, e.to_string())),
    }
    results
}
