//! CSV and config-echo emission.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::SimConfig;
use crate::metrics::{Aggregate, RunMetrics, RunSummary};
use crate::types::Mode;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub const RATIO_FILE: &str = "ratio_timeseries.csv";
pub const CASH_FILE: &str = "cash_timeseries.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config_echo.toml";
pub const TRACE_FILE: &str = "trace.jsonl";

pub const RATIO_HEADER: [&str; 3] = ["t", "mean_ratio", "sd_ratio"];
pub const CASH_HEADER: [&str; 4] = ["t", "vehicle_id", "mode", "balance"];
pub const SUMMARY_HEADER: [&str; 9] = [
    "seed",
    "peak_ratio",
    "peak_time",
    "convergence_time",
    "final_balance_normal",
    "final_balance_bogus",
    "final_balance_selfish",
    "max_conservation_error",
    "tail_ratio_500_1000",
];

/// Formats like C's `%.9g`.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io { path: path.to_path_buf(), source }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, OutputError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    csv::Writer::from_path(path).map_err(|source| OutputError::Csv { path: path.to_path_buf(), source })
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<(), OutputError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let csv_err = |source| OutputError::Csv { path: path.to_path_buf(), source };
    let mut w = writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_ratio_csv(path: &Path, mean: &[f64], sd: &[f64]) -> Result<(), OutputError> {
    let rows = mean
        .iter()
        .zip(sd)
        .enumerate()
        .map(|(t, (m, s))| vec![t.to_string(), fmt_g9(*m), fmt_g9(*s)]);
    write_rows(path, &RATIO_HEADER, rows)
}

pub fn write_cash_csv(path: &Path, modes: &[Mode], balances: &[Vec<f64>]) -> Result<(), OutputError> {
    let rows = balances.iter().enumerate().flat_map(|(t, row)| {
        row.iter()
            .zip(modes)
            .enumerate()
            .map(move |(v, (b, m))| vec![t.to_string(), v.to_string(), m.as_str().to_string(), fmt_g9(*b)])
    });
    write_rows(path, &CASH_HEADER, rows)
}

fn summary_row(s: &RunSummary, tail: f64) -> Vec<String> {
    let bal = |m: Mode| s.final_mean_balance.get(&m).map(|b| fmt_g9(*b)).unwrap_or_default();
    vec![
        s.seed.to_string(),
        fmt_g9(s.peak_ratio),
        s.peak_time.to_string(),
        s.convergence_time.map(|t| t.to_string()).unwrap_or_default(),
        bal(Mode::Normal),
        bal(Mode::Bogus),
        bal(Mode::Selfish),
        fmt_g9(s.max_conservation_error),
        fmt_g9(tail),
    ]
}

pub fn write_summary_csv(path: &Path, rows: &[(RunSummary, f64)]) -> Result<(), OutputError> {
    write_rows(path, &SUMMARY_HEADER, rows.iter().map(|(s, tail)| summary_row(s, *tail)))
}

pub fn write_config_echo(path: &Path, config: &SimConfig) -> Result<(), OutputError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let p = config.vime_params();
    let body = format!(
        "{}\n[vime_internals]\ndelta = {}\npenalty_factor = {}\ninitial_trust = {}\nblacklist_threshold = {}\n",
        config.to_toml_string(),
        p.delta,
        p.penalty_factor,
        p.initial_trust,
        p.blacklist_threshold
    );
    fs::write(path, body).map_err(io_err(path))
}

pub fn write_text(path: &Path, body: &str) -> Result<(), OutputError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, body).map_err(io_err(path))
}

/// Mean ratio over t in [500, 1000] s.
pub fn tail_ratio(series: &[f64]) -> f64 {
    crate::metrics::window_mean(series, 500, 1000)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmitOptions {
    /// Also write each run's cash series under `runs/`.
    pub archive_cash: bool,
}

/// Writes the averaged files into `out_dir` and one directory per seed
/// under `out_dir/runs`.
pub fn emit_csv(
    config: &SimConfig,
    runs: &[RunMetrics],
    aggregate: &Aggregate,
    out_dir: &Path,
    options: EmitOptions,
) -> Result<(), OutputError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_ratio_csv(&out_dir.join(RATIO_FILE), &aggregate.mean_ratio, &aggregate.sd_ratio)?;
    write_cash_csv(&out_dir.join(CASH_FILE), &aggregate.modes, &aggregate.mean_balance)?;
    let rows: Vec<(RunSummary, f64)> = runs
        .iter()
        .zip(&aggregate.runs)
        .map(|(r, s)| (s.clone(), tail_ratio(&r.ratio)))
        .collect();
    write_summary_csv(&out_dir.join(SUMMARY_FILE), &rows)?;
    write_config_echo(&out_dir.join(CONFIG_FILE), config)?;
    for (run, row) in runs.iter().zip(&rows) {
        let dir = out_dir.join("runs").join(format!("seed_{}", run.seed));
        let zeros = vec![0.0; run.ratio.len()];
        write_ratio_csv(&dir.join(RATIO_FILE), &run.ratio, &zeros)?;
        write_summary_csv(&dir.join(SUMMARY_FILE), std::slice::from_ref(row))?;
        if options.archive_cash {
            write_cash_csv(&dir.join(CASH_FILE), &run.modes, &run.balances)?;
        }
    }
    Ok(())
}
