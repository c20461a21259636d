//! Per-run time series, per-run summaries and cross-run aggregation.

use std::collections::BTreeMap;

use crate::types::{Mode, Tick, Vcash};

/// Ratio at or below which a run counts as converged.
pub const CONVERGENCE_LEVEL: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub modes: Vec<Mode>,
    /// Bogus share of the verified listings (or accepted entries), per tick.
    pub ratio: Vec<f64>,
    pub active_events: Vec<usize>,
    pub verified_listings: Vec<usize>,
    /// `balances[t][vehicle]`.
    pub balances: Vec<Vec<Vcash>>,
    /// `notifications[t][vehicle]` delivered in tick `t`.
    pub notifications: Vec<Vec<u32>>,
    /// Notification rate in force at each tick.
    pub rates: Vec<Vcash>,
    pub max_conservation_error: f64,
}

impl RunMetrics {
    pub fn len(&self) -> usize {
        self.ratio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratio.is_empty()
    }

    pub fn summary(&self) -> RunSummary {
        let (peak_time, peak_ratio) = peak(&self.ratio);
        let convergence_time = convergence_time(&self.ratio, peak_time);
        let mut final_mean_balance = BTreeMap::new();
        if let Some(last) = self.balances.last() {
            for mode in [Mode::Normal, Mode::Bogus, Mode::Selfish] {
                let vals: Vec<f64> = self
                    .modes
                    .iter()
                    .zip(last)
                    .filter(|(m, _)| **m == mode)
                    .map(|(_, b)| *b)
                    .collect();
                if !vals.is_empty() {
                    final_mean_balance.insert(mode, mean(&vals));
                }
            }
        }
        RunSummary {
            seed: self.seed,
            peak_ratio,
            peak_time,
            convergence_time,
            final_mean_balance,
            max_conservation_error: self.max_conservation_error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub peak_ratio: f64,
    pub peak_time: Tick,
    /// First tick from which the ratio stays at or below [`CONVERGENCE_LEVEL`].
    pub convergence_time: Option<Tick>,
    pub final_mean_balance: BTreeMap<Mode, Vcash>,
    pub max_conservation_error: f64,
}

/// Earliest maximum of a series.
pub fn peak(series: &[f64]) -> (Tick, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (t, &x) in series.iter().enumerate() {
        if x > best.1 {
            best = (t as Tick, x);
        }
    }
    if series.is_empty() {
        (0, 0.0)
    } else {
        best
    }
}

pub fn convergence_time(series: &[f64], from: Tick) -> Option<Tick> {
    let mut t = series.len();
    while t > from as usize && series[t - 1] <= CONVERGENCE_LEVEL {
        t -= 1;
    }
    (t < series.len()).then_some(t as Tick)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Mean of `series` over ticks `lo..=hi` (clamped to the series).
pub fn window_mean(series: &[f64], lo: usize, hi: usize) -> f64 {
    if series.is_empty() || lo >= series.len() {
        return 0.0;
    }
    let hi = hi.min(series.len() - 1);
    mean(&series[lo..=hi])
}

/// Averages over runs that share the vehicle layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub modes: Vec<Mode>,
    pub mean_ratio: Vec<f64>,
    pub sd_ratio: Vec<f64>,
    /// `mean_balance[t][vehicle]`.
    pub mean_balance: Vec<Vec<Vcash>>,
    pub runs: Vec<RunSummary>,
}

impl Aggregate {
    pub fn from_runs(runs: &[RunMetrics]) -> Self {
        assert!(!runs.is_empty(), "aggregate needs at least one run");
        let ticks = runs[0].len();
        let vehicles = runs[0].modes.len();
        assert!(
            runs.iter().all(|r| r.len() == ticks && r.modes == runs[0].modes),
            "runs differ in length or layout"
        );
        let n = runs.len() as f64;
        let mut mean_ratio = Vec::with_capacity(ticks);
        let mut sd_ratio = Vec::with_capacity(ticks);
        let mut mean_balance = Vec::with_capacity(ticks);
        let mut column = Vec::with_capacity(runs.len());
        for t in 0..ticks {
            column.clear();
            column.extend(runs.iter().map(|r| r.ratio[t]));
            mean_ratio.push(mean(&column));
            sd_ratio.push(sample_sd(&column));
            let row: Vec<Vcash> = (0..vehicles)
                .map(|v| runs.iter().map(|r| r.balances[t][v]).sum::<f64>() / n)
                .collect();
            mean_balance.push(row);
        }
        Self {
            modes: runs[0].modes.clone(),
            mean_ratio,
            sd_ratio,
            mean_balance,
            runs: runs.iter().map(RunMetrics::summary).collect(),
        }
    }

    /// Mean balance of one vehicle class at each tick.
    pub fn mode_balance(&self, mode: Mode) -> Option<Vec<Vcash>> {
        let idx: Vec<usize> = (0..self.modes.len()).filter(|&i| self.modes[i] == mode).collect();
        if idx.is_empty() {
            return None;
        }
        Some(
            self.mean_balance
                .iter()
                .map(|row| idx.iter().map(|&i| row[i]).sum::<f64>() / idx.len() as f64)
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seed: u64, ratio: Vec<f64>) -> RunMetrics {
        let ticks = ratio.len();
        RunMetrics {
            seed,
            modes: vec![Mode::Bogus, Mode::Normal],
            active_events: vec![0; ticks],
            verified_listings: vec![0; ticks],
            balances: (0..ticks).map(|t| vec![100.0 - t as f64, 100.0 + seed as f64]).collect(),
            notifications: vec![vec![0, 0]; ticks],
            rates: vec![1e-4; ticks],
            max_conservation_error: 0.0,
            ratio,
        }
    }

    #[test]
    fn single_run_aggregate_is_identity() {
        let r = run(0, vec![0.0, 0.5, 0.25]);
        let a = Aggregate::from_runs(std::slice::from_ref(&r));
        assert_eq!(a.mean_ratio, r.ratio);
        assert_eq!(a.sd_ratio, vec![0.0; 3]);
        assert_eq!(a.mean_balance, r.balances);
    }

    #[test]
    fn mean_and_sample_sd() {
        let a = Aggregate::from_runs(&[run(0, vec![0.0, 0.2]), run(1, vec![1.0, 0.4])]);
        assert_eq!(a.mean_ratio, vec![0.5, 0.30000000000000004]);
        assert!((a.sd_ratio[0] - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.mode_balance(Mode::Normal).unwrap(), vec![100.5, 100.5]);
        assert!(a.mode_balance(Mode::Selfish).is_none());
    }

    #[test]
    fn summary_fields() {
        let s = run(0, vec![0.0, 0.4, 0.4, 0.1, 0.01, 0.0]).summary();
        assert_eq!(s.peak_time, 1);
        assert_eq!(s.peak_ratio, 0.4);
        assert_eq!(s.convergence_time, Some(4));
        assert_eq!(s.final_mean_balance[&Mode::Bogus], 95.0);
        assert_eq!(run(0, vec![0.0, 0.5]).summary().convergence_time, None);
        assert_eq!(run(0, vec![0.0, 0.0]).summary().convergence_time, Some(0));
    }

    #[test]
    fn window_mean_clamps() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(window_mean(&s, 1, 2), 2.5);
        assert_eq!(window_mean(&s, 2, 100), 3.5);
        assert_eq!(window_mean(&s, 10, 100), 0.0);
    }
}
