//! Run configuration, loadable from TOML and echoed next to every output.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::TradingPlan;
use crate::types::Mode;
use crate::vime::VimeParams;
use crate::world::{ClientParams, EventSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("cannot parse configuration: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Bogus,
    Selfish,
    /// Half the attackers bogus (rounded up), half selfish.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Vcash,
    Vime,
}

impl FromStr for AttackMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bogus" => Ok(AttackMode::Bogus),
            "selfish" => Ok(AttackMode::Selfish),
            "mixed" => Ok(AttackMode::Mixed),
            other => Err(invalid("attack_mode", format!("unknown mode {other:?}"))),
        }
    }
}

impl FromStr for Framework {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vcash" => Ok(Framework::Vcash),
            "vime" => Ok(Framework::Vime),
            other => Err(invalid("framework", format!("unknown framework {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub road_length_m: f64,
    pub density_per_km: f64,
    pub sim_seconds: u32,
    pub replications: u32,
    pub initial_vcash: f64,
    pub c0: f64,
    pub ratio: f64,
    pub min_investment: f64,
    pub k_verify: usize,
    pub m_terminate: usize,
    pub sensing_range_m: f64,
    pub location_tolerance_m: f64,
    pub malicious_fraction: f64,
    pub attack_mode: AttackMode,
    pub framework: Framework,
    pub vime_err: f64,
    pub seed: u64,
    /// Seconds between two fabricated reports of one bogus vehicle.
    pub bogus_period_s: u32,
    pub false_map_size: usize,
    /// Radius within which a report reaches reputation observers.
    pub vime_range_m: f64,
    pub events: EventSchedule,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            road_length_m: 5000.0,
            density_per_km: 20.0,
            sim_seconds: 1000,
            replications: 50,
            initial_vcash: 100.0,
            c0: 1e-4,
            ratio: 0.1,
            min_investment: 0.01,
            k_verify: 2,
            m_terminate: 2,
            sensing_range_m: 100.0,
            location_tolerance_m: 50.0,
            malicious_fraction: 0.1,
            attack_mode: AttackMode::Bogus,
            framework: Framework::Vcash,
            vime_err: 0.1,
            seed: 0,
            bogus_period_s: 1,
            false_map_size: 10,
            vime_range_m: 250.0,
            events: EventSchedule::default(),
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

fn positive(field: &'static str, x: f64) -> Result<(), ConfigError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("{x} must be positive and finite")))
    }
}

fn non_negative(field: &'static str, x: f64) -> Result<(), ConfigError> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("{x} must be non-negative and finite")))
    }
}

fn probability(field: &'static str, x: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(invalid(field, format!("{x} must lie in [0, 1]")))
    }
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn vehicle_count(&self) -> usize {
        (self.road_length_m / 1000.0 * self.density_per_km).round() as usize
    }

    pub fn malicious_count(&self) -> usize {
        (self.malicious_fraction * self.vehicle_count() as f64).round() as usize
    }

    /// Behaviour of each vehicle by id: attackers take the lowest ids,
    /// bogus before selfish.
    pub fn modes(&self) -> Vec<Mode> {
        let n = self.vehicle_count();
        let bad = self.malicious_count().min(n);
        let bogus = match self.attack_mode {
            AttackMode::Bogus => bad,
            AttackMode::Selfish => 0,
            AttackMode::Mixed => bad.div_ceil(2),
        };
        (0..n)
            .map(|i| {
                if i < bogus {
                    Mode::Bogus
                } else if i < bad {
                    Mode::Selfish
                } else {
                    Mode::Normal
                }
            })
            .collect()
    }

    pub fn trading_plan(&self) -> TradingPlan {
        TradingPlan {
            ratio: self.ratio,
            c0: self.c0,
            min_investment: self.min_investment,
            k_verify: self.k_verify,
            m_terminate: self.m_terminate,
        }
    }

    pub fn client_params(&self) -> ClientParams {
        ClientParams {
            road_length: self.road_length_m,
            sensing_range: self.sensing_range_m,
            location_tolerance: self.location_tolerance_m,
            bogus_period: self.bogus_period_s,
        }
    }

    pub fn vime_params(&self) -> VimeParams {
        VimeParams::with_err(self.vime_err)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("road_length_m", self.road_length_m)?;
        positive("density_per_km", self.density_per_km)?;
        if self.vehicle_count() == 0 {
            return Err(invalid("density_per_km", "road holds no vehicles"));
        }
        if self.sim_seconds == 0 {
            return Err(invalid("sim_seconds", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(invalid("replications", "must be at least 1"));
        }
        non_negative("initial_vcash", self.initial_vcash)?;
        positive("c0", self.c0)?;
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(invalid("ratio", format!("{} must lie in (0, 1)", self.ratio)));
        }
        positive("min_investment", self.min_investment)?;
        if self.k_verify == 0 {
            return Err(invalid("k_verify", "must be at least 1"));
        }
        if self.m_terminate == 0 {
            return Err(invalid("m_terminate", "must be at least 1"));
        }
        positive("sensing_range_m", self.sensing_range_m)?;
        non_negative("location_tolerance_m", self.location_tolerance_m)?;
        if self.location_tolerance_m * 2.0 >= self.road_length_m {
            return Err(invalid("location_tolerance_m", "must be under half the road length"));
        }
        probability("malicious_fraction", self.malicious_fraction)?;
        probability("vime_err", self.vime_err)?;
        if self.bogus_period_s == 0 {
            return Err(invalid("bogus_period_s", "must be at least 1"));
        }
        if self.false_map_size == 0 {
            return Err(invalid("false_map_size", "must be at least 1"));
        }
        let spread = (self.false_map_size + self.events.initial_count) as f64 * self.location_tolerance_m;
        if spread > 0.5 * self.road_length_m {
            return Err(invalid("false_map_size", "too many false events for the road length"));
        }
        positive("vime_range_m", self.vime_range_m)?;
        let ev = &self.events;
        if !(ev.min_duration_s > 0.0 && ev.min_duration_s <= ev.max_duration_s && ev.max_duration_s.is_finite()) {
            return Err(invalid("events", "durations must satisfy 0 < min <= max"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_give_100_vehicles() {
        let c = SimConfig::default();
        c.validate().unwrap();
        assert_eq!(c.vehicle_count(), 100);
        assert_eq!(c.malicious_count(), 10);
    }

    #[test]
    fn modes_follow_attack_mode() {
        let mut c = SimConfig::default();
        let count = |c: &SimConfig, m: Mode| c.modes().iter().filter(|&&x| x == m).count();
        assert_eq!(count(&c, Mode::Bogus), 10);
        assert!(c.modes()[..10].iter().all(|&m| m == Mode::Bogus));
        c.attack_mode = AttackMode::Selfish;
        assert_eq!(count(&c, Mode::Selfish), 10);
        c.attack_mode = AttackMode::Mixed;
        c.malicious_fraction = 0.05;
        assert_eq!(count(&c, Mode::Bogus), 3);
        assert_eq!(count(&c, Mode::Selfish), 2);
        c.malicious_fraction = 0.0;
        assert!(c.modes().iter().all(|&m| m == Mode::Normal));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = SimConfig { density_per_km: 30.0, m_terminate: 4, framework: Framework::Vime, ..SimConfig::default() };
        let back = SimConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let partial = SimConfig::from_toml_str("density_per_km = 10\nattack_mode = \"mixed\"\n").unwrap();
        assert_eq!(partial.density_per_km, 10.0);
        assert_eq!(partial.attack_mode, AttackMode::Mixed);
        assert_eq!(partial.sim_seconds, 1000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(SimConfig::from_toml_str("densty = 3"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn validation_names_the_field() {
        let cases: Vec<(SimConfig, &str)> = vec![
            (SimConfig { density_per_km: 0.0, ..SimConfig::default() }, "density_per_km"),
            (SimConfig { sim_seconds: 0, ..SimConfig::default() }, "sim_seconds"),
            (SimConfig { replications: 0, ..SimConfig::default() }, "replications"),
            (SimConfig { c0: 0.0, ..SimConfig::default() }, "c0"),
            (SimConfig { ratio: 1.5, ..SimConfig::default() }, "ratio"),
            (SimConfig { k_verify: 0, ..SimConfig::default() }, "k_verify"),
            (SimConfig { malicious_fraction: -0.1, ..SimConfig::default() }, "malicious_fraction"),
            (SimConfig { vime_err: 2.0, ..SimConfig::default() }, "vime_err"),
            (SimConfig { initial_vcash: f64::NAN, ..SimConfig::default() }, "initial_vcash"),
        ];
        for (c, field) in cases {
            match c.validate() {
                Err(ConfigError::Invalid { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }
}
