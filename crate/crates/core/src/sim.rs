//! The per-second loop: spawn, move, sense, report, correlate,
//! verify/terminate, deliver, charge, record.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, Framework, SimConfig};
use crate::market::{relative_gap, ListingStatus};
use crate::metrics::RunMetrics;
use crate::protocol::{
    Claim, MarketParams, Message, Notice, ProtocolError, Report, ReportOutcome, ZoningMarket,
};
use crate::types::{ring_distance, EventAttr, ListingId, Mode, Tick, VehicleId};
use crate::vime::{vime_step, Observation, TrustScope, TrustTable};
use crate::world::{
    coincides_with_any, emit_reports, sense_events, spawn_events, spawn_vehicles, EventIds,
    FalseEventMap, KnownEvent, TrafficEvent, VehicleState,
};

/// Largest tolerated relative drift of total cash within a run.
pub const CONSERVATION_TOLERANCE: f64 = 1e-9;

const WORLD_STREAM: u64 = 0;
const CLASSIFIER_STREAM: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("cash not conserved at t={tick}: relative error {error:e}")]
    Conservation { tick: Tick, error: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub metrics: RunMetrics,
    pub trace: Option<Vec<Message>>,
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn run_simulation(config: &SimConfig, seed: u64) -> Result<RunMetrics, SimError> {
    Ok(simulate(config, seed, SimOptions::default())?.metrics)
}

pub fn simulate(config: &SimConfig, seed: u64, options: SimOptions) -> Result<SimOutput, SimError> {
    config.validate()?;
    match config.framework {
        Framework::Vcash => run_vcash(config, seed, options),
        Framework::Vime => run_vime(config, seed).map(|metrics| SimOutput { metrics, trace: None }),
    }
}

/// Vehicles, live events and the shared false map of one run.
struct World {
    rng: ChaCha8Rng,
    vehicles: Vec<VehicleState>,
    events: Vec<TrafficEvent>,
    ids: EventIds,
    false_map: FalseEventMap,
}

impl World {
    fn new(config: &SimConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, WORLD_STREAM);
        let vehicles = spawn_vehicles(&mut rng, &config.modes(), config.road_length_m);
        Self {
            rng,
            vehicles,
            events: Vec::new(),
            ids: EventIds::default(),
            false_map: FalseEventMap::default(),
        }
    }

    /// Spawn, move and sense for tick `now`; returns the live events and
    /// every report emitted, in vehicle id order.
    fn advance(&mut self, config: &SimConfig, now: Tick) -> (Vec<TrafficEvent>, Vec<Report>) {
        let len = config.road_length_m;
        let spawned = spawn_events(now, &mut self.rng, len, &config.events, &mut self.ids);
        self.events.extend(spawned);
        let t = f64::from(now);
        self.events.retain(|e| e.end > t);
        let active: Vec<TrafficEvent> = self.events.iter().filter(|e| e.is_active(t)).cloned().collect();
        if now == 0 {
            self.false_map = FalseEventMap::generate(
                &mut self.rng,
                config.false_map_size,
                len,
                &active,
                config.location_tolerance_m,
            );
        }
        for v in &mut self.vehicles {
            v.advance(1.0, len);
        }
        let params = config.client_params();
        let mut reports = Vec::new();
        for v in &self.vehicles {
            let sensed = sense_events(v, &active, config.sensing_range_m, len);
            reports.extend(emit_reports(v, &sensed, &active, &self.false_map, now, &params));
        }
        (active, reports)
    }
}

fn is_real(active: &[TrafficEvent], location: f64, attr: EventAttr, config: &SimConfig) -> bool {
    coincides_with_any(active, location, attr, config.location_tolerance_m, config.road_length_m)
}

fn run_vcash(config: &SimConfig, seed: u64, options: SimOptions) -> Result<SimOutput, SimError> {
    let mut world = World::new(config, seed);
    let modes = config.modes();
    let n = modes.len();
    let mut market = ZoningMarket::new(
        config.trading_plan(),
        MarketParams {
            road_length: config.road_length_m,
            location_tolerance: config.location_tolerance_m,
            initial_balance: config.initial_vcash,
        },
        options.trace,
    );
    for v in &world.vehicles {
        market.handle_zone_entry(v.id, 0)?;
    }
    let expected_cash = n as f64 * config.initial_vcash;
    let mut bogus: BTreeMap<ListingId, bool> = BTreeMap::new();
    let ticks = config.sim_seconds as usize;
    let mut metrics = empty_metrics(seed, modes, ticks);

    for now in 0..config.sim_seconds {
        let (active, reports) = world.advance(config, now);

        for r in &reports {
            let outcome = market.submit_report(r)?;
            let v = &mut world.vehicles[r.vehicle_id.0 as usize];
            match (r.claim, outcome) {
                (Claim::Exists, ReportOutcome::Staked { listing, created, .. }) => {
                    if created {
                        bogus.insert(listing, !is_real(&active, r.location, r.attr, config));
                    }
                    v.learn(listing, KnownEvent { location: r.location, attr: r.attr, verified: false });
                }
                (Claim::Exists, ReportOutcome::Ignored { listing: Some(listing) }) => {
                    v.learn(listing, KnownEvent { location: r.location, attr: r.attr, verified: false });
                }
                (Claim::Nonexistent, ReportOutcome::Staked { listing, .. })
                | (Claim::Nonexistent, ReportOutcome::Ignored { listing: Some(listing) }) => {
                    v.claimed_absent.insert(listing);
                }
                _ => {}
            }
        }

        market.settle(now, |l| is_real(&active, l.location, l.attr, config))?;

        for note in market.drain_notifications() {
            let v = &mut world.vehicles[note.recipient.0 as usize];
            match note.notice {
                Notice::Announce { listing_id, location, attr } => {
                    v.learn(listing_id, KnownEvent { location, attr, verified: true });
                }
                Notice::Withdraw { listing_id } => v.forget(listing_id),
            }
        }

        let charge = market.charge_tick(now)?;

        let t = now as usize;
        let (mut verified, mut bad) = (0usize, 0usize);
        for l in market.listings().filter(|l| l.status() == ListingStatus::Verified) {
            verified += 1;
            if bogus.get(&l.id).copied().unwrap_or(false) {
                bad += 1;
            }
        }
        metrics.ratio[t] = if verified == 0 { 0.0 } else { bad as f64 / verified as f64 };
        metrics.verified_listings[t] = verified;
        metrics.active_events[t] = active.len();
        metrics.rates[t] = charge.rate;
        for (i, v) in world.vehicles.iter().enumerate() {
            metrics.balances[t][i] = market.balance_of(v.id).expect("every vehicle holds an account");
            metrics.notifications[t][i] = charge.notifications.get(&v.id).copied().unwrap_or(0) as u32;
        }
        let error = relative_gap(market.total_cash(), expected_cash);
        metrics.max_conservation_error = metrics.max_conservation_error.max(error);
        debug_assert!(error <= CONSERVATION_TOLERANCE, "cash drift {error:e} at t={now}");
        if error > CONSERVATION_TOLERANCE {
            return Err(SimError::Conservation { tick: now, error });
        }
    }

    let end = config.sim_seconds;
    for v in &mut world.vehicles {
        market.handle_zone_exit(v.id, end)?;
        v.clear_event_table();
    }
    Ok(SimOutput {
        metrics,
        trace: market.take_trace(),
    })
}

fn empty_metrics(seed: u64, modes: Vec<Mode>, ticks: usize) -> RunMetrics {
    let n = modes.len();
    RunMetrics {
        seed,
        modes,
        ratio: vec![0.0; ticks],
        active_events: vec![0; ticks],
        verified_listings: vec![0; ticks],
        balances: vec![vec![0.0; n]; ticks],
        notifications: vec![vec![0; n]; ticks],
        rates: vec![0.0; ticks],
        max_conservation_error: 0.0,
    }
}

/// An event accepted into the reputation framework's shared view.
struct ViewEntry {
    location: f64,
    attr: EventAttr,
    bogus: bool,
    claimants: BTreeSet<VehicleId>,
}

fn run_vime(config: &SimConfig, seed: u64) -> Result<RunMetrics, SimError> {
    let mut world = World::new(config, seed);
    let mut classifier = rng_for(seed, CLASSIFIER_STREAM);
    let modes = config.modes();
    let n = modes.len();
    let mut table = TrustTable::new(n, TrustScope::PerObserver, config.vime_params());
    let observers: Vec<VehicleId> = (0..n)
        .filter(|&i| modes[i] == Mode::Normal)
        .map(|i| VehicleId(i as u32))
        .collect();
    let mut view: BTreeMap<ListingId, ViewEntry> = BTreeMap::new();
    let mut next_id = 0u64;
    let ticks = config.sim_seconds as usize;
    let mut metrics = empty_metrics(seed, modes, ticks);
    let (len, tol) = (config.road_length_m, config.location_tolerance_m);

    for now in 0..config.sim_seconds {
        let (active, reports) = world.advance(config, now);

        let announced: Vec<&Report> = reports.iter().filter(|r| r.claim == Claim::Exists).collect();
        let observations: Vec<Observation> = announced
            .iter()
            .map(|r| {
                let pos = world.vehicles[r.vehicle_id.0 as usize].position;
                Observation {
                    sender: r.vehicle_id,
                    is_bogus: !is_real(&active, r.location, r.attr, config),
                    observers: observers
                        .iter()
                        .copied()
                        .filter(|&o| {
                            o != r.vehicle_id
                                && ring_distance(world.vehicles[o.0 as usize].position, pos, len)
                                    <= config.vime_range_m
                        })
                        .collect(),
                }
            })
            .collect();
        let outcome = vime_step(&observations, &mut table, &mut classifier);

        for idx in outcome.accepted {
            let r = announced[idx];
            let existing = view
                .iter()
                .filter(|(_, e)| e.attr == r.attr && ring_distance(e.location, r.location, len) <= tol)
                .map(|(id, _)| *id)
                .next();
            let id = match existing {
                Some(id) => id,
                None => {
                    let id = ListingId(next_id);
                    next_id += 1;
                    view.insert(
                        id,
                        ViewEntry {
                            location: r.location,
                            attr: r.attr,
                            bogus: observations[idx].is_bogus,
                            claimants: BTreeSet::new(),
                        },
                    );
                    for v in &mut world.vehicles {
                        v.learn(id, KnownEvent { location: r.location, attr: r.attr, verified: true });
                    }
                    id
                }
            };
            world.vehicles[r.vehicle_id.0 as usize]
                .learn(id, KnownEvent { location: r.location, attr: r.attr, verified: true });
        }

        for r in reports.iter().filter(|r| r.claim == Claim::Nonexistent) {
            let target = view
                .iter()
                .filter(|(_, e)| e.attr == r.attr && ring_distance(e.location, r.location, len) <= tol)
                .min_by(|a, b| {
                    ring_distance(a.1.location, r.location, len)
                        .total_cmp(&ring_distance(b.1.location, r.location, len))
                })
                .map(|(id, _)| *id);
            let Some(id) = target else { continue };
            world.vehicles[r.vehicle_id.0 as usize].claimed_absent.insert(id);
            let entry = view.get_mut(&id).expect("target exists");
            entry.claimants.insert(r.vehicle_id);
            if entry.claimants.len() >= config.m_terminate {
                view.remove(&id);
                for v in &mut world.vehicles {
                    v.forget(id);
                }
            }
        }

        let t = now as usize;
        let bad = view.values().filter(|e| e.bogus).count();
        metrics.ratio[t] = if view.is_empty() { 0.0 } else { bad as f64 / view.len() as f64 };
        metrics.verified_listings[t] = view.len();
        metrics.active_events[t] = active.len();
        for i in 0..n {
            let subject = VehicleId(i as u32);
            metrics.balances[t][i] = config.initial_vcash * table.mean_trust(observers.iter().copied(), subject);
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AttackMode;
    use crate::protocol::validate_session_trace;

    fn small() -> SimConfig {
        SimConfig {
            road_length_m: 2000.0,
            density_per_km: 10.0,
            sim_seconds: 200,
            replications: 1,
            ..SimConfig::default()
        }
    }

    #[test]
    fn no_attackers_means_zero_ratio() {
        for framework in [Framework::Vcash, Framework::Vime] {
            let c = SimConfig { malicious_fraction: 0.0, framework, ..small() };
            let m = run_simulation(&c, 1).unwrap();
            assert!(m.ratio.iter().all(|&r| r == 0.0), "{framework:?}");
        }
    }

    #[test]
    fn series_have_one_entry_per_second() {
        let m = run_simulation(&small(), 2).unwrap();
        assert_eq!(m.len(), 200);
        assert_eq!(m.balances.len(), 200);
        assert_eq!(m.balances[0].len(), 20);
        assert!(m.ratio.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn default_density_builds_100_vehicles() {
        let c = SimConfig { sim_seconds: 2, ..SimConfig::default() };
        assert_eq!(run_simulation(&c, 0).unwrap().modes.len(), 100);
    }

    #[test]
    fn same_seed_same_metrics() {
        for framework in [Framework::Vcash, Framework::Vime] {
            let c = SimConfig { framework, ..small() };
            assert_eq!(run_simulation(&c, 9).unwrap(), run_simulation(&c, 9).unwrap());
        }
        assert_ne!(run_simulation(&small(), 9).unwrap(), run_simulation(&small(), 10).unwrap());
    }

    #[test]
    fn cash_is_conserved_under_every_attack() {
        for attack_mode in [AttackMode::Bogus, AttackMode::Selfish, AttackMode::Mixed] {
            let c = SimConfig { attack_mode, malicious_fraction: 0.2, ..small() };
            let m = run_simulation(&c, 4).unwrap();
            assert!(m.max_conservation_error <= CONSERVATION_TOLERANCE);
        }
    }

    #[test]
    fn invalid_config_is_rejected_before_running() {
        let c = SimConfig { k_verify: 0, ..small() };
        assert!(matches!(run_simulation(&c, 0), Err(SimError::Config(_))));
    }

    #[test]
    fn traces_hold_complete_sessions() {
        let out = simulate(&small(), 3, SimOptions { trace: true }).unwrap();
        let trace = out.trace.unwrap();
        for i in 0..20 {
            validate_session_trace(&trace, VehicleId(i)).unwrap();
        }
    }
}
