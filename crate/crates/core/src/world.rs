//! Ground truth of a run: the ring road, vehicle kinematics, the traffic
//! event lifecycle, sensing, and what each behaviour mode reports.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::{Claim, Report};
use crate::types::{ring_distance, wrap_position, EventAttr, EventId, ListingId, Mode, Tick, VehicleId};

/// Speed range of spawned vehicles, metres per second.
pub const MIN_SPEED: f64 = 10.0;
pub const MAX_SPEED: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

/// What a vehicle client knows about a listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownEvent {
    pub location: f64,
    pub attr: EventAttr,
    /// Learned from a broadcast rather than from the vehicle's own report.
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub position: f64,
    pub direction: Direction,
    pub velocity: f64,
    pub mode: Mode,
    /// The client's event table, keyed by listing.
    pub event_table: BTreeMap<ListingId, KnownEvent>,
    /// Listings this vehicle has already claimed to be gone.
    pub claimed_absent: BTreeSet<ListingId>,
}

impl VehicleState {
    pub fn new(id: VehicleId, position: f64, direction: Direction, velocity: f64, mode: Mode) -> Self {
        Self {
            id,
            position,
            direction,
            velocity,
            mode,
            event_table: BTreeMap::new(),
            claimed_absent: BTreeSet::new(),
        }
    }

    pub fn advance(&mut self, dt: f64, road_length: f64) {
        debug_assert!(dt > 0.0);
        self.position = wrap_position(
            self.position + self.direction.sign() * self.velocity * dt,
            road_length,
        );
    }

    /// Whether the table already holds a listing matching `(location, attr)`.
    pub fn knows(&self, location: f64, attr: EventAttr, tolerance: f64, road_length: f64) -> bool {
        self.event_table
            .values()
            .any(|k| k.attr == attr && ring_distance(k.location, location, road_length) <= tolerance)
    }

    pub fn learn(&mut self, listing: ListingId, known: KnownEvent) {
        match self.event_table.get_mut(&listing) {
            Some(existing) => existing.verified |= known.verified,
            None => {
                self.event_table.insert(listing, known);
            }
        }
    }

    pub fn forget(&mut self, listing: ListingId) {
        self.event_table.remove(&listing);
        self.claimed_absent.remove(&listing);
    }

    pub fn clear_event_table(&mut self) {
        self.event_table.clear();
        self.claimed_absent.clear();
    }
}

/// Copy of `v` moved forward by `dt` seconds.
pub fn step_vehicle(v: &VehicleState, dt: f64, road_length: f64) -> VehicleState {
    let mut next = v.clone();
    next.advance(dt, road_length);
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficEvent {
    pub id: EventId,
    pub start: f64,
    pub end: f64,
    pub location: f64,
    pub attr: EventAttr,
}

impl TrafficEvent {
    pub fn is_active(&self, now: f64) -> bool {
        self.start <= now && now < self.end
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Whether any event in `events` has this attribute within `tolerance`.
pub fn coincides_with_any<'a, I>(
    events: I,
    location: f64,
    attr: EventAttr,
    tolerance: f64,
    road_length: f64,
) -> bool
where
    I: IntoIterator<Item = &'a TrafficEvent>,
{
    events
        .into_iter()
        .any(|e| e.attr == attr && ring_distance(e.location, location, road_length) <= tolerance)
}

pub fn sense_events<'a>(
    v: &VehicleState,
    events: &'a [TrafficEvent],
    sensing_range: f64,
    road_length: f64,
) -> Vec<&'a TrafficEvent> {
    debug_assert!(sensing_range > 0.0);
    events
        .iter()
        .filter(|e| ring_distance(v.position, e.location, road_length) <= sensing_range)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalseEntry {
    pub location: f64,
    pub attr: EventAttr,
}

/// Fabricated events shared by every colluding bogus vehicle.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FalseEventMap {
    pub entries: Vec<FalseEntry>,
}

impl FalseEventMap {
    /// Draws `size` entries at uniform locations, each at least `tolerance`
    /// away from every active event and from every other entry.
    pub fn generate<R: Rng>(
        rng: &mut R,
        size: usize,
        road_length: f64,
        active: &[TrafficEvent],
        tolerance: f64,
    ) -> Self {
        let mut entries: Vec<FalseEntry> = Vec::with_capacity(size);
        let mut attempts = 0usize;
        while entries.len() < size {
            attempts += 1;
            assert!(
                attempts < 100_000,
                "cannot place {size} false events on a {road_length} m road"
            );
            let location = rng.random_range(0.0..road_length);
            let attr = EventAttr::ALL[rng.random_range(0..EventAttr::ALL.len())];
            let near_event = active
                .iter()
                .any(|e| ring_distance(e.location, location, road_length) < tolerance);
            let near_entry = entries
                .iter()
                .any(|f| ring_distance(f.location, location, road_length) < tolerance);
            if !near_event && !near_entry {
                entries.push(FalseEntry { location, attr });
            }
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry reported in emission slot `slot`, round-robin over the map.
    /// Entries that would coincide with a live event are skipped.
    pub fn pick(
        &self,
        slot: u64,
        active: &[TrafficEvent],
        tolerance: f64,
        road_length: f64,
    ) -> Option<&FalseEntry> {
        let n = self.entries.len();
        if n == 0 {
            return None;
        }
        let start = (slot % n as u64) as usize;
        (0..n)
            .map(|i| &self.entries[(start + i) % n])
            .find(|f| !coincides_with_any(active, f.location, f.attr, tolerance, road_length))
    }
}

/// Parameters of the vehicle client's sensing and reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientParams {
    pub road_length: f64,
    pub sensing_range: f64,
    pub location_tolerance: f64,
    /// Seconds between two fabricated reports of a bogus vehicle.
    pub bogus_period: Tick,
}

/// Reports vehicle `v` sends this second.
///
/// `sensed` are the live events within range of `v`; `active` is every live
/// event (bogus vehicles use it to keep their fabrications plausible).
pub fn emit_reports(
    v: &VehicleState,
    sensed: &[&TrafficEvent],
    active: &[TrafficEvent],
    false_map: &FalseEventMap,
    now: Tick,
    params: &ClientParams,
) -> Vec<Report> {
    match v.mode {
        Mode::Selfish => Vec::new(),
        Mode::Bogus => {
            let period = params.bogus_period.max(1);
            if !now.is_multiple_of(period) {
                return Vec::new();
            }
            let slot = u64::from(now / period);
            false_map
                .pick(slot, active, params.location_tolerance, params.road_length)
                .map(|f| Report {
                    vehicle_id: v.id,
                    location: f.location,
                    attr: f.attr,
                    claim: Claim::Exists,
                    time: now,
                })
                .into_iter()
                .collect()
        }
        Mode::Normal => {
            let tol = params.location_tolerance;
            let len = params.road_length;
            let mut out = Vec::new();
            for e in sensed {
                if !v.knows(e.location, e.attr, tol, len) {
                    out.push(Report {
                        vehicle_id: v.id,
                        location: e.location,
                        attr: e.attr,
                        claim: Claim::Exists,
                        time: now,
                    });
                }
            }
            for (id, known) in &v.event_table {
                if !known.verified || v.claimed_absent.contains(id) {
                    continue;
                }
                if ring_distance(v.position, known.location, len) > params.sensing_range {
                    continue;
                }
                if !coincides_with_any(sensed.iter().copied(), known.location, known.attr, tol, len) {
                    out.push(Report {
                        vehicle_id: v.id,
                        location: known.location,
                        attr: known.attr,
                        claim: Claim::Nonexistent,
                        time: now,
                    });
                }
            }
            out
        }
    }
}

/// When and how traffic events appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSchedule {
    pub initial_count: usize,
    pub interval_s: Tick,
    pub per_interval: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
}

impl Default for EventSchedule {
    fn default() -> Self {
        Self {
            initial_count: 10,
            interval_s: 60,
            per_interval: 1,
            min_duration_s: 60.0,
            max_duration_s: 600.0,
        }
    }
}

/// Source of event identifiers for one run.
#[derive(Debug, Default, Clone)]
pub struct EventIds(u64);

impl EventIds {
    fn next(&mut self) -> EventId {
        let id = EventId(self.0);
        self.0 += 1;
        id
    }
}

pub fn spawn_events<R: Rng>(
    now: Tick,
    rng: &mut R,
    road_length: f64,
    schedule: &EventSchedule,
    ids: &mut EventIds,
) -> Vec<TrafficEvent> {
    let count = if now == 0 {
        schedule.initial_count
    } else if schedule.interval_s > 0 && now.is_multiple_of(schedule.interval_s) {
        schedule.per_interval
    } else {
        0
    };
    (0..count)
        .map(|_| {
            let location = rng.random_range(0.0..road_length);
            let duration = rng.random_range(schedule.min_duration_s..=schedule.max_duration_s);
            let attr = EventAttr::ALL[rng.random_range(0..EventAttr::ALL.len())];
            let start = f64::from(now);
            TrafficEvent {
                id: ids.next(),
                start,
                end: start + duration,
                location,
                attr,
            }
        })
        .collect()
}

/// Places one vehicle per entry of `modes`, ids in order.
pub fn spawn_vehicles<R: Rng>(rng: &mut R, modes: &[Mode], road_length: f64) -> Vec<VehicleState> {
    modes
        .iter()
        .enumerate()
        .map(|(i, &mode)| {
            let position = rng.random_range(0.0..road_length);
            let direction = if rng.random_bool(0.5) {
                Direction::Forward
            } else {
                Direction::Backward
            };
            let velocity = rng.random_range(MIN_SPEED..=MAX_SPEED);
            VehicleState::new(VehicleId(i as u32), position, direction, velocity, mode)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ROAD: f64 = 5000.0;

    fn vehicle(pos: f64, dir: Direction, vel: f64, mode: Mode) -> VehicleState {
        VehicleState::new(VehicleId(0), pos, dir, vel, mode)
    }

    fn event(id: u64, location: f64, attr: EventAttr) -> TrafficEvent {
        TrafficEvent {
            id: EventId(id),
            start: 0.0,
            end: 300.0,
            location,
            attr,
        }
    }

    fn params() -> ClientParams {
        ClientParams {
            road_length: ROAD,
            sensing_range: 100.0,
            location_tolerance: 50.0,
            bogus_period: 1,
        }
    }

    #[test]
    fn step_examples() {
        let v = vehicle(4990.0, Direction::Forward, 20.0, Mode::Normal);
        assert_eq!(step_vehicle(&v, 1.0, ROAD).position, 10.0);
        let v = vehicle(100.0, Direction::Backward, 10.0, Mode::Normal);
        assert_eq!(step_vehicle(&v, 1.0, ROAD).position, 90.0);

        let mut v = vehicle(0.0, Direction::Forward, 30.0, Mode::Normal);
        let mut laps = 0;
        for _ in 0..1000 {
            let before = v.position;
            v.advance(1.0, ROAD);
            if v.position < before {
                laps += 1;
            }
        }
        assert_eq!(laps, 6);
        assert!(v.position.abs() < 1e-6 || (ROAD - v.position) < 1e-6);
    }

    #[test]
    fn sensing_examples() {
        let v = vehicle(0.0, Direction::Forward, 20.0, Mode::Normal);
        let events = vec![event(0, 4950.0, EventAttr::Accident), event(1, 200.0, EventAttr::Accident)];
        let sensed = sense_events(&v, &events, 100.0, ROAD);
        assert_eq!(sensed.len(), 1);
        assert_eq!(sensed[0].id, EventId(0));
        assert!(sense_events(&v, &[], 100.0, ROAD).is_empty());
    }

    #[test]
    fn selfish_never_reports() {
        let v = vehicle(0.0, Direction::Forward, 20.0, Mode::Selfish);
        let events = vec![event(0, 10.0, EventAttr::Accident)];
        let sensed = sense_events(&v, &events, 100.0, ROAD);
        let map = FalseEventMap {
            entries: vec![FalseEntry {
                location: 2500.0,
                attr: EventAttr::TrafficJam,
            }],
        };
        for t in 0..50 {
            assert!(emit_reports(&v, &sensed, &events, &map, t, &params()).is_empty());
        }
    }

    #[test]
    fn bogus_reports_once_per_second_and_never_truthfully() {
        let v = vehicle(0.0, Direction::Forward, 20.0, Mode::Bogus);
        let events = vec![event(0, 10.0, EventAttr::Accident)];
        let sensed = sense_events(&v, &events, 100.0, ROAD);
        let map = FalseEventMap {
            entries: vec![
                FalseEntry { location: 2500.0, attr: EventAttr::TrafficJam },
                FalseEntry { location: 3500.0, attr: EventAttr::Accident },
            ],
        };
        let r = emit_reports(&v, &sensed, &events, &map, 5, &params());
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].location, 3500.0);
        assert_eq!(r[0].claim, Claim::Exists);
        let r = emit_reports(&v, &sensed, &events, &map, 6, &params());
        assert_eq!(r[0].location, 2500.0);

        let slow = ClientParams { bogus_period: 3, ..params() };
        assert!(emit_reports(&v, &sensed, &events, &map, 5, &slow).is_empty());
        assert_eq!(emit_reports(&v, &sensed, &events, &map, 6, &slow).len(), 1);
    }

    #[test]
    fn bogus_skips_entries_matching_live_events() {
        let map = FalseEventMap {
            entries: vec![
                FalseEntry { location: 1000.0, attr: EventAttr::Accident },
                FalseEntry { location: 3000.0, attr: EventAttr::Accident },
            ],
        };
        let live = vec![event(0, 1020.0, EventAttr::Accident)];
        let picked = map.pick(0, &live, 50.0, ROAD).unwrap();
        assert_eq!(picked.location, 3000.0);
    }

    #[test]
    fn normal_reports_unknown_events_once() {
        let mut v = vehicle(0.0, Direction::Forward, 20.0, Mode::Normal);
        let events = vec![event(0, 30.0, EventAttr::Accident)];
        let sensed = sense_events(&v, &events, 100.0, ROAD);
        let map = FalseEventMap::default();
        let r = emit_reports(&v, &sensed, &events, &map, 0, &params());
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].claim, Claim::Exists);
        assert_eq!(r[0].location, 30.0);

        v.learn(ListingId(4), KnownEvent { location: 30.0, attr: EventAttr::Accident, verified: false });
        assert!(emit_reports(&v, &sensed, &events, &map, 1, &params()).is_empty());
    }

    #[test]
    fn normal_claims_vanished_listing() {
        let mut v = vehicle(0.0, Direction::Forward, 20.0, Mode::Normal);
        v.learn(ListingId(7), KnownEvent { location: 60.0, attr: EventAttr::RoadCondition, verified: true });
        let map = FalseEventMap::default();
        let r = emit_reports(&v, &[], &[], &map, 10, &params());
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].claim, Claim::Nonexistent);

        v.claimed_absent.insert(ListingId(7));
        assert!(emit_reports(&v, &[], &[], &map, 11, &params()).is_empty());

        // still there: no claim
        let mut w = vehicle(0.0, Direction::Forward, 20.0, Mode::Normal);
        w.learn(ListingId(7), KnownEvent { location: 60.0, attr: EventAttr::RoadCondition, verified: true });
        let events = vec![event(3, 60.0, EventAttr::RoadCondition)];
        let sensed = sense_events(&w, &events, 100.0, ROAD);
        assert!(emit_reports(&w, &sensed, &events, &map, 12, &params()).is_empty());

        // out of range: no claim
        let mut far = vehicle(2000.0, Direction::Forward, 20.0, Mode::Normal);
        far.learn(ListingId(7), KnownEvent { location: 60.0, attr: EventAttr::RoadCondition, verified: true });
        assert!(emit_reports(&far, &[], &[], &map, 12, &params()).is_empty());
    }

    #[test]
    fn spawn_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ids = EventIds::default();
        let s = EventSchedule::default();
        assert_eq!(spawn_events(0, &mut rng, ROAD, &s, &mut ids).len(), 10);
        assert_eq!(spawn_events(60, &mut rng, ROAD, &s, &mut ids).len(), 1);
        assert_eq!(spawn_events(120, &mut rng, ROAD, &s, &mut ids).len(), 1);
        assert_eq!(spawn_events(61, &mut rng, ROAD, &s, &mut ids).len(), 0);
    }

    #[test]
    fn durations_are_uniform_on_schedule_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ids = EventIds::default();
        let s = EventSchedule { initial_count: 10_000, ..EventSchedule::default() };
        let events = spawn_events(0, &mut rng, ROAD, &s, &mut ids);
        assert!(events.iter().all(|e| (60.0..=600.0).contains(&e.duration()) && e.start < e.end));
        let mean = events.iter().map(TrafficEvent::duration).sum::<f64>() / events.len() as f64;
        assert!((mean - 330.0).abs() <= 15.0, "mean duration {mean}");
    }

    #[test]
    fn false_map_avoids_live_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let live: Vec<TrafficEvent> = (0..10).map(|i| event(i, i as f64 * 500.0, EventAttr::Accident)).collect();
        let map = FalseEventMap::generate(&mut rng, 10, ROAD, &live, 50.0);
        assert_eq!(map.len(), 10);
        for f in &map.entries {
            for e in &live {
                assert!(ring_distance(f.location, e.location, ROAD) >= 50.0);
            }
        }
    }

    #[test]
    fn spawned_vehicles_respect_speed_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let modes = vec![Mode::Normal; 500];
        let vs = spawn_vehicles(&mut rng, &modes, ROAD);
        assert!(vs.iter().all(|v| (MIN_SPEED..=MAX_SPEED).contains(&v.velocity)));
        assert!(vs.iter().all(|v| (0.0..ROAD).contains(&v.position)));
        let again = spawn_vehicles(&mut ChaCha8Rng::seed_from_u64(11), &modes, ROAD);
        assert_eq!(vs, again);
    }

    proptest! {
        #[test]
        fn positions_stay_on_the_ring(
            start in 0.0f64..ROAD,
            vel in MIN_SPEED..MAX_SPEED,
            forward in any::<bool>(),
            steps in 1usize..3000,
            dt in 0.1f64..5.0,
        ) {
            let dir = if forward { Direction::Forward } else { Direction::Backward };
            let mut v = vehicle(start, dir, vel, Mode::Normal);
            for _ in 0..steps {
                v.advance(dt, ROAD);
                prop_assert!(v.position >= 0.0 && v.position < ROAD);
            }
        }
    }
}
