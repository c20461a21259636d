//! Identifiers and small value types shared by every layer of the simulator.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Amount of vehicle cash. Balances, stakes, escrows and fees all use it.
pub type Vcash = f64;

/// Simulation time in whole seconds (one tick per second).
pub type Tick = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ListingId(pub u64);

impl fmt::Display for ListingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(pub u64);

/// Attribute tag of a traffic event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventAttr {
    TrafficJam,
    Accident,
    RoadCondition,
    OverflowPavement,
}

impl EventAttr {
    pub const ALL: [EventAttr; 4] = [
        EventAttr::TrafficJam,
        EventAttr::Accident,
        EventAttr::RoadCondition,
        EventAttr::OverflowPavement,
    ];
}

/// Behaviour of a vehicle client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Reports what it senses, claims non-existence of vanished events.
    Normal,
    /// Floods fabricated reports drawn from the shared false event map.
    Bogus,
    /// Consumes notifications, never reports.
    Selfish,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Normal => "normal",
            Mode::Bogus => "bogus",
            Mode::Selfish => "selfish",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shortest distance between two points on a ring of length `road_length`.
pub fn ring_distance(a: f64, b: f64, road_length: f64) -> f64 {
    let d = (a - b).abs() % road_length;
    d.min(road_length - d)
}

/// Wraps a position into `[0, road_length)`.
pub fn wrap_position(x: f64, road_length: f64) -> f64 {
    let w = x.rem_euclid(road_length);
    // rem_euclid can round up to exactly road_length for tiny negative inputs
    if w >= road_length {
        0.0
    } else {
        w
    }
}
