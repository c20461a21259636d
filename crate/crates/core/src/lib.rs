//! Discrete-event simulator of an event-trading reputation market for
//! connected vehicles, with an entity-reputation baseline for comparison.
//!
//! Layers, bottom up: [`market`] holds the cash rules, [`world`] the road,
//! vehicles and traffic events, [`protocol`] the zoning market that ties
//! them together, [`vime`] the baseline, and [`sim`], [`harness`] and
//! [`output`] the experiment driver.

pub mod config;
pub mod harness;
pub mod market;
pub mod metrics;
pub mod output;
pub mod protocol;
pub mod sim;
pub mod types;
pub mod vime;
pub mod world;

pub use config::{AttackMode, ConfigError, Framework, SimConfig};
pub use harness::{run_replications, run_sweep, Replications};
pub use market::{Account, EventListing, ListingStatus, MarketError, Stake, TradingPlan};
pub use metrics::{Aggregate, RunMetrics, RunSummary};
pub use protocol::{Claim, Report, ZoningMarket};
pub use sim::{run_simulation, simulate, SimError, SimOptions};
pub use types::{EventAttr, EventId, ListingId, Mode, Tick, Vcash, VehicleId};
