//! Fixtures shared by the benchmarks.

use vcash_core::market::EventListing;
use vcash_core::protocol::{Claim, MarketParams, Report, ZoningMarket};
use vcash_core::{EventAttr, ListingId, SimConfig, TradingPlan, VehicleId};

/// A listing with `stakers` equal announcement stakes.
pub fn listing_with_stakes(stakers: u32) -> EventListing {
    let mut l = EventListing::new(ListingId(0), 100.0, EventAttr::Accident, 0);
    for i in 0..stakers {
        let mut a = vcash_core::Account::new(VehicleId(i), 100.0);
        l.deposit(&mut a, 10.0, vcash_core::market::StakeSide::Announce)
            .expect("fixture stake");
    }
    l
}

/// A zoning market holding `vehicles` sessions and `listings` verified
/// listings spread along the road.
pub fn busy_market(vehicles: u32, listings: u32) -> ZoningMarket {
    let mut m = ZoningMarket::new(
        TradingPlan::default(),
        MarketParams {
            road_length: 5000.0,
            location_tolerance: 50.0,
            initial_balance: 100.0,
        },
        false,
    );
    for v in 0..vehicles {
        m.handle_zone_entry(VehicleId(v), 0).expect("fresh vehicle");
    }
    for k in 0..listings {
        let location = f64::from(k) * 4000.0 / f64::from(listings.max(1));
        for v in 0..2 {
            let r = Report {
                vehicle_id: VehicleId((k * 2 + v) % vehicles),
                location,
                attr: EventAttr::TrafficJam,
                claim: Claim::Exists,
                time: 0,
            };
            m.submit_report(&r).expect("fixture report");
        }
    }
    m.settle(0, |_| true).expect("fixture settle");
    m
}

/// Default experiment shortened to `seconds`.
pub fn short_config(seconds: u32) -> SimConfig {
    SimConfig {
        sim_seconds: seconds,
        replications: 1,
        ..SimConfig::default()
    }
}
