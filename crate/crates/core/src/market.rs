//! Economic rules of the zoning market: investment sizing, stock shares,
//! profit distribution, notification charging, termination payouts and
//! expropriation.
//!
//! Cash only ever moves between an [`Account`] and an [`EventListing`] (or
//! between accounts through a [`Ledger`]), so the total amount of vehicle
//! cash in a run is constant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{EventAttr, ListingId, Tick, Vcash, VehicleId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("account {vehicle} holds {available} but {needed} was requested")]
    InsufficientFunds {
        vehicle: VehicleId,
        needed: Vcash,
        available: Vcash,
    },
    #[error("no account for vehicle {0}")]
    UnknownAccount(VehicleId),
    #[error("listing {0} is terminated")]
    ListingTerminated(ListingId),
    #[error("listing {0} is not verified")]
    NotVerified(ListingId),
    #[error("listing {0} has no announcement stakes")]
    NoStakeholders(ListingId),
    #[error("listing {0} has no termination stakes")]
    NoTerminators(ListingId),
    #[error("vehicle {vehicle} holds no termination stake on listing {listing}")]
    StakeNotFound {
        listing: ListingId,
        vehicle: VehicleId,
    },
    #[error("illegal status transition {from:?} -> {to:?} on listing {listing}")]
    IllegalTransition {
        listing: ListingId,
        from: ListingStatus,
        to: ListingStatus,
    },
    #[error("invalid amount {0}")]
    InvalidAmount(Vcash),
    #[error("invalid trading plan: {0}")]
    InvalidPlan(String),
}

/// A vehicle's balance at the bank. Never negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub vehicle_id: VehicleId,
    balance: Vcash,
}

impl Account {
    pub fn new(vehicle_id: VehicleId, balance: Vcash) -> Self {
        assert!(
            balance.is_finite() && balance >= 0.0,
            "account balance must be a nonnegative number, got {balance}"
        );
        Self { vehicle_id, balance }
    }

    pub fn balance(&self) -> Vcash {
        self.balance
    }

    pub fn debit(&mut self, amount: Vcash) -> Result<(), MarketError> {
        if !(amount.is_finite() && amount >= 0.0) {
            return Err(MarketError::InvalidAmount(amount));
        }
        if amount > self.balance {
            return Err(MarketError::InsufficientFunds {
                vehicle: self.vehicle_id,
                needed: amount,
                available: self.balance,
            });
        }
        self.balance -= amount;
        Ok(())
    }

    pub fn credit(&mut self, amount: Vcash) -> Result<(), MarketError> {
        if !(amount.is_finite() && amount >= 0.0) {
            return Err(MarketError::InvalidAmount(amount));
        }
        self.balance += amount;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stake {
    pub vehicle_id: VehicleId,
    pub amount: Vcash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListingStatus {
    Pending,
    Verified,
    Terminated,
}

/// Which side of a listing a stake backs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StakeSide {
    /// The event exists; joins the escrow and earns notification profit.
    Announce,
    /// The event no longer exists; held apart until termination or expropriation.
    Terminate,
}

/// The market's record of a reported traffic event.
///
/// The escrow is the event's reputation: everything announcers invested plus
/// any expropriated termination stakes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventListing {
    pub id: ListingId,
    pub location: f64,
    pub attr: EventAttr,
    pub first_report_time: Tick,
    announce_stakes: Vec<Stake>,
    termination_stakes: Vec<Stake>,
    escrow: Vcash,
    status: ListingStatus,
}

impl EventListing {
    pub fn new(id: ListingId, location: f64, attr: EventAttr, first_report_time: Tick) -> Self {
        Self {
            id,
            location,
            attr,
            first_report_time,
            announce_stakes: Vec::new(),
            termination_stakes: Vec::new(),
            escrow: 0.0,
            status: ListingStatus::Pending,
        }
    }

    pub fn status(&self) -> ListingStatus {
        self.status
    }

    pub fn escrow(&self) -> Vcash {
        self.escrow
    }

    pub fn announce_stakes(&self) -> &[Stake] {
        &self.announce_stakes
    }

    pub fn termination_stakes(&self) -> &[Stake] {
        &self.termination_stakes
    }

    /// Cash currently held by the listing: escrow plus pending termination stakes.
    pub fn held(&self) -> Vcash {
        self.escrow + self.termination_stakes.iter().map(|s| s.amount).sum::<Vcash>()
    }

    pub fn is_trading(&self) -> bool {
        self.status != ListingStatus::Terminated
    }

    /// Moves `amount` from `account` into the listing on the given side.
    /// Repeat stakes by one vehicle accumulate into a single entry.
    pub fn deposit(
        &mut self,
        account: &mut Account,
        amount: Vcash,
        side: StakeSide,
    ) -> Result<(), MarketError> {
        if self.status == ListingStatus::Terminated {
            return Err(MarketError::ListingTerminated(self.id));
        }
        if !(amount.is_finite() && amount > 0.0) {
            return Err(MarketError::InvalidAmount(amount));
        }
        account.debit(amount)?;
        let stakes = match side {
            StakeSide::Announce => {
                self.escrow += amount;
                &mut self.announce_stakes
            }
            StakeSide::Terminate => &mut self.termination_stakes,
        };
        match stakes.iter_mut().find(|s| s.vehicle_id == account.vehicle_id) {
            Some(stake) => stake.amount += amount,
            None => stakes.push(Stake {
                vehicle_id: account.vehicle_id,
                amount,
            }),
        }
        Ok(())
    }

    pub fn mark_verified(&mut self) -> Result<(), MarketError> {
        self.transition(ListingStatus::Verified)
    }

    fn transition(&mut self, to: ListingStatus) -> Result<(), MarketError> {
        let ok = matches!(
            (self.status, to),
            (ListingStatus::Pending, ListingStatus::Verified)
                | (ListingStatus::Pending, ListingStatus::Terminated)
                | (ListingStatus::Verified, ListingStatus::Terminated)
        );
        if !ok {
            return Err(MarketError::IllegalTransition {
                listing: self.id,
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }
}

/// Parameters of the trading plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradingPlan {
    /// Fraction of the remaining balance invested per report.
    pub ratio: f64,
    /// Base notification rate, Vcash per event per second.
    pub c0: Vcash,
    /// Investments below this are ignored.
    pub min_investment: Vcash,
    /// Distinct corroborating vehicles needed to verify existence.
    pub k_verify: usize,
    /// Distinct vehicles needed to verify termination.
    pub m_terminate: usize,
}

impl Default for TradingPlan {
    fn default() -> Self {
        Self {
            ratio: 0.1,
            c0: 1e-4,
            min_investment: 0.01,
            k_verify: 2,
            m_terminate: 2,
        }
    }
}

impl TradingPlan {
    pub fn validate(&self) -> Result<(), MarketError> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(MarketError::InvalidPlan(format!(
                "ratio must lie in (0, 1), got {}",
                self.ratio
            )));
        }
        if !(self.c0.is_finite() && self.c0 > 0.0) {
            return Err(MarketError::InvalidPlan(format!("c0 must be positive, got {}", self.c0)));
        }
        if !(self.min_investment.is_finite() && self.min_investment > 0.0) {
            return Err(MarketError::InvalidPlan(format!(
                "min_investment must be positive, got {}",
                self.min_investment
            )));
        }
        if self.k_verify == 0 || self.m_terminate == 0 {
            return Err(MarketError::InvalidPlan(
                "k_verify and m_terminate must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Investment for the next report: a fixed fraction of what is left.
pub fn compute_investment(balance: Vcash, ratio: f64) -> Vcash {
    balance * ratio
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StakeOutcome {
    Accepted { amount: Vcash },
    /// The sized investment fell below the threshold; nothing moved.
    Ignored { amount: Vcash },
}

impl StakeOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, StakeOutcome::Accepted { .. })
    }
}

fn try_stake(
    account: &mut Account,
    listing: &mut EventListing,
    plan: &TradingPlan,
    side: StakeSide,
) -> Result<StakeOutcome, MarketError> {
    if listing.status() == ListingStatus::Terminated {
        return Err(MarketError::ListingTerminated(listing.id));
    }
    let amount = compute_investment(account.balance(), plan.ratio);
    if amount < plan.min_investment {
        return Ok(StakeOutcome::Ignored { amount });
    }
    listing.deposit(account, amount, side)?;
    Ok(StakeOutcome::Accepted { amount })
}

/// Stakes an existence announcement on `listing`, or ignores it when the
/// account is too poor to clear the threshold.
pub fn try_stake_announcement(
    account: &mut Account,
    listing: &mut EventListing,
    plan: &TradingPlan,
) -> Result<StakeOutcome, MarketError> {
    try_stake(account, listing, plan, StakeSide::Announce)
}

/// Stakes a non-existence claim, sized exactly like an announcement.
pub fn try_stake_termination(
    account: &mut Account,
    listing: &mut EventListing,
    plan: &TradingPlan,
) -> Result<StakeOutcome, MarketError> {
    try_stake(account, listing, plan, StakeSide::Terminate)
}

/// Per-event per-second fee given the number of events on offer.
pub fn notification_rate(c0: Vcash, active_events: usize) -> Vcash {
    c0 / active_events.max(1) as f64
}

/// Verified listings in charging order: escrow descending, then earliest
/// first report, then lowest id.
pub fn rank_for_notification<'a, I>(listings: I) -> Vec<&'a EventListing>
where
    I: IntoIterator<Item = &'a EventListing>,
{
    let mut ranked: Vec<&EventListing> = listings
        .into_iter()
        .filter(|l| l.status() == ListingStatus::Verified)
        .collect();
    ranked.sort_by(|a, b| {
        b.escrow()
            .total_cmp(&a.escrow())
            .then(a.first_report_time.cmp(&b.first_report_time))
            .then(a.id.cmp(&b.id))
    });
    ranked
}

/// Largest `k <= available` with `rate * k <= balance`.
pub fn affordable_count(balance: Vcash, available: usize, rate: Vcash) -> usize {
    assert!(rate > 0.0, "notification rate must be positive");
    if balance <= 0.0 {
        return 0;
    }
    let mut k = ((balance / rate).floor() as usize).min(available);
    while k > 0 && rate * k as f64 > balance {
        k -= 1;
    }
    while k < available && rate * (k + 1) as f64 <= balance {
        k += 1;
    }
    k
}

/// Notifications a vehicle with `balance` can pay for this second: the
/// longest prefix of the charging order it can afford.
pub fn select_affordable_notifications<'a, I>(
    balance: Vcash,
    listings: I,
    rate: Vcash,
) -> Vec<&'a EventListing>
where
    I: IntoIterator<Item = &'a EventListing>,
{
    let mut ranked = rank_for_notification(listings);
    let k = affordable_count(balance, ranked.len(), rate);
    ranked.truncate(k);
    ranked
}

/// Payout per vehicle.
pub type Payouts = BTreeMap<VehicleId, Vcash>;

/// Normalised stake fractions, in stake order.
pub fn stock_shares(stakes: &[Stake]) -> Vec<(VehicleId, f64)> {
    let total: Vcash = stakes.iter().map(|s| s.amount).sum();
    stakes
        .iter()
        .map(|s| (s.vehicle_id, s.amount / total))
        .collect()
}

fn split_pool(stakes: &[Stake], pool: Vcash) -> Payouts {
    let total: Vcash = stakes.iter().map(|s| s.amount).sum();
    stakes
        .iter()
        .map(|s| (s.vehicle_id, s.amount / total * pool))
        .collect()
}

/// Anything that holds accounts by vehicle id.
pub trait Ledger {
    fn balance_of(&self, vehicle: VehicleId) -> Option<Vcash>;
    fn debit(&mut self, vehicle: VehicleId, amount: Vcash) -> Result<(), MarketError>;
    fn credit(&mut self, vehicle: VehicleId, amount: Vcash) -> Result<(), MarketError>;
}

impl Ledger for BTreeMap<VehicleId, Account> {
    fn balance_of(&self, vehicle: VehicleId) -> Option<Vcash> {
        self.get(&vehicle).map(Account::balance)
    }

    fn debit(&mut self, vehicle: VehicleId, amount: Vcash) -> Result<(), MarketError> {
        self.get_mut(&vehicle)
            .ok_or(MarketError::UnknownAccount(vehicle))?
            .debit(amount)
    }

    fn credit(&mut self, vehicle: VehicleId, amount: Vcash) -> Result<(), MarketError> {
        self.get_mut(&vehicle)
            .ok_or(MarketError::UnknownAccount(vehicle))?
            .credit(amount)
    }
}

fn ensure_accounts<'a, L: Ledger + ?Sized>(
    ledger: &L,
    ids: impl IntoIterator<Item = &'a VehicleId>,
) -> Result<(), MarketError> {
    for id in ids {
        if ledger.balance_of(*id).is_none() {
            return Err(MarketError::UnknownAccount(*id));
        }
    }
    Ok(())
}

/// Credits a collected fee pool to the listing's stakeholders in proportion
/// to their stock.
pub fn credit_profit<L: Ledger + ?Sized>(
    listing: &EventListing,
    pool: Vcash,
    ledger: &mut L,
) -> Result<Payouts, MarketError> {
    if listing.status() != ListingStatus::Verified {
        return Err(MarketError::NotVerified(listing.id));
    }
    if listing.announce_stakes().is_empty() {
        return Err(MarketError::NoStakeholders(listing.id));
    }
    let payouts = split_pool(listing.announce_stakes(), pool);
    ensure_accounts(ledger, payouts.keys())?;
    for (vehicle, amount) in &payouts {
        ledger.credit(*vehicle, *amount)?;
    }
    Ok(payouts)
}

/// Charges every payer one notification at `rate` and shares the proceeds
/// among the listing's stakeholders.
pub fn distribute_profit<L: Ledger + ?Sized>(
    listing: &EventListing,
    rate: Vcash,
    payers: &[VehicleId],
    ledger: &mut L,
) -> Result<Payouts, MarketError> {
    if listing.status() != ListingStatus::Verified {
        return Err(MarketError::NotVerified(listing.id));
    }
    if listing.announce_stakes().is_empty() {
        return Err(MarketError::NoStakeholders(listing.id));
    }
    for payer in payers {
        let available = ledger
            .balance_of(*payer)
            .ok_or(MarketError::UnknownAccount(*payer))?;
        if available < rate {
            return Err(MarketError::InsufficientFunds {
                vehicle: *payer,
                needed: rate,
                available,
            });
        }
    }
    for payer in payers {
        ledger.debit(*payer, rate)?;
    }
    credit_profit(listing, rate * payers.len() as f64, ledger)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TerminationPayout {
    /// Each terminator's share of the escrow.
    pub rewards: Payouts,
    /// Each terminator's own stake, returned.
    pub refunds: Payouts,
}

impl TerminationPayout {
    pub fn total_for(&self, vehicle: VehicleId) -> Vcash {
        self.rewards.get(&vehicle).copied().unwrap_or(0.0)
            + self.refunds.get(&vehicle).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> Vcash {
        self.rewards.values().sum::<Vcash>() + self.refunds.values().sum::<Vcash>()
    }
}

/// Closes a listing: the whole escrow goes to the terminators in proportion
/// to their termination stakes, and each stake is refunded.
pub fn terminate_event<L: Ledger + ?Sized>(
    listing: &mut EventListing,
    ledger: &mut L,
) -> Result<TerminationPayout, MarketError> {
    if listing.status() == ListingStatus::Terminated {
        return Err(MarketError::ListingTerminated(listing.id));
    }
    if listing.termination_stakes.is_empty() {
        return Err(MarketError::NoTerminators(listing.id));
    }
    ensure_accounts(ledger, listing.termination_stakes.iter().map(|s| &s.vehicle_id))?;

    let rewards = split_pool(&listing.termination_stakes, listing.escrow);
    let refunds: Payouts = listing
        .termination_stakes
        .iter()
        .map(|s| (s.vehicle_id, s.amount))
        .collect();
    listing.transition(ListingStatus::Terminated)?;
    listing.escrow = 0.0;
    listing.termination_stakes.clear();
    for (vehicle, amount) in rewards.iter().chain(refunds.iter()) {
        ledger.credit(*vehicle, *amount)?;
    }
    Ok(TerminationPayout { rewards, refunds })
}

/// Confiscates a wrong non-existence claim into the listing's escrow.
pub fn expropriate_false_verification(
    listing: &mut EventListing,
    vehicle: VehicleId,
) -> Result<Vcash, MarketError> {
    let idx = listing
        .termination_stakes
        .iter()
        .position(|s| s.vehicle_id == vehicle)
        .ok_or(MarketError::StakeNotFound {
            listing: listing.id,
            vehicle,
        })?;
    let stake = listing.termination_stakes.remove(idx);
    listing.escrow += stake.amount;
    Ok(stake.amount)
}

/// Relative comparison used by conservation checks.
pub(crate) fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    (a - b).abs() / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(n: u32) -> VehicleId {
        VehicleId(n)
    }

    fn listing() -> EventListing {
        EventListing::new(ListingId(1), 100.0, EventAttr::Accident, 0)
    }

    fn accounts(pairs: &[(u32, f64)]) -> BTreeMap<VehicleId, Account> {
        pairs
            .iter()
            .map(|&(id, bal)| (v(id), Account::new(v(id), bal)))
            .collect()
    }

    fn verified_with_stakes(stakes: &[(u32, f64)]) -> EventListing {
        let mut l = listing();
        for &(id, amount) in stakes {
            let mut acct = Account::new(v(id), amount);
            l.deposit(&mut acct, amount, StakeSide::Announce).unwrap();
        }
        l.mark_verified().unwrap();
        l
    }

    fn assert_rel(a: f64, b: f64) {
        assert!(relative_gap(a, b) <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn investment_examples() {
        assert_rel(compute_investment(100.0, 0.1), 10.0);
        assert_eq!(compute_investment(0.0, 0.1), 0.0);
        assert_rel(compute_investment(90.0, 0.1), 9.0);
    }

    #[test]
    fn investment_recurrence_matches_closed_form() {
        let plan = TradingPlan::default();
        let mut acct = Account::new(v(0), 100.0);
        let mut l = listing();
        for n in 1..=60 {
            try_stake_announcement(&mut acct, &mut l, &plan).unwrap();
            let closed = 100.0 * 0.9f64.powi(n);
            assert!(relative_gap(acct.balance(), closed) <= 1e-12);
        }
    }

    #[test]
    fn stake_accepted_and_ignored() {
        let plan = TradingPlan::default();
        let mut acct = Account::new(v(0), 100.0);
        let mut l = listing();
        let out = try_stake_announcement(&mut acct, &mut l, &plan).unwrap();
        assert_eq!(out, StakeOutcome::Accepted { amount: 10.0 });
        assert_rel(acct.balance(), 90.0);
        assert_rel(l.escrow(), 10.0);

        let mut poor = Account::new(v(1), 0.05);
        let out = try_stake_announcement(&mut poor, &mut l, &plan).unwrap();
        assert!(!out.is_accepted());
        assert_eq!(poor.balance(), 0.05);
        assert_eq!(l.announce_stakes().len(), 1);
    }

    #[test]
    fn repeat_stakes_accumulate() {
        let plan = TradingPlan::default();
        let mut acct = Account::new(v(0), 100.0);
        let mut l = listing();
        try_stake_announcement(&mut acct, &mut l, &plan).unwrap();
        try_stake_announcement(&mut acct, &mut l, &plan).unwrap();
        assert_eq!(l.announce_stakes().len(), 1);
        assert_rel(l.announce_stakes()[0].amount, 19.0);
        assert_rel(l.escrow() + acct.balance(), 100.0);
    }

    #[test]
    fn staking_terminated_listing_is_rejected() {
        let plan = TradingPlan::default();
        let mut l = listing();
        let mut a = Account::new(v(0), 100.0);
        try_stake_termination(&mut a, &mut l, &plan).unwrap();
        let mut ledger = accounts(&[(0, 0.0)]);
        terminate_event(&mut l, &mut ledger).unwrap();
        let mut b = Account::new(v(1), 100.0);
        assert_eq!(
            try_stake_announcement(&mut b, &mut l, &plan),
            Err(MarketError::ListingTerminated(ListingId(1)))
        );
    }

    #[test]
    fn rate_examples() {
        assert_rel(notification_rate(1e-4, 10), 1e-5);
        assert_eq!(notification_rate(1e-4, 1), 1e-4);
        assert_eq!(notification_rate(1e-4, 0), 1e-4);
    }

    fn three_listings() -> Vec<EventListing> {
        [50.0, 30.0, 10.0]
            .iter()
            .enumerate()
            .map(|(i, &escrow)| {
                let mut l = EventListing::new(ListingId(i as u64), 0.0, EventAttr::TrafficJam, 0);
                let mut a = Account::new(v(i as u32), escrow);
                l.deposit(&mut a, escrow, StakeSide::Announce).unwrap();
                l.mark_verified().unwrap();
                l
            })
            .rev()
            .collect()
    }

    #[test]
    fn affordable_examples() {
        let ls = three_listings();
        let picked = select_affordable_notifications(2.5e-5, &ls, 1e-5);
        let escrows: Vec<f64> = picked.iter().map(|l| l.escrow()).collect();
        assert_eq!(escrows, vec![50.0, 30.0]);
        assert!(select_affordable_notifications(0.0, &ls, 1e-5).is_empty());
        assert_eq!(select_affordable_notifications(1.0, &ls, 1e-5).len(), 3);
        assert!(select_affordable_notifications(0.9e-5, &ls, 1e-5).is_empty());
        assert_eq!(select_affordable_notifications(1e-5, &ls, 1e-5).len(), 1);
    }

    #[test]
    fn charging_order_breaks_ties() {
        let mut ls = Vec::new();
        for (id, t) in [(3u64, 5u32), (1, 5), (2, 1)] {
            let mut l = EventListing::new(ListingId(id), 0.0, EventAttr::TrafficJam, t);
            let mut a = Account::new(v(0), 10.0);
            l.deposit(&mut a, 10.0, StakeSide::Announce).unwrap();
            l.mark_verified().unwrap();
            ls.push(l);
        }
        let pending = EventListing::new(ListingId(9), 0.0, EventAttr::Accident, 0);
        ls.push(pending);
        let order: Vec<u64> = rank_for_notification(&ls).iter().map(|l| l.id.0).collect();
        assert_eq!(order, vec![2, 1, 3]);
    }

    #[test]
    fn profit_examples() {
        let l = verified_with_stakes(&[(1, 10.0), (2, 30.0)]);
        let payer_ids: Vec<VehicleId> = (100..150).map(v).collect();
        let mut ledger: BTreeMap<VehicleId, Account> = payer_ids
            .iter()
            .map(|&id| (id, Account::new(id, 1.0)))
            .collect();
        ledger.insert(v(1), Account::new(v(1), 0.0));
        ledger.insert(v(2), Account::new(v(2), 0.0));
        let payouts = distribute_profit(&l, 1e-5, &payer_ids, &mut ledger).unwrap();
        assert_rel(payouts[&v(1)], 1.25e-4);
        assert_rel(payouts[&v(2)], 3.75e-4);
        assert_rel(payouts.values().sum::<f64>(), 5e-4);
        assert_rel(ledger[&v(100)].balance(), 1.0 - 1e-5);

        let single = verified_with_stakes(&[(1, 7.0)]);
        let payouts = distribute_profit(&single, 1e-5, &payer_ids, &mut ledger).unwrap();
        assert_rel(payouts[&v(1)], 1e-5 * 50.0);

        let payouts = distribute_profit(&l, 1e-5, &[], &mut ledger).unwrap();
        assert!(payouts.values().all(|&p| p == 0.0));
    }

    #[test]
    fn profit_requires_funds_and_verification() {
        let l = verified_with_stakes(&[(1, 10.0)]);
        let mut ledger = accounts(&[(1, 0.0), (5, 1e-6)]);
        assert!(matches!(
            distribute_profit(&l, 1e-5, &[v(5)], &mut ledger),
            Err(MarketError::InsufficientFunds { .. })
        ));
        assert_eq!(ledger[&v(5)].balance(), 1e-6);

        let mut pending = listing();
        let mut a = Account::new(v(1), 10.0);
        pending.deposit(&mut a, 10.0, StakeSide::Announce).unwrap();
        assert_eq!(
            distribute_profit(&pending, 1e-5, &[], &mut ledger),
            Err(MarketError::NotVerified(ListingId(1)))
        );
    }

    fn listing_for_termination(escrow: f64, terminators: &[(u32, f64)]) -> EventListing {
        let mut l = listing();
        if escrow > 0.0 {
            let mut a = Account::new(v(99), escrow);
            l.deposit(&mut a, escrow, StakeSide::Announce).unwrap();
        }
        l.mark_verified().unwrap();
        for &(id, amount) in terminators {
            let mut a = Account::new(v(id), amount);
            l.deposit(&mut a, amount, StakeSide::Terminate).unwrap();
        }
        l
    }

    #[test]
    fn termination_examples() {
        let mut l = listing_for_termination(40.0, &[(1, 5.0), (2, 15.0)]);
        let mut ledger = accounts(&[(1, 0.0), (2, 0.0)]);
        let out = terminate_event(&mut l, &mut ledger).unwrap();
        assert_rel(out.rewards[&v(1)], 10.0);
        assert_rel(out.rewards[&v(2)], 30.0);
        assert_eq!(out.refunds[&v(1)], 5.0);
        assert_eq!(out.refunds[&v(2)], 15.0);
        assert_rel(ledger[&v(1)].balance(), 15.0);
        assert_rel(ledger[&v(2)].balance(), 45.0);
        assert_eq!(l.status(), ListingStatus::Terminated);
        assert_eq!(l.held(), 0.0);

        let mut l = listing_for_termination(40.0, &[(3, 2.0)]);
        let mut ledger = accounts(&[(3, 0.0)]);
        let out = terminate_event(&mut l, &mut ledger).unwrap();
        assert_eq!(out.rewards[&v(3)], 40.0);

        let mut l = listing_for_termination(0.0, &[(1, 5.0), (2, 15.0)]);
        let mut ledger = accounts(&[(1, 0.0), (2, 0.0)]);
        let out = terminate_event(&mut l, &mut ledger).unwrap();
        assert!(out.rewards.values().all(|&r| r == 0.0));
    }

    #[test]
    fn double_termination_is_a_bug() {
        let mut l = listing_for_termination(40.0, &[(1, 5.0)]);
        let mut ledger = accounts(&[(1, 0.0)]);
        terminate_event(&mut l, &mut ledger).unwrap();
        assert_eq!(
            terminate_event(&mut l, &mut ledger),
            Err(MarketError::ListingTerminated(ListingId(1)))
        );
    }

    #[test]
    fn expropriation_examples() {
        let mut l = listing_for_termination(40.0, &[(1, 5.0)]);
        assert_eq!(expropriate_false_verification(&mut l, v(1)).unwrap(), 5.0);
        assert_eq!(l.escrow(), 45.0);
        assert!(l.termination_stakes().is_empty());

        let mut l = listing_for_termination(40.0, &[(1, 5.0), (2, 3.0)]);
        expropriate_false_verification(&mut l, v(1)).unwrap();
        expropriate_false_verification(&mut l, v(2)).unwrap();
        assert_eq!(l.escrow(), 48.0);

        assert!(matches!(
            expropriate_false_verification(&mut l, v(7)),
            Err(MarketError::StakeNotFound { .. })
        ));
    }

    #[test]
    fn status_never_moves_backwards() {
        let mut l = listing();
        l.mark_verified().unwrap();
        assert!(l.mark_verified().is_err());
        l.transition(ListingStatus::Terminated).unwrap();
        assert!(l.transition(ListingStatus::Verified).is_err());
        assert!(l.transition(ListingStatus::Pending).is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(TradingPlan::default().validate().is_ok());
        let bad = TradingPlan {
            ratio: 1.0,
            ..TradingPlan::default()
        };
        assert!(bad.validate().is_err());
        let bad = TradingPlan {
            k_verify: 0,
            ..TradingPlan::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn debit_never_overdraws() {
        let mut a = Account::new(v(0), 1.0);
        assert!(a.debit(1.5).is_err());
        assert_eq!(a.balance(), 1.0);
        a.debit(1.0).unwrap();
        assert_eq!(a.balance(), 0.0);
    }

    proptest! {
        #[test]
        fn shares_sum_to_one(amounts in prop::collection::vec(1e-6f64..1e3, 1..20)) {
            let stakes: Vec<Stake> = amounts.iter().enumerate()
                .map(|(i, &a)| Stake { vehicle_id: v(i as u32), amount: a }).collect();
            let total: f64 = stock_shares(&stakes).iter().map(|(_, s)| s).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn shares_scale_invariant(
            amounts in prop::collection::vec(1e-3f64..1e3, 1..12),
            factor in 1e-3f64..1e3,
        ) {
            let base: Vec<Stake> = amounts.iter().enumerate()
                .map(|(i, &a)| Stake { vehicle_id: v(i as u32), amount: a }).collect();
            let scaled: Vec<Stake> = base.iter()
                .map(|s| Stake { vehicle_id: s.vehicle_id, amount: s.amount * factor }).collect();
            for ((_, a), (_, b)) in stock_shares(&base).iter().zip(stock_shares(&scaled).iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn profit_conserves_cash(
            amounts in prop::collection::vec(1e-3f64..50.0, 1..8),
            payers in 0usize..60,
            rate in 1e-7f64..1e-3,
        ) {
            let stakes: Vec<(u32, f64)> = amounts.iter().enumerate().map(|(i, &a)| (i as u32, a)).collect();
            let l = verified_with_stakes(&stakes);
            let mut ledger: BTreeMap<VehicleId, Account> = (0..(100 + payers as u32))
                .map(|i| (v(i), Account::new(v(i), 1.0))).collect();
            let payer_ids: Vec<VehicleId> = (100..100 + payers as u32).map(v).collect();
            let before: f64 = ledger.values().map(Account::balance).sum();
            let payouts = distribute_profit(&l, rate, &payer_ids, &mut ledger).unwrap();
            let after: f64 = ledger.values().map(Account::balance).sum();
            prop_assert!(relative_gap(before, after) <= 1e-12);
            let credited: f64 = payouts.values().sum();
            let expected = rate * payers as f64;
            prop_assert!((credited - expected).abs() <= 1e-12 * expected.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn termination_pays_out_escrow(
            escrow in 1e-3f64..500.0,
            amounts in prop::collection::vec(1e-3f64..50.0, 1..8),
        ) {
            let ts: Vec<(u32, f64)> = amounts.iter().enumerate().map(|(i, &a)| (i as u32, a)).collect();
            let mut l = listing_for_termination(escrow, &ts);
            let mut ledger: BTreeMap<VehicleId, Account> = ts.iter().map(|&(i, _)| (v(i), Account::new(v(i), 0.0))).collect();
            let out = terminate_event(&mut l, &mut ledger).unwrap();
            let rewarded: f64 = out.rewards.values().sum();
            prop_assert!(relative_gap(rewarded, escrow) <= 1e-12);
        }

        #[test]
        fn affordable_is_monotone_prefix(
            balance in 0.0f64..1e-3,
            extra in 0.0f64..1e-3,
            rate in 1e-6f64..1e-4,
        ) {
            let ls = three_listings();
            let small = select_affordable_notifications(balance, &ls, rate);
            let large = select_affordable_notifications(balance + extra, &ls, rate);
            let ranked = rank_for_notification(&ls);
            prop_assert!(small.len() <= large.len());
            for (i, l) in large.iter().enumerate() {
                prop_assert_eq!(l.id, ranked[i].id);
            }
            prop_assert!(rate * small.len() as f64 <= balance);
        }
    }
}
