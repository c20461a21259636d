//! Zoning-market choreography: zone entry and exit against the bank,
//! report correlation, existence verification by `k` distinct vehicles,
//! broadcast, and termination by `m` distinct vehicles.
//!
//! Every message the market exchanges can be recorded into a trace whose
//! per-vehicle sessions follow the numbered steps
//!
//! ```text
//! ① zone_enter  ② account_info  ③ account_created  ④ ack_start_trading
//! (⑤ event_report | ⑥ event_broadcast/event_withdraw)*
//! ⑦ zone_exit   ⑧ account_upload, with ⑨ post_exit_settlement before or after ⑧
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{
    self, affordable_count, credit_profit, notification_rate, rank_for_notification, Account,
    EventListing, Ledger, ListingStatus, MarketError, StakeOutcome, TerminationPayout,
    TradingPlan,
};
use crate::types::{ring_distance, EventAttr, ListingId, Tick, Vcash, VehicleId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("vehicle {0} is already in a trading session")]
    DuplicateEntry(VehicleId),
    #[error("vehicle {0} has no trading session")]
    NoSession(VehicleId),
    #[error("unknown listing {0}")]
    UnknownListing(ListingId),
    #[error("listing {listing} is {status:?}, operation needs {expected:?}")]
    UnexpectedStatus {
        listing: ListingId,
        status: ListingStatus,
        expected: ListingStatus,
    },
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Claim {
    Exists,
    Nonexistent,
}

/// A vehicle's event message to the zoning market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub vehicle_id: VehicleId,
    pub location: f64,
    pub attr: EventAttr,
    pub claim: Claim,
    pub time: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    ZoneEnter,
    AccountInfo,
    AccountCreated,
    AckStartTrading,
    EventReport,
    EventBroadcast,
    EventWithdraw,
    ZoneExit,
    AccountUpload,
    PostExitSettlement,
}

impl MessageKind {
    /// Step number in the zone choreography.
    pub fn step(self) -> u8 {
        match self {
            MessageKind::ZoneEnter => 1,
            MessageKind::AccountInfo => 2,
            MessageKind::AccountCreated => 3,
            MessageKind::AckStartTrading => 4,
            MessageKind::EventReport => 5,
            MessageKind::EventBroadcast | MessageKind::EventWithdraw => 6,
            MessageKind::ZoneExit => 7,
            MessageKind::AccountUpload => 8,
            MessageKind::PostExitSettlement => 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Vehicle(VehicleId),
    Market,
    Bank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Identity {
        vehicle_id: VehicleId,
    },
    AccountSnapshot {
        vehicle_id: VehicleId,
        balance: Vcash,
        created: bool,
    },
    EventReport {
        report: Report,
    },
    ListingNotice {
        listing_id: ListingId,
        location: f64,
        attr: EventAttr,
    },
    Withdraw {
        listing_id: ListingId,
    },
    Settlement {
        vehicle_id: VehicleId,
        amount: Vcash,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub time: Tick,
    pub kind: MessageKind,
    pub sender: Party,
    pub recipient: Party,
    pub payload: Payload,
}

impl Message {
    /// The vehicle whose session this message belongs to.
    pub fn subject(&self) -> Option<VehicleId> {
        match (&self.sender, &self.recipient, &self.payload) {
            (Party::Vehicle(v), _, _) | (_, Party::Vehicle(v), _) => Some(*v),
            (_, _, Payload::Identity { vehicle_id })
            | (_, _, Payload::AccountSnapshot { vehicle_id, .. })
            | (_, _, Payload::Settlement { vehicle_id, .. }) => Some(*vehicle_id),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("vehicle {vehicle}: step {step} at message {index} breaks the session order")]
pub struct TraceError {
    pub vehicle: VehicleId,
    pub index: usize,
    pub step: u8,
}

/// Checks that the messages concerning `vehicle` form a sequence of
/// complete sessions.
pub fn validate_session_trace(messages: &[Message], vehicle: VehicleId) -> Result<(), TraceError> {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Outside { uploaded: bool, ever_entered: bool },
        Entered,
        Requested,
        Replied,
        Trading,
    }
    let mut state = State::Outside { uploaded: true, ever_entered: false };
    for (index, m) in messages.iter().enumerate() {
        if m.subject() != Some(vehicle) {
            continue;
        }
        let step = m.kind.step();
        let err = TraceError { vehicle, index, step };
        state = match (state, step) {
            (State::Outside { uploaded: true, .. }, 1) => State::Entered,
            (State::Entered, 2) => State::Requested,
            (State::Requested, 3) => State::Replied,
            (State::Replied, 4) => State::Trading,
            (State::Trading, 5 | 6) => State::Trading,
            (State::Trading, 7) => State::Outside { uploaded: false, ever_entered: true },
            (State::Outside { uploaded: false, ever_entered: true }, 8) => {
                State::Outside { uploaded: true, ever_entered: true }
            }
            (s @ State::Outside { ever_entered: true, .. }, 9) => s,
            _ => return Err(err),
        };
    }
    match state {
        State::Outside { uploaded: true, .. } => Ok(()),
        _ => Err(TraceError {
            vehicle,
            index: messages.len(),
            step: 0,
        }),
    }
}

/// Serialises a trace as JSON lines.
pub fn trace_to_jsonl(messages: &[Message]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(&serde_json::to_string(m).expect("trace messages serialise"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correlation {
    Matched(ListingId),
    New,
}

/// Finds the trading listing a report refers to: same attribute, within
/// `tolerance` metres on the ring. The closest wins, ties to the lowest id.
pub fn correlate_report<'a, I>(
    report: &Report,
    listings: I,
    tolerance: f64,
    road_length: f64,
) -> Correlation
where
    I: IntoIterator<Item = &'a EventListing>,
{
    let mut best: Option<(f64, ListingId)> = None;
    for l in listings {
        if !l.is_trading() || l.attr != report.attr {
            continue;
        }
        let d = ring_distance(l.location, report.location, road_length);
        if d > tolerance {
            continue;
        }
        match best {
            Some((bd, bid)) if bd < d || (bd == d && bid < l.id) => {}
            _ => best = Some((d, l.id)),
        }
    }
    best.map_or(Correlation::New, |(_, id)| Correlation::Matched(id))
}

/// Central account store; accounts persist across zone visits.
#[derive(Debug, Clone, Default)]
pub struct Bank {
    accounts: BTreeMap<VehicleId, Account>,
    initial_balance: Vcash,
}

impl Bank {
    pub fn new(initial_balance: Vcash) -> Self {
        Self {
            accounts: BTreeMap::new(),
            initial_balance,
        }
    }

    /// Returns the stored account, or opens one with the initial balance.
    fn check_out(&mut self, vehicle: VehicleId) -> (Account, bool) {
        match self.accounts.remove(&vehicle) {
            Some(a) => (a, false),
            None => (Account::new(vehicle, self.initial_balance), true),
        }
    }

    fn store(&mut self, account: Account) {
        self.accounts.insert(account.vehicle_id, account);
    }

    pub fn balance_of(&self, vehicle: VehicleId) -> Option<Vcash> {
        self.accounts.get(&vehicle).map(Account::balance)
    }
}

#[derive(Debug, Clone)]
struct Session {
    account: Account,
    /// Set once the balance cannot cover one notification; cleared by any credit.
    starved: bool,
}

/// Accounts reachable by the market: live sessions first, the bank for
/// vehicles that have left.
#[derive(Debug, Clone)]
struct Accounts {
    bank: Bank,
    sessions: BTreeMap<VehicleId, Session>,
    post_exit_credits: Vec<(VehicleId, Vcash)>,
}

impl Ledger for Accounts {
    fn balance_of(&self, vehicle: VehicleId) -> Option<Vcash> {
        self.sessions
            .get(&vehicle)
            .map(|s| s.account.balance())
            .or_else(|| self.bank.balance_of(vehicle))
    }

    fn debit(&mut self, vehicle: VehicleId, amount: Vcash) -> Result<(), MarketError> {
        match self.sessions.get_mut(&vehicle) {
            Some(s) => s.account.debit(amount),
            None => self.bank.accounts.debit(vehicle, amount),
        }
    }

    fn credit(&mut self, vehicle: VehicleId, amount: Vcash) -> Result<(), MarketError> {
        match self.sessions.get_mut(&vehicle) {
            Some(s) => {
                s.starved = false;
                s.account.credit(amount)
            }
            None => {
                self.bank.accounts.credit(vehicle, amount)?;
                self.post_exit_credits.push((vehicle, amount));
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ListingMeta {
    verified_at: Option<Tick>,
    /// Distinct vehicles restating existence while a termination claim is pending.
    reconfirmers: BTreeSet<VehicleId>,
}

/// Market-to-vehicle notification.
#[derive(Debug, Clone, PartialEq)]
pub enum Notice {
    Announce {
        listing_id: ListingId,
        location: f64,
        attr: EventAttr,
    },
    Withdraw {
        listing_id: ListingId,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Notification {
    pub recipient: VehicleId,
    pub notice: Notice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryAck {
    pub balance: Vcash,
    pub created: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReportOutcome {
    Staked {
        listing: ListingId,
        amount: Vcash,
        created: bool,
    },
    /// Investment below threshold; the report had no effect.
    Ignored { listing: Option<ListingId> },
    /// A non-existence claim that matches no verified listing.
    Rejected,
}

impl ReportOutcome {
    pub fn listing(&self) -> Option<ListingId> {
        match *self {
            ReportOutcome::Staked { listing, .. } => Some(listing),
            ReportOutcome::Ignored { listing } => listing,
            ReportOutcome::Rejected => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TerminationCheck {
    Unchanged,
    Terminated(TerminationPayout),
    /// Pending claims were proven wrong; their total went to the escrow.
    Expropriated(Vcash),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SettleSummary {
    pub verified: Vec<ListingId>,
    pub terminated: Vec<(ListingId, TerminationPayout)>,
    pub expropriated: Vec<(ListingId, Vcash)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChargeSummary {
    pub rate: Vcash,
    pub chargeable: usize,
    /// Notifications delivered per in-zone vehicle this second.
    pub notifications: BTreeMap<VehicleId, usize>,
    pub collected: Vcash,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    pub road_length: f64,
    pub location_tolerance: f64,
    pub initial_balance: Vcash,
}

/// One zoning market with its bank.
#[derive(Debug, Clone)]
pub struct ZoningMarket {
    plan: TradingPlan,
    params: MarketParams,
    accounts: Accounts,
    listings: BTreeMap<ListingId, EventListing>,
    meta: BTreeMap<ListingId, ListingMeta>,
    next_listing: u64,
    touched: BTreeSet<ListingId>,
    outbox: Vec<Notification>,
    trace: Option<Vec<Message>>,
}

impl ZoningMarket {
    pub fn new(plan: TradingPlan, params: MarketParams, tracing: bool) -> Self {
        let bank = Bank::new(params.initial_balance);
        Self {
            plan,
            params,
            accounts: Accounts {
                bank,
                sessions: BTreeMap::new(),
                post_exit_credits: Vec::new(),
            },
            listings: BTreeMap::new(),
            meta: BTreeMap::new(),
            next_listing: 0,
            touched: BTreeSet::new(),
            outbox: Vec::new(),
            trace: tracing.then(Vec::new),
        }
    }

    pub fn plan(&self) -> &TradingPlan {
        &self.plan
    }

    fn record(&mut self, time: Tick, kind: MessageKind, sender: Party, recipient: Party, payload: Payload) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(Message {
                time,
                kind,
                sender,
                recipient,
                payload,
            });
        }
    }

    fn flush_post_exit_credits(&mut self, now: Tick) {
        let credits = std::mem::take(&mut self.accounts.post_exit_credits);
        for (vehicle_id, amount) in credits {
            self.record(
                now,
                MessageKind::PostExitSettlement,
                Party::Market,
                Party::Bank,
                Payload::Settlement { vehicle_id, amount },
            );
        }
    }

    fn notify(&mut self, now: Tick, recipient: VehicleId, notice: Notice) {
        let (kind, payload) = match &notice {
            Notice::Announce {
                listing_id,
                location,
                attr,
            } => (
                MessageKind::EventBroadcast,
                Payload::ListingNotice {
                    listing_id: *listing_id,
                    location: *location,
                    attr: *attr,
                },
            ),
            Notice::Withdraw { listing_id } => (
                MessageKind::EventWithdraw,
                Payload::Withdraw {
                    listing_id: *listing_id,
                },
            ),
        };
        self.record(now, kind, Party::Market, Party::Vehicle(recipient), payload);
        self.outbox.push(Notification { recipient, notice });
    }

    fn broadcast(&mut self, now: Tick, notice: Notice) {
        let recipients: Vec<VehicleId> = self.accounts.sessions.keys().copied().collect();
        for r in recipients {
            self.notify(now, r, notice.clone());
        }
    }

    /// Steps ① to ④, then re-broadcasts every verified listing to the newcomer.
    pub fn handle_zone_entry(&mut self, vehicle: VehicleId, now: Tick) -> Result<EntryAck, ProtocolError> {
        if self.accounts.sessions.contains_key(&vehicle) {
            return Err(ProtocolError::DuplicateEntry(vehicle));
        }
        let me = Party::Vehicle(vehicle);
        self.record(now, MessageKind::ZoneEnter, me, Party::Market, Payload::Identity { vehicle_id: vehicle });
        self.record(now, MessageKind::AccountInfo, Party::Market, Party::Bank, Payload::Identity { vehicle_id: vehicle });
        let (account, created) = self.accounts.bank.check_out(vehicle);
        let balance = account.balance();
        self.record(
            now,
            MessageKind::AccountCreated,
            Party::Bank,
            Party::Market,
            Payload::AccountSnapshot { vehicle_id: vehicle, balance, created },
        );
        self.accounts.sessions.insert(vehicle, Session { account, starved: false });
        self.record(
            now,
            MessageKind::AckStartTrading,
            Party::Market,
            me,
            Payload::AccountSnapshot { vehicle_id: vehicle, balance, created },
        );
        let verified: Vec<Notice> = self
            .listings
            .values()
            .filter(|l| l.status() == ListingStatus::Verified)
            .map(|l| Notice::Announce {
                listing_id: l.id,
                location: l.location,
                attr: l.attr,
            })
            .collect();
        for n in verified {
            self.notify(now, vehicle, n);
        }
        Ok(EntryAck { balance, created })
    }

    /// Steps ⑦ and ⑧. The vehicle's stakes stay in their listings and keep
    /// settling into its bank account.
    pub fn handle_zone_exit(&mut self, vehicle: VehicleId, now: Tick) -> Result<(), ProtocolError> {
        let session = self
            .accounts
            .sessions
            .remove(&vehicle)
            .ok_or(ProtocolError::NoSession(vehicle))?;
        self.record(now, MessageKind::ZoneExit, Party::Vehicle(vehicle), Party::Market, Payload::Identity { vehicle_id: vehicle });
        let balance = session.account.balance();
        self.accounts.bank.store(session.account);
        self.record(
            now,
            MessageKind::AccountUpload,
            Party::Market,
            Party::Bank,
            Payload::AccountSnapshot { vehicle_id: vehicle, balance, created: false },
        );
        Ok(())
    }

    pub fn in_session(&self, vehicle: VehicleId) -> bool {
        self.accounts.sessions.contains_key(&vehicle)
    }

    pub fn session_ids(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.accounts.sessions.keys().copied()
    }

    /// Step ⑤: correlates the report and stakes it.
    pub fn submit_report(&mut self, report: &Report) -> Result<ReportOutcome, ProtocolError> {
        let vehicle = report.vehicle_id;
        if !self.accounts.sessions.contains_key(&vehicle) {
            return Err(ProtocolError::NoSession(vehicle));
        }
        self.record(
            report.time,
            MessageKind::EventReport,
            Party::Vehicle(vehicle),
            Party::Market,
            Payload::EventReport { report: report.clone() },
        );
        let tol = self.params.location_tolerance;
        let len = self.params.road_length;
        match report.claim {
            Claim::Exists => {
                let correlation = correlate_report(report, self.listings.values(), tol, len);
                let account = &mut self
                    .accounts
                    .sessions
                    .get_mut(&vehicle)
                    .expect("session checked above")
                    .account;
                match correlation {
                    Correlation::Matched(id) => {
                        let listing = self.listings.get_mut(&id).expect("correlated listing exists");
                        let outcome = market::try_stake_announcement(account, listing, &self.plan)?;
                        match outcome {
                            StakeOutcome::Accepted { amount } => {
                                if !listing.termination_stakes().is_empty() {
                                    self.meta.entry(id).or_default().reconfirmers.insert(vehicle);
                                }
                                self.touched.insert(id);
                                Ok(ReportOutcome::Staked { listing: id, amount, created: false })
                            }
                            StakeOutcome::Ignored { .. } => Ok(ReportOutcome::Ignored { listing: Some(id) }),
                        }
                    }
                    Correlation::New => {
                        let id = ListingId(self.next_listing);
                        let mut listing = EventListing::new(id, report.location, report.attr, report.time);
                        match market::try_stake_announcement(account, &mut listing, &self.plan)? {
                            StakeOutcome::Accepted { amount } => {
                                self.next_listing += 1;
                                self.listings.insert(id, listing);
                                self.meta.insert(id, ListingMeta::default());
                                self.touched.insert(id);
                                Ok(ReportOutcome::Staked { listing: id, amount, created: true })
                            }
                            StakeOutcome::Ignored { .. } => Ok(ReportOutcome::Ignored { listing: None }),
                        }
                    }
                }
            }
            Claim::Nonexistent => {
                let verified = self
                    .listings
                    .values()
                    .filter(|l| l.status() == ListingStatus::Verified);
                let Correlation::Matched(id) = correlate_report(report, verified, tol, len) else {
                    return Ok(ReportOutcome::Rejected);
                };
                let account = &mut self
                    .accounts
                    .sessions
                    .get_mut(&vehicle)
                    .expect("session checked above")
                    .account;
                let listing = self.listings.get_mut(&id).expect("correlated listing exists");
                let had_claims = !listing.termination_stakes().is_empty();
                match market::try_stake_termination(account, listing, &self.plan)? {
                    StakeOutcome::Accepted { amount } => {
                        if !had_claims {
                            self.meta.entry(id).or_default().reconfirmers.clear();
                        }
                        self.touched.insert(id);
                        Ok(ReportOutcome::Staked { listing: id, amount, created: false })
                    }
                    StakeOutcome::Ignored { .. } => Ok(ReportOutcome::Ignored { listing: Some(id) }),
                }
            }
        }
    }

    /// Verifies a pending listing once `k_verify` distinct vehicles back it,
    /// broadcasting it to the zone (step ⑥).
    pub fn check_verification(&mut self, id: ListingId, now: Tick) -> Result<bool, ProtocolError> {
        let k = self.plan.k_verify;
        let listing = self.listings.get_mut(&id).ok_or(ProtocolError::UnknownListing(id))?;
        if listing.status() != ListingStatus::Pending {
            return Err(ProtocolError::UnexpectedStatus {
                listing: id,
                status: listing.status(),
                expected: ListingStatus::Pending,
            });
        }
        if listing.announce_stakes().len() < k {
            return Ok(false);
        }
        listing.mark_verified()?;
        let notice = Notice::Announce {
            listing_id: id,
            location: listing.location,
            attr: listing.attr,
        };
        self.meta.entry(id).or_default().verified_at = Some(now);
        self.broadcast(now, notice);
        Ok(true)
    }

    /// Terminates a verified listing once `m_terminate` distinct vehicles
    /// claim it is gone. If the event is in fact live and at least
    /// `k_verify` vehicles restated its existence meanwhile, the pending
    /// claims are expropriated instead.
    pub fn check_termination(
        &mut self,
        id: ListingId,
        event_live: bool,
        now: Tick,
    ) -> Result<TerminationCheck, ProtocolError> {
        let (k, m) = (self.plan.k_verify, self.plan.m_terminate);
        let listing = self.listings.get_mut(&id).ok_or(ProtocolError::UnknownListing(id))?;
        if listing.status() != ListingStatus::Verified {
            return Err(ProtocolError::UnexpectedStatus {
                listing: id,
                status: listing.status(),
                expected: ListingStatus::Verified,
            });
        }
        let claims = listing.termination_stakes().len();
        if claims == 0 {
            return Ok(TerminationCheck::Unchanged);
        }
        let meta = self.meta.entry(id).or_default();
        if event_live && meta.reconfirmers.len() >= k {
            let claimants: Vec<VehicleId> =
                listing.termination_stakes().iter().map(|s| s.vehicle_id).collect();
            let mut total = 0.0;
            for c in claimants {
                total += market::expropriate_false_verification(listing, c)?;
            }
            meta.reconfirmers.clear();
            return Ok(TerminationCheck::Expropriated(total));
        }
        if claims < m {
            return Ok(TerminationCheck::Unchanged);
        }
        let payout = market::terminate_event(listing, &mut self.accounts)?;
        self.flush_post_exit_credits(now);
        self.broadcast(now, Notice::Withdraw { listing_id: id });
        Ok(TerminationCheck::Terminated(payout))
    }

    /// Runs verification and termination checks on every listing touched
    /// by reports since the last call, in id order.
    pub fn settle<F>(&mut self, now: Tick, mut event_live: F) -> Result<SettleSummary, ProtocolError>
    where
        F: FnMut(&EventListing) -> bool,
    {
        let mut summary = SettleSummary::default();
        let touched = std::mem::take(&mut self.touched);
        for id in touched {
            let Some(listing) = self.listings.get(&id) else { continue };
            match listing.status() {
                ListingStatus::Pending => {
                    if self.check_verification(id, now)? {
                        summary.verified.push(id);
                    }
                }
                ListingStatus::Verified => {
                    let live = event_live(listing);
                    match self.check_termination(id, live, now)? {
                        TerminationCheck::Unchanged => {}
                        TerminationCheck::Terminated(p) => summary.terminated.push((id, p)),
                        TerminationCheck::Expropriated(a) => summary.expropriated.push((id, a)),
                    }
                }
                ListingStatus::Terminated => {}
            }
        }
        Ok(summary)
    }

    /// One second of notification charging. Listings verified before `now`
    /// are offered to every in-zone vehicle; each pays for the prefix of
    /// the charging order it can afford, and each listing's proceeds go to
    /// its stakeholders. A vehicle whose balance has fallen below the rate
    /// is cut off until it earns again.
    pub fn charge_tick(&mut self, now: Tick) -> Result<ChargeSummary, ProtocolError> {
        let meta = &self.meta;
        let chargeable = self.listings.values().filter(|l| {
            l.status() == ListingStatus::Verified
                && meta.get(&l.id).and_then(|m| m.verified_at).is_some_and(|t| t < now)
        });
        let ranked = rank_for_notification(chargeable);
        let rate = notification_rate(self.plan.c0, ranked.len());
        let mut summary = ChargeSummary {
            rate,
            chargeable: ranked.len(),
            ..ChargeSummary::default()
        };
        let mut payers = vec![0usize; ranked.len()];
        for (vehicle, session) in self.accounts.sessions.iter_mut() {
            if session.account.balance() < rate {
                session.starved = true;
            }
            let n = if ranked.is_empty() || session.starved {
                0
            } else {
                affordable_count(session.account.balance(), ranked.len(), rate)
            };
            if n > 0 {
                let fee = rate * n as f64;
                session.account.debit(fee)?;
                summary.collected += fee;
                for p in payers.iter_mut().take(n) {
                    *p += 1;
                }
            }
            summary.notifications.insert(*vehicle, n);
        }
        for (listing, count) in ranked.iter().zip(payers) {
            if count > 0 {
                credit_profit(listing, rate * count as f64, &mut self.accounts)?;
            }
        }
        self.flush_post_exit_credits(now);
        Ok(summary)
    }

    pub fn drain_notifications(&mut self) -> Vec<Notification> {
        std::mem::take(&mut self.outbox)
    }

    pub fn listing(&self, id: ListingId) -> Option<&EventListing> {
        self.listings.get(&id)
    }

    pub fn listings(&self) -> impl Iterator<Item = &EventListing> {
        self.listings.values()
    }

    pub fn verified_at(&self, id: ListingId) -> Option<Tick> {
        self.meta.get(&id).and_then(|m| m.verified_at)
    }

    pub fn balance_of(&self, vehicle: VehicleId) -> Option<Vcash> {
        self.accounts.balance_of(vehicle)
    }

    /// All cash in accounts, sessions and listings.
    pub fn total_cash(&self) -> Vcash {
        let sessions: Vcash = self.accounts.sessions.values().map(|s| s.account.balance()).sum();
        let bank: Vcash = self.accounts.bank.accounts.values().map(Account::balance).sum();
        let listings: Vcash = self.listings.values().map(EventListing::held).sum();
        sessions + bank + listings
    }

    pub fn trace(&self) -> Option<&[Message]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Option<Vec<Message>> {
        self.trace.take()
    }
}
