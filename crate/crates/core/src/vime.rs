//! Entity-reputation baseline. Observers rate the vehicles whose reports
//! they receive; a noisy classifier with error rate `err` decides whether
//! each report looks bogus, and an observer spreads a report only while it
//! still trusts the sender.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::types::VehicleId;

/// Slack for threshold comparisons so that trust values reached by
/// different sums of the same steps classify identically.
const TRUST_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VimeParams {
    pub err: f64,
    pub delta: f64,
    pub penalty_factor: f64,
    pub initial_trust: f64,
    pub blacklist_threshold: f64,
}

impl Default for VimeParams {
    fn default() -> Self {
        Self {
            err: 0.1,
            delta: 0.05,
            penalty_factor: 4.0,
            initial_trust: 0.5,
            blacklist_threshold: 0.3,
        }
    }
}

impl VimeParams {
    pub fn with_err(err: f64) -> Self {
        Self { err, ..Self::default() }
    }

    fn below(&self, trust: f64) -> bool {
        trust < self.blacklist_threshold - TRUST_EPS
    }

    /// Consecutive judged-bogus reports that take a fresh sender below the
    /// blacklist threshold.
    pub fn threshold_steps(&self) -> u32 {
        let mut t = self.initial_trust;
        let mut steps = 0;
        while !self.below(t) {
            t = (t - self.penalty_factor * self.delta).clamp(0.0, 1.0);
            steps += 1;
            assert!(steps < 10_000, "penalty never reaches the threshold");
        }
        steps
    }
}

/// Returns whether a report is judged bogus: the true label with
/// probability `1 - err`, flipped otherwise.
pub fn classify_message<R: Rng + ?Sized>(is_bogus: bool, err: f64, rng: &mut R) -> bool {
    assert!((0.0..=1.0).contains(&err), "err must lie in [0, 1]");
    if err > 0.0 && rng.random_bool(err) {
        !is_bogus
    } else {
        is_bogus
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityTrust {
    pub observer_id: VehicleId,
    pub subject_id: VehicleId,
    pub trust: f64,
    pub blacklisted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrustScope {
    /// Each observer keeps its own opinion of every sender.
    PerObserver,
    /// One opinion per sender shared by everybody.
    Global,
}

/// Dense trust table over vehicle ids `0..n`.
#[derive(Debug, Clone)]
pub struct TrustTable {
    n: usize,
    scope: TrustScope,
    params: VimeParams,
    trust: Vec<f64>,
    blacklisted: Vec<bool>,
}

impl TrustTable {
    pub fn new(n: usize, scope: TrustScope, params: VimeParams) -> Self {
        let rows = match scope {
            TrustScope::PerObserver => n,
            TrustScope::Global => 1,
        };
        Self {
            n,
            scope,
            params,
            trust: vec![params.initial_trust; rows * n],
            blacklisted: vec![false; rows * n],
        }
    }

    pub fn params(&self) -> &VimeParams {
        &self.params
    }

    fn index(&self, observer: VehicleId, subject: VehicleId) -> usize {
        let s = subject.0 as usize;
        assert!(s < self.n, "subject {subject} outside the table");
        match self.scope {
            TrustScope::PerObserver => {
                let o = observer.0 as usize;
                assert!(o < self.n, "observer {observer} outside the table");
                o * self.n + s
            }
            TrustScope::Global => s,
        }
    }

    pub fn get(&self, observer: VehicleId, subject: VehicleId) -> EntityTrust {
        let i = self.index(observer, subject);
        EntityTrust {
            observer_id: observer,
            subject_id: subject,
            trust: self.trust[i],
            blacklisted: self.blacklisted[i],
        }
    }

    pub fn trust(&self, observer: VehicleId, subject: VehicleId) -> f64 {
        self.trust[self.index(observer, subject)]
    }

    pub fn is_blacklisted(&self, observer: VehicleId, subject: VehicleId) -> bool {
        self.blacklisted[self.index(observer, subject)]
    }

    /// Applies one judgement. Returns whether the observer spreads the
    /// report. A blacklisted sender is ignored without any update.
    pub fn observe(&mut self, observer: VehicleId, subject: VehicleId, judged_bogus: bool) -> bool {
        let i = self.index(observer, subject);
        if self.blacklisted[i] {
            return false;
        }
        let p = self.params;
        let step = if judged_bogus { -p.penalty_factor * p.delta } else { p.delta };
        let t = (self.trust[i] + step).clamp(0.0, 1.0);
        self.trust[i] = t;
        if p.below(t) {
            self.blacklisted[i] = true;
            return false;
        }
        !judged_bogus
    }

    /// Mean trust the given observers place in `subject`.
    pub fn mean_trust<I>(&self, observers: I, subject: VehicleId) -> f64
    where
        I: IntoIterator<Item = VehicleId>,
    {
        let (mut sum, mut count) = (0.0, 0usize);
        for o in observers {
            if o != subject || self.scope == TrustScope::Global {
                sum += self.trust(o, subject);
                count += 1;
            }
        }
        if count == 0 {
            self.params.initial_trust
        } else {
            sum / count as f64
        }
    }
}

/// A report as seen by the reputation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub sender: VehicleId,
    pub is_bogus: bool,
    /// Neighbours that receive the report, in id order.
    pub observers: Vec<VehicleId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    /// Indices of observations spread by at least one observer.
    pub accepted: Vec<usize>,
    pub judgements: usize,
    pub newly_blacklisted: usize,
}

/// One round of classification and trust updates. Observations are
/// processed in slice order, observers in the listed order.
pub fn vime_step<R: Rng + ?Sized>(
    observations: &[Observation],
    table: &mut TrustTable,
    rng: &mut R,
) -> StepOutcome {
    let err = table.params.err;
    let mut out = StepOutcome::default();
    for (idx, obs) in observations.iter().enumerate() {
        let mut spread = false;
        for &o in &obs.observers {
            if o == obs.sender || table.is_blacklisted(o, obs.sender) {
                continue;
            }
            let judged = classify_message(obs.is_bogus, err, rng);
            out.judgements += 1;
            if table.observe(o, obs.sender, judged) {
                spread = true;
            } else if table.is_blacklisted(o, obs.sender) {
                out.newly_blacklisted += 1;
            }
        }
        if spread {
            out.accepted.push(idx);
        }
    }
    out
}
