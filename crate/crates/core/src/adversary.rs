//! Attack harness: a health authority that reuses a target's id to learn
//! their contacts, and a location provider that guesses positives from how
//! often ids recur across requests.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::geo::LocationStore;
use crate::ha::{CompliantGrouping, GroupingStrategy, RoundRecord};
use crate::intermediaries::PopulationRegistry;
use crate::model::{ContactPolicy, ContactTracingRequest, GroupingParams, SimTime, TransactionId, UserId, SECONDS_PER_DAY};
use crate::scenario::Deployment;
use crate::synthgen::derived_rng;

/// Behaves like the compliant HA, except that the target is slipped into the
/// infected groups of the first `times` rounds regardless of the ledger.
#[derive(Debug, Clone)]
pub struct TargetedGrouping {
    inner: CompliantGrouping,
    target: UserId,
    times: usize,
    placed: usize,
}

impl TargetedGrouping {
    pub fn new(target: UserId, times: usize) -> Self {
        TargetedGrouping {
            inner: CompliantGrouping::default(),
            target,
            times,
            placed: 0,
        }
    }

    pub fn target(&self) -> &UserId {
        &self.target
    }

    pub fn placed(&self) -> usize {
        self.placed
    }
}

impl GroupingStrategy for TargetedGrouping {
    fn admit(&mut self, positives: Vec<UserId>) -> (Vec<UserId>, Vec<UserId>) {
        self.inner.admit(positives)
    }

    fn select(&mut self, round: u64, pending: &[UserId], capacity: usize) -> Vec<UserId> {
        if self.placed >= self.times || capacity == 0 {
            return self.inner.select(round, pending, capacity);
        }
        let rest: Vec<UserId> = pending.iter().filter(|p| **p != self.target).cloned().collect();
        let mut out = vec![self.target.clone()];
        out.extend(self.inner.select(round, &rest, capacity - 1));
        out
    }

    fn commit(&mut self, infected: &[UserId]) {
        if infected.contains(&self.target) {
            self.placed += 1;
        }
        let others: Vec<UserId> = infected.iter().filter(|p| **p != self.target).cloned().collect();
        self.inner.commit(&others);
    }

    fn force_infected(&self) -> bool {
        self.placed < self.times
    }
}

/// One infected group the target was placed in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub tx: TransactionId,
    pub at: SimTime,
    pub group_index: u32,
    pub co_members: Vec<UserId>,
    pub risk_set: BTreeSet<UserId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetedOutcome {
    pub target: UserId,
    pub transactions: Vec<TransactionId>,
    pub placements: Vec<Placement>,
    /// Intersection of the decrypted risk sets.
    pub inferred: BTreeSet<UserId>,
    /// The target's true contacts visible in every placement.
    pub expected: BTreeSet<UserId>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub covers_expected: bool,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub detected_day: Option<u32>,
}

/// Intersects the decrypted risk sets of the groups holding `target`.
pub fn targeted_inference(rounds: &[RoundRecord], target: &UserId) -> TargetedOutcome {
    let mut placements = Vec::new();
    for rec in rounds {
        let Some(report) = &rec.report else { continue };
        for (gi, members) in rec.infected_groups() {
            if !members.contains(target) {
                continue;
            }
            let Some(g) = report.per_infected_group.iter().find(|g| g.group_index == gi) else {
                continue;
            };
            placements.push(Placement {
                tx: rec.tx,
                at: rec.started_at,
                group_index: gi,
                co_members: members.iter().filter(|m| *m != target).cloned().collect(),
                risk_set: g.result.risk_contacts.clone(),
            });
        }
    }
    let inferred = match placements.split_first() {
        Some((first, rest)) if !rest.is_empty() => rest.iter().fold(first.risk_set.clone(), |acc, p| {
            acc.intersection(&p.risk_set).cloned().collect()
        }),
        _ => BTreeSet::new(),
    };
    TargetedOutcome {
        target: target.clone(),
        transactions: placements.iter().map(|p| p.tx).collect(),
        placements,
        inferred,
        expected: BTreeSet::new(),
        true_positives: 0,
        false_positives: 0,
        covers_expected: false,
        precision: None,
        recall: None,
        detected_day: None,
    }
}

/// Fills in the ground-truth side: the target's contacts present in every
/// placement's window, minus anyone who shared one of its groups.
pub fn targeted_expected(outcome: &mut TargetedOutcome, truth: &LocationStore, policy: &ContactPolicy) {
    if outcome.placements.len() < 2 {
        return;
    }
    let excluded: BTreeSet<&UserId> = outcome.placements.iter().flat_map(|p| &p.co_members).collect();
    let mut expected: Option<BTreeSet<UserId>> = None;
    for p in &outcome.placements {
        let here = truth.risk_contacts(&outcome.target, policy.lookback_window(p.at), policy);
        expected = Some(match expected {
            None => here,
            Some(e) => e.intersection(&here).cloned().collect(),
        });
    }
    let expected: BTreeSet<UserId> = expected
        .unwrap_or_default()
        .into_iter()
        .filter(|c| !excluded.contains(c))
        .collect();
    let tp = outcome.inferred.intersection(&expected).count();
    outcome.true_positives = tp;
    outcome.false_positives = outcome.inferred.len() - tp;
    outcome.covers_expected = tp == expected.len();
    outcome.precision = (!outcome.inferred.is_empty()).then(|| tp as f64 / outcome.inferred.len() as f64);
    outcome.recall = (!expected.is_empty()).then(|| tp as f64 / expected.len() as f64);
    outcome.expected = expected;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidOutcome {
    pub rounds: usize,
    pub distinct_ids: usize,
    pub infected: usize,
    pub guessed: usize,
    pub correct: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Precision of guessing every id: infected / distinct.
    pub base_rate: Option<f64>,
}

/// Guesses that every id seen exactly once across the history is a positive.
pub fn singleton_attack(history: &[ContactTracingRequest], infected: &BTreeSet<UserId>) -> ReidOutcome {
    let mut freq: BTreeMap<&UserId, usize> = BTreeMap::new();
    for req in history {
        for id in req.all_ids() {
            *freq.entry(id).or_default() += 1;
        }
    }
    let guessed: Vec<&UserId> = freq.iter().filter(|(_, &c)| c == 1).map(|(id, _)| *id).collect();
    let correct = guessed.iter().filter(|id| infected.contains(**id)).count();
    let infected_seen = infected.iter().filter(|id| freq.contains_key(id)).count();
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    ReidOutcome {
        rounds: history.len(),
        distinct_ids: freq.len(),
        infected: infected_seen,
        guessed: guessed.len(),
        correct,
        precision: ratio(correct, guessed.len()),
        recall: ratio(correct, infected_seen),
        base_rate: ratio(infected_seen, freq.len()),
    }
}

/// Setup for the re-identification Monte-Carlo study. Traces play no part in
/// the attack, so the LP holds none.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidExperiment {
    pub population: usize,
    pub rounds: u32,
    pub positives_per_round: usize,
    pub grouping: GroupingParams,
}

impl ReidExperiment {
    /// An HA that never reuses ids and never sends decoys.
    pub fn naive(mut self) -> Self {
        self.grouping.reuse_fraction = 0.0;
        self.grouping.decoy_probability = 0.0;
        self
    }
}

impl Default for ReidExperiment {
    /// The registry is large enough that fresh IDP draws rarely pick the
    /// same person twice, as with a national numbering plan.
    fn default() -> Self {
        ReidExperiment {
            population: 100_000,
            rounds: 30,
            positives_per_round: 2,
            grouping: GroupingParams::default(),
        }
    }
}

pub fn reid_trial(exp: &ReidExperiment, seed: u64) -> ReidOutcome {
    let ids: Vec<UserId> = (0..exp.population as u64).map(UserId::synthetic).collect();
    let policy = ContactPolicy::default();
    let store = Arc::new(LocationStore::ingest(std::iter::empty(), &policy));
    let mut dep = Deployment::new(
        seed,
        PopulationRegistry::new(ids.iter().cloned()),
        store,
        policy,
        exp.grouping.clone(),
        CompliantGrouping::default(),
    );
    let mut never = ids;
    let mut rng = derived_rng(seed, "reid-positives", 0);
    never.shuffle(&mut rng);
    for day in 0..exp.rounds {
        let n = exp.positives_per_round.min(never.len());
        let positives = never.split_off(never.len() - n);
        if let Err(e) = dep.round(i64::from(day + 1) * SECONDS_PER_DAY, positives) {
            log::warn!("re-id trial {seed}, round {day}: {e}");
        }
    }
    let infected: BTreeSet<UserId> = dep
        .ha
        .rounds()
        .iter()
        .filter(|r| r.request.is_some())
        .flat_map(|r| r.infected_ids.iter().cloned())
        .collect();
    singleton_attack(&dep.observed_requests(), &infected)
}

/// Sample mean with a 95% normal-approximation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub n: usize,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl MeanCi {
    pub fn of(xs: &[f64]) -> MeanCi {
        let n = xs.len();
        if n == 0 {
            return MeanCi {
                n,
                mean: f64::NAN,
                lo: f64::NAN,
                hi: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let half = 1.96 * (var / n as f64).sqrt();
        MeanCi {
            n,
            mean,
            lo: mean - half,
            hi: mean + half,
        }
    }

    pub fn overlaps(&self, other: &MeanCi) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidStudy {
    pub trials: Vec<ReidOutcome>,
    pub precision: MeanCi,
    pub base_rate: MeanCi,
    /// Mean precision minus mean base rate.
    pub margin: f64,
}

impl ReidStudy {
    pub fn indistinguishable(&self) -> bool {
        self.precision.overlaps(&self.base_rate)
    }
}

pub fn reid_study(exp: &ReidExperiment, seeds: impl IntoIterator<Item = u64>) -> ReidStudy {
    let trials: Vec<ReidOutcome> = seeds.into_iter().map(|s| reid_trial(exp, s)).collect();
    let prec: Vec<f64> = trials.iter().filter_map(|t| t.precision).collect();
    let base: Vec<f64> = trials.iter().filter_map(|t| t.base_rate).collect();
    let precision = MeanCi::of(&prec);
    let base_rate = MeanCi::of(&base);
    ReidStudy {
        margin: precision.mean - base_rate.mean,
        trials,
        precision,
        base_rate,
    }
}
