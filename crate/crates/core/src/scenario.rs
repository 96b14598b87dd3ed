//! Scenario runner: wires the four parties over the simulated network, runs
//! one tracing round per simulated day with a daily audit, and scores the
//! HA's reports against ground truth computed on noiseless traces.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{singleton_attack, targeted_expected, targeted_inference, ReidOutcome, TargetedGrouping, TargetedOutcome};
use crate::auditor::{DailyAudit, DailyAuditor};
use crate::crypto::{decrypt_group, simulation_keys};
use crate::formats::to_jsonl;
use crate::geo::{mix_distributions, total_variation, LocationStore};
use crate::ha::{CompliantGrouping, GroupingStrategy, HealthAuthority, RoundRecord};
use crate::intermediaries::{IdentityProvider, PopulationRegistry, ThirdPartyAuthority};
use crate::lp::{EvidenceLine, HandledRequest, LocationProvider};
use crate::model::{
    distribution_mass, is_normalized, ContactPolicy, ContactTracingRequest, GroupingParams, Message, PartyId, PoiCategory, SimTime,
    TransactionId, UserId, SECONDS_PER_DAY,
};
use crate::protocol::ProtocolError;
use crate::simnet::SimNet;
use crate::synthgen::{derived_rng, ConfigError, InfectionSeeder, ScenarioConfig, World};

/// The four parties and the bus between them.
pub struct Deployment<S: GroupingStrategy = CompliantGrouping> {
    pub net: SimNet,
    pub ha: HealthAuthority<S>,
    pub lp: LocationProvider,
    pub idp: IdentityProvider,
    pub itpa: ThirdPartyAuthority,
}

impl<S: GroupingStrategy> Deployment<S> {
    pub fn new(
        seed: u64,
        registry: PopulationRegistry,
        store: Arc<LocationStore>,
        policy: ContactPolicy,
        params: GroupingParams,
        strategy: S,
    ) -> Self {
        let (keys_registry, mut keys) = simulation_keys(seed);
        let mut take = |p: PartyId| keys.remove(&p).expect("all parties keyed");
        Deployment {
            ha: HealthAuthority::new(take(PartyId::Ha), params, strategy, derived_rng(seed, "ha", 0)),
            lp: LocationProvider::new(take(PartyId::Lp), store, policy, derived_rng(seed, "lp", 0)),
            idp: IdentityProvider::new(take(PartyId::Idp), registry, derived_rng(seed, "idp", 0)),
            itpa: ThirdPartyAuthority::new(take(PartyId::Itpa)),
            net: SimNet::new(keys_registry),
        }
    }

    /// Runs one complete round; returns the transaction it opened.
    pub fn round(&mut self, now: SimTime, positives: Vec<UserId>) -> Result<TransactionId, ProtocolError> {
        let out = self.ha.start_round(now, positives)?;
        let tx = self.ha.rounds().last().expect("round just opened").tx;
        self.net.send_all(now, PartyId::Ha, out);
        self.net.run(now, &mut [&mut self.ha, &mut self.lp, &mut self.idp, &mut self.itpa]);
        Ok(tx)
    }

    /// Requests as the LP received them.
    pub fn observed_requests(&self) -> Vec<ContactTracingRequest> {
        self.lp
            .retained()
            .iter()
            .filter_map(|r| match r.envelope.message() {
                Ok(Message::ContactTracingRequest(req)) => Some(req),
                _ => None,
            })
            .collect()
    }

    pub fn evidence_jsonl(&self) -> String {
        let lines: Vec<EvidenceLine> = self.lp.retained().iter().map(EvidenceLine::from).collect();
        to_jsonl(&lines)
    }

    pub fn itpa_jsonl(&self) -> String {
        to_jsonl(self.itpa.records())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryMode {
    #[default]
    None,
    HaTargeted,
    LpReid,
    Both,
}

impl AdversaryMode {
    pub fn ha_targeted(self) -> bool {
        matches!(self, AdversaryMode::HaTargeted | AdversaryMode::Both)
    }

    pub fn lp_reid(self) -> bool {
        matches!(self, AdversaryMode::LpReid | AdversaryMode::Both)
    }
}

impl FromStr for AdversaryMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(AdversaryMode::None),
            "ha-targeted" => Ok(AdversaryMode::HaTargeted),
            "lp-reid" => Ok(AdversaryMode::LpReid),
            "both" => Ok(AdversaryMode::Both),
            _ => Err(format!("unknown adversary mode {s:?}")),
        }
    }
}

impl fmt::Display for AdversaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdversaryMode::None => "none",
            AdversaryMode::HaTargeted => "ha-targeted",
            AdversaryMode::LpReid => "lp-reid",
            AdversaryMode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub adversary: AdversaryMode,
    /// Worker threads for metric computation; `None` uses the global pool.
    pub metric_threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub seed: u64,
    pub population: usize,
    pub days: u32,
    pub lp_coverage: f64,
    pub location_noise_m: f64,
    pub daily_positives: usize,
    pub adversary: AdversaryMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub day: u32,
    pub tx: Option<TransactionId>,
    pub positives: usize,
    pub infections_exhausted: bool,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub decoy: bool,
    pub completed: bool,
    pub error: Option<String>,
    pub infected_groups: usize,
    /// Infected groups whose decrypted risk set equals ground truth.
    pub exact_groups: usize,
    pub true_contacts: usize,
    pub true_contacts_covered: usize,
    pub reported_contacts: usize,
    pub recovered: usize,
    pub recovered_covered: usize,
    pub recall_full: Option<f64>,
    pub recall_covered: Option<f64>,
    pub precision: Option<f64>,
    /// Total-variation distance between the infected groups' POI mix and
    /// the request-wide distribution.
    pub poi_divergence: Option<f64>,
    pub poi_identities_hold: bool,
    pub random_group_decrypt_attempts: usize,
    pub random_group_decrypt_successes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub rounds: usize,
    pub completed_rounds: usize,
    pub true_contacts: usize,
    pub true_contacts_covered: usize,
    pub reported_contacts: usize,
    pub recovered: usize,
    pub recovered_covered: usize,
    pub recall_full: Option<f64>,
    pub recall_covered: Option<f64>,
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Attacks {
    pub ha_targeted: Option<TargetedOutcome>,
    pub lp_reid: Option<ReidOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub scenario: ScenarioSummary,
    pub world_digest: String,
    pub transcript_digest: String,
    pub transcript_entries: usize,
    pub refusals: usize,
    pub protocol_errors: Vec<String>,
    pub rounds: Vec<RoundReport>,
    pub totals: Totals,
    pub audits: Vec<DailyAudit>,
    pub attacks: Attacks,
}

impl RunReport {
    pub fn violations(&self) -> usize {
        self.audits.iter().map(|a| a.report.violations.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything a run writes out.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub transcript_jsonl: String,
    pub evidence_jsonl: String,
    pub itpa_jsonl: String,
    pub registry_json: String,
}

pub fn run_scenario(config: &ScenarioConfig, opts: &RunOptions) -> Result<RunOutput, ConfigError> {
    let world = World::generate(config)?;
    Ok(run_world(&world, opts))
}

/// Picks the targeted attack's victim among people with at least one contact
/// in the first days, falling back to anyone.
fn pick_target(world: &World, truth: &LocationStore) -> Option<UserId> {
    let persons = world.persons();
    if persons.is_empty() {
        return None;
    }
    let policy = &world.config().policy;
    let mut rng = derived_rng(world.config().seed, "target", 0);
    let start = rng.random_range(0..persons.len());
    let window = policy.lookback_window(SECONDS_PER_DAY);
    (0..persons.len())
        .map(|i| &persons[(start + i) % persons.len()].id)
        .find(|id| !truth.risk_contacts(id, window, policy).is_empty())
        .or(Some(&persons[start].id))
        .cloned()
}

pub fn run_world(world: &World, opts: &RunOptions) -> RunOutput {
    let cfg = world.config();
    let lp_store = Arc::new(world.lp_store());
    let truth = if world.lp_view_is_exact() {
        lp_store.clone()
    } else {
        Arc::new(world.truth_store())
    };
    let target = if opts.adversary.ha_targeted() {
        pick_target(world, &truth)
    } else {
        None
    };
    match &target {
        Some(t) => {
            let dep = Deployment::new(
                cfg.seed,
                world.registry().clone(),
                lp_store,
                cfg.policy.clone(),
                cfg.grouping.clone(),
                TargetedGrouping::new(t.clone(), 2),
            );
            simulate(world, &truth, dep, target.clone(), opts)
        }
        None => {
            let dep = Deployment::new(
                cfg.seed,
                world.registry().clone(),
                lp_store,
                cfg.policy.clone(),
                cfg.grouping.clone(),
                CompliantGrouping::default(),
            );
            simulate(world, &truth, dep, None, opts)
        }
    }
}

struct DayLog {
    tx: Option<TransactionId>,
    positives: usize,
    exhausted: bool,
    start_error: Option<String>,
}

fn simulate<S: GroupingStrategy>(
    world: &World,
    truth: &LocationStore,
    mut dep: Deployment<S>,
    target: Option<UserId>,
    opts: &RunOptions,
) -> RunOutput {
    let cfg = world.config();
    let exclude: BTreeSet<UserId> = target.iter().cloned().collect();
    let mut seeder = InfectionSeeder::new(world, &exclude);
    let mut auditor = DailyAuditor::new();
    let mut days = Vec::new();
    let mut protocol_errors = Vec::new();
    for day in 0..cfg.days {
        let now = i64::from(day + 1) * SECONDS_PER_DAY;
        let draw = seeder.draw();
        let positives = draw.ids.len();
        log::info!("day {day}: {positives} new positives");
        let (tx, start_error) = match dep.round(now, draw.ids) {
            Ok(tx) => (Some(tx), None),
            Err(e) => {
                protocol_errors.push(format!("day {day}: {e}"));
                (None, Some(e.to_string()))
            }
        };
        days.push(DayLog {
            tx,
            positives,
            exhausted: draw.exhausted,
            start_error,
        });
        let audit = auditor.run(day, dep.lp.retained(), dep.itpa.records(), dep.net.registry());
        if !audit.report.violations.is_empty() {
            log::warn!("day {day}: audit found {} violation(s)", audit.report.violations.len());
        }
    }
    protocol_errors.extend(
        dep.net
            .failures()
            .iter()
            .map(|f| format!("seq {} at {}: {} failed: {}", f.seq, f.sim_time, f.party, f.error)),
    );

    let covered = world.covered_ids();
    let records: Vec<Option<&RoundRecord>> = days.iter().map(|d| d.tx.and_then(|tx| dep.ha.round(&tx))).collect();
    let handled = dep.lp.handled();
    let score = || -> Vec<RoundReport> {
        days.par_iter()
            .zip(&records)
            .enumerate()
            .map(|(day, (log, rec))| score_round(day as u32, log, *rec, handled, truth, &covered, &cfg.policy))
            .collect()
    };
    let rounds = match opts.metric_threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(score),
        None => score(),
    };
    let totals = totals(&rounds);
    let audits = auditor.into_reports();

    let mut attacks = Attacks::default();
    if let Some(t) = &target {
        let mut outcome = targeted_inference(dep.ha.rounds(), t);
        targeted_expected(&mut outcome, truth, &cfg.policy);
        outcome.detected_day = audits
            .iter()
            .find(|a| a.report.violations.iter().any(|v| &v.user_id == t))
            .map(|a| a.day);
        attacks.ha_targeted = Some(outcome);
    }
    if opts.adversary.lp_reid() {
        let infected: BTreeSet<UserId> = dep
            .ha
            .rounds()
            .iter()
            .filter(|r| r.request.is_some())
            .flat_map(|r| r.infected_ids.iter().cloned())
            .collect();
        attacks.lp_reid = Some(singleton_attack(&dep.observed_requests(), &infected));
    }

    let report = RunReport {
        version: 1,
        scenario: ScenarioSummary {
            seed: cfg.seed,
            population: cfg.population,
            days: cfg.days,
            lp_coverage: cfg.lp_coverage,
            location_noise_m: cfg.location_noise_m,
            daily_positives: cfg.daily_positives,
            adversary: opts.adversary,
        },
        world_digest: world.digest(),
        transcript_digest: dep.net.digest(),
        transcript_entries: dep.net.transcript().len(),
        refusals: dep.net.refusals().len(),
        protocol_errors,
        rounds,
        totals,
        audits,
        attacks,
    };
    RunOutput {
        report,
        transcript_jsonl: dep.net.transcript_jsonl(),
        evidence_jsonl: dep.evidence_jsonl(),
        itpa_jsonl: dep.itpa_jsonl(),
        registry_json: dep.net.registry().to_json(),
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-group mass and the mixture identity on one LP-handled request.
pub fn poi_identities_hold(h: &HandledRequest) -> bool {
    const TOL: f64 = 1e-9;
    if !h.group_distributions.iter().all(|d| is_normalized(d, TOL)) || !is_normalized(&h.overall, TOL) {
        return false;
    }
    let weights: Vec<f64> = h.group_visit_counts.iter().map(|c| c.values().sum::<u64>() as f64).collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return h.overall.is_empty();
    }
    let mixed = mix_distributions(weights.iter().map(|w| w / total).zip(&h.group_distributions));
    PoiCategory::ALL.iter().all(|c| {
        let get = |d: &crate::model::PoiDistribution| d.get(c).copied().unwrap_or(0.0);
        (get(&mixed) - get(&h.overall)).abs() <= TOL
    })
}

fn score_round(
    day: u32,
    log: &DayLog,
    rec: Option<&RoundRecord>,
    handled: &BTreeMap<TransactionId, HandledRequest>,
    truth: &LocationStore,
    covered: &BTreeSet<UserId>,
    policy: &ContactPolicy,
) -> RoundReport {
    let mut r = RoundReport {
        day,
        tx: log.tx,
        positives: log.positives,
        infections_exhausted: log.exhausted,
        m: 0,
        n: 0,
        k: 0,
        l: 0,
        decoy: false,
        completed: false,
        error: log.start_error.clone(),
        infected_groups: 0,
        exact_groups: 0,
        true_contacts: 0,
        true_contacts_covered: 0,
        reported_contacts: 0,
        recovered: 0,
        recovered_covered: 0,
        recall_full: None,
        recall_covered: None,
        precision: None,
        poi_divergence: None,
        poi_identities_hold: true,
        random_group_decrypt_attempts: 0,
        random_group_decrypt_successes: 0,
    };
    let Some(rec) = rec else {
        return r;
    };
    r.m = rec.plan.m;
    r.n = rec.plan.n;
    r.k = rec.plan.k;
    r.l = rec.plan.l;
    r.decoy = rec.plan.is_decoy();
    r.completed = rec.is_complete();
    r.error = rec.error.as_ref().map(|e| e.to_string()).or(r.error);
    if let Some(h) = handled.get(&rec.tx) {
        r.poi_identities_hold = poi_identities_hold(h);
    }

    let window = policy.lookback_window(rec.started_at);
    let groups = rec.infected_groups();
    r.infected_groups = groups.len();
    let mut true_full = BTreeSet::new();
    let mut true_cov = BTreeSet::new();
    let mut expected: BTreeMap<u32, BTreeSet<UserId>> = BTreeMap::new();
    for (&gi, members) in &groups {
        let own: BTreeSet<&UserId> = members.iter().collect();
        let mut g_true = BTreeSet::new();
        for m in members.iter() {
            let contacts = truth.risk_contacts(m, window, policy);
            let m_covered = covered.contains(m);
            for c in contacts.into_iter().filter(|c| !own.contains(c)) {
                if m_covered && covered.contains(&c) {
                    true_cov.insert(c.clone());
                }
                g_true.insert(c);
            }
        }
        true_full.extend(g_true.iter().cloned());
        expected.insert(gi, g_true);
    }
    r.true_contacts = true_full.len();
    r.true_contacts_covered = true_cov.len();

    if let Some(report) = &rec.report {
        let reported = &report.all_risk_contacts;
        r.reported_contacts = reported.len();
        r.recovered = reported.intersection(&true_full).count();
        r.recovered_covered = reported.intersection(&true_cov).count();
        r.recall_full = ratio(r.recovered, r.true_contacts);
        r.recall_covered = ratio(r.recovered_covered, r.true_contacts_covered);
        r.precision = ratio(r.recovered, r.reported_contacts);
        r.exact_groups = report
            .per_infected_group
            .iter()
            .filter(|g| expected.get(&g.group_index) == Some(&g.result.risk_contacts))
            .count();

        let dists: Vec<_> = report
            .per_infected_group
            .iter()
            .map(|g| &g.result.poi_distribution)
            .filter(|d| distribution_mass(d) > 0.0)
            .collect();
        let overall = rec.reply.as_ref().map(|rep| &rep.overall_poi_distribution);
        if let (false, Some(overall)) = (dists.is_empty(), overall) {
            if !overall.is_empty() {
                let w = 1.0 / dists.len() as f64;
                let mixed = mix_distributions(dists.into_iter().map(|d| (w, d)));
                r.poi_divergence = Some(total_variation(&mixed, overall));
            }
        }
    }

    if let Some(reply) = &rec.reply {
        for key in &rec.held_keys {
            for c in reply
                .group_ciphertexts
                .iter()
                .filter(|c| !rec.infected_indices.contains(&c.group_index))
            {
                r.random_group_decrypt_attempts += 1;
                if decrypt_group(key, &c.ciphertext).is_ok() {
                    r.random_group_decrypt_successes += 1;
                }
            }
        }
    }
    r
}

fn totals(rounds: &[RoundReport]) -> Totals {
    let mut t = Totals {
        rounds: rounds.len(),
        ..Totals::default()
    };
    for r in rounds {
        t.completed_rounds += usize::from(r.completed);
        t.true_contacts += r.true_contacts;
        t.true_contacts_covered += r.true_contacts_covered;
        t.reported_contacts += r.reported_contacts;
        t.recovered += r.recovered;
        t.recovered_covered += r.recovered_covered;
    }
    t.recall_full = ratio(t.recovered, t.true_contacts);
    t.recall_covered = ratio(t.recovered_covered, t.true_contacts_covered);
    t.precision = ratio(t.recovered, t.reported_contacts);
    t
}
