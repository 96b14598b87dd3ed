//! Health authority: hides positives among random ids, retrieves the keys of
//! the infected groups through the ITPA and decrypts their risk contacts.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{decrypt_group, GroupKey, PartyKeys, SignedEnvelope};
use crate::model::{
    validate_request, ContactTracingReply, ContactTracingRequest, Group, GroupingParams, InfectedGroupResult,
    KeysRequestToItpa, Message, PartyId, RandomIdsRequest, RiskContactReport, SimTime, TransactionId, UserId,
};
use crate::protocol::{unexpected, Actor, Outgoing, ProtocolError};

/// Every id ever placed in an infected group.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InfectedLedger {
    used: BTreeSet<UserId>,
}

impl InfectedLedger {
    pub fn contains(&self, id: &UserId) -> bool {
        self.used.contains(id)
    }

    /// Returns false if the id was already recorded.
    pub fn insert(&mut self, id: UserId) -> bool {
        self.used.insert(id)
    }

    pub fn len(&self) -> usize {
        self.used.len()
    }

    pub fn is_empty(&self) -> bool {
        self.used.is_empty()
    }
}

/// Ids already sent in some request, eligible again for random groups.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReusePool {
    ids: BTreeSet<UserId>,
}

impl ReusePool {
    pub fn extend<'a, I: IntoIterator<Item = &'a UserId>>(&mut self, ids: I) {
        self.ids.extend(ids.into_iter().cloned());
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &UserId) -> bool {
        self.ids.contains(id)
    }

    /// Up to `n` distinct pool ids outside `exclude`.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, exclude: &BTreeSet<UserId>, rng: &mut R) -> Vec<UserId> {
        let eligible: Vec<&UserId> = self.ids.iter().filter(|id| !exclude.contains(*id)).collect();
        let n = n.min(eligible.len());
        rand::seq::index::sample(rng, eligible.len(), n)
            .into_iter()
            .map(|i| eligible[i].clone())
            .collect()
    }
}

/// Anonymity parameters of one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub l: usize,
}

impl RoundPlan {
    pub fn is_decoy(&self) -> bool {
        self.l == 0
    }
}

/// Largest number of positives one request can carry within the floors.
pub fn round_capacity(params: &GroupingParams) -> usize {
    (params.n_random_max / params.random_ratio_floor).min(params.l_infected_max * params.group_size_max)
}

fn k_range(params: &GroupingParams, n: usize, l: usize) -> (usize, usize) {
    let lo = params
        .k_groups_min
        .max(params.group_ratio_floor * l)
        .max(l + n.div_ceil(params.group_size_max));
    let hi = params.k_groups_max.min(l + n / params.group_size_min);
    (lo, hi)
}

/// Draws (N, K, L) for `m` positives; `m = 0` plans a decoy.
pub fn plan_round<R: Rng + ?Sized>(m: usize, params: &GroupingParams, rng: &mut R) -> Result<RoundPlan, ProtocolError> {
    let (l_lo, l_hi) = if m == 0 {
        (0, 0)
    } else {
        (
            params.l_infected_min.min(m).max(m.div_ceil(params.group_size_max)),
            params.l_infected_max.min(m),
        )
    };
    let ls: Vec<usize> = (l_lo..=l_hi)
        .filter(|&l| params.group_ratio_floor * l <= params.k_groups_max)
        .collect();
    if ls.is_empty() {
        return Err(ProtocolError::Planning(format!("no feasible L for M = {m}")));
    }
    let l = ls[rng.random_range(0..ls.len())];
    let n_lo = params.n_random_min.max(params.random_ratio_floor * m);
    let ns: Vec<usize> = (n_lo..=params.n_random_max)
        .filter(|&n| {
            let (lo, hi) = k_range(params, n, l);
            lo <= hi
        })
        .collect();
    if ns.is_empty() {
        return Err(ProtocolError::Planning(format!("no feasible N for M = {m}, L = {l}")));
    }
    let n = ns[rng.random_range(0..ns.len())];
    let (k_lo, k_hi) = k_range(params, n, l);
    let k = rng.random_range(k_lo..=k_hi);
    Ok(RoundPlan { m, n, k, l })
}

/// Sizes of `count` groups holding `total` ids, each within `[min, max]`.
fn random_sizes<R: Rng + ?Sized>(count: usize, total: usize, min: usize, max: usize, rng: &mut R) -> Vec<usize> {
    let mut sizes = vec![min; count];
    let mut open: Vec<usize> = (0..count).collect();
    let mut left = total - min * count;
    while left > 0 {
        let pick = rng.random_range(0..open.len());
        let g = open[pick];
        sizes[g] += 1;
        left -= 1;
        if sizes[g] == max {
            open.swap_remove(pick);
        }
    }
    sizes
}

/// Arranges positives and random ids into a shuffled K-group request.
/// Returns the request and the indices of its infected groups.
pub fn build_groups<R: Rng + ?Sized>(
    tx: TransactionId,
    infected: &[UserId],
    randoms: &[UserId],
    plan: &RoundPlan,
    params: &GroupingParams,
    rng: &mut R,
) -> Result<(ContactTracingRequest, BTreeSet<u32>), ProtocolError> {
    if infected.len() != plan.m || randoms.len() != plan.n {
        return Err(ProtocolError::Planning(format!(
            "plan expects {} positives and {} random ids, got {} and {}",
            plan.m,
            plan.n,
            infected.len(),
            randoms.len()
        )));
    }
    let random_groups = plan.k - plan.l;
    if plan.n < random_groups * params.group_size_min || plan.n > random_groups * params.group_size_max {
        return Err(ProtocolError::Planning(format!(
            "{} random ids do not fit {} groups of size {}..={}",
            plan.n, random_groups, params.group_size_min, params.group_size_max
        )));
    }
    let mut pos = infected.to_vec();
    pos.shuffle(rng);
    let mut rnd = randoms.to_vec();
    rnd.shuffle(rng);

    let mut members: Vec<(bool, Vec<UserId>)> = Vec::with_capacity(plan.k);
    let mut rest = pos.as_slice();
    for i in 0..plan.l {
        let size = plan.m / plan.l + usize::from(i < plan.m % plan.l);
        let (head, tail) = rest.split_at(size);
        members.push((true, head.to_vec()));
        rest = tail;
    }
    let mut rest = rnd.as_slice();
    for size in random_sizes(random_groups, plan.n, params.group_size_min, params.group_size_max, rng) {
        let (head, tail) = rest.split_at(size);
        members.push((false, head.to_vec()));
        rest = tail;
    }
    members.shuffle(rng);
    let mut infected_indices = BTreeSet::new();
    let groups = members
        .into_iter()
        .enumerate()
        .map(|(i, (is_infected, member_ids))| {
            if is_infected {
                infected_indices.insert(i as u32);
            }
            Group {
                group_index: i as u32,
                member_ids,
            }
        })
        .collect();
    Ok((ContactTracingRequest { tx, groups }, infected_indices))
}

/// Decides which ids may enter infected groups.
pub trait GroupingStrategy {
    /// Splits newly reported positives into (accepted, refused).
    fn admit(&mut self, positives: Vec<UserId>) -> (Vec<UserId>, Vec<UserId>);

    /// Chooses this round's infected ids from the pending queue (oldest first).
    fn select(&mut self, round: u64, pending: &[UserId], capacity: usize) -> Vec<UserId>;

    /// Called once a request carrying `infected` has been sent.
    fn commit(&mut self, infected: &[UserId]);

    /// Overrides the decoy decision for the next round.
    fn force_infected(&self) -> bool {
        false
    }
}

/// Honest behaviour: an id enters an infected group at most once, ever.
#[derive(Debug, Clone, Default)]
pub struct CompliantGrouping {
    ledger: InfectedLedger,
}

impl CompliantGrouping {
    pub fn ledger(&self) -> &InfectedLedger {
        &self.ledger
    }
}

impl GroupingStrategy for CompliantGrouping {
    fn admit(&mut self, positives: Vec<UserId>) -> (Vec<UserId>, Vec<UserId>) {
        positives.into_iter().partition(|id| !self.ledger.contains(id))
    }

    fn select(&mut self, _round: u64, pending: &[UserId], capacity: usize) -> Vec<UserId> {
        pending
            .iter()
            .filter(|id| !self.ledger.contains(id))
            .take(capacity)
            .cloned()
            .collect()
    }

    fn commit(&mut self, infected: &[UserId]) {
        for id in infected {
            let fresh = self.ledger.insert(id.clone());
            debug_assert!(fresh, "{id} ledgered twice");
        }
    }
}

#[derive(Debug, Clone)]
enum Stage {
    AwaitingIds {
        drawn: Vec<UserId>,
        fresh_needed: usize,
        exclude: BTreeSet<UserId>,
    },
    AwaitingReply,
    AwaitingKeys,
    Done,
    Failed,
}

/// Everything the HA knows about one of its transactions.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub tx: TransactionId,
    pub round: u64,
    pub started_at: SimTime,
    pub plan: RoundPlan,
    pub infected_ids: Vec<UserId>,
    pub reused: usize,
    pub request: Option<ContactTracingRequest>,
    pub infected_indices: BTreeSet<u32>,
    pub reply: Option<ContactTracingReply>,
    pub held_keys: Vec<GroupKey>,
    pub report: Option<RiskContactReport>,
    pub error: Option<ProtocolError>,
    stage: Stage,
}

impl RoundRecord {
    pub fn is_complete(&self) -> bool {
        matches!(self.stage, Stage::Done)
    }

    /// Members of each infected group, by index.
    pub fn infected_groups(&self) -> BTreeMap<u32, &[UserId]> {
        let Some(req) = &self.request else {
            return BTreeMap::new();
        };
        req.groups
            .iter()
            .filter(|g| self.infected_indices.contains(&g.group_index))
            .map(|g| (g.group_index, g.member_ids.as_slice()))
            .collect()
    }
}

pub struct HealthAuthority<S: GroupingStrategy = CompliantGrouping> {
    keys: PartyKeys,
    params: GroupingParams,
    strategy: S,
    rng: ChaCha8Rng,
    pool: ReusePool,
    pending: Vec<UserId>,
    refused: Vec<UserId>,
    rounds: Vec<RoundRecord>,
    by_tx: BTreeMap<TransactionId, usize>,
}

impl HealthAuthority<CompliantGrouping> {
    pub fn compliant(keys: PartyKeys, params: GroupingParams, rng: ChaCha8Rng) -> Self {
        HealthAuthority::new(keys, params, CompliantGrouping::default(), rng)
    }
}

impl<S: GroupingStrategy> HealthAuthority<S> {
    pub fn new(keys: PartyKeys, params: GroupingParams, strategy: S, rng: ChaCha8Rng) -> Self {
        HealthAuthority {
            keys,
            params,
            strategy,
            rng,
            pool: ReusePool::default(),
            pending: Vec::new(),
            refused: Vec::new(),
            rounds: Vec::new(),
            by_tx: BTreeMap::new(),
        }
    }

    pub fn strategy(&self) -> &S {
        &self.strategy
    }

    pub fn pool(&self) -> &ReusePool {
        &self.pool
    }

    /// Positives reported but not yet sent in an infected group.
    pub fn pending(&self) -> &[UserId] {
        &self.pending
    }

    /// Positives the strategy refused to send.
    pub fn refused(&self) -> &[UserId] {
        &self.refused
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn round(&self, tx: &TransactionId) -> Option<&RoundRecord> {
        self.by_tx.get(tx).map(|&i| &self.rounds[i])
    }

    /// Queues new positives and opens a round by asking the IDP for random ids.
    pub fn start_round(&mut self, now: SimTime, positives: Vec<UserId>) -> Result<Vec<Outgoing>, ProtocolError> {
        let mut seen = BTreeSet::new();
        let fresh: Vec<UserId> = positives
            .into_iter()
            .filter(|p| !self.pending.contains(p) && seen.insert(p.clone()))
            .collect();
        let (accepted, refused) = self.strategy.admit(fresh);
        self.refused.extend(refused);
        self.pending.extend(accepted);

        let round = self.rounds.len() as u64;
        let decoy = !self.strategy.force_infected()
            && (self.pending.is_empty() || self.rng.random_bool(self.params.decoy_probability));
        let infected = if decoy {
            Vec::new()
        } else {
            self.strategy.select(round, &self.pending, round_capacity(&self.params))
        };
        let plan = plan_round(infected.len(), &self.params, &mut self.rng)?;

        let mut exclude: BTreeSet<UserId> = infected.iter().chain(&self.pending).cloned().collect();
        let reuse_target = (self.params.reuse_fraction * plan.n as f64).floor() as usize;
        let drawn = self.pool.draw(reuse_target, &exclude, &mut self.rng);
        exclude.extend(drawn.iter().cloned());
        let fresh_needed = plan.n - drawn.len();
        let tx = TransactionId::random(&mut self.rng);
        let count = (fresh_needed + exclude.len()) as u32;
        log::debug!("round {round} {tx}: {plan:?}, {} reused", drawn.len());

        self.by_tx.insert(tx, self.rounds.len());
        self.rounds.push(RoundRecord {
            tx,
            round,
            started_at: now,
            plan,
            infected_ids: infected,
            reused: drawn.len(),
            request: None,
            infected_indices: BTreeSet::new(),
            reply: None,
            held_keys: Vec::new(),
            report: None,
            error: None,
            stage: Stage::AwaitingIds {
                drawn,
                fresh_needed,
                exclude,
            },
        });
        let msg = Message::RandomIdsRequest(RandomIdsRequest { tx, count });
        Ok(vec![Outgoing {
            to: PartyId::Idp,
            envelope: self.keys.sign_message(&msg),
        }])
    }

    fn record_mut(&mut self, tx: TransactionId) -> Result<&mut RoundRecord, ProtocolError> {
        let i = *self.by_tx.get(&tx).ok_or(ProtocolError::UnknownTransaction(tx))?;
        Ok(&mut self.rounds[i])
    }

    fn fail(&mut self, tx: TransactionId, error: ProtocolError) -> ProtocolError {
        if let Ok(rec) = self.record_mut(tx) {
            rec.stage = Stage::Failed;
            rec.error = Some(error.clone());
        }
        error
    }

    fn on_random_ids(&mut self, tx: TransactionId, ids: Result<Vec<UserId>, crate::model::IdpError>) -> Result<Vec<Outgoing>, ProtocolError> {
        let rec = self.record_mut(tx)?;
        let Stage::AwaitingIds {
            drawn,
            fresh_needed,
            exclude,
        } = rec.stage.clone()
        else {
            return Err(ProtocolError::UnknownTransaction(tx));
        };
        let ids = match ids {
            Ok(ids) => ids,
            Err(error) => return Err(self.fail(tx, ProtocolError::Idp { tx, error })),
        };
        let mut seen = BTreeSet::new();
        let fresh: Vec<UserId> = ids
            .into_iter()
            .filter(|id| !exclude.contains(id) && seen.insert(id.clone()))
            .take(fresh_needed)
            .collect();
        if fresh.len() < fresh_needed {
            let got = fresh.len();
            return Err(self.fail(
                tx,
                ProtocolError::IdpShortfall {
                    tx,
                    needed: fresh_needed,
                    got,
                },
            ));
        }
        let rec = self.record_mut(tx)?;
        let plan = rec.plan;
        let infected = rec.infected_ids.clone();
        let randoms: Vec<UserId> = drawn.into_iter().chain(fresh).collect();
        let (request, infected_indices) =
            match build_groups(tx, &infected, &randoms, &plan, &self.params, &mut self.rng) {
                Ok(r) => r,
                Err(e) => return Err(self.fail(tx, e)),
            };
        debug_assert!(validate_request(&request).is_empty());

        self.strategy.commit(&infected);
        self.pending.retain(|p| !infected.contains(p));
        self.pool.extend(request.all_ids());
        let msg = Message::ContactTracingRequest(request.clone());
        let rec = self.record_mut(tx)?;
        rec.request = Some(request);
        rec.infected_indices = infected_indices;
        rec.stage = Stage::AwaitingReply;
        Ok(vec![Outgoing {
            to: PartyId::Lp,
            envelope: self.keys.sign_message(&msg),
        }])
    }

    fn on_reply(&mut self, reply: ContactTracingReply) -> Result<Vec<Outgoing>, ProtocolError> {
        let tx = reply.tx;
        let rec = self.record_mut(tx)?;
        if !matches!(rec.stage, Stage::AwaitingReply) {
            return Err(ProtocolError::UnknownTransaction(tx));
        }
        let msg = Message::KeysRequestToItpa(KeysRequestToItpa {
            tx,
            total_groups: rec.plan.k as u32,
            infected_group_indices: rec.infected_indices.clone(),
        });
        rec.reply = Some(reply);
        rec.stage = Stage::AwaitingKeys;
        Ok(vec![Outgoing {
            to: PartyId::Itpa,
            envelope: self.keys.sign_message(&msg),
        }])
    }

    fn on_keys(&mut self, reply: crate::model::KeysReply) -> Result<Vec<Outgoing>, ProtocolError> {
        let tx = reply.tx;
        let rec = self.record_mut(tx)?;
        if !matches!(rec.stage, Stage::AwaitingKeys) {
            return Err(ProtocolError::UnknownTransaction(tx));
        }
        let entries = match reply.result {
            Ok(e) => e,
            Err(error) => return Err(self.fail(tx, ProtocolError::Keys { tx, error })),
        };
        let got: BTreeSet<u32> = entries.iter().map(|e| e.group_index).collect();
        if got != rec.infected_indices || got.len() != entries.len() {
            return Err(self.fail(tx, ProtocolError::KeyScope { tx }));
        }
        rec.held_keys = entries.iter().map(|e| GroupKey::from_entry(tx, e)).collect();
        let ciphertexts = &rec.reply.as_ref().expect("reply stored").group_ciphertexts;
        let mut results = Vec::new();
        let mut bad = None;
        for key in &rec.held_keys {
            let decrypted = ciphertexts
                .iter()
                .find(|c| c.group_index == key.group_index)
                .ok_or(())
                .and_then(|c| decrypt_group(key, &c.ciphertext).map_err(|_| ()));
            match decrypted {
                Ok(result) => results.push(InfectedGroupResult {
                    group_index: key.group_index,
                    result,
                }),
                Err(()) => {
                    bad = Some(key.group_index);
                    break;
                }
            }
        }
        if let Some(group_index) = bad {
            return Err(self.fail(tx, ProtocolError::Decrypt { tx, group_index }));
        }
        let rec = self.record_mut(tx)?;
        rec.report = Some(RiskContactReport::from_groups(tx, results));
        rec.stage = Stage::Done;
        Ok(Vec::new())
    }
}

impl<S: GroupingStrategy> Actor for HealthAuthority<S> {
    fn party(&self) -> PartyId {
        PartyId::Ha
    }

    fn handle(&mut self, _now: SimTime, from: PartyId, msg: Message, _: &SignedEnvelope) -> Result<Vec<Outgoing>, ProtocolError> {
        match (from, msg) {
            (PartyId::Idp, Message::RandomIdsReply(r)) => self.on_random_ids(r.tx, r.result),
            (PartyId::Lp, Message::ContactTracingReply(r)) => self.on_reply(r),
            (PartyId::Itpa, Message::KeysReply(r)) => self.on_keys(r),
            (from, msg) => Err(unexpected(PartyId::Ha, from, &msg)),
        }
    }
}
