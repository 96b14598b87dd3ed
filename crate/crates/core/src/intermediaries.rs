//! Identity provider and independent third-party authority.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{PartyKeys, SignedEnvelope};
use crate::model::{
    IdpError, KeysError, KeysReply, KeysRequestToItpa, KeysRequestToLp, Message, PartyId, RandomIdsReply, SimTime,
    TimeWindow, TransactionId, UserId,
};
use crate::protocol::{unexpected, Actor, Outgoing, ProtocolError};

/// Every phone number of the simulated country.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PopulationRegistry {
    ids: Vec<UserId>,
}

impl PopulationRegistry {
    pub fn new<I: IntoIterator<Item = UserId>>(ids: I) -> Self {
        let set: BTreeSet<UserId> = ids.into_iter().collect();
        PopulationRegistry {
            ids: set.into_iter().collect(),
        }
    }

    pub fn ids(&self) -> &[UserId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &UserId) -> bool {
        self.ids.binary_search(id).is_ok()
    }

    /// `n` distinct ids drawn uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<UserId>, IdpError> {
        if n > self.ids.len() {
            return Err(IdpError::RegistryTooSmall {
                requested: n as u32,
                available: self.ids.len() as u32,
            });
        }
        Ok(sample(rng, self.ids.len(), n)
            .into_iter()
            .map(|i| self.ids[i].clone())
            .collect())
    }
}

pub struct IdentityProvider {
    keys: PartyKeys,
    registry: PopulationRegistry,
    rng: ChaCha8Rng,
}

impl IdentityProvider {
    pub fn new(keys: PartyKeys, registry: PopulationRegistry, rng: ChaCha8Rng) -> Self {
        IdentityProvider { keys, registry, rng }
    }

    pub fn registry(&self) -> &PopulationRegistry {
        &self.registry
    }
}

impl Actor for IdentityProvider {
    fn party(&self) -> PartyId {
        PartyId::Idp
    }

    fn handle(&mut self, _now: SimTime, from: PartyId, msg: Message, _: &SignedEnvelope) -> Result<Vec<Outgoing>, ProtocolError> {
        match (from, msg) {
            (PartyId::Ha, Message::RandomIdsRequest(req)) => {
                let result = self.registry.sample(req.count as usize, &mut self.rng);
                let reply = Message::RandomIdsReply(RandomIdsReply { tx: req.tx, result });
                Ok(vec![Outgoing {
                    to: PartyId::Ha,
                    envelope: self.keys.sign_message(&reply),
                }])
            }
            (from, msg) => Err(unexpected(PartyId::Idp, from, &msg)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ItpaOutcome {
    KeysReleased { count: u32 },
    CountMismatch { declared: u32, received: u32 },
    InvalidDeclaration,
    LpError { error: String },
}

/// What the HA declared for one transaction, and how mediation ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItpaRecord {
    pub tx: TransactionId,
    pub total_groups: u32,
    pub infected_group_indices: BTreeSet<u32>,
    pub outcome: ItpaOutcome,
    pub recorded_at: SimTime,
}

pub struct ThirdPartyAuthority {
    keys: PartyKeys,
    pending: BTreeMap<TransactionId, KeysRequestToItpa>,
    records: Vec<ItpaRecord>,
    seen: BTreeSet<TransactionId>,
}

impl ThirdPartyAuthority {
    pub fn new(keys: PartyKeys) -> Self {
        ThirdPartyAuthority {
            keys,
            pending: BTreeMap::new(),
            records: Vec::new(),
            seen: BTreeSet::new(),
        }
    }

    pub fn records(&self) -> &[ItpaRecord] {
        &self.records
    }

    /// Records whose mediation finished inside `window`.
    pub fn export(&self, window: TimeWindow) -> Vec<ItpaRecord> {
        self.records
            .iter()
            .filter(|r| window.contains(r.recorded_at))
            .cloned()
            .collect()
    }

    fn reply_to_ha(&self, tx: TransactionId, result: Result<Vec<crate::model::GroupKeyEntry>, KeysError>) -> Outgoing {
        Outgoing {
            to: PartyId::Ha,
            envelope: self.keys.sign_message(&Message::KeysReply(KeysReply { tx, result })),
        }
    }

    fn record(&mut self, req: &KeysRequestToItpa, outcome: ItpaOutcome, now: SimTime) {
        self.records.push(ItpaRecord {
            tx: req.tx,
            total_groups: req.total_groups,
            infected_group_indices: req.infected_group_indices.clone(),
            outcome,
            recorded_at: now,
        });
    }
}

impl Actor for ThirdPartyAuthority {
    fn party(&self) -> PartyId {
        PartyId::Itpa
    }

    fn handle(&mut self, now: SimTime, from: PartyId, msg: Message, _: &SignedEnvelope) -> Result<Vec<Outgoing>, ProtocolError> {
        match (from, msg) {
            (PartyId::Ha, Message::KeysRequestToItpa(req)) => {
                if !self.seen.insert(req.tx) {
                    return Err(ProtocolError::DuplicateTransaction(req.tx));
                }
                if req.infected_group_indices.iter().any(|&i| i >= req.total_groups) {
                    self.record(&req, ItpaOutcome::InvalidDeclaration, now);
                    return Ok(vec![self.reply_to_ha(req.tx, Err(KeysError::InvalidDeclaration))]);
                }
                let forward = Message::KeysRequestToLp(KeysRequestToLp { tx: req.tx });
                self.pending.insert(req.tx, req);
                Ok(vec![Outgoing {
                    to: PartyId::Lp,
                    envelope: self.keys.sign_message(&forward),
                }])
            }
            (PartyId::Lp, Message::KeysReply(reply)) => {
                let req = self
                    .pending
                    .remove(&reply.tx)
                    .ok_or(ProtocolError::UnknownTransaction(reply.tx))?;
                let (outcome, result) = match reply.result {
                    Err(e) => (ItpaOutcome::LpError { error: format!("{e:?}") }, Err(e)),
                    Ok(entries) if entries.len() as u32 != req.total_groups => {
                        let e = KeysError::CountMismatch {
                            declared: req.total_groups,
                            received: entries.len() as u32,
                        };
                        (
                            ItpaOutcome::CountMismatch {
                                declared: req.total_groups,
                                received: entries.len() as u32,
                            },
                            Err(e),
                        )
                    }
                    Ok(entries) => {
                        let released: Vec<_> = entries
                            .into_iter()
                            .filter(|e| req.infected_group_indices.contains(&e.group_index))
                            .collect();
                        if released.len() != req.infected_group_indices.len() {
                            (ItpaOutcome::InvalidDeclaration, Err(KeysError::InvalidDeclaration))
                        } else {
                            (
                                ItpaOutcome::KeysReleased {
                                    count: released.len() as u32,
                                },
                                Ok(released),
                            )
                        }
                    }
                };
                self.record(&req, outcome, now);
                Ok(vec![self.reply_to_ha(req.tx, result)])
            }
            (from, msg) => Err(unexpected(PartyId::Itpa, from, &msg)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::simulation_keys;
    use crate::model::GroupKeyEntry;
    use rand::SeedableRng;

    fn registry(n: u64) -> PopulationRegistry {
        PopulationRegistry::new((0..n).map(UserId::synthetic))
    }

    #[test]
    fn sample_edges() {
        let reg = registry(50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(reg.sample(0, &mut rng).unwrap().is_empty());
        let all = reg.sample(50, &mut rng).unwrap();
        let set: BTreeSet<_> = all.iter().cloned().collect();
        assert_eq!(set.len(), 50);
        assert_ne!(all, reg.ids().to_vec(), "whole registry should come back shuffled");
        assert_eq!(
            reg.sample(51, &mut rng),
            Err(IdpError::RegistryTooSmall {
                requested: 51,
                available: 50
            })
        );
    }

    #[test]
    fn sampling_is_uniform() {
        // 1e5 draws over 1e3 ids, batches of 100 without replacement.
        let reg = registry(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts: BTreeMap<UserId, u64> = BTreeMap::new();
        for _ in 0..1000 {
            for id in reg.sample(100, &mut rng).unwrap() {
                *counts.entry(id).or_default() += 1;
            }
        }
        let expected = 100.0;
        let chi2: f64 = reg
            .ids()
            .iter()
            .map(|id| {
                let o = counts.get(id).copied().unwrap_or(0) as f64;
                (o - expected).powi(2) / expected
            })
            .sum();
        // 999 degrees of freedom; the 0.999 quantile is about 1143.
        assert!(chi2 < 1143.0, "chi2 = {chi2}");
    }

    fn entries(k: u32) -> Vec<GroupKeyEntry> {
        (0..k)
            .map(|i| GroupKeyEntry {
                group_index: i,
                key: [i as u8; 32],
            })
            .collect()
    }

    fn mediate(total: u32, infected: &[u32], lp_keys: u32) -> (Vec<Outgoing>, ThirdPartyAuthority) {
        let (_, mut keys) = simulation_keys(1);
        let ha = keys.remove(&PartyId::Ha).unwrap();
        let lp = keys.remove(&PartyId::Lp).unwrap();
        let mut itpa = ThirdPartyAuthority::new(keys.remove(&PartyId::Itpa).unwrap());
        let tx = TransactionId([7; 16]);
        let req = Message::KeysRequestToItpa(KeysRequestToItpa {
            tx,
            total_groups: total,
            infected_group_indices: infected.iter().copied().collect(),
        });
        let env = ha.sign_message(&req);
        let out = itpa.handle(5, PartyId::Ha, req, &env).unwrap();
        if out[0].to == PartyId::Ha {
            return (out, itpa);
        }
        assert_eq!(out[0].to, PartyId::Lp);
        let fwd = out[0].envelope.message().unwrap();
        assert_eq!(fwd, Message::KeysRequestToLp(KeysRequestToLp { tx }));
        let reply = Message::KeysReply(KeysReply {
            tx,
            result: Ok(entries(lp_keys)),
        });
        let env = lp.sign_message(&reply);
        (itpa.handle(6, PartyId::Lp, reply, &env).unwrap(), itpa)
    }

    fn released(out: &[Outgoing]) -> Result<Vec<GroupKeyEntry>, KeysError> {
        match out[0].envelope.message().unwrap() {
            Message::KeysReply(r) => r.result,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn releases_only_infected_keys() {
        let (out, itpa) = mediate(7, &[2, 5], 7);
        let keys = released(&out).unwrap();
        assert_eq!(keys.iter().map(|e| e.group_index).collect::<Vec<_>>(), vec![2, 5]);
        assert_eq!(itpa.records().len(), 1);
        assert_eq!(itpa.records()[0].outcome, ItpaOutcome::KeysReleased { count: 2 });
    }

    #[test]
    fn count_mismatch_releases_nothing() {
        let (out, itpa) = mediate(6, &[2], 7);
        assert_eq!(
            released(&out),
            Err(KeysError::CountMismatch {
                declared: 6,
                received: 7
            })
        );
        assert!(matches!(itpa.records()[0].outcome, ItpaOutcome::CountMismatch { .. }));
    }

    #[test]
    fn decoy_gets_empty_reply_and_a_record() {
        let (out, itpa) = mediate(7, &[], 7);
        assert_eq!(released(&out), Ok(vec![]));
        assert_eq!(itpa.export(TimeWindow::all()).len(), 1);
        assert!(itpa.export(TimeWindow::new(0, 5)).is_empty());
    }

    #[test]
    fn out_of_range_declaration_is_rejected() {
        let (out, itpa) = mediate(3, &[3], 3);
        assert_eq!(released(&out), Err(KeysError::InvalidDeclaration));
        assert_eq!(itpa.records()[0].outcome, ItpaOutcome::InvalidDeclaration);
    }
}
