//! Location provider: answers grouped contact-tracing requests.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crypto::{encrypt_group, GroupKey, KeyStore, PartyKeys, SignedEnvelope};
use crate::geo::{normalize_counts, LocationStore};
use crate::model::{
    validate_request, ContactPolicy, ContactTracingReply, ContactTracingRequest, GroupCiphertext, GroupResultPlain,
    KeysError, KeysReply, Message, PartyId, PoiCategory, PoiDistribution, SimTime, TimeWindow, TransactionId,
};
use crate::protocol::{unexpected, Actor, Outgoing, ProtocolError};

/// A contact-tracing request kept verbatim for auditors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainedRequest {
    pub tx: TransactionId,
    pub envelope: SignedEnvelope,
    pub received_at: SimTime,
}

/// JSON-lines form of a retained request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceLine {
    pub tx: TransactionId,
    pub received_at: SimTime,
    pub envelope: String,
}

impl From<&RetainedRequest> for EvidenceLine {
    fn from(r: &RetainedRequest) -> Self {
        EvidenceLine {
            tx: r.tx,
            received_at: r.received_at,
            envelope: r.envelope.to_base64(),
        }
    }
}

/// Per-group bookkeeping for one handled request, in group-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct HandledRequest {
    pub tx: TransactionId,
    pub group_visit_counts: Vec<BTreeMap<PoiCategory, u64>>,
    pub group_distributions: Vec<PoiDistribution>,
    pub overall: PoiDistribution,
}

pub struct LocationProvider {
    keys: PartyKeys,
    store: Arc<LocationStore>,
    policy: ContactPolicy,
    rng: ChaCha8Rng,
    keystore: KeyStore,
    retained: Vec<RetainedRequest>,
    handled: BTreeMap<TransactionId, HandledRequest>,
}

impl LocationProvider {
    pub fn new(keys: PartyKeys, store: Arc<LocationStore>, policy: ContactPolicy, rng: ChaCha8Rng) -> Self {
        LocationProvider {
            keys,
            store,
            policy,
            rng,
            keystore: KeyStore::new(),
            retained: Vec::new(),
            handled: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &LocationStore {
        &self.store
    }

    pub fn keystore(&self) -> &KeyStore {
        &self.keystore
    }

    pub fn retained(&self) -> &[RetainedRequest] {
        &self.retained
    }

    pub fn handled(&self) -> &BTreeMap<TransactionId, HandledRequest> {
        &self.handled
    }

    /// Retained requests received inside `window`.
    pub fn export_evidence(&self, window: TimeWindow) -> Vec<RetainedRequest> {
        self.retained
            .iter()
            .filter(|r| window.contains(r.received_at))
            .cloned()
            .collect()
    }

    /// Risk set and POI visit counts of one group, computed in the clear.
    pub fn group_result(&self, members: &[crate::model::UserId], window: TimeWindow) -> (GroupResultPlain, BTreeMap<PoiCategory, u64>) {
        let own: BTreeSet<_> = members.iter().collect();
        let risk_contacts = members
            .iter()
            .flat_map(|m| self.store.risk_contacts(m, window, &self.policy))
            .filter(|c| !own.contains(c))
            .collect();
        let counts = self.store.poi_category_counts(members, window, &self.policy);
        (
            GroupResultPlain {
                risk_contacts,
                poi_distribution: normalize_counts(&counts),
            },
            counts,
        )
    }

    fn handle_request(&mut self, now: SimTime, req: ContactTracingRequest, envelope: &SignedEnvelope) -> Result<Vec<Outgoing>, ProtocolError> {
        if self.handled.contains_key(&req.tx) {
            return Err(ProtocolError::DuplicateTransaction(req.tx));
        }
        let violations = validate_request(&req);
        if !violations.is_empty() {
            return Err(ProtocolError::InvalidRequest { tx: req.tx, violations });
        }
        let window = self.policy.lookback_window(now);
        let mut groups: Vec<_> = req.groups.iter().collect();
        groups.sort_by_key(|g| g.group_index);
        let results: Vec<_> = groups
            .par_iter()
            .map(|g| self.group_result(&g.member_ids, window))
            .collect();

        let mut ciphertexts = Vec::with_capacity(groups.len());
        let mut counts = Vec::with_capacity(groups.len());
        let mut dists = Vec::with_capacity(groups.len());
        for (g, (plain, c)) in groups.iter().zip(results) {
            let key = GroupKey::generate(req.tx, g.group_index, &mut self.rng);
            ciphertexts.push(GroupCiphertext {
                group_index: g.group_index,
                ciphertext: encrypt_group(&key, &plain, &mut self.rng),
            });
            self.keystore.put(key).expect("fresh transaction");
            dists.push(plain.poi_distribution);
            counts.push(c);
        }
        let overall = self.store.poi_distribution(req.all_ids(), window, &self.policy);
        self.retained.push(RetainedRequest {
            tx: req.tx,
            envelope: envelope.clone(),
            received_at: now,
        });
        self.handled.insert(
            req.tx,
            HandledRequest {
                tx: req.tx,
                group_visit_counts: counts,
                group_distributions: dists,
                overall: overall.clone(),
            },
        );
        let reply = Message::ContactTracingReply(ContactTracingReply {
            tx: req.tx,
            group_ciphertexts: ciphertexts,
            overall_poi_distribution: overall,
        });
        Ok(vec![Outgoing {
            to: PartyId::Ha,
            envelope: self.keys.sign_message(&reply),
        }])
    }

    fn handle_keys_request(&self, tx: TransactionId) -> Outgoing {
        let result = if self.handled.contains_key(&tx) {
            Ok(self.keystore.keys_for(tx).iter().map(GroupKey::entry).collect())
        } else {
            Err(KeysError::UnknownTransaction)
        };
        Outgoing {
            to: PartyId::Itpa,
            envelope: self.keys.sign_message(&Message::KeysReply(KeysReply { tx, result })),
        }
    }
}

impl Actor for LocationProvider {
    fn party(&self) -> PartyId {
        PartyId::Lp
    }

    fn handle(&mut self, now: SimTime, from: PartyId, msg: Message, envelope: &SignedEnvelope) -> Result<Vec<Outgoing>, ProtocolError> {
        match (from, msg) {
            (PartyId::Ha, Message::ContactTracingRequest(req)) => self.handle_request(now, req, envelope),
            (PartyId::Itpa, Message::KeysRequestToLp(req)) => Ok(vec![self.handle_keys_request(req.tx)]),
            (from, msg) => Err(unexpected(PartyId::Lp, from, &msg)),
        }
    }
}
