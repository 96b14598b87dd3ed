//! Signed envelopes, per-group authenticated encryption and the LP key store.

use std::collections::{BTreeMap, HashMap};
use std::sync::RwLock;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{canonical_bytes, from_canonical_bytes, Canonical, CodecError, Reader, Writer};
use crate::model::{GroupKeyEntry, GroupResultPlain, Message, PartyId, TransactionId};

const SIGNATURE_DOMAIN: &[u8] = b"geotrace/envelope/v1";
const GROUP_AAD_DOMAIN: &[u8] = b"geotrace/group/v1";
const NONCE_LEN: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("no registered public key for {0}")]
    UnknownSender(PartyId),
    #[error("signature does not verify")]
    BadSignature,
    #[error("payload does not decode: {0}")]
    Malformed(#[from] CodecError),
    #[error("payload transaction {payload} differs from envelope transaction {envelope}")]
    TransactionMismatch {
        envelope: TransactionId,
        payload: TransactionId,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    /// Wrong key or tampered ciphertext.
    #[error("authentication failed")]
    AuthFailure,
    #[error("decrypted plaintext is malformed: {0}")]
    Malformed(CodecError),
}

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("key for {party}: {reason}")]
    BadKey { party: String, reason: String },
}

/// A message signed by its sender, bound to a transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedEnvelope {
    pub sender: PartyId,
    pub tx: TransactionId,
    pub payload: Vec<u8>,
    pub signature: [u8; 64],
}

impl SignedEnvelope {
    /// Decodes the payload without checking the signature.
    pub fn message(&self) -> Result<Message, CodecError> {
        from_canonical_bytes(&self.payload)
    }

    /// SHA-256 over the canonical envelope bytes, hex encoded.
    pub fn digest_hex(&self) -> String {
        hex::encode(Sha256::digest(canonical_bytes(self)))
    }

    pub fn to_base64(&self) -> String {
        B64.encode(canonical_bytes(self))
    }

    pub fn from_base64(s: &str) -> Result<Self, CodecError> {
        let bytes = B64
            .decode(s)
            .map_err(|e| CodecError::InvalidField(format!("base64: {e}")))?;
        from_canonical_bytes(&bytes)
    }
}

impl Canonical for SignedEnvelope {
    fn encode(&self, w: &mut Writer) {
        self.sender.encode(w);
        self.tx.encode(w);
        w.bytes(&self.payload);
        w.raw(&self.signature);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(SignedEnvelope {
            sender: PartyId::decode(r)?,
            tx: TransactionId::decode(r)?,
            payload: r.bytes()?.to_vec(),
            signature: r.array()?,
        })
    }
}

fn signed_bytes(sender: PartyId, tx: &TransactionId, payload: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(SIGNATURE_DOMAIN);
    w.u8(sender.tag());
    w.raw(&tx.0);
    w.bytes(payload);
    w.into_bytes()
}

/// A party's signing key.
pub struct PartyKeys {
    party: PartyId,
    signing: SigningKey,
}

impl PartyKeys {
    /// Deterministic key for simulation runs.
    pub fn derive(party: PartyId, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"geotrace/party-key/v1");
        h.update(seed.to_be_bytes());
        h.update([party.tag()]);
        let secret: [u8; 32] = h.finalize().into();
        PartyKeys {
            party,
            signing: SigningKey::from_bytes(&secret),
        }
    }

    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn public_key(&self) -> VerifyingKey {
        self.signing.verifying_key()
    }

    pub fn sign(&self, tx: TransactionId, payload: Vec<u8>) -> SignedEnvelope {
        let sig = self.signing.sign(&signed_bytes(self.party, &tx, &payload));
        SignedEnvelope {
            sender: self.party,
            tx,
            payload,
            signature: sig.to_bytes(),
        }
    }

    pub fn sign_message(&self, msg: &Message) -> SignedEnvelope {
        self.sign(msg.tx(), canonical_bytes(msg))
    }
}

/// Public keys of every party; all that is needed to re-verify a transcript.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyRegistry {
    keys: BTreeMap<PartyId, VerifyingKey>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        KeyRegistry::default()
    }

    pub fn register(&mut self, party: PartyId, key: VerifyingKey) {
        self.keys.insert(party, key);
    }

    pub fn get(&self, party: PartyId) -> Option<&VerifyingKey> {
        self.keys.get(&party)
    }

    pub fn verify(&self, env: &SignedEnvelope) -> Result<(), VerifyError> {
        let key = self
            .keys
            .get(&env.sender)
            .ok_or(VerifyError::UnknownSender(env.sender))?;
        let sig = Signature::from_bytes(&env.signature);
        key.verify_strict(&signed_bytes(env.sender, &env.tx, &env.payload), &sig)
            .map_err(|_| VerifyError::BadSignature)
    }

    /// Verifies the signature, decodes the payload and checks the transaction binding.
    pub fn open(&self, env: &SignedEnvelope) -> Result<Message, VerifyError> {
        self.verify(env)?;
        let msg = env.message()?;
        if msg.tx() != env.tx {
            return Err(VerifyError::TransactionMismatch {
                envelope: env.tx,
                payload: msg.tx(),
            });
        }
        Ok(msg)
    }

    /// JSON object mapping party names to base64 public keys.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, String> = self
            .keys
            .iter()
            .map(|(p, k)| (p.name(), B64.encode(k.as_bytes())))
            .collect();
        serde_json::to_string_pretty(&map).expect("registry serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, RegistryError> {
        let map: BTreeMap<String, String> = serde_json::from_str(s)?;
        let mut reg = KeyRegistry::new();
        for (name, b64) in map {
            let bad = |reason: String| RegistryError::BadKey {
                party: name.clone(),
                reason,
            };
            let party: PartyId = name.parse().map_err(|e: crate::model::ModelError| bad(e.to_string()))?;
            let bytes = B64.decode(&b64).map_err(|e| bad(e.to_string()))?;
            let arr: [u8; 32] = bytes.try_into().map_err(|_| bad("expected 32 bytes".into()))?;
            let key = VerifyingKey::from_bytes(&arr).map_err(|e| bad(e.to_string()))?;
            reg.register(party, key);
        }
        Ok(reg)
    }
}

/// Symmetric key protecting one group of one transaction.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupKey {
    pub tx: TransactionId,
    pub group_index: u32,
    pub key: [u8; 32],
}

impl std::fmt::Debug for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GroupKey")
            .field("tx", &self.tx)
            .field("group_index", &self.group_index)
            .finish_non_exhaustive()
    }
}

impl GroupKey {
    pub fn generate<R: Rng + ?Sized>(tx: TransactionId, group_index: u32, rng: &mut R) -> Self {
        GroupKey {
            tx,
            group_index,
            key: rng.random(),
        }
    }

    pub fn from_entry(tx: TransactionId, entry: &GroupKeyEntry) -> Self {
        GroupKey {
            tx,
            group_index: entry.group_index,
            key: entry.key,
        }
    }

    pub fn entry(&self) -> GroupKeyEntry {
        GroupKeyEntry {
            group_index: self.group_index,
            key: self.key,
        }
    }

    fn aad(&self) -> Vec<u8> {
        let mut aad = GROUP_AAD_DOMAIN.to_vec();
        aad.extend_from_slice(&self.tx.0);
        aad.extend_from_slice(&self.group_index.to_be_bytes());
        aad
    }
}

/// Encrypts a group result; output is `nonce || ciphertext+tag`.
pub fn encrypt_group<R: Rng + ?Sized>(key: &GroupKey, result: &GroupResultPlain, rng: &mut R) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.key));
    let nonce: [u8; NONCE_LEN] = rng.random();
    let plaintext = canonical_bytes(result);
    let aad = key.aad();
    let ct = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: &plaintext,
                aad: &aad,
            },
        )
        .expect("in-memory encryption cannot fail");
    let mut out = nonce.to_vec();
    out.extend_from_slice(&ct);
    out
}

pub fn decrypt_group(key: &GroupKey, ciphertext: &[u8]) -> Result<GroupResultPlain, CryptoError> {
    if ciphertext.len() < NONCE_LEN {
        return Err(CryptoError::AuthFailure);
    }
    let (nonce, body) = ciphertext.split_at(NONCE_LEN);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.key));
    let aad = key.aad();
    let plaintext = cipher
        .decrypt(Nonce::from_slice(nonce), Payload { msg: body, aad: &aad })
        .map_err(|_| CryptoError::AuthFailure)?;
    from_canonical_bytes(&plaintext).map_err(CryptoError::Malformed)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyStoreError {
    #[error("a key for {tx} group {group_index} is already stored")]
    Duplicate { tx: TransactionId, group_index: u32 },
}

/// LP-side record of every group key it issued.
#[derive(Debug, Default)]
pub struct KeyStore {
    keys: RwLock<HashMap<(TransactionId, u32), GroupKey>>,
}

impl KeyStore {
    pub fn new() -> Self {
        KeyStore::default()
    }

    pub fn put(&self, key: GroupKey) -> Result<(), KeyStoreError> {
        let mut map = self.keys.write().expect("keystore lock poisoned");
        let slot = (key.tx, key.group_index);
        if map.contains_key(&slot) {
            return Err(KeyStoreError::Duplicate {
                tx: key.tx,
                group_index: key.group_index,
            });
        }
        map.insert(slot, key);
        Ok(())
    }

    pub fn get(&self, tx: TransactionId, group_index: u32) -> Option<GroupKey> {
        self.keys
            .read()
            .expect("keystore lock poisoned")
            .get(&(tx, group_index))
            .cloned()
    }

    /// All keys of `tx`, ordered by group index.
    pub fn keys_for(&self, tx: TransactionId) -> Vec<GroupKey> {
        let map = self.keys.read().expect("keystore lock poisoned");
        let mut out: Vec<GroupKey> = map.values().filter(|k| k.tx == tx).cloned().collect();
        out.sort_by_key(|k| k.group_index);
        out
    }

    pub fn len(&self) -> usize {
        self.keys.read().expect("keystore lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Registry holding the deterministic keys of all four parties for `seed`.
pub fn simulation_keys(seed: u64) -> (KeyRegistry, BTreeMap<PartyId, PartyKeys>) {
    let mut registry = KeyRegistry::new();
    let mut keys = BTreeMap::new();
    for party in PartyId::ALL {
        let k = PartyKeys::derive(party, seed);
        registry.register(party, k.public_key());
        keys.insert(party, k);
    }
    (registry, keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KeysRequestToLp, PoiCategory, UserId};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn msg() -> Message {
        Message::KeysRequestToLp(KeysRequestToLp {
            tx: TransactionId([3; 16]),
        })
    }

    #[test]
    fn sign_then_verify() {
        let (reg, keys) = simulation_keys(1);
        let env = keys[&PartyId::Ha].sign_message(&msg());
        assert_eq!(reg.open(&env).unwrap(), msg());
    }

    #[test]
    fn flipped_payload_byte_rejected() {
        let (reg, keys) = simulation_keys(1);
        let mut env = keys[&PartyId::Ha].sign_message(&msg());
        env.payload[3] ^= 1;
        assert_eq!(reg.verify(&env), Err(VerifyError::BadSignature));
    }

    #[test]
    fn relabeled_sender_rejected() {
        let (reg, keys) = simulation_keys(1);
        let mut env = keys[&PartyId::Lp].sign_message(&msg());
        env.sender = PartyId::Ha;
        assert_eq!(reg.verify(&env), Err(VerifyError::BadSignature));
    }

    #[test]
    fn unknown_sender_has_distinct_cause() {
        let (_, keys) = simulation_keys(1);
        let env = keys[&PartyId::Itpa].sign_message(&msg());
        assert_eq!(KeyRegistry::new().verify(&env), Err(VerifyError::UnknownSender(PartyId::Itpa)));
    }

    #[test]
    fn every_single_bit_flip_is_rejected() {
        let (reg, keys) = simulation_keys(9);
        let env = keys[&PartyId::Lp].sign_message(&msg());
        let bytes = canonical_bytes(&env);
        for bit in 0..bytes.len() * 8 {
            let mut b = bytes.clone();
            b[bit / 8] ^= 1 << (bit % 8);
            let ok = from_canonical_bytes::<SignedEnvelope>(&b)
                .map(|e| reg.verify(&e).is_ok())
                .unwrap_or(false);
            assert!(!ok, "bit {bit} flip went undetected");
        }
    }

    #[test]
    fn registry_json_round_trip() {
        let (reg, _) = simulation_keys(5);
        assert_eq!(KeyRegistry::from_json(&reg.to_json()).unwrap(), reg);
        assert!(KeyRegistry::from_json(r#"{"HA":"AAAA"}"#).is_err());
    }

    fn result(ids: &[u64]) -> GroupResultPlain {
        GroupResultPlain {
            risk_contacts: ids.iter().map(|&i| UserId::synthetic(i)).collect(),
            poi_distribution: [(PoiCategory::Restaurant, 0.25), (PoiCategory::Transit, 0.75)]
                .into_iter()
                .collect(),
        }
    }

    #[test]
    fn group_round_trip_and_sibling_key_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tx = TransactionId([1; 16]);
        let k0 = GroupKey::generate(tx, 0, &mut rng);
        let k1 = GroupKey::generate(tx, 1, &mut rng);
        let ct = encrypt_group(&k0, &result(&[1, 2]), &mut rng);
        assert_eq!(decrypt_group(&k0, &ct).unwrap(), result(&[1, 2]));
        assert_eq!(decrypt_group(&k1, &ct), Err(CryptoError::AuthFailure));
        let mut tampered = ct.clone();
        tampered[20] ^= 0x80;
        assert_eq!(decrypt_group(&k0, &tampered), Err(CryptoError::AuthFailure));
        assert_eq!(decrypt_group(&k0, &ct[..5]), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn same_key_bytes_other_index_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = GroupKey::generate(TransactionId([1; 16]), 2, &mut rng);
        let ct = encrypt_group(&k, &result(&[]), &mut rng);
        let moved = GroupKey { group_index: 3, ..k };
        assert_eq!(decrypt_group(&moved, &ct), Err(CryptoError::AuthFailure));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn random_results_round_trip(ids in prop::collection::vec(0u64..100_000, 0..30), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tx = TransactionId(rng.random());
            let k = GroupKey::generate(tx, 0, &mut rng);
            let sibling = GroupKey::generate(tx, 1, &mut rng);
            let r = result(&ids);
            let ct = encrypt_group(&k, &r, &mut rng);
            prop_assert_eq!(decrypt_group(&k, &ct).unwrap(), r);
            prop_assert_eq!(decrypt_group(&sibling, &ct), Err(CryptoError::AuthFailure));
        }
    }

    #[test]
    fn keystore_put_get() {
        let store = KeyStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tx = TransactionId([2; 16]);
        let k = GroupKey::generate(tx, 4, &mut rng);
        store.put(k.clone()).unwrap();
        assert_eq!(store.get(tx, 4), Some(k.clone()));
        assert_eq!(store.get(TransactionId([9; 16]), 4), None);
        assert!(store.put(k).is_err());
    }

    #[test]
    fn ten_thousand_keys_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = HashSet::new();
        for t in 0..100u8 {
            let tx = TransactionId([t; 16]);
            for g in 0..100 {
                assert!(seen.insert(GroupKey::generate(tx, g, &mut rng).key));
            }
        }
    }
}
