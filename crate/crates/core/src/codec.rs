//! Canonical binary encoding of protocol messages.
//!
//! Layout: a version byte and a schema tag, then fields in declaration order.
//! Integers are big-endian, strings and byte strings carry a `u32` length
//! prefix, lists a `u32` count. Sets and maps are emitted in ascending order
//! and the decoder rejects any other order, so `encode(decode(b)) == b` holds
//! for every accepted `b`.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::*;

pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("input truncated")]
    Truncated,
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("unknown {what} tag {tag}")]
    UnknownTag { what: &'static str, tag: u8 },
    #[error("non-canonical encoding: {0}")]
    NotCanonical(&'static str),
    #[error("invalid field: {0}")]
    InvalidField(String),
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        // -0.0 and 0.0 compare equal; give them one encoding.
        let v = if v == 0.0 { 0.0 } else { v };
        self.u64(v.to_bits());
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn bytes(&mut self, bytes: &[u8]) {
        self.u32(len32(bytes.len()));
        self.raw(bytes);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn len(&mut self, n: usize) {
        self.u32(len32(n));
    }
}

fn len32(n: usize) -> u32 {
    u32::try_from(n).expect("collection too large for canonical encoding")
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(CodecError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        let bits = self.u64()?;
        let v = f64::from_bits(bits);
        if !v.is_finite() {
            return Err(CodecError::InvalidField("non-finite number".into()));
        }
        if bits == (-0.0f64).to_bits() {
            return Err(CodecError::NotCanonical("negative zero"));
        }
        Ok(v)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<&'a str, CodecError> {
        std::str::from_utf8(self.bytes()?).map_err(|_| CodecError::InvalidField("utf-8".into()))
    }

    /// Count prefix, bounded by the remaining input so garbage cannot force
    /// huge allocations.
    pub fn count(&mut self, min_item_bytes: usize) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item_bytes.max(1)) > self.remaining() {
            return Err(CodecError::Truncated);
        }
        Ok(n)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}

/// Types with a canonical byte encoding.
pub trait Canonical: Sized {
    fn encode(&self, w: &mut Writer);
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError>;
}

/// Canonical bytes of `value`.
pub fn canonical_bytes<T: Canonical>(value: &T) -> Vec<u8> {
    let mut w = Writer::new();
    value.encode(&mut w);
    w.into_bytes()
}

/// Decodes `bytes`, requiring that they are consumed exactly.
pub fn from_canonical_bytes<T: Canonical>(bytes: &[u8]) -> Result<T, CodecError> {
    let mut r = Reader::new(bytes);
    let v = T::decode(&mut r)?;
    r.finish()?;
    Ok(v)
}

impl Canonical for UserId {
    fn encode(&self, w: &mut Writer) {
        w.str(self.as_str());
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let s = r.str()?;
        UserId::parse(s).map_err(|e| CodecError::InvalidField(e.to_string()))
    }
}

impl Canonical for TransactionId {
    fn encode(&self, w: &mut Writer) {
        w.raw(&self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(TransactionId(r.array()?))
    }
}

impl Canonical for PartyId {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.tag());
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let tag = r.u8()?;
        PartyId::from_tag(tag).ok_or(CodecError::UnknownTag { what: "party", tag })
    }
}

fn encode_list<T: Canonical>(w: &mut Writer, items: &[T]) {
    w.len(items.len());
    for item in items {
        item.encode(w);
    }
}

fn decode_list<T: Canonical>(r: &mut Reader<'_>, min_item: usize) -> Result<Vec<T>, CodecError> {
    let n = r.count(min_item)?;
    (0..n).map(|_| T::decode(r)).collect()
}

fn encode_set<T: Canonical + Ord>(w: &mut Writer, set: &BTreeSet<T>) {
    w.len(set.len());
    for item in set {
        item.encode(w);
    }
}

fn decode_set<T: Canonical + Ord>(r: &mut Reader<'_>, min_item: usize) -> Result<BTreeSet<T>, CodecError> {
    let items: Vec<T> = decode_list(r, min_item)?;
    if items.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CodecError::NotCanonical("set not strictly ascending"));
    }
    Ok(items.into_iter().collect())
}

impl Canonical for u32 {
    fn encode(&self, w: &mut Writer) {
        w.u32(*self);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.u32()
    }
}

impl Canonical for PoiDistribution {
    fn encode(&self, w: &mut Writer) {
        w.len(self.len());
        for (cat, ratio) in self {
            w.u8(cat.tag());
            w.f64(*ratio);
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.count(9)?;
        let mut out = BTreeMap::new();
        let mut prev: Option<PoiCategory> = None;
        for _ in 0..n {
            let tag = r.u8()?;
            let cat = PoiCategory::from_tag(tag).ok_or(CodecError::UnknownTag { what: "category", tag })?;
            if prev.is_some_and(|p| p >= cat) {
                return Err(CodecError::NotCanonical("map keys not strictly ascending"));
            }
            prev = Some(cat);
            out.insert(cat, r.f64()?);
        }
        Ok(out)
    }
}

impl Canonical for Group {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.group_index);
        encode_list(w, &self.member_ids);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Group {
            group_index: r.u32()?,
            member_ids: decode_list(r, 4)?,
        })
    }
}

impl Canonical for ContactTracingRequest {
    fn encode(&self, w: &mut Writer) {
        self.tx.encode(w);
        encode_list(w, &self.groups);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ContactTracingRequest {
            tx: TransactionId::decode(r)?,
            groups: decode_list(r, 8)?,
        })
    }
}

impl Canonical for GroupResultPlain {
    fn encode(&self, w: &mut Writer) {
        encode_set(w, &self.risk_contacts);
        self.poi_distribution.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(GroupResultPlain {
            risk_contacts: decode_set(r, 4)?,
            poi_distribution: PoiDistribution::decode(r)?,
        })
    }
}

impl Canonical for GroupCiphertext {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.group_index);
        w.bytes(&self.ciphertext);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(GroupCiphertext {
            group_index: r.u32()?,
            ciphertext: r.bytes()?.to_vec(),
        })
    }
}

impl Canonical for ContactTracingReply {
    fn encode(&self, w: &mut Writer) {
        self.tx.encode(w);
        encode_list(w, &self.group_ciphertexts);
        self.overall_poi_distribution.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ContactTracingReply {
            tx: TransactionId::decode(r)?,
            group_ciphertexts: decode_list(r, 8)?,
            overall_poi_distribution: PoiDistribution::decode(r)?,
        })
    }
}

impl Canonical for RandomIdsRequest {
    fn encode(&self, w: &mut Writer) {
        self.tx.encode(w);
        w.u32(self.count);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(RandomIdsRequest {
            tx: TransactionId::decode(r)?,
            count: r.u32()?,
        })
    }
}

impl Canonical for RandomIdsReply {
    fn encode(&self, w: &mut Writer) {
        self.tx.encode(w);
        match &self.result {
            Ok(ids) => {
                w.u8(0);
                encode_list(w, ids);
            }
            Err(IdpError::RegistryTooSmall { requested, available }) => {
                w.u8(1);
                w.u32(*requested);
                w.u32(*available);
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let tx = TransactionId::decode(r)?;
        let result = match r.u8()? {
            0 => Ok(decode_list(r, 4)?),
            1 => Err(IdpError::RegistryTooSmall {
                requested: r.u32()?,
                available: r.u32()?,
            }),
            tag => return Err(CodecError::UnknownTag { what: "idp result", tag }),
        };
        Ok(RandomIdsReply { tx, result })
    }
}

impl Canonical for KeysRequestToItpa {
    fn encode(&self, w: &mut Writer) {
        self.tx.encode(w);
        w.u32(self.total_groups);
        encode_set(w, &self.infected_group_indices);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(KeysRequestToItpa {
            tx: TransactionId::decode(r)?,
            total_groups: r.u32()?,
            infected_group_indices: decode_set(r, 4)?,
        })
    }
}

impl Canonical for KeysRequestToLp {
    fn encode(&self, w: &mut Writer) {
        self.tx.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(KeysRequestToLp {
            tx: TransactionId::decode(r)?,
        })
    }
}

impl Canonical for GroupKeyEntry {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.group_index);
        w.raw(&self.key);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(GroupKeyEntry {
            group_index: r.u32()?,
            key: r.array()?,
        })
    }
}

impl Canonical for KeysReply {
    fn encode(&self, w: &mut Writer) {
        self.tx.encode(w);
        match &self.result {
            Ok(entries) => {
                w.u8(0);
                encode_list(w, entries);
            }
            Err(KeysError::CountMismatch { declared, received }) => {
                w.u8(1);
                w.u32(*declared);
                w.u32(*received);
            }
            Err(KeysError::UnknownTransaction) => w.u8(2),
            Err(KeysError::InvalidDeclaration) => w.u8(3),
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let tx = TransactionId::decode(r)?;
        let result = match r.u8()? {
            0 => {
                let entries: Vec<GroupKeyEntry> = decode_list(r, 36)?;
                if entries.windows(2).any(|w| w[0].group_index >= w[1].group_index) {
                    return Err(CodecError::NotCanonical("key entries not ordered by group index"));
                }
                Ok(entries)
            }
            1 => Err(KeysError::CountMismatch {
                declared: r.u32()?,
                received: r.u32()?,
            }),
            2 => Err(KeysError::UnknownTransaction),
            3 => Err(KeysError::InvalidDeclaration),
            tag => return Err(CodecError::UnknownTag { what: "keys result", tag }),
        };
        Ok(KeysReply { tx, result })
    }
}

const TAG_RANDOM_IDS_REQUEST: u8 = 1;
const TAG_RANDOM_IDS_REPLY: u8 = 2;
const TAG_CT_REQUEST: u8 = 3;
const TAG_CT_REPLY: u8 = 4;
const TAG_KEYS_REQUEST_ITPA: u8 = 5;
const TAG_KEYS_REQUEST_LP: u8 = 6;
const TAG_KEYS_REPLY: u8 = 7;

impl Canonical for Message {
    fn encode(&self, w: &mut Writer) {
        w.u8(FORMAT_VERSION);
        match self {
            Message::RandomIdsRequest(m) => {
                w.u8(TAG_RANDOM_IDS_REQUEST);
                m.encode(w)
            }
            Message::RandomIdsReply(m) => {
                w.u8(TAG_RANDOM_IDS_REPLY);
                m.encode(w)
            }
            Message::ContactTracingRequest(m) => {
                w.u8(TAG_CT_REQUEST);
                m.encode(w)
            }
            Message::ContactTracingReply(m) => {
                w.u8(TAG_CT_REPLY);
                m.encode(w)
            }
            Message::KeysRequestToItpa(m) => {
                w.u8(TAG_KEYS_REQUEST_ITPA);
                m.encode(w)
            }
            Message::KeysRequestToLp(m) => {
                w.u8(TAG_KEYS_REQUEST_LP);
                m.encode(w)
            }
            Message::KeysReply(m) => {
                w.u8(TAG_KEYS_REPLY);
                m.encode(w)
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(CodecError::BadVersion(version));
        }
        Ok(match r.u8()? {
            TAG_RANDOM_IDS_REQUEST => Message::RandomIdsRequest(Canonical::decode(r)?),
            TAG_RANDOM_IDS_REPLY => Message::RandomIdsReply(Canonical::decode(r)?),
            TAG_CT_REQUEST => Message::ContactTracingRequest(Canonical::decode(r)?),
            TAG_CT_REPLY => Message::ContactTracingReply(Canonical::decode(r)?),
            TAG_KEYS_REQUEST_ITPA => Message::KeysRequestToItpa(Canonical::decode(r)?),
            TAG_KEYS_REQUEST_LP => Message::KeysRequestToLp(Canonical::decode(r)?),
            TAG_KEYS_REPLY => Message::KeysReply(Canonical::decode(r)?),
            tag => return Err(CodecError::UnknownTag { what: "message", tag }),
        })
    }
}
