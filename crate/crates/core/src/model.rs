//! Identifiers, protocol messages and parameter records shared by every party.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Simulation clock, in unix-style seconds.
pub type SimTime = i64;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid user id {0:?}: expected '+' followed by 8-15 digits")]
    InvalidUserId(String),
    #[error("invalid transaction id {0:?}")]
    InvalidTransactionId(String),
    #[error("unknown party {0:?}")]
    UnknownParty(String),
    #[error("unknown POI category {0:?}")]
    UnknownCategory(String),
    #[error("invalid contact policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid grouping parameters: {0}")]
    InvalidGrouping(String),
}

/// E.164-shaped phone number used as the shared user identifier.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(Arc<str>);

impl UserId {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let digits = s
            .strip_prefix('+')
            .ok_or_else(|| ModelError::InvalidUserId(s.to_owned()))?;
        if !(8..=15).contains(&digits.len()) || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ModelError::InvalidUserId(s.to_owned()));
        }
        Ok(UserId(Arc::from(s)))
    }

    /// Synthetic number `+1555NNNNNNN` for simulated person `index` (< 10^7).
    pub fn synthetic(index: u64) -> Self {
        assert!(index < 10_000_000, "synthetic index out of range");
        UserId(Arc::from(format!("+1555{index:07}")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UserId({})", &self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for UserId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UserId::parse(s)
    }
}

impl Serialize for UserId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for UserId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        UserId::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// 128-bit transaction identifier shared by every message of one tracing round.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransactionId(pub [u8; 16]);

impl TransactionId {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        TransactionId(rng.random())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx:{}", self.to_hex())
    }
}

impl fmt::Display for TransactionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for TransactionId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(ModelError::InvalidTransactionId(s.to_owned()));
        }
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out)
            .map_err(|_| ModelError::InvalidTransactionId(s.to_owned()))?;
        Ok(TransactionId(out))
    }
}

impl Serialize for TransactionId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for TransactionId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The four protocol roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartyId {
    #[serde(rename = "HA")]
    Ha,
    #[serde(rename = "LP")]
    Lp,
    #[serde(rename = "IDP")]
    Idp,
    #[serde(rename = "ITPA")]
    Itpa,
}

impl PartyId {
    pub const ALL: [PartyId; 4] = [PartyId::Ha, PartyId::Lp, PartyId::Idp, PartyId::Itpa];

    pub fn tag(self) -> u8 {
        match self {
            PartyId::Ha => 1,
            PartyId::Lp => 2,
            PartyId::Idp => 3,
            PartyId::Itpa => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        PartyId::ALL.into_iter().find(|p| p.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            PartyId::Ha => "HA",
            PartyId::Lp => "LP",
            PartyId::Idp => "IDP",
            PartyId::Itpa => "ITPA",
        }
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartyId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PartyId::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::UnknownParty(s.to_owned()))
    }
}

/// Epidemiological contact parameters applied by the location provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactPolicy {
    pub direct_distance_m: f64,
    pub direct_min_duration_s: i64,
    pub indirect_distance_m: f64,
    /// How long a location stays infectious after the subject was there.
    pub indirect_lag_s: i64,
    pub lookback_days: u32,
    pub bin_width_s: i64,
    pub max_gap_s: i64,
    pub poi_visit_min_s: i64,
    /// Inflate distance thresholds by both samples' reported accuracy radii.
    pub accuracy_aware: bool,
}

impl Default for ContactPolicy {
    fn default() -> Self {
        ContactPolicy {
            direct_distance_m: 2.0,
            direct_min_duration_s: 900,
            indirect_distance_m: 5.0,
            indirect_lag_s: 600,
            lookback_days: 10,
            bin_width_s: 60,
            max_gap_s: 180,
            poi_visit_min_s: 300,
            accuracy_aware: false,
        }
    }
}

impl ContactPolicy {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidPolicy(msg.to_owned()));
        if !(self.direct_distance_m.is_finite() && self.direct_distance_m > 0.0) {
            return bad("direct_distance_m must be positive");
        }
        if !(self.indirect_distance_m.is_finite() && self.indirect_distance_m > 0.0) {
            return bad("indirect_distance_m must be positive");
        }
        if self.direct_min_duration_s <= 0
            || self.indirect_lag_s <= 0
            || self.bin_width_s <= 0
            || self.max_gap_s <= 0
            || self.poi_visit_min_s <= 0
        {
            return bad("all durations must be positive");
        }
        if self.lookback_days < 1 {
            return bad("lookback_days must be at least 1");
        }
        if self.direct_min_duration_s % self.bin_width_s != 0 {
            return bad("direct_min_duration_s must be a multiple of bin_width_s");
        }
        Ok(())
    }

    /// Search window ending at `now`.
    pub fn lookback_window(&self, now: SimTime) -> TimeWindow {
        TimeWindow::new(now - i64::from(self.lookback_days) * SECONDS_PER_DAY, now)
    }

    pub fn lag_bins(&self) -> i64 {
        self.indirect_lag_s / self.bin_width_s
    }
}

/// Closed time interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: SimTime,
    pub end: SimTime,
}

impl TimeWindow {
    pub fn new(start: SimTime, end: SimTime) -> Self {
        TimeWindow { start, end }
    }

    pub fn all() -> Self {
        TimeWindow::new(i64::MIN / 4, i64::MAX / 4)
    }

    pub fn contains(&self, t: SimTime) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn intersect(&self, other: &TimeWindow) -> TimeWindow {
        TimeWindow::new(self.start.max(other.start), self.end.min(other.end))
    }
}

/// Ranges the health authority draws its anonymity parameters from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingParams {
    pub n_random_min: usize,
    pub n_random_max: usize,
    pub l_infected_min: usize,
    pub l_infected_max: usize,
    pub k_groups_min: usize,
    pub k_groups_max: usize,
    pub group_size_min: usize,
    pub group_size_max: usize,
    pub reuse_fraction: f64,
    pub decoy_probability: f64,
    /// Floor on N / M.
    pub random_ratio_floor: usize,
    /// Floor on K / L.
    pub group_ratio_floor: usize,
}

impl Default for GroupingParams {
    fn default() -> Self {
        GroupingParams {
            n_random_min: 40,
            n_random_max: 120,
            l_infected_min: 1,
            l_infected_max: 3,
            k_groups_min: 16,
            k_groups_max: 48,
            group_size_min: 1,
            group_size_max: 8,
            reuse_fraction: 0.5,
            decoy_probability: 0.1,
            random_ratio_floor: 10,
            group_ratio_floor: 5,
        }
    }
}

impl GroupingParams {
    /// Checks the ranges against the expected number of positives per round.
    pub fn validate(&self, expected_m: f64) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidGrouping(msg));
        if self.n_random_min > self.n_random_max
            || self.l_infected_min > self.l_infected_max
            || self.k_groups_min > self.k_groups_max
            || self.group_size_min > self.group_size_max
        {
            return bad("every range must be non-empty".into());
        }
        if self.group_size_min == 0 || self.l_infected_max == 0 {
            return bad("group_size_min and l_infected_max must be at least 1".into());
        }
        if self.random_ratio_floor == 0 || self.group_ratio_floor == 0 {
            return bad("ratio floors must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.reuse_fraction) {
            return bad("reuse_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.decoy_probability) {
            return bad("decoy_probability must lie in [0, 1]".into());
        }
        if (self.n_random_min as f64) < self.random_ratio_floor as f64 * expected_m {
            return bad(format!(
                "n_random_min {} below {} x expected M {}",
                self.n_random_min, self.random_ratio_floor, expected_m
            ));
        }
        if self.k_groups_min < self.group_ratio_floor * self.l_infected_max {
            return bad(format!(
                "k_groups_min {} below {} x l_infected_max {}",
                self.k_groups_min, self.group_ratio_floor, self.l_infected_max
            ));
        }
        if self.k_groups_max * self.group_size_max < self.n_random_min {
            return bad("k_groups_max x group_size_max cannot hold n_random_min IDs".into());
        }
        Ok(())
    }
}

/// Point-of-interest categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoiCategory {
    Restaurant,
    Grocery,
    Transit,
    Hospital,
    Sport,
    Retail,
    Workplace,
    Residence,
    Education,
    Other,
}

impl PoiCategory {
    pub const ALL: [PoiCategory; 10] = [
        PoiCategory::Restaurant,
        PoiCategory::Grocery,
        PoiCategory::Transit,
        PoiCategory::Hospital,
        PoiCategory::Sport,
        PoiCategory::Retail,
        PoiCategory::Workplace,
        PoiCategory::Residence,
        PoiCategory::Education,
        PoiCategory::Other,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        PoiCategory::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PoiCategory::Restaurant => "restaurant",
            PoiCategory::Grocery => "grocery",
            PoiCategory::Transit => "transit",
            PoiCategory::Hospital => "hospital",
            PoiCategory::Sport => "sport",
            PoiCategory::Retail => "retail",
            PoiCategory::Workplace => "workplace",
            PoiCategory::Residence => "residence",
            PoiCategory::Education => "education",
            PoiCategory::Other => "other",
        }
    }
}

impl fmt::Display for PoiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoiCategory {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PoiCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ModelError::UnknownCategory(s.to_owned()))
    }
}

/// Normalized histogram of visited POI categories.
pub type PoiDistribution = BTreeMap<PoiCategory, f64>;

/// Sum of a distribution's ratios (0 for the empty map).
pub fn distribution_mass(dist: &PoiDistribution) -> f64 {
    dist.values().sum()
}

/// True when `dist` is empty or sums to 1 within `tol`.
pub fn is_normalized(dist: &PoiDistribution, tol: f64) -> bool {
    dist.is_empty() || (distribution_mass(dist) - 1.0).abs() <= tol
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub group_index: u32,
    pub member_ids: Vec<UserId>,
}

/// Step 4 message: K groups, L of which secretly hold positives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactTracingRequest {
    pub tx: TransactionId,
    pub groups: Vec<Group>,
}

impl ContactTracingRequest {
    pub fn group(&self, index: u32) -> Option<&Group> {
        self.groups.iter().find(|g| g.group_index == index)
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &UserId> {
        self.groups.iter().flat_map(|g| g.member_ids.iter())
    }

    pub fn id_count(&self) -> usize {
        self.groups.iter().map(|g| g.member_ids.len()).sum()
    }
}

/// Per-group answer before encryption. Carries no member attribution.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupResultPlain {
    pub risk_contacts: BTreeSet<UserId>,
    pub poi_distribution: PoiDistribution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCiphertext {
    pub group_index: u32,
    pub ciphertext: Vec<u8>,
}

/// Step 5 message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactTracingReply {
    pub tx: TransactionId,
    pub group_ciphertexts: Vec<GroupCiphertext>,
    pub overall_poi_distribution: PoiDistribution,
}

/// Step 2 message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomIdsRequest {
    pub tx: TransactionId,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdpError {
    /// Registry holds fewer IDs than requested.
    RegistryTooSmall { requested: u32, available: u32 },
}

/// Step 3 message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomIdsReply {
    pub tx: TransactionId,
    pub result: Result<Vec<UserId>, IdpError>,
}

/// Step 6 message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeysRequestToItpa {
    pub tx: TransactionId,
    pub total_groups: u32,
    pub infected_group_indices: BTreeSet<u32>,
}

/// Step 7 message: the transaction id only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeysRequestToLp {
    pub tx: TransactionId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKeyEntry {
    pub group_index: u32,
    pub key: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeysError {
    /// Number of LP keys differs from the group count declared by the HA.
    CountMismatch { declared: u32, received: u32 },
    UnknownTransaction,
    /// An infected index is not below the declared group count.
    InvalidDeclaration,
}

/// Steps 8 and 9 message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeysReply {
    pub tx: TransactionId,
    pub result: Result<Vec<GroupKeyEntry>, KeysError>,
}

/// Every message exchanged between parties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    RandomIdsRequest(RandomIdsRequest),
    RandomIdsReply(RandomIdsReply),
    ContactTracingRequest(ContactTracingRequest),
    ContactTracingReply(ContactTracingReply),
    KeysRequestToItpa(KeysRequestToItpa),
    KeysRequestToLp(KeysRequestToLp),
    KeysReply(KeysReply),
}

impl Message {
    pub fn tx(&self) -> TransactionId {
        match self {
            Message::RandomIdsRequest(m) => m.tx,
            Message::RandomIdsReply(m) => m.tx,
            Message::ContactTracingRequest(m) => m.tx,
            Message::ContactTracingReply(m) => m.tx,
            Message::KeysRequestToItpa(m) => m.tx,
            Message::KeysRequestToLp(m) => m.tx,
            Message::KeysReply(m) => m.tx,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::RandomIdsRequest(_) => "RandomIdsRequest",
            Message::RandomIdsReply(_) => "RandomIdsReply",
            Message::ContactTracingRequest(_) => "ContactTracingRequest",
            Message::ContactTracingReply(_) => "ContactTracingReply",
            Message::KeysRequestToItpa(_) => "KeysRequestToItpa",
            Message::KeysRequestToLp(_) => "KeysRequestToLp",
            Message::KeysReply(_) => "KeysReply",
        }
    }

    /// Every plaintext user id carried by the message.
    pub fn user_ids(&self) -> Vec<&UserId> {
        match self {
            Message::RandomIdsReply(m) => match &m.result {
                Ok(ids) => ids.iter().collect(),
                Err(_) => Vec::new(),
            },
            Message::ContactTracingRequest(m) => m.all_ids().collect(),
            Message::RandomIdsRequest(_)
            | Message::ContactTracingReply(_)
            | Message::KeysRequestToItpa(_)
            | Message::KeysRequestToLp(_)
            | Message::KeysReply(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfectedGroupResult {
    pub group_index: u32,
    pub result: GroupResultPlain,
}

/// What the HA acts upon in Step 11.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskContactReport {
    pub tx: TransactionId,
    pub per_infected_group: Vec<InfectedGroupResult>,
    pub all_risk_contacts: BTreeSet<UserId>,
}

impl RiskContactReport {
    pub fn from_groups(tx: TransactionId, per_infected_group: Vec<InfectedGroupResult>) -> Self {
        let all_risk_contacts = per_infected_group
            .iter()
            .flat_map(|g| g.result.risk_contacts.iter().cloned())
            .collect();
        RiskContactReport {
            tx,
            per_infected_group,
            all_risk_contacts,
        }
    }
}

/// Structural defects of a contact-tracing request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestViolation {
    NoGroups,
    EmptyGroup { group_index: u32 },
    DuplicateWithinGroup { group_index: u32, user: UserId },
    DuplicateAcrossGroups { user: UserId, group_indices: Vec<u32> },
    /// Group indices are not exactly `0..K`.
    BadIndex { group_index: u32 },
    MissingIndex { group_index: u32 },
}

/// Lists every structural violation; an empty list means the request is valid.
pub fn validate_request(req: &ContactTracingRequest) -> Vec<RequestViolation> {
    let mut out = Vec::new();
    if req.groups.is_empty() {
        out.push(RequestViolation::NoGroups);
        return out;
    }
    let k = req.groups.len() as u32;
    let mut seen_index = vec![false; req.groups.len()];
    let mut owners: BTreeMap<&UserId, Vec<u32>> = BTreeMap::new();
    for group in &req.groups {
        let idx = group.group_index;
        if idx >= k || seen_index[idx as usize] {
            out.push(RequestViolation::BadIndex { group_index: idx });
        } else {
            seen_index[idx as usize] = true;
        }
        if group.member_ids.is_empty() {
            out.push(RequestViolation::EmptyGroup { group_index: idx });
        }
        let mut local = BTreeSet::new();
        for id in &group.member_ids {
            if !local.insert(id) {
                out.push(RequestViolation::DuplicateWithinGroup {
                    group_index: idx,
                    user: id.clone(),
                });
            } else {
                owners.entry(id).or_default().push(idx);
            }
        }
    }
    for (i, seen) in seen_index.iter().enumerate() {
        if !seen {
            out.push(RequestViolation::MissingIndex { group_index: i as u32 });
        }
    }
    for (user, groups) in owners {
        if groups.len() > 1 {
            out.push(RequestViolation::DuplicateAcrossGroups {
                user: user.clone(),
                group_indices: groups,
            });
        }
    }
    out
}
