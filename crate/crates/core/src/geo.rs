//! Location-provider side spatiotemporal store and contact detection.
//!
//! Raw samples are resampled onto a fixed time grid (bin centers at multiples
//! of `bin_width_s`); each bin takes the nearest raw sample within
//! `max_gap_s`. Binned positions are indexed per bin in a uniform spatial grid
//! whose cell side equals the largest interaction radius, so a radius query
//! only needs the 3x3 neighbourhood of the query cell.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ContactPolicy, PoiCategory, PoiDistribution, SimTime, TimeWindow, UserId};

/// Oracle refuses instances larger than this many users.
pub const ORACLE_MAX_USERS: usize = 200;
/// Oracle refuses instances needing more subject-bin x other-bin comparisons.
pub const ORACLE_MAX_BIN_PAIRS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: String,
    pub category: PoiCategory,
    pub x: f64,
    pub y: f64,
    pub radius_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationSample {
    pub user: UserId,
    pub t: SimTime,
    pub x: f64,
    pub y: f64,
    pub accuracy_m: f64,
    /// Ground-truth POI label, when the generator knows it.
    pub poi: Option<Arc<str>>,
}

/// A stored sample, stripped of its owner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    pub t: SimTime,
    pub x: f64,
    pub y: f64,
    pub accuracy_m: f64,
}

/// Position assigned to one time bin; `t` is the bin center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinnedPosition {
    pub t: SimTime,
    pub x: f64,
    pub y: f64,
    pub accuracy_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContactKind {
    Direct,
    Indirect,
}

/// One detected exposure of `contact` to `subject`.
///
/// `overlap` is in seconds for direct hits and in exposed bins for indirect ones.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContactHit {
    pub subject: UserId,
    pub contact: UserId,
    pub kind: ContactKind,
    pub overlap: i64,
    pub first_t: SimTime,
    pub last_t: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiVisit {
    pub poi_id: String,
    pub category: PoiCategory,
    pub start_t: SimTime,
    pub end_t: SimTime,
    pub dwell_s: i64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub accepted: usize,
    pub rejected_invalid: usize,
    pub rejected_duplicate: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("oracle guard exceeded: {users} users, {bin_pairs} bin pairs")]
    GuardExceeded { users: usize, bin_pairs: u64 },
}

fn within(dx: f64, dy: f64, r: f64) -> bool {
    dx * dx + dy * dy <= r * r
}

fn floor_div(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

fn ceil_div(a: i64, b: i64) -> i64 {
    -(-a).div_euclid(b)
}

/// Resamples a time-sorted trace onto bin centers inside `window`.
pub fn resample_trace(samples: &[RawSample], window: TimeWindow, bin_width_s: i64, max_gap_s: i64) -> Vec<BinnedPosition> {
    let mut out = Vec::new();
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return out;
    };
    let lo = window.start.max(first.t.saturating_sub(max_gap_s));
    let hi = window.end.min(last.t.saturating_add(max_gap_s));
    if lo > hi {
        return out;
    }
    let mut k = ceil_div(lo, bin_width_s);
    let k_end = floor_div(hi, bin_width_s);
    // index of the last sample with t <= center
    let mut j = samples.partition_point(|s| s.t <= k * bin_width_s);
    while k <= k_end {
        let c = k * bin_width_s;
        while j < samples.len() && samples[j].t <= c {
            j += 1;
        }
        let left = j.checked_sub(1).map(|i| &samples[i]);
        let right = samples.get(j);
        let best = match (left, right) {
            (Some(l), Some(r)) => {
                if c - l.t <= r.t - c {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => unreachable!(),
        };
        if (best.t - c).abs() <= max_gap_s {
            out.push(BinnedPosition {
                t: c,
                x: best.x,
                y: best.y,
                accuracy_m: best.accuracy_m,
            });
            k += 1;
        } else if let Some(r) = right {
            // skip the uncovered stretch up to the next sample's reach
            k = (k + 1).max(ceil_div(r.t - max_gap_s, bin_width_s));
        } else {
            break;
        }
    }
    out
}

type Cell = (i64, i64);

#[derive(Debug, Clone, Copy)]
struct IndexEntry {
    cell: Cell,
    user: u32,
    // A copy rather than an index keeps neighbourhood scans cache-friendly.
    at: BinnedPosition,
}

/// Per-bin spatial grid over binned positions.
#[derive(Debug, Default)]
struct BinIndex {
    first_bin: i64,
    offsets: Vec<usize>,
    entries: Vec<IndexEntry>,
}

impl BinIndex {
    fn slice(&self, bin: i64) -> &[IndexEntry] {
        if self.offsets.len() < 2 || bin < self.first_bin {
            return &[];
        }
        let i = (bin - self.first_bin) as usize;
        if i + 1 >= self.offsets.len() {
            return &[];
        }
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Grid over POIs answering "which POI contains this point".
#[derive(Debug, Clone, Default)]
pub struct PoiIndex {
    pois: Vec<Poi>,
    cell_m: f64,
    cells: HashMap<Cell, Vec<u32>>,
}

impl PoiIndex {
    pub fn new(pois: Vec<Poi>) -> Self {
        let cell_m = pois.iter().map(|p| p.radius_m).fold(1.0, f64::max);
        let mut cells: HashMap<Cell, Vec<u32>> = HashMap::new();
        for (i, p) in pois.iter().enumerate() {
            let x0 = ((p.x - p.radius_m) / cell_m).floor() as i64;
            let x1 = ((p.x + p.radius_m) / cell_m).floor() as i64;
            let y0 = ((p.y - p.radius_m) / cell_m).floor() as i64;
            let y1 = ((p.y + p.radius_m) / cell_m).floor() as i64;
            for cx in x0..=x1 {
                for cy in y0..=y1 {
                    cells.entry((cx, cy)).or_default().push(i as u32);
                }
            }
        }
        PoiIndex { pois, cell_m, cells }
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    /// Index of the nearest POI whose radius contains `(x, y)`; ties go to the lower index.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        let cell = ((x / self.cell_m).floor() as i64, (y / self.cell_m).floor() as i64);
        let mut best: Option<(f64, u32)> = None;
        for &i in self.cells.get(&cell)? {
            let p = &self.pois[i as usize];
            let (dx, dy) = (x - p.x, y - p.y);
            if !within(dx, dy, p.radius_m) {
                continue;
            }
            let d2 = dx * dx + dy * dy;
            if best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && i < bi)) {
                best = Some((d2, i));
            }
        }
        best.map(|(_, i)| i as usize)
    }
}

/// Build-once, read-many store of user traces.
#[derive(Debug)]
pub struct LocationStore {
    users: Vec<UserId>,
    user_index: HashMap<UserId, u32>,
    traces: Vec<Vec<RawSample>>,
    binned: Vec<Vec<BinnedPosition>>,
    bin_width_s: i64,
    max_gap_s: i64,
    cell_m: f64,
    max_accuracy_m: f64,
    index: BinIndex,
    sample_cells: HashMap<Cell, Vec<(u32, u32)>>,
    stats: IngestStats,
    pois: PoiIndex,
}

impl LocationStore {
    /// Ingests samples in any order. Invalid samples (non-finite values,
    /// negative accuracy) and repeated timestamps of one user are dropped and
    /// counted.
    pub fn ingest<I: IntoIterator<Item = LocationSample>>(samples: I, policy: &ContactPolicy) -> Self {
        let mut stats = IngestStats::default();
        let mut users: Vec<UserId> = Vec::new();
        let mut user_index: HashMap<UserId, u32> = HashMap::new();
        let mut traces: Vec<Vec<RawSample>> = Vec::new();
        for s in samples {
            let valid = s.x.is_finite() && s.y.is_finite() && s.accuracy_m.is_finite() && s.accuracy_m >= 0.0;
            if !valid {
                stats.rejected_invalid += 1;
                continue;
            }
            let idx = *user_index.entry(s.user.clone()).or_insert_with(|| {
                users.push(s.user.clone());
                traces.push(Vec::new());
                (users.len() - 1) as u32
            });
            traces[idx as usize].push(RawSample {
                t: s.t,
                x: s.x,
                y: s.y,
                accuracy_m: s.accuracy_m,
            });
        }
        for trace in &mut traces {
            trace.sort_by_key(|s| s.t);
            let before = trace.len();
            trace.dedup_by_key(|s| s.t);
            stats.rejected_duplicate += before - trace.len();
            stats.accepted += trace.len();
        }
        // Stable user order independent of arrival order.
        let mut order: Vec<usize> = (0..users.len()).collect();
        order.sort_by(|&a, &b| users[a].cmp(&users[b]));
        let users: Vec<UserId> = order.iter().map(|&i| users[i].clone()).collect();
        let mut traces_sorted = Vec::with_capacity(order.len());
        for &i in &order {
            traces_sorted.push(std::mem::take(&mut traces[i]));
        }
        let user_index = users.iter().enumerate().map(|(i, u)| (u.clone(), i as u32)).collect();

        let cell_m = policy.direct_distance_m.max(policy.indirect_distance_m);
        let mut store = LocationStore {
            users,
            user_index,
            traces: traces_sorted,
            binned: Vec::new(),
            bin_width_s: policy.bin_width_s,
            max_gap_s: policy.max_gap_s,
            cell_m,
            max_accuracy_m: 0.0,
            index: BinIndex::default(),
            sample_cells: HashMap::new(),
            stats,
            pois: PoiIndex::default(),
        };
        store.build_indexes();
        store
    }

    pub fn with_pois(mut self, pois: Vec<Poi>) -> Self {
        self.pois = PoiIndex::new(pois);
        self
    }

    fn cell_of(&self, x: f64, y: f64) -> Cell {
        ((x / self.cell_m).floor() as i64, (y / self.cell_m).floor() as i64)
    }

    fn build_indexes(&mut self) {
        let w = self.bin_width_s;
        let gap = self.max_gap_s;
        self.binned = self
            .traces
            .iter()
            .map(|t| resample_trace(t, TimeWindow::all(), w, gap))
            .collect();
        self.max_accuracy_m = self
            .traces
            .iter()
            .flatten()
            .map(|s| s.accuracy_m)
            .fold(0.0, f64::max);

        for (u, trace) in self.traces.iter().enumerate() {
            for (i, s) in trace.iter().enumerate() {
                let cell = self.cell_of(s.x, s.y);
                self.sample_cells.entry(cell).or_default().push((u as u32, i as u32));
            }
        }

        let mut keyed: Vec<(i64, IndexEntry)> = Vec::with_capacity(self.binned.iter().map(Vec::len).sum());
        for (u, bins) in self.binned.iter().enumerate() {
            for b in bins {
                keyed.push((
                    b.t / w,
                    IndexEntry {
                        cell: self.cell_of(b.x, b.y),
                        user: u as u32,
                        at: *b,
                    },
                ));
            }
        }
        if keyed.is_empty() {
            return;
        }
        keyed.sort_unstable_by_key(|(bin, e)| (*bin, e.cell, e.user));
        let first_bin = keyed[0].0;
        let last_bin = keyed[keyed.len() - 1].0;
        let nbins = (last_bin - first_bin + 1) as usize;
        let mut offsets = vec![0usize; nbins + 1];
        for (bin, _) in &keyed {
            offsets[(bin - first_bin) as usize + 1] += 1;
        }
        for i in 0..nbins {
            offsets[i + 1] += offsets[i];
        }
        self.index = BinIndex {
            first_bin,
            offsets,
            entries: keyed.into_iter().map(|(_, e)| e).collect(),
        };
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn contains(&self, user: &UserId) -> bool {
        self.user_index.contains_key(user)
    }

    pub fn pois(&self) -> &[Poi] {
        self.pois.pois()
    }

    pub fn bin_width_s(&self) -> i64 {
        self.bin_width_s
    }

    pub fn max_gap_s(&self) -> i64 {
        self.max_gap_s
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_m
    }

    /// Time-sorted raw trace; empty for unknown users.
    pub fn raw_trace(&self, user: &UserId) -> &[RawSample] {
        self.user_index
            .get(user)
            .map(|&i| self.traces[i as usize].as_slice())
            .unwrap_or(&[])
    }

    /// Grid cell containing a point.
    pub fn sample_cell(&self, x: f64, y: f64) -> (i64, i64) {
        self.cell_of(x, y)
    }

    /// Raw samples whose position falls into `cell`.
    pub fn samples_in_cell(&self, cell: (i64, i64)) -> Vec<(&UserId, RawSample)> {
        self.sample_cells
            .get(&cell)
            .map(|v| {
                v.iter()
                    .map(|&(u, i)| (&self.users[u as usize], self.traces[u as usize][i as usize]))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn check_binning(&self, policy: &ContactPolicy) {
        assert!(
            policy.bin_width_s == self.bin_width_s && policy.max_gap_s == self.max_gap_s,
            "query policy binning ({}s/{}s) differs from the store's ({}s/{}s)",
            policy.bin_width_s,
            policy.max_gap_s,
            self.bin_width_s,
            self.max_gap_s
        );
    }

    fn binned_in(&self, user: u32, window: TimeWindow) -> &[BinnedPosition] {
        let bins = &self.binned[user as usize];
        let lo = bins.partition_point(|b| b.t < window.start);
        let hi = bins.partition_point(|b| b.t <= window.end);
        &bins[lo..hi.max(lo)]
    }

    /// One position per covered bin whose center lies in `window`.
    pub fn resample(&self, user: &UserId, window: TimeWindow, policy: &ContactPolicy) -> Vec<BinnedPosition> {
        match self.user_index.get(user) {
            None => Vec::new(),
            Some(&u) if policy.bin_width_s == self.bin_width_s && policy.max_gap_s == self.max_gap_s => {
                self.binned_in(u, window).to_vec()
            }
            Some(&u) => resample_trace(&self.traces[u as usize], window, policy.bin_width_s, policy.max_gap_s),
        }
    }

    /// Calls `f(user, position)` for every binned position at `bin` that lies
    /// within the grid neighbourhood covering `radius` around `(x, y)`.
    fn for_each_near(&self, bin: i64, x: f64, y: f64, radius: f64, f: impl FnMut(u32, &BinnedPosition)) {
        let slice = self.index.slice(bin);
        if slice.is_empty() {
            return;
        }
        let ring = ((radius / self.cell_m).ceil() as i64).max(1);
        self.for_each_around(slice, self.cell_of(x, y), ring, f);
    }

    fn for_each_around(&self, slice: &[IndexEntry], (cx, cy): (i64, i64), ring: i64, mut f: impl FnMut(u32, &BinnedPosition)) {
        for gx in cx - ring..=cx + ring {
            let lo = (gx, cy - ring);
            let hi = (gx, cy + ring);
            let start = slice.partition_point(|e| e.cell < lo);
            for e in &slice[start..] {
                if e.cell > hi {
                    break;
                }
                f(e.user, &e.at);
            }
        }
    }

    fn threshold(policy: &ContactPolicy, base: f64, a: &BinnedPosition, b: &BinnedPosition) -> f64 {
        if policy.accuracy_aware {
            base + a.accuracy_m + b.accuracy_m
        } else {
            base
        }
    }

    fn search_radius(&self, policy: &ContactPolicy, base: f64, p: &BinnedPosition) -> f64 {
        if policy.accuracy_aware {
            base + p.accuracy_m + self.max_accuracy_m
        } else {
            base
        }
    }

    /// Users co-located within `direct_distance_m` for at least
    /// `direct_min_duration_s`, sorted by contact id.
    pub fn find_direct_contacts(&self, subject: &UserId, window: TimeWindow, policy: &ContactPolicy) -> Vec<ContactHit> {
        self.check_binning(policy);
        let Some(&s) = self.user_index.get(subject) else {
            return Vec::new();
        };
        let w = self.bin_width_s;
        let mut acc: HashMap<u32, (i64, SimTime, SimTime)> = HashMap::new();
        for p in self.binned_in(s, window) {
            let radius = self.search_radius(policy, policy.direct_distance_m, p);
            self.for_each_near(p.t / w, p.x, p.y, radius, |u, q| {
                if u == s || !within(p.x - q.x, p.y - q.y, Self::threshold(policy, policy.direct_distance_m, p, q)) {
                    return;
                }
                let e = acc.entry(u).or_insert((0, p.t, p.t));
                e.0 += 1;
                e.1 = e.1.min(p.t);
                e.2 = e.2.max(p.t);
            });
        }
        let mut hits: Vec<ContactHit> = acc
            .into_iter()
            .filter(|(_, (n, _, _))| n * w >= policy.direct_min_duration_s)
            .map(|(u, (n, first, last))| ContactHit {
                subject: subject.clone(),
                contact: self.users[u as usize].clone(),
                kind: ContactKind::Direct,
                overlap: n * w,
                first_t: first,
                last_t: last,
            })
            .collect();
        hits.sort();
        hits
    }

    /// Users who occupied a spot within `indirect_distance_m` of where the
    /// subject had been at most `indirect_lag_s` earlier. Direct contacts are
    /// excluded.
    pub fn find_indirect_contacts(&self, subject: &UserId, window: TimeWindow, policy: &ContactPolicy) -> Vec<ContactHit> {
        let direct: BTreeSet<UserId> = self
            .find_direct_contacts(subject, window, policy)
            .into_iter()
            .map(|h| h.contact)
            .collect();
        self.indirect_excluding(subject, window, policy, &direct)
    }

    fn indirect_excluding(
        &self,
        subject: &UserId,
        window: TimeWindow,
        policy: &ContactPolicy,
        direct: &BTreeSet<UserId>,
    ) -> Vec<ContactHit> {
        let Some(&s) = self.user_index.get(subject) else {
            return Vec::new();
        };
        let w = self.bin_width_s;
        let lag_bins = policy.lag_bins();
        let last_bin = floor_div(window.end, w);
        let subject_bins = self.binned_in(s, window);
        let (Some(first), Some(last)) = (subject_bins.first(), subject_bins.last()) else {
            return Vec::new();
        };
        // Walk contact bins in order; each one is checked against the
        // subject's positions from the preceding `lag_bins` bins, grouped by
        // grid cell so each neighbourhood is scanned once.
        let mut exposed: HashMap<u32, Vec<SimTime>> = HashMap::new();
        let mut marks: Vec<(u32, SimTime)> = Vec::new();
        let mut cells: Vec<((i64, i64), f64, Vec<&BinnedPosition>)> = Vec::new();
        let mut lo = 0;
        for b in first.t / w..=(last.t / w + lag_bins).min(last_bin) {
            while lo < subject_bins.len() && subject_bins[lo].t / w < b - lag_bins {
                lo += 1;
            }
            let slice = self.index.slice(b);
            if slice.is_empty() {
                continue;
            }
            cells.clear();
            for p in subject_bins[lo..].iter().take_while(|p| p.t / w <= b) {
                let cell = self.cell_of(p.x, p.y);
                let radius = self.search_radius(policy, policy.indirect_distance_m, p);
                match cells.iter_mut().find(|(c, _, _)| *c == cell) {
                    Some((_, r, ps)) => {
                        *r = r.max(radius);
                        ps.push(p);
                    }
                    None => cells.push((cell, radius, vec![p])),
                }
            }
            for (cell, radius, ps) in &cells {
                let ring = ((radius / self.cell_m).ceil() as i64).max(1);
                self.for_each_around(slice, *cell, ring, |u, q| {
                    if u != s
                        && !marks.iter().any(|&(m, _)| m == u)
                        && ps.iter().any(|p| {
                            within(p.x - q.x, p.y - q.y, Self::threshold(policy, policy.indirect_distance_m, p, q))
                        })
                    {
                        marks.push((u, q.t));
                    }
                });
            }
            for (u, t) in marks.drain(..) {
                exposed.entry(u).or_default().push(t);
            }
        }
        let mut hits: Vec<ContactHit> = exposed
            .into_iter()
            .map(|(u, bins)| (self.users[u as usize].clone(), bins))
            .filter(|(contact, _)| !direct.contains(contact))
            .map(|(contact, bins)| ContactHit {
                subject: subject.clone(),
                contact,
                kind: ContactKind::Indirect,
                overlap: bins.len() as i64,
                first_t: *bins.first().unwrap(),
                last_t: *bins.last().unwrap(),
            })
            .collect();
        hits.sort();
        hits
    }

    /// Direct and indirect hits, sorted by (contact, kind).
    pub fn find_contacts(&self, subject: &UserId, window: TimeWindow, policy: &ContactPolicy) -> Vec<ContactHit> {
        let mut hits = self.find_direct_contacts(subject, window, policy);
        let direct: BTreeSet<UserId> = hits.iter().map(|h| h.contact.clone()).collect();
        hits.extend(self.indirect_excluding(subject, window, policy, &direct));
        hits.sort();
        hits
    }

    /// Ids of every direct or indirect contact of `subject`.
    pub fn risk_contacts(&self, subject: &UserId, window: TimeWindow, policy: &ContactPolicy) -> BTreeSet<UserId> {
        self.find_contacts(subject, window, policy)
            .into_iter()
            .map(|h| h.contact)
            .collect()
    }

    /// Runs of at least `poi_visit_min_s` consecutive bins inside one POI.
    pub fn poi_visits(&self, user: &UserId, window: TimeWindow, policy: &ContactPolicy) -> Vec<PoiVisit> {
        let bins = self.resample(user, window, policy);
        let w = policy.bin_width_s;
        let mut visits = Vec::new();
        let mut run: Option<(usize, SimTime, SimTime)> = None;
        let close = |run: Option<(usize, SimTime, SimTime)>, visits: &mut Vec<PoiVisit>| {
            if let Some((poi, start, end)) = run {
                let dwell = end - start + w;
                if dwell >= policy.poi_visit_min_s {
                    let p = &self.pois.pois()[poi];
                    visits.push(PoiVisit {
                        poi_id: p.id.clone(),
                        category: p.category,
                        start_t: start,
                        end_t: end,
                        dwell_s: dwell,
                    });
                }
            }
        };
        for b in &bins {
            let here = self.pois.locate(b.x, b.y);
            run = match (run, here) {
                (Some((poi, start, end)), Some(h)) if poi == h && b.t == end + w => Some((poi, start, b.t)),
                (prev, here) => {
                    close(prev, &mut visits);
                    here.map(|h| (h, b.t, b.t))
                }
            };
        }
        close(run, &mut visits);
        visits
    }

    /// Visit counts per category over `users`.
    pub fn poi_category_counts<'a, I>(&self, users: I, window: TimeWindow, policy: &ContactPolicy) -> BTreeMap<PoiCategory, u64>
    where
        I: IntoIterator<Item = &'a UserId>,
    {
        let mut counts = BTreeMap::new();
        for u in users {
            for v in self.poi_visits(u, window, policy) {
                *counts.entry(v.category).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Normalized category histogram of the visits of `users`; empty if none.
    pub fn poi_distribution<'a, I>(&self, users: I, window: TimeWindow, policy: &ContactPolicy) -> PoiDistribution
    where
        I: IntoIterator<Item = &'a UserId>,
    {
        normalize_counts(&self.poi_category_counts(users, window, policy))
    }
}

pub fn normalize_counts(counts: &BTreeMap<PoiCategory, u64>) -> PoiDistribution {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return PoiDistribution::new();
    }
    counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&c, &n)| (c, n as f64 / total as f64))
        .collect()
}

/// Weighted mixture of distributions; weights need not be normalized.
pub fn mix_distributions<'a, I>(parts: I) -> PoiDistribution
where
    I: IntoIterator<Item = (f64, &'a PoiDistribution)>,
{
    let mut acc: BTreeMap<PoiCategory, f64> = BTreeMap::new();
    let mut total = 0.0;
    for (weight, dist) in parts {
        if weight <= 0.0 || dist.is_empty() {
            continue;
        }
        total += weight;
        for (&c, &r) in dist {
            *acc.entry(c).or_insert(0.0) += weight * r;
        }
    }
    if total == 0.0 {
        return PoiDistribution::new();
    }
    acc.into_iter().map(|(c, v)| (c, v / total)).collect()
}

/// Total-variation distance between two distributions.
pub fn total_variation(a: &PoiDistribution, b: &PoiDistribution) -> f64 {
    PoiCategory::ALL
        .iter()
        .map(|c| (a.get(c).copied().unwrap_or(0.0) - b.get(c).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
        / 2.0
}

/// Exhaustive reference for [`LocationStore::find_contacts`].
///
/// Re-derives every binned position by scanning the raw samples bin by bin,
/// then compares every subject bin against every bin of every other user.
/// No spatial or temporal index is involved.
pub fn oracle_contacts(
    store: &LocationStore,
    subject: &UserId,
    window: TimeWindow,
    policy: &ContactPolicy,
) -> Result<Vec<ContactHit>, OracleError> {
    let users = store.users();
    if users.len() > ORACLE_MAX_USERS {
        return Err(OracleError::GuardExceeded {
            users: users.len(),
            bin_pairs: 0,
        });
    }
    let naive_bins = |samples: &[RawSample]| -> Vec<BinnedPosition> {
        let w = policy.bin_width_s;
        let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
            return Vec::new();
        };
        let lo = window.start.max(first.t - policy.max_gap_s);
        let hi = window.end.min(last.t + policy.max_gap_s);
        let mut out = Vec::new();
        if lo > hi {
            return out;
        }
        let mut c = ceil_div(lo, w) * w;
        while c <= hi {
            let mut best: Option<&RawSample> = None;
            for s in samples {
                let better = match best {
                    None => true,
                    Some(b) => (s.t - c).abs() < (b.t - c).abs(),
                };
                if better {
                    best = Some(s);
                }
            }
            let b = best.unwrap();
            if (b.t - c).abs() <= policy.max_gap_s {
                out.push(BinnedPosition {
                    t: c,
                    x: b.x,
                    y: b.y,
                    accuracy_m: b.accuracy_m,
                });
            }
            c += w;
        }
        out
    };
    let subject_bins = naive_bins(store.raw_trace(subject));
    let others: Vec<(&UserId, Vec<BinnedPosition>)> = users
        .iter()
        .filter(|u| *u != subject)
        .map(|u| (u, naive_bins(store.raw_trace(u))))
        .collect();
    let bin_pairs: u64 = others
        .iter()
        .map(|(_, b)| subject_bins.len() as u64 * b.len() as u64)
        .sum();
    if bin_pairs > ORACLE_MAX_BIN_PAIRS {
        return Err(OracleError::GuardExceeded {
            users: users.len(),
            bin_pairs,
        });
    }
    let thr = |base: f64, a: &BinnedPosition, b: &BinnedPosition| {
        if policy.accuracy_aware {
            base + a.accuracy_m + b.accuracy_m
        } else {
            base
        }
    };
    let mut hits = Vec::new();
    for (other, bins) in &others {
        let mut together: Vec<SimTime> = Vec::new();
        let mut exposed: BTreeSet<SimTime> = BTreeSet::new();
        for a in &subject_bins {
            for b in bins {
                let close_direct = within(a.x - b.x, a.y - b.y, thr(policy.direct_distance_m, a, b));
                if a.t == b.t && close_direct {
                    together.push(a.t);
                }
                let dt = b.t - a.t;
                if (0..=policy.indirect_lag_s).contains(&dt)
                    && within(a.x - b.x, a.y - b.y, thr(policy.indirect_distance_m, a, b))
                {
                    exposed.insert(b.t);
                }
            }
        }
        let duration = together.len() as i64 * policy.bin_width_s;
        if !together.is_empty() && duration >= policy.direct_min_duration_s {
            hits.push(ContactHit {
                subject: subject.clone(),
                contact: (*other).clone(),
                kind: ContactKind::Direct,
                overlap: duration,
                first_t: *together.iter().min().unwrap(),
                last_t: *together.iter().max().unwrap(),
            });
        } else if !exposed.is_empty() {
            hits.push(ContactHit {
                subject: subject.clone(),
                contact: (*other).clone(),
                kind: ContactKind::Indirect,
                overlap: exposed.len() as i64,
                first_t: *exposed.first().unwrap(),
                last_t: *exposed.last().unwrap(),
            });
        }
    }
    hits.sort();
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn u(i: u64) -> UserId {
        UserId::synthetic(i)
    }

    fn sample(user: u64, t: i64, x: f64, y: f64) -> LocationSample {
        LocationSample {
            user: u(user),
            t,
            x,
            y,
            accuracy_m: 0.0,
            poi: None,
        }
    }

    fn stationary(user: u64, x: f64, y: f64, from: i64, to: i64, step: i64) -> Vec<LocationSample> {
        (from..=to).step_by(step as usize).map(|t| sample(user, t, x, y)).collect()
    }

    fn all() -> TimeWindow {
        TimeWindow::all()
    }

    #[test]
    fn empty_stream_gives_empty_store() {
        let store = LocationStore::ingest(Vec::new(), &ContactPolicy::default());
        assert_eq!(store.user_count(), 0);
        assert!(store.find_contacts(&u(1), all(), &ContactPolicy::default()).is_empty());
    }

    #[test]
    fn shuffled_samples_come_out_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut samples: Vec<LocationSample> = (0..3)
            .flat_map(|user| (0..100).map(move |i| sample(user, i * 60, i as f64, 0.0)))
            .collect();
        use rand::seq::SliceRandom;
        samples.shuffle(&mut rng);
        let store = LocationStore::ingest(samples, &ContactPolicy::default());
        assert_eq!(store.user_count(), 3);
        for user in 0..3 {
            let trace = store.raw_trace(&u(user));
            assert_eq!(trace.len(), 100);
            assert!(trace.windows(2).all(|w| w[0].t < w[1].t));
        }
    }

    #[test]
    fn invalid_and_duplicate_samples_are_counted() {
        let mut bad = sample(1, 0, f64::NAN, 0.0);
        let samples = vec![
            sample(1, 0, 0.0, 0.0),
            sample(1, 0, 5.0, 0.0),
            {
                bad.accuracy_m = 1.0;
                bad
            },
            LocationSample {
                accuracy_m: -1.0,
                ..sample(1, 60, 0.0, 0.0)
            },
        ];
        let store = LocationStore::ingest(samples, &ContactPolicy::default());
        assert_eq!(
            store.stats(),
            IngestStats {
                accepted: 1,
                rejected_invalid: 2,
                rejected_duplicate: 1
            }
        );
    }

    #[test]
    fn every_sample_found_in_its_own_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<LocationSample> = (0..10_000)
            .map(|i| sample(i % 37, i as i64, rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)))
            .collect();
        let store = LocationStore::ingest(samples.clone(), &ContactPolicy::default());
        for s in &samples {
            let cell = store.sample_cell(s.x, s.y);
            let found = store
                .samples_in_cell(cell)
                .iter()
                .any(|(user, r)| **user == s.user && r.t == s.t && r.x == s.x && r.y == s.y);
            assert!(found, "sample {s:?} missing from its cell");
        }
    }

    #[test]
    fn samples_on_bin_centers_map_identically() {
        let policy = ContactPolicy::default();
        let samples = stationary(1, 3.0, 4.0, 600, 1200, 60);
        let store = LocationStore::ingest(samples.clone(), &policy);
        let bins = store.resample(&u(1), all(), &policy);
        // nearest-sample rule also extends the first and last sample by max_gap
        let inner: Vec<_> = bins.iter().filter(|b| (600..=1200).contains(&b.t)).collect();
        assert_eq!(inner.len(), samples.len());
        for (b, s) in inner.iter().zip(&samples) {
            assert_eq!((b.t, b.x, b.y), (s.t, s.x, s.y));
        }
        let clipped = store.resample(&u(1), TimeWindow::new(600, 1200), &policy);
        assert_eq!(clipped.len(), samples.len());
    }

    #[test]
    fn long_gap_leaves_interior_bins_empty() {
        let policy = ContactPolicy::default();
        let gap = 3 * policy.max_gap_s;
        let samples = vec![sample(1, 0, 0.0, 0.0), sample(1, gap, 0.0, 0.0)];
        let store = LocationStore::ingest(samples, &policy);
        let bins = store.resample(&u(1), TimeWindow::new(0, gap), &policy);
        let times: Vec<i64> = bins.iter().map(|b| b.t).collect();
        assert_eq!(times, vec![0, 60, 120, 180, 360, 420, 480, 540]);
        assert!(store.resample(&u(99), all(), &policy).is_empty());
    }

    proptest! {
        #[test]
        fn resampled_positions_come_from_nearby_samples(
            times in prop::collection::btree_set(0i64..20_000, 1..60),
            seed in any::<u64>()
        ) {
            let policy = ContactPolicy::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<LocationSample> = times
                .iter()
                .map(|&t| sample(1, t, rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
                .collect();
            let store = LocationStore::ingest(samples.clone(), &policy);
            for b in store.resample(&u(1), all(), &policy) {
                prop_assert_eq!(b.t % policy.bin_width_s, 0);
                let src = samples.iter().find(|s| s.x == b.x && s.y == b.y).unwrap();
                prop_assert!((src.t - b.t).abs() <= policy.max_gap_s);
                // nothing strictly closer in time
                prop_assert!(samples.iter().all(|s| (s.t - b.t).abs() >= (src.t - b.t).abs()));
            }
        }
    }

    #[test]
    fn stationary_pair_is_a_direct_contact() {
        let policy = ContactPolicy {
            direct_min_duration_s: 600,
            ..ContactPolicy::default()
        };
        let mut samples = stationary(1, 0.0, 0.0, 0, 1800, 60);
        samples.extend(stationary(2, 1.0, 0.0, 0, 1800, 60));
        let store = LocationStore::ingest(samples, &policy);
        let hits = store.find_direct_contacts(&u(1), all(), &policy);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].contact, u(2));
        assert_eq!(hits[0].kind, ContactKind::Direct);
        assert!(hits[0].overlap >= 1800);
        assert!(store.find_indirect_contacts(&u(1), all(), &policy).is_empty());
    }

    #[test]
    fn far_apart_users_have_no_contact() {
        let policy = ContactPolicy {
            direct_distance_m: 4.0,
            ..ContactPolicy::default()
        };
        let mut samples = stationary(1, 0.0, 0.0, 0, 3600, 60);
        samples.extend(stationary(2, 100.0, 0.0, 0, 3600, 60));
        let store = LocationStore::ingest(samples, &policy);
        assert!(store.find_contacts(&u(1), all(), &policy).is_empty());
    }

    #[test]
    fn arrival_within_lag_is_indirect() {
        let policy = ContactPolicy::default();
        // subject at the spot until t=1200; the other user arrives lag/2 later
        let arrive = 1200 + policy.indirect_lag_s / 2;
        let mut samples = stationary(1, 0.0, 0.0, 0, 1200, 60);
        samples.extend(stationary(1, 500.0, 0.0, 1260, 4000, 60));
        samples.extend(stationary(2, 300.0, 300.0, 0, arrive - 60, 60));
        samples.extend(stationary(2, 0.5, 0.0, arrive, 4000, 60));
        let store = LocationStore::ingest(samples, &policy);
        let hits = store.find_indirect_contacts(&u(1), all(), &policy);
        assert_eq!(hits.len(), 1, "{hits:?}");
        assert_eq!(hits[0].contact, u(2));
        assert_eq!(hits[0].first_t, arrive);
        assert_eq!(hits, oracle_contacts(&store, &u(1), all(), &policy).unwrap());
    }

    #[test]
    fn arrival_after_twice_the_lag_is_not_a_contact() {
        let policy = ContactPolicy::default();
        let arrive = 1200 + 2 * policy.indirect_lag_s;
        let mut samples = stationary(1, 0.0, 0.0, 0, 1200, 60);
        samples.extend(stationary(1, 500.0, 0.0, 1260, 4000, 60));
        samples.extend(stationary(2, 300.0, 300.0, 0, arrive - 60, 60));
        samples.extend(stationary(2, 0.5, 0.0, arrive, 4000, 60));
        let store = LocationStore::ingest(samples, &policy);
        assert!(store.find_contacts(&u(1), all(), &policy).is_empty());
        assert!(oracle_contacts(&store, &u(1), all(), &policy).unwrap().is_empty());
    }

    #[test]
    fn accuracy_aware_matching_widens_threshold() {
        let base = ContactPolicy::default();
        let aware = ContactPolicy {
            accuracy_aware: true,
            ..base.clone()
        };
        let mut samples: Vec<LocationSample> = stationary(1, 0.0, 0.0, 0, 1800, 60);
        samples.extend(stationary(2, 7.0, 0.0, 0, 1800, 60));
        for s in &mut samples {
            s.accuracy_m = 3.0;
        }
        let store = LocationStore::ingest(samples, &base);
        assert!(store.find_contacts(&u(1), all(), &base).is_empty());
        let hits = store.find_contacts(&u(1), all(), &aware);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].kind, ContactKind::Direct);
        assert_eq!(hits, oracle_contacts(&store, &u(1), all(), &aware).unwrap());
    }

    fn random_walk_store(seed: u64, users: u64, steps: i64, policy: &ContactPolicy) -> LocationStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        for user in 0..users {
            let (mut x, mut y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
            let mut t = rng.random_range(0..120);
            for _ in 0..steps {
                samples.push(sample(user, t, x, y));
                x += rng.random_range(-1.5..1.5);
                y += rng.random_range(-1.5..1.5);
                t += rng.random_range(30..150);
            }
        }
        LocationStore::ingest(samples, policy)
    }

    #[test]
    fn fifty_user_random_walk_matches_oracle() {
        let policy = ContactPolicy {
            direct_min_duration_s: 300,
            ..ContactPolicy::default()
        };
        let store = random_walk_store(5, 50, 60, &policy);
        let mut total = 0;
        for subject in store.users().to_vec() {
            let fast = store.find_contacts(&subject, all(), &policy);
            let slow = oracle_contacts(&store, &subject, all(), &policy).unwrap();
            assert_eq!(fast, slow, "subject {subject}");
            total += fast.len();
        }
        assert!(total > 0, "scenario produced no contacts at all");
    }

    #[test]
    fn direct_contact_is_symmetric_and_monotone() {
        let policy = ContactPolicy {
            direct_min_duration_s: 300,
            ..ContactPolicy::default()
        };
        let looser = ContactPolicy {
            direct_distance_m: 3.0,
            direct_min_duration_s: 180,
            ..policy.clone()
        };
        for seed in 0..5 {
            let store = random_walk_store(seed, 30, 60, &policy);
            for a in store.users() {
                let strict = store.find_direct_contacts(a, all(), &policy);
                for h in &strict {
                    let back = store.find_direct_contacts(&h.contact, all(), &policy);
                    assert!(back.iter().any(|b| &b.contact == a));
                }
                let loose: BTreeSet<_> = store
                    .find_direct_contacts(a, all(), &looser)
                    .into_iter()
                    .map(|h| h.contact)
                    .collect();
                assert!(strict.iter().all(|h| loose.contains(&h.contact)));
            }
        }
    }

    #[test]
    fn results_are_deterministic() {
        let policy = ContactPolicy::default();
        let a = random_walk_store(7, 30, 60, &policy);
        let b = random_walk_store(7, 30, 60, &policy);
        for s in a.users() {
            assert_eq!(a.find_contacts(s, all(), &policy), b.find_contacts(s, all(), &policy));
        }
    }

    #[test]
    fn oracle_guard_refuses_large_instances() {
        let policy = ContactPolicy::default();
        let store = random_walk_store(1, 201, 2, &policy);
        assert!(matches!(
            oracle_contacts(&store, &u(0), all(), &policy),
            Err(OracleError::GuardExceeded { .. })
        ));
        let empty = LocationStore::ingest(Vec::new(), &policy);
        assert!(oracle_contacts(&empty, &u(0), all(), &policy).unwrap().is_empty());
    }

    fn poi(id: &str, category: PoiCategory, x: f64, y: f64, r: f64) -> Poi {
        Poi {
            id: id.into(),
            category,
            x,
            y,
            radius_m: r,
        }
    }

    #[test]
    fn hour_in_restaurant_is_one_visit() {
        let policy = ContactPolicy::default();
        let samples = stationary(1, 100.0, 100.0, 0, 3540, 60);
        let store = LocationStore::ingest(samples, &policy).with_pois(vec![poi("r1", PoiCategory::Restaurant, 101.0, 100.0, 10.0)]);
        let visits = store.poi_visits(&u(1), TimeWindow::new(0, 3599), &policy);
        assert_eq!(visits.len(), 1);
        assert_eq!(visits[0].dwell_s, 3600);
        assert_eq!(visits[0].category, PoiCategory::Restaurant);
    }

    #[test]
    fn passing_through_is_not_a_visit() {
        let policy = ContactPolicy::default();
        let samples: Vec<_> = (0..20).map(|i| sample(1, i * 60, i as f64 * 50.0, 0.0)).collect();
        let store = LocationStore::ingest(samples, &policy).with_pois(vec![poi("g", PoiCategory::Grocery, 500.0, 0.0, 10.0)]);
        assert!(store.poi_visits(&u(1), all(), &policy).is_empty());
    }

    #[test]
    fn overlapping_pois_nearest_center_wins() {
        let idx = PoiIndex::new(vec![
            poi("a", PoiCategory::Retail, 0.0, 0.0, 20.0),
            poi("b", PoiCategory::Sport, 10.0, 0.0, 20.0),
        ]);
        assert_eq!(idx.locate(3.0, 0.0), Some(0));
        assert_eq!(idx.locate(7.0, 0.0), Some(1));
        assert_eq!(idx.locate(5.0, 0.0), Some(0));
        assert_eq!(idx.locate(100.0, 0.0), None);
    }

    #[test]
    fn distribution_of_two_and_two() {
        let policy = ContactPolicy::default();
        let pois = vec![
            poi("r", PoiCategory::Restaurant, 0.0, 0.0, 10.0),
            poi("t", PoiCategory::Transit, 1000.0, 0.0, 10.0),
        ];
        let mut samples = Vec::new();
        let mut t = 0;
        for (x, _) in [(0.0, 0), (1000.0, 1), (0.0, 2), (1000.0, 3)] {
            samples.extend(stationary(1, x, 0.0, t, t + 600, 60));
            samples.extend(stationary(1, 500.0, 500.0, t + 660, t + 1200, 60));
            t += 1260;
        }
        let store = LocationStore::ingest(samples, &policy).with_pois(pois);
        let dist = store.poi_distribution([&u(1)], all(), &policy);
        assert_eq!(
            dist,
            [(PoiCategory::Restaurant, 0.5), (PoiCategory::Transit, 0.5)]
                .into_iter()
                .collect()
        );
        assert!(store.poi_distribution(std::iter::empty(), all(), &policy).is_empty());
    }

    #[test]
    fn group_mixture_reconstructs_pooled_distribution() {
        let policy = ContactPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cats = PoiCategory::ALL;
        let pois: Vec<Poi> = (0..12)
            .map(|i| poi(&format!("p{i}"), cats[i % cats.len()], i as f64 * 200.0, 0.0, 15.0))
            .collect();
        let mut samples = Vec::new();
        for user in 0..20u64 {
            let mut t = 0;
            for _ in 0..rng.random_range(0..6) {
                let p = &pois[rng.random_range(0..pois.len())];
                let dwell = rng.random_range(5..30) * 60;
                samples.extend(stationary(user, p.x, p.y, t, t + dwell, 60));
                samples.extend(stationary(user, -5000.0, -5000.0, t + dwell + 60, t + dwell + 600, 60));
                t += dwell + 660;
            }
        }
        let store = LocationStore::ingest(samples, &policy).with_pois(pois);
        let users: Vec<UserId> = (0..20).map(u).collect();
        let pooled = store.poi_distribution(&users, all(), &policy);
        let parts: Vec<(f64, PoiDistribution)> = users
            .chunks(3)
            .map(|g| {
                let n: u64 = store.poi_category_counts(g, all(), &policy).values().sum();
                (n as f64, store.poi_distribution(g, all(), &policy))
            })
            .collect();
        let mixed = mix_distributions(parts.iter().map(|(w, d)| (*w, d)));
        assert!(!pooled.is_empty());
        assert!(total_variation(&pooled, &mixed) * 2.0 <= 1e-9 * 10.0);
        for c in PoiCategory::ALL {
            let a = pooled.get(&c).copied().unwrap_or(0.0);
            let b = mixed.get(&c).copied().unwrap_or(0.0);
            assert!((a - b).abs() <= 1e-9);
        }
    }
}
