//! Deterministic synthetic world: population, POIs, daily schedules, LP
//! coverage and infection draws.
//!
//! Traces are not stored. Each person keeps a list of schedule segments and
//! samples are produced on demand at every bin center, so a world of a few
//! hundred people over a week stays small in memory.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::formats;
use crate::geo::{LocationSample, LocationStore, Poi};
use crate::intermediaries::PopulationRegistry;
use crate::model::{ContactPolicy, GroupingParams, PoiCategory, SimTime, UserId, SECONDS_PER_DAY};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario file: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityParams {
    pub household_size_max: usize,
    /// Share of people with a workplace or school.
    pub work_fraction: f64,
    pub visits_per_day_min: usize,
    pub visits_per_day_max: usize,
    pub dwell_min_s: i64,
    pub dwell_max_s: i64,
    pub speed_mps: f64,
    /// Mean time of day people leave home.
    pub leave_home_s: i64,
    /// Width of the uniform jitter around departure and shift length.
    pub jitter_s: i64,
    pub work_hours_s: i64,
}

impl Default for MobilityParams {
    fn default() -> Self {
        MobilityParams {
            household_size_max: 4,
            work_fraction: 0.7,
            visits_per_day_min: 0,
            visits_per_day_max: 3,
            dwell_min_s: 20 * 60,
            dwell_max_s: 90 * 60,
            speed_mps: 1.4,
            leave_home_s: 8 * 3600,
            jitter_s: 3600,
            work_hours_s: 8 * 3600,
        }
    }
}

fn default_poi_counts() -> BTreeMap<PoiCategory, usize> {
    use PoiCategory::*;
    [
        (Restaurant, 8),
        (Grocery, 4),
        (Transit, 6),
        (Hospital, 1),
        (Sport, 3),
        (Retail, 6),
        (Workplace, 10),
        (Education, 3),
        (Other, 4),
    ]
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub population: usize,
    /// Side of the square world, meters.
    pub area_m: f64,
    pub days: u32,
    /// Fraction of the population whose traces the LP holds.
    pub lp_coverage: f64,
    /// Standard deviation of the Gaussian noise on reported positions.
    pub location_noise_m: f64,
    pub daily_positives: usize,
    /// POIs per category; residences are created per household and ignored here.
    pub poi_counts: BTreeMap<PoiCategory, usize>,
    pub mobility: MobilityParams,
    pub policy: ContactPolicy,
    pub grouping: GroupingParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            population: 150,
            area_m: 1500.0,
            days: 7,
            lp_coverage: 1.0,
            location_noise_m: 2.0,
            daily_positives: 2,
            poi_counts: default_poi_counts(),
            mobility: MobilityParams::default(),
            policy: ContactPolicy::default(),
            grouping: GroupingParams::default(),
        }
    }
}

const VISIT_CATEGORIES: [PoiCategory; 7] = [
    PoiCategory::Restaurant,
    PoiCategory::Grocery,
    PoiCategory::Transit,
    PoiCategory::Hospital,
    PoiCategory::Sport,
    PoiCategory::Retail,
    PoiCategory::Other,
];

fn poi_radius(c: PoiCategory) -> f64 {
    match c {
        PoiCategory::Residence => 10.0,
        PoiCategory::Transit => 10.0,
        PoiCategory::Other => 10.0,
        PoiCategory::Restaurant => 12.0,
        PoiCategory::Grocery | PoiCategory::Retail => 15.0,
        PoiCategory::Workplace | PoiCategory::Sport => 25.0,
        PoiCategory::Hospital | PoiCategory::Education => 30.0,
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..=1.0).contains(&self.lp_coverage) {
            return bad(format!("lp_coverage {} outside [0, 1]", self.lp_coverage));
        }
        if !(self.location_noise_m.is_finite() && self.location_noise_m >= 0.0) {
            return bad("location_noise_m must be finite and non-negative".into());
        }
        if !(self.area_m.is_finite() && self.area_m > 0.0) {
            return bad("area_m must be positive".into());
        }
        if self.days == 0 {
            return bad("days must be at least 1".into());
        }
        let m = &self.mobility;
        if m.household_size_max == 0 {
            return bad("household_size_max must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&m.work_fraction) {
            return bad("work_fraction outside [0, 1]".into());
        }
        if m.visits_per_day_min > m.visits_per_day_max || m.dwell_min_s > m.dwell_max_s || m.dwell_min_s <= 0 {
            return bad("mobility ranges must be non-empty and dwell positive".into());
        }
        if !(m.speed_mps.is_finite() && m.speed_mps > 0.0) {
            return bad("speed_mps must be positive".into());
        }
        if m.jitter_s < 0 || m.work_hours_s < 0 || !(0..SECONDS_PER_DAY).contains(&m.leave_home_s) {
            return bad("schedule times out of range".into());
        }
        let count = |cats: &[PoiCategory]| -> usize { cats.iter().map(|c| self.poi_counts.get(c).copied().unwrap_or(0)).sum() };
        if m.visits_per_day_max > 0 && count(&VISIT_CATEGORIES) == 0 {
            return bad("visits requested but no visitable POIs".into());
        }
        if m.work_fraction > 0.0 && count(&[PoiCategory::Workplace, PoiCategory::Education]) == 0 {
            return bad("work_fraction > 0 but no workplaces or schools".into());
        }
        let need = self.grouping.n_random_max + crate::ha::round_capacity(&self.grouping);
        if self.population > 0 && self.population < need {
            return bad(format!(
                "population {} cannot supply a full request ({need} ids)",
                self.population
            ));
        }
        self.policy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.grouping
            .validate(self.daily_positives as f64)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

/// Independent RNG stream for `(seed, label, index)`.
pub fn derived_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"geotrace/rng/v1");
    h.update(seed.to_be_bytes());
    h.update((label.len() as u64).to_be_bytes());
    h.update(label.as_bytes());
    h.update(index.to_be_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Stay {
        start: SimTime,
        end: SimTime,
        x: f64,
        y: f64,
        poi: u32,
    },
    Move {
        start: SimTime,
        end: SimTime,
        from: (f64, f64),
        to: (f64, f64),
    },
}

impl Segment {
    fn start(&self) -> SimTime {
        match *self {
            Segment::Stay { start, .. } | Segment::Move { start, .. } => start,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Person {
    pub id: UserId,
    pub household: usize,
    pub home_poi: usize,
    pub work_poi: Option<usize>,
}

/// A stay at a POI as scheduled by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedVisit {
    pub poi: usize,
    pub start: SimTime,
    pub end: SimTime,
}

#[derive(Debug, Clone)]
pub struct World {
    config: ScenarioConfig,
    pois: Vec<Poi>,
    poi_labels: Vec<Arc<str>>,
    persons: Vec<Person>,
    schedules: Vec<Vec<Segment>>,
    covered: Vec<bool>,
    registry: PopulationRegistry,
}

/// Minimum gap between the edges of two POIs.
const POI_MARGIN_M: f64 = 10.0;

fn place_pois(cfg: &ScenarioConfig, households: usize, rng: &mut ChaCha8Rng) -> Vec<Poi> {
    let mut wanted: Vec<PoiCategory> = Vec::new();
    for (&c, &n) in &cfg.poi_counts {
        if c != PoiCategory::Residence {
            wanted.extend(std::iter::repeat_n(c, n));
        }
    }
    wanted.extend(std::iter::repeat_n(PoiCategory::Residence, households));
    let mut pois: Vec<Poi> = Vec::with_capacity(wanted.len());
    for (i, c) in wanted.into_iter().enumerate() {
        let r = poi_radius(c);
        let hi = (cfg.area_m - r).max(r + 1e-9);
        let mut spot = (0.0, 0.0);
        let mut clear = false;
        for _ in 0..1000 {
            spot = (rng.random_range(r..hi), rng.random_range(r..hi));
            clear = pois.iter().all(|p| {
                let sep = p.radius_m + r + POI_MARGIN_M;
                (p.x - spot.0).powi(2) + (p.y - spot.1).powi(2) >= sep * sep
            });
            if clear {
                break;
            }
        }
        if !clear {
            log::warn!("no free spot for POI {i}; placing it overlapping its neighbours");
        }
        pois.push(Poi {
            id: format!("{}-{i}", c.name()),
            category: c,
            x: spot.0,
            y: spot.1,
            radius_m: r,
        });
    }
    pois
}

fn spot_in<R: Rng + ?Sized>(poi: &Poi, reach: f64, rng: &mut R) -> (f64, f64) {
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let d = reach * rng.random::<f64>().sqrt();
    (poi.x + d * a.cos(), poi.y + d * a.sin())
}

struct ScheduleBuilder<'a> {
    segs: Vec<Segment>,
    t: SimTime,
    at: (f64, f64),
    speed: f64,
    pois: &'a [Poi],
}

impl ScheduleBuilder<'_> {
    fn stay(&mut self, until: SimTime, poi: usize) {
        if until <= self.t {
            return;
        }
        if let Some(Segment::Stay { end, poi: p, x, y, .. }) = self.segs.last_mut() {
            if *p as usize == poi && (*x, *y) == self.at {
                *end = until;
                self.t = until;
                return;
            }
        }
        self.segs.push(Segment::Stay {
            start: self.t,
            end: until,
            x: self.at.0,
            y: self.at.1,
            poi: poi as u32,
        });
        self.t = until;
    }

    fn go(&mut self, to: (f64, f64)) {
        let dist = ((to.0 - self.at.0).powi(2) + (to.1 - self.at.1).powi(2)).sqrt();
        let secs = (dist / self.speed).ceil() as i64;
        if secs > 0 {
            self.segs.push(Segment::Move {
                start: self.t,
                end: self.t + secs,
                from: self.at,
                to,
            });
            self.t += secs;
        }
        self.at = to;
    }

    /// POI of the stay that just ended, if any.
    fn here(&self) -> Option<usize> {
        match self.segs.last() {
            Some(Segment::Stay { poi, .. }) => Some(*poi as usize),
            _ => None,
        }
    }

    fn poi(&self, i: usize) -> &Poi {
        &self.pois[i]
    }
}

fn build_schedule(cfg: &ScenarioConfig, person: &Person, home: (f64, f64), pois: &[Poi], visitable: &[usize], rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let m = &cfg.mobility;
    let horizon = i64::from(cfg.days) * SECONDS_PER_DAY;
    let work_spot = person.work_poi.map(|w| spot_in(&pois[w], 0.8 * pois[w].radius_m, rng));
    let mut b = ScheduleBuilder {
        segs: Vec::new(),
        t: 0,
        at: home,
        speed: m.speed_mps,
        pois,
    };
    let jitter = |rng: &mut ChaCha8Rng| if m.jitter_s > 0 { rng.random_range(-m.jitter_s / 2..=m.jitter_s / 2) } else { 0 };
    for day in 0..i64::from(cfg.days) {
        let base = day * SECONDS_PER_DAY;
        let day_end = base + 22 * 3600;
        let leave = if person.work_poi.is_some() {
            base + m.leave_home_s + jitter(rng)
        } else {
            base + m.leave_home_s + 2 * 3600 + jitter(rng)
        };
        b.stay(leave.max(b.t), person.home_poi);
        if let (Some(w), Some(spot)) = (person.work_poi, work_spot) {
            b.go(spot);
            let until = (b.t + m.work_hours_s + jitter(rng)).min(day_end);
            b.stay(until, w);
        }
        let visits = rng.random_range(m.visits_per_day_min..=m.visits_per_day_max);
        for _ in 0..visits {
            if visitable.is_empty() || b.t >= day_end {
                break;
            }
            let p = visitable[rng.random_range(0..visitable.len())];
            if b.here() != Some(p) {
                let spot = spot_in(b.poi(p), 0.8 * b.poi(p).radius_m, rng);
                b.go(spot);
            }
            let dwell = rng.random_range(m.dwell_min_s..=m.dwell_max_s);
            b.stay((b.t + dwell).min(day_end), p);
        }
        b.go(home);
    }
    b.stay(horizon.max(b.t + 1), person.home_poi);
    b.segs
}

impl World {
    pub fn generate(config: &ScenarioConfig) -> Result<World, ConfigError> {
        config.validate()?;
        let cfg = config.clone();
        let mut rng = derived_rng(cfg.seed, "world", 0);

        let mut sizes = Vec::new();
        let mut left = cfg.population;
        while left > 0 {
            let s = rng.random_range(1..=cfg.mobility.household_size_max).min(left);
            sizes.push(s);
            left -= s;
        }
        let pois = place_pois(&cfg, sizes.len(), &mut rng);
        let residences: Vec<usize> = (0..pois.len()).filter(|&i| pois[i].category == PoiCategory::Residence).collect();
        let workplaces: Vec<usize> = (0..pois.len())
            .filter(|&i| matches!(pois[i].category, PoiCategory::Workplace | PoiCategory::Education))
            .collect();
        let visitable: Vec<usize> = (0..pois.len())
            .filter(|&i| VISIT_CATEGORIES.contains(&pois[i].category))
            .collect();

        let mut persons = Vec::with_capacity(cfg.population);
        for (h, &size) in sizes.iter().enumerate() {
            for _ in 0..size {
                let index = persons.len() as u64;
                let works = !workplaces.is_empty() && rng.random_bool(cfg.mobility.work_fraction);
                persons.push(Person {
                    id: UserId::synthetic(index),
                    household: h,
                    home_poi: residences[h],
                    work_poi: works.then(|| workplaces[rng.random_range(0..workplaces.len())]),
                });
            }
        }
        let schedules = persons
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut prng = derived_rng(cfg.seed, "person", i as u64);
                let home = spot_in(&pois[p.home_poi], 1.0, &mut prng);
                build_schedule(&cfg, p, home, &pois, &visitable, &mut prng)
            })
            .collect();

        let n_cov = (cfg.lp_coverage * cfg.population as f64).round() as usize;
        let mut covered = vec![false; cfg.population];
        for i in sample(&mut derived_rng(cfg.seed, "coverage", 0), cfg.population, n_cov) {
            covered[i] = true;
        }
        let registry = PopulationRegistry::new(persons.iter().map(|p| p.id.clone()));
        let poi_labels = pois.iter().map(|p| Arc::from(p.id.as_str())).collect();
        Ok(World {
            config: cfg,
            pois,
            poi_labels,
            persons,
            schedules,
            covered,
            registry,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    pub fn persons(&self) -> &[Person] {
        &self.persons
    }

    pub fn registry(&self) -> &PopulationRegistry {
        &self.registry
    }

    pub fn schedule(&self, person: usize) -> &[Segment] {
        &self.schedules[person]
    }

    pub fn is_covered(&self, person: usize) -> bool {
        self.covered[person]
    }

    pub fn covered_ids(&self) -> BTreeSet<UserId> {
        self.persons
            .iter()
            .zip(&self.covered)
            .filter(|(_, c)| **c)
            .map(|(p, _)| p.id.clone())
            .collect()
    }

    pub fn horizon(&self) -> SimTime {
        i64::from(self.config.days) * SECONDS_PER_DAY
    }

    /// True position and POI label at `t`.
    pub fn position(&self, person: usize, t: SimTime) -> ((f64, f64), Option<usize>) {
        let segs = &self.schedules[person];
        let i = segs.partition_point(|s| s.start() <= t).saturating_sub(1);
        match segs[i] {
            Segment::Stay { x, y, poi, .. } => ((x, y), Some(poi as usize)),
            Segment::Move { start, end, from, to } => {
                let f = ((t - start) as f64 / (end - start) as f64).clamp(0.0, 1.0);
                ((from.0 + f * (to.0 - from.0), from.1 + f * (to.1 - from.1)), None)
            }
        }
    }

    /// Noiseless samples at every bin center.
    pub fn true_samples(&self, person: usize) -> impl Iterator<Item = LocationSample> + '_ {
        let w = self.config.policy.bin_width_s;
        let id = self.persons[person].id.clone();
        (0..self.horizon() / w).map(move |k| {
            let t = k * w;
            let ((x, y), poi) = self.position(person, t);
            LocationSample {
                user: id.clone(),
                t,
                x,
                y,
                accuracy_m: 0.0,
                poi: poi.map(|p| self.poi_labels[p].clone()),
            }
        })
    }

    /// What the LP records: noisy samples, covered persons only.
    pub fn reported_samples(&self, person: usize) -> Box<dyn Iterator<Item = LocationSample> + '_> {
        if !self.covered[person] {
            return Box::new(std::iter::empty());
        }
        let sigma = self.config.location_noise_m;
        if sigma == 0.0 {
            return Box::new(self.true_samples(person));
        }
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        let mut rng = derived_rng(self.config.seed, "noise", person as u64);
        Box::new(self.true_samples(person).map(move |mut s| {
            s.x += normal.sample(&mut rng);
            s.y += normal.sample(&mut rng);
            s.accuracy_m = sigma;
            s
        }))
    }

    pub fn all_true_samples(&self) -> impl Iterator<Item = LocationSample> + '_ {
        (0..self.persons.len()).flat_map(|p| self.true_samples(p))
    }

    pub fn all_reported_samples(&self) -> impl Iterator<Item = LocationSample> + '_ {
        (0..self.persons.len()).flat_map(|p| self.reported_samples(p))
    }

    /// The LP view and the ground-truth view coincide.
    pub fn lp_view_is_exact(&self) -> bool {
        self.config.location_noise_m == 0.0 && self.covered.iter().all(|&c| c)
    }

    /// Store over every person's noiseless trace.
    pub fn truth_store(&self) -> LocationStore {
        LocationStore::ingest(self.all_true_samples(), &self.config.policy).with_pois(self.pois.clone())
    }

    /// Store over the LP's noisy, partial view.
    pub fn lp_store(&self) -> LocationStore {
        LocationStore::ingest(self.all_reported_samples(), &self.config.policy).with_pois(self.pois.clone())
    }

    pub fn scripted_visits(&self, person: usize) -> Vec<ScriptedVisit> {
        self.schedules[person]
            .iter()
            .filter_map(|s| match *s {
                Segment::Stay { start, end, poi, .. } => Some(ScriptedVisit {
                    poi: poi as usize,
                    start,
                    end,
                }),
                Segment::Move { .. } => None,
            })
            .collect()
    }

    pub fn write_pois<W: Write>(&self, out: W) -> Result<(), formats::FormatError> {
        formats::write_pois(out, &self.pois)
    }

    pub fn write_reported_traces<W: Write>(&self, out: W) -> Result<(), formats::FormatError> {
        formats::write_traces(out, self.all_reported_samples())
    }

    /// SHA-256 over everything the traces are generated from: the config
    /// (which fixes the noise streams), POIs, coverage and schedules.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_toml().as_bytes());
        self.write_pois(&mut h).expect("hashing cannot fail");
        let f = |h: &mut Sha256, v: f64| h.update(v.to_bits().to_be_bytes());
        for (i, p) in self.persons.iter().enumerate() {
            h.update(p.id.as_str().as_bytes());
            h.update([u8::from(self.covered[i])]);
            for seg in &self.schedules[i] {
                match *seg {
                    Segment::Stay { start, end, x, y, poi } => {
                        h.update([0]);
                        h.update(start.to_be_bytes());
                        h.update(end.to_be_bytes());
                        f(&mut h, x);
                        f(&mut h, y);
                        h.update(poi.to_be_bytes());
                    }
                    Segment::Move { start, end, from, to } => {
                        h.update([1]);
                        h.update(start.to_be_bytes());
                        h.update(end.to_be_bytes());
                        for v in [from.0, from.1, to.0, to.1] {
                            f(&mut h, v);
                        }
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Draws daily positives from people never infected before.
#[derive(Debug, Clone)]
pub struct InfectionSeeder {
    rng: ChaCha8Rng,
    eligible: Vec<UserId>,
    per_day: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfectionDraw {
    pub ids: Vec<UserId>,
    /// Fewer than the configured number were left to draw.
    pub exhausted: bool,
}

impl InfectionSeeder {
    pub fn new(world: &World, exclude: &BTreeSet<UserId>) -> Self {
        InfectionSeeder {
            rng: derived_rng(world.config.seed, "infections", 0),
            eligible: world.persons.iter().map(|p| p.id.clone()).filter(|id| !exclude.contains(id)).collect(),
            per_day: world.config.daily_positives,
        }
    }

    pub fn draw(&mut self) -> InfectionDraw {
        let n = self.per_day.min(self.eligible.len());
        let exhausted = n < self.per_day;
        self.eligible.shuffle(&mut self.rng);
        let ids = self.eligible.split_off(self.eligible.len() - n);
        InfectionDraw { ids, exhausted }
    }
}

/// Country penetration rates, percent.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Penetration {
    pub country: String,
    pub smartphone: f64,
    pub android: f64,
    pub facebook: f64,
    pub bt_installations: f64,
    pub bt_active: f64,
}

pub const PENETRATION_CSV: &str = include_str!("../fixtures/penetration.csv");

pub fn penetration_table() -> Vec<Penetration> {
    csv::Reader::from_reader(PENETRATION_CSV.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .expect("bundled fixture parses")
}

/// LP coverage for a country, taken from its Facebook penetration.
pub fn coverage_preset(country: &str) -> Option<f64> {
    penetration_table()
        .into_iter()
        .find(|p| p.country.eq_ignore_ascii_case(country))
        .map(|p| p.facebook / 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeWindow;

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed,
            population: 140,
            days: 2,
            area_m: 800.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn empty_population_is_an_empty_world() {
        let w = World::generate(&ScenarioConfig {
            population: 0,
            ..small(1)
        })
        .unwrap();
        assert!(w.persons().is_empty());
        assert_eq!(w.all_reported_samples().count(), 0);
        assert!(w.registry().is_empty());
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let mut cfg = small(1);
        cfg.poi_counts.clear();
        assert!(World::generate(&cfg).is_err());
        assert!(World::generate(&ScenarioConfig {
            lp_coverage: 1.5,
            ..small(1)
        })
        .is_err());
        assert!(ScenarioConfig::from_toml("population = 10\nbogus = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = small(5);
        assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = ScenarioConfig::from_toml("population = 200\n[policy]\nlookback_days = 3\n").unwrap();
        assert_eq!(partial.population, 200);
        assert_eq!(partial.policy.lookback_days, 3);
        assert_eq!(partial.policy.bin_width_s, 60);
    }

    #[test]
    fn full_coverage_without_noise_reports_the_truth() {
        let w = World::generate(&ScenarioConfig {
            location_noise_m: 0.0,
            ..small(2)
        })
        .unwrap();
        assert!(w.lp_view_is_exact());
        assert!(w.all_reported_samples().eq(w.all_true_samples()));
    }

    #[test]
    fn noise_has_the_configured_spread() {
        let w = World::generate(&ScenarioConfig {
            location_noise_m: 2.0,
            ..small(3)
        })
        .unwrap();
        let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
        for p in 0..w.persons().len() {
            for (r, t) in w.reported_samples(p).zip(w.true_samples(p)) {
                let d = r.x - t.x;
                n += 1.0;
                sum += d;
                sq += d * d;
                assert_eq!(r.accuracy_m, 2.0);
            }
        }
        let sd = (sq / n - (sum / n).powi(2)).sqrt();
        assert!((sd - 2.0).abs() < 0.05, "sd = {sd}");
    }

    #[test]
    fn same_seed_same_world() {
        let a = World::generate(&small(4)).unwrap();
        let b = World::generate(&small(4)).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), World::generate(&small(5)).unwrap().digest());
    }

    #[test]
    fn coverage_is_an_exact_count() {
        for p in [0.0, 0.3, 0.62, 1.0] {
            let w = World::generate(&ScenarioConfig {
                lp_coverage: p,
                ..small(6)
            })
            .unwrap();
            assert_eq!(w.covered_ids().len(), (p * 140.0_f64).round() as usize);
        }
    }

    #[test]
    fn schedules_are_contiguous_and_cover_the_horizon() {
        let w = World::generate(&small(7)).unwrap();
        for p in 0..w.persons().len() {
            let segs = w.schedule(p);
            assert_eq!(segs[0].start(), 0);
            let mut end = 0;
            for s in segs {
                assert_eq!(s.start(), end);
                end = match *s {
                    Segment::Stay { end, .. } | Segment::Move { end, .. } => end,
                };
            }
            assert!(end >= w.horizon());
        }
    }

    #[test]
    fn scripted_visits_are_recovered() {
        let cfg = ScenarioConfig {
            location_noise_m: 0.0,
            ..small(8)
        };
        let w = World::generate(&cfg).unwrap();
        let store = w.truth_store();
        let bin = cfg.policy.bin_width_s;
        let horizon = TimeWindow::new(0, w.horizon() - 1);
        let matches = |f: &crate::geo::PoiVisit, v: &ScriptedVisit| {
            f.poi_id == w.pois()[v.poi].id
                && (f.start_t - v.start).abs() <= bin
                && (f.end_t - (v.end.min(w.horizon()) - 1)).abs() <= 2 * bin
        };
        for p in 0..w.persons().len() {
            let scripted = w.scripted_visits(p);
            let found = store.poi_visits(&w.persons()[p].id, horizon, &cfg.policy);
            for v in scripted
                .iter()
                .filter(|v| v.end.min(w.horizon()) - v.start >= cfg.policy.poi_visit_min_s + 2 * bin)
            {
                assert!(found.iter().any(|f| matches(f, v)), "person {p}: {v:?} missed");
            }
            for f in &found {
                assert!(scripted.iter().any(|v| matches(f, v)), "person {p}: spurious {f:?}");
            }
        }
    }

    #[test]
    fn infections_never_repeat() {
        let w = World::generate(&ScenarioConfig {
            daily_positives: 4,
            grouping: GroupingParams::default(),
            ..small(9)
        })
        .unwrap();
        let mut seeder = InfectionSeeder::new(&w, &BTreeSet::new());
        let mut seen = BTreeSet::new();
        let mut total = 0;
        for _ in 0..35 {
            let d = seeder.draw();
            total += d.ids.len();
            for id in d.ids {
                assert!(seen.insert(id));
            }
        }
        assert_eq!(total, 140);
        assert!(seeder.draw().exhausted);

        let none = World::generate(&ScenarioConfig {
            daily_positives: 0,
            ..small(9)
        })
        .unwrap();
        assert!(InfectionSeeder::new(&none, &BTreeSet::new()).draw().ids.is_empty());
    }

    #[test]
    fn penetration_fixture_matches_published_values() {
        let table = penetration_table();
        assert_eq!(table.len(), 18);
        assert!((coverage_preset("Spain").unwrap() - 0.6205).abs() < 1e-12);
        assert!((coverage_preset("switzerland").unwrap() - 0.5238).abs() < 1e-12);
        let croatia = table.iter().find(|p| p.country == "Croatia").unwrap();
        assert_eq!(croatia.bt_active, 1.3);
        assert_eq!(coverage_preset("Atlantis"), None);
    }
}
