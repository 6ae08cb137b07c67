//! Synthetic stations, mobility and usage records.
//!
//! A world is a set of location areas, each a disk of scattered stations. A
//! persona moves on a two-level Markov chain (area, then station) and, with
//! probability `regularity`, replays a fixed daily routine instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geo::{great_circle_distance, GeoConfig, GeoPoint};
use crate::ingest::{parse_timestamp, Timestamp, UdrRecord, DEFAULT_V_MAX_KMH};

/// First simulated day, midnight.
pub const BASE_DATE: &str = "2014-11-21 00:00:00";
/// Travel speed used to space consecutive records.
pub const TRAVEL_SPEED_KMH: f64 = 60.0;
const MAX_ATTEMPTS: usize = 1000;
const KM_PER_DEGREE: f64 = 111.194_926_644_558_73;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SynthError {
    #[error("could not place {what} after {MAX_ATTEMPTS} attempts; the bounding box is too small")]
    BoxTooSmall { what: &'static str },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_lon: f64,
    pub max_lon: f64,
    pub min_lat: f64,
    pub max_lat: f64,
}

impl Default for BBox {
    fn default() -> Self {
        Self { min_lon: 119.0, max_lon: 121.0, min_lat: 28.0, max_lat: 30.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldSpec {
    pub n_lacs: usize,
    pub stations_per_lac: usize,
    pub bbox: BBox,
    pub scatter_radius_km: f64,
}

impl WorldSpec {
    pub fn new(n_lacs: usize, stations_per_lac: usize) -> Self {
        Self { n_lacs, stations_per_lac, bbox: BBox::default(), scatter_radius_km: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub lac_centers: Vec<GeoPoint>,
    /// Stations of each area, all within `scatter_radius_km` of its center.
    pub stations: Vec<Vec<GeoPoint>>,
    pub lac_ids: Vec<String>,
    pub scatter_radius_km: f64,
}

impl SynthWorld {
    pub fn n_lacs(&self) -> usize {
        self.stations.len()
    }

    pub fn n_stations(&self) -> usize {
        self.stations.iter().map(Vec::len).sum()
    }

    /// `(area, station within area)` of a global station id. Ids run area by area.
    pub fn locate(&self, id: usize) -> (usize, usize) {
        let mut rest = id;
        for (l, s) in self.stations.iter().enumerate() {
            if rest < s.len() {
                return (l, rest);
            }
            rest -= s.len();
        }
        panic!("station id {id} out of range");
    }

    pub fn station_id(&self, lac: usize, local: usize) -> usize {
        self.stations[..lac].iter().map(Vec::len).sum::<usize>() + local
    }

    pub fn point(&self, id: usize) -> GeoPoint {
        let (l, s) = self.locate(id);
        self.stations[l][s]
    }

    pub fn all_points(&self) -> Vec<GeoPoint> {
        self.stations.iter().flatten().copied().collect()
    }
}

fn offset(center: GeoPoint, east_km: f64, north_km: f64) -> (f64, f64) {
    let lat = center.latitude + north_km / KM_PER_DEGREE;
    let lon = center.longitude + east_km / (KM_PER_DEGREE * center.latitude.to_radians().cos());
    (lon, lat)
}

/// Places area centers at least two scatter radii apart and scatters
/// stations uniformly over each area's disk, rounded to five decimals.
pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<SynthWorld, SynthError> {
    if spec.n_lacs == 0 || spec.stations_per_lac == 0 || !(spec.scatter_radius_km > 0.0) {
        return Err(SynthError::InvalidParameter("counts and radius must be positive".into()));
    }
    let b = spec.bbox;
    if !(b.min_lon < b.max_lon && b.min_lat < b.max_lat) {
        return Err(SynthError::InvalidParameter("empty bounding box".into()));
    }
    let geo = GeoConfig::default();
    let r = spec.scatter_radius_km;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<GeoPoint> = Vec::with_capacity(spec.n_lacs);
    for _ in 0..spec.n_lacs {
        let c = (0..MAX_ATTEMPTS)
            .map(|_| {
                GeoPoint::new(rng.random_range(b.min_lon..b.max_lon), rng.random_range(b.min_lat..b.max_lat))
                    .expect("inside the valid range")
            })
            .find(|c| centers.iter().all(|o| great_circle_distance(*c, *o, geo) >= 2.0 * r))
            .ok_or(SynthError::BoxTooSmall { what: "area centers" })?;
        centers.push(c);
    }

    let mut taken = std::collections::HashSet::new();
    let mut stations = Vec::with_capacity(spec.n_lacs);
    for c in &centers {
        let mut own = Vec::with_capacity(spec.stations_per_lac);
        for _ in 0..spec.stations_per_lac {
            let p = (0..MAX_ATTEMPTS)
                .find_map(|_| {
                    let d = r * rng.random::<f64>().sqrt();
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let (lon, lat) = offset(*c, d * theta.cos(), d * theta.sin());
                    let p = GeoPoint::new(lon, lat).ok()?.rounded();
                    (great_circle_distance(p, *c, geo) <= r && !taken.contains(&p.key())).then_some(p)
                })
                .ok_or(SynthError::BoxTooSmall { what: "distinct stations" })?;
            taken.insert(p.key());
            own.push(p);
        }
        stations.push(own);
    }
    let lac_ids = (0..spec.n_lacs).map(|i| (57001 + i).to_string()).collect();
    Ok(SynthWorld { lac_centers: centers, stations, lac_ids, scatter_radius_km: r })
}

/// Mobility parameters of one simulated user.
#[derive(Debug, Clone, PartialEq)]
pub struct Persona {
    /// Global station ids.
    pub home: usize,
    pub work: usize,
    /// Row-stochastic area transitions before time-of-day modulation.
    pub lac_transition: Vec<Vec<f64>>,
    /// Per area, row `s` is the next-station distribution after local station
    /// `s`; entering from another area uses row 0.
    pub station_transition: Vec<Vec<Vec<f64>>>,
    /// Expected records per day.
    pub mobility_rate: usize,
    /// Probability of following the routine at each step.
    pub regularity: f64,
    /// Weight of the home/work pull mixed into the area rows.
    pub anchor_strength: f64,
    routine_seed: u64,
}

fn normalize(mut row: Vec<f64>) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
    row
}

fn sample(rng: &mut ChaCha8Rng, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

impl Persona {
    /// Sticky area chain (stay 0.8), stations that tend to repeat, a home
    /// and a work station in different areas where possible.
    pub fn random(world: &SynthWorld, regularity: f64, mobility_rate: usize, seed: u64) -> Result<Self, SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = world.n_lacs();
        let lac_transition = (0..n)
            .map(|a| {
                if n == 1 {
                    return vec![1.0];
                }
                let others = normalize((0..n).map(|b| if a == b { 0.0 } else { rng.random_range(0.1..1.0) }).collect());
                others.iter().enumerate().map(|(b, p)| if a == b { 0.8 } else { 0.2 * p }).collect()
            })
            .collect();
        let station_transition = world
            .stations
            .iter()
            .map(|s| {
                let k = s.len();
                (0..k)
                    .map(|from| {
                        let rest = normalize((0..k).map(|_| rng.random_range(0.1..1.0)).collect());
                        rest.iter().enumerate().map(|(to, p)| 0.5 * p + if to == from { 0.5 } else { 0.0 }).collect()
                    })
                    .collect()
            })
            .collect();
        let home = rng.random_range(0..world.n_stations());
        let work = loop {
            let w = rng.random_range(0..world.n_stations());
            if n == 1 || world.locate(w).0 != world.locate(home).0 {
                break w;
            }
        };
        let p = Self {
            home,
            work,
            lac_transition,
            station_transition,
            mobility_rate,
            regularity,
            anchor_strength: 0.5,
            routine_seed: rng.random(),
        };
        p.validate(world)?;
        Ok(p)
    }

    /// Uniform area and station rows with no time-of-day pull: with
    /// regularity 0 every label is drawn independently.
    pub fn iid(world: &SynthWorld, mobility_rate: usize, seed: u64) -> Result<Self, SynthError> {
        let mut p = Self::random(world, 0.0, mobility_rate, seed)?;
        let n = world.n_lacs();
        p.lac_transition = vec![vec![1.0 / n as f64; n]; n];
        p.station_transition =
            world.stations.iter().map(|s| vec![vec![1.0 / s.len() as f64; s.len()]; s.len()]).collect();
        p.anchor_strength = 0.0;
        Ok(p)
    }

    pub fn with_regularity(mut self, regularity: f64) -> Self {
        self.regularity = regularity;
        self
    }

    pub fn validate(&self, world: &SynthWorld) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidParameter(m.to_string()));
        if !(0.0..=1.0).contains(&self.regularity) || !(0.0..=1.0).contains(&self.anchor_strength) {
            return bad("regularity and anchor strength must lie in [0, 1]");
        }
        let stochastic = |row: &Vec<f64>| row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if self.lac_transition.len() != world.n_lacs() || !self.lac_transition.iter().all(stochastic) {
            return bad("area transitions must be row-stochastic");
        }
        if self.station_transition.iter().flatten().any(|r| !stochastic(r)) {
            return bad("station transitions must be row-stochastic");
        }
        if self.mobility_rate == 0 {
            return bad("mobility rate must be positive");
        }
        Ok(())
    }

    /// Area row at `slot` of a `per_day`-slot day: nights pull toward home,
    /// daytime toward work.
    pub fn modulated_row(&self, world: &SynthWorld, lac: usize, slot: usize, per_day: usize) -> Vec<f64> {
        let frac = slot as f64 / per_day as f64;
        let anchor = if (0.25..0.75).contains(&frac) { self.work } else { self.home };
        let a = world.locate(anchor).0;
        let s = self.anchor_strength;
        self.lac_transition[lac].iter().enumerate().map(|(b, p)| (1.0 - s) * p + if b == a { s } else { 0.0 }).collect()
    }

    /// The daily routine: one pass of the Markov chain from home.
    pub fn routine(&self, world: &SynthWorld, per_day: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.routine_seed);
        let mut prev = self.home;
        (0..per_day)
            .map(|slot| {
                let (pl, ps) = world.locate(prev);
                let lac = sample(&mut rng, &self.modulated_row(world, pl, slot, per_day));
                let row = &self.station_transition[lac][if lac == pl { ps } else { 0 }];
                prev = world.station_id(lac, sample(&mut rng, row));
                prev
            })
            .collect()
    }

    /// Next-label distribution of one step given the previous label.
    fn step_distribution(&self, world: &SynthWorld, routine: &[usize], prev: usize, slot: usize) -> Vec<f64> {
        let per_day = routine.len();
        let row = self.modulated_row(world, world.locate(prev).0, slot, per_day);
        let mut out = Vec::with_capacity(world.n_stations());
        for (l, s) in world.stations.iter().enumerate() {
            out.extend(std::iter::repeat_n((1.0 - self.regularity) * row[l] / s.len() as f64, s.len()));
        }
        out[routine[slot]] += self.regularity;
        out
    }
}

/// Fine-label sequence of `days * per_day` steps.
pub fn generate_labels(world: &SynthWorld, persona: &Persona, days: usize, per_day: usize, seed: u64) -> Vec<usize> {
    let routine = persona.routine(world, per_day);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = persona.home;
    let mut out = Vec::with_capacity(days * per_day);
    for _ in 0..days {
        for (slot, &r) in routine.iter().enumerate() {
            let follow = rng.random::<f64>() < persona.regularity;
            prev = if follow {
                r
            } else {
                let row = persona.modulated_row(world, world.locate(prev).0, slot, per_day);
                let lac = sample(&mut rng, &row);
                world.station_id(lac, rng.random_range(0..world.stations[lac].len()))
            };
            out.push(prev);
        }
    }
    out
}

/// Accuracy of the Bayes-optimal one-step predictor that knows the previous
/// label and the time slot, averaged over `days * per_day` steps.
pub fn bayes_accuracy(world: &SynthWorld, persona: &Persona, days: usize, per_day: usize) -> f64 {
    let routine = persona.routine(world, per_day);
    let n = world.n_stations();
    let mut dist = vec![0.0; n];
    dist[persona.home] = 1.0;
    let mut total = 0.0;
    for _ in 0..days {
        for slot in 0..per_day {
            let mut next = vec![0.0; n];
            for (prev, &w) in dist.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let p = persona.step_distribution(world, &routine, prev, slot);
                total += w * p.iter().copied().fold(0.0, f64::max);
                next.iter_mut().zip(&p).for_each(|(a, b)| *a += w * b);
            }
            dist = next;
        }
    }
    total / (days * per_day) as f64
}

fn base_time() -> Timestamp {
    parse_timestamp(BASE_DATE).expect("constant timestamp parses")
}

/// Time-ordered records of one user. Records within a day are spread over
/// the waking hours with room to travel between stations at
/// [`TRAVEL_SPEED_KMH`]; busy days may run past midnight.
pub fn generate_trajectory(
    world: &SynthWorld,
    persona: &Persona,
    user: &str,
    days: usize,
    per_day: usize,
    seed: u64,
) -> Result<Vec<UdrRecord>, SynthError> {
    if days == 0 || per_day == 0 {
        return Err(SynthError::InvalidParameter("days and records per day must be positive".into()));
    }
    persona.validate(world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = generate_labels(world, persona, days, per_day, rng.random());
    let geo = GeoConfig::default();
    let mean_gap = (16 * 3600 / per_day as i64).max(2);
    let base = base_time();
    let mut out: Vec<UdrRecord> = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let loc = world.point(label);
        let stime = match out.last() {
            Some(prev) if i % per_day != 0 || prev.etime >= base + (i / per_day) as i64 * 86_400 => {
                let km = great_circle_distance(prev.location, loc, geo);
                let travel = (km / TRAVEL_SPEED_KMH * 3600.0).ceil() as i64;
                prev.etime + rng.random_range(1..=mean_gap) + travel
            }
            _ => base + (i / per_day) as i64 * 86_400 + 6 * 3600 + rng.random_range(0..3600),
        };
        out.push(UdrRecord {
            phonenum: user.to_string(),
            stime,
            etime: stime + rng.random_range(1..=300),
            host: "example.com".into(),
            appid: "0".into(),
            url: "/".into(),
            lacid: world.lac_ids[world.locate(label).0].clone(),
            location: loc,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationSpec {
    pub users: usize,
    pub days: usize,
    pub per_day: usize,
    pub regularity: f64,
    pub iid: bool,
}

/// Records of several users, each with an independent persona, concatenated
/// user by user.
pub fn generate_population(world: &SynthWorld, spec: &PopulationSpec, seed: u64) -> Result<Vec<UdrRecord>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for u in 0..spec.users {
        let persona_seed = rng.random();
        let persona = if spec.iid {
            Persona::iid(world, spec.per_day, persona_seed)?.with_regularity(spec.regularity)
        } else {
            Persona::random(world, spec.regularity, spec.per_day, persona_seed)?
        };
        let user = format!("7{:010}", u + 1);
        out.extend(generate_trajectory(world, &persona, &user, spec.days, spec.per_day, rng.random())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// The earlier record ends exactly when the next starts, at a neighbouring station.
    SharedBoundary,
    /// The next record jumps to a distant station faster than allowed.
    Overspeed,
}

/// Ground truth for one injected anomaly.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    /// Position of the altered record in the returned sequence.
    pub position: usize,
    pub user: String,
    /// Start time of the altered record after injection.
    pub stime: Timestamp,
    pub original: GeoPoint,
    pub original_lacid: String,
    pub kind: AnomalyKind,
}

/// [`inject_anomalies_with`] at the default speed limit.
pub fn inject_anomalies(
    records: &[UdrRecord],
    world: &SynthWorld,
    rate: f64,
    seed: u64,
) -> Result<(Vec<UdrRecord>, Vec<Injection>), SynthError> {
    inject_anomalies_with(records, world, rate, DEFAULT_V_MAX_KMH, seed)
}

/// Plants switching artifacts in consecutive pairs where the user did not
/// move. Each eligible pair is hit with probability `rate`; pairs never
/// share a record, so no anomaly builds on another.
pub fn inject_anomalies_with(
    records: &[UdrRecord],
    world: &SynthWorld,
    rate: f64,
    v_max_kmh: f64,
    seed: u64,
) -> Result<(Vec<UdrRecord>, Vec<Injection>), SynthError> {
    if !(0.0..=1.0).contains(&rate) || !(v_max_kmh > 0.0) {
        return Err(SynthError::InvalidParameter("rate must lie in [0, 1] and the speed limit be positive".into()));
    }
    let geo = GeoConfig::default();
    let points = world.all_points();
    let lac_of = |p: &GeoPoint| {
        let id = points.iter().position(|q| q.key() == p.key()).expect("station from this world");
        world.lac_ids[world.locate(id).0].clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    let mut truth = Vec::new();
    let mut j = 1;
    while j < out.len() {
        let i = j - 1;
        let eligible = out[i].phonenum == out[j].phonenum
            && out[i].location.key() == out[j].location.key()
            && out[i].stime <= out[j].stime;
        if !eligible || points.len() < 2 || rng.random::<f64>() >= rate {
            j += 1;
            continue;
        }
        let here = out[j].location;
        let by_distance = |far: bool| {
            points
                .iter()
                .filter(|p| p.key() != here.key())
                .copied()
                .min_by(|a, b| {
                    let (da, db) = (great_circle_distance(here, *a, geo), great_circle_distance(here, *b, geo));
                    if far { db.total_cmp(&da) } else { da.total_cmp(&db) }
                })
                .expect("at least one other station")
        };
        let kind = if rng.random::<bool>() { AnomalyKind::SharedBoundary } else { AnomalyKind::Overspeed };
        let record = Injection {
            position: j,
            user: out[j].phonenum.clone(),
            stime: 0,
            original: here,
            original_lacid: out[j].lacid.clone(),
            kind,
        };
        match kind {
            AnomalyKind::SharedBoundary => {
                let p = by_distance(false);
                out[i].etime = out[j].stime;
                out[j].location = p;
                out[j].lacid = lac_of(&p);
            }
            AnomalyKind::Overspeed => {
                let p = by_distance(true);
                let km = great_circle_distance(here, p, geo);
                // largest whole-second gap still strictly above the limit
                let limit = (km / v_max_kmh * 3600.0).ceil() as i64 - 1;
                let gap = (limit / 2).max(1);
                if km / (gap as f64 / 3600.0) <= v_max_kmh {
                    j += 1;
                    continue;
                }
                out[j].stime = out[j].stime.min(out[i].etime + gap).max(out[i].stime);
                out[j].location = p;
                out[j].lacid = lac_of(&p);
            }
        }
        truth.push(Injection { stime: out[j].stime, ..record });
        // the altered record cannot start another pair
        j += 2;
    }
    Ok((out, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{clean_pipeline, CleanConfig};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn world(l: usize, s: usize, seed: u64) -> SynthWorld {
        generate_world(&WorldSpec::new(l, s), seed).unwrap()
    }

    #[test]
    fn world_examples() {
        let w = world(2, 2, 42);
        assert_eq!((w.n_lacs(), w.n_stations()), (2, 4));
        assert_eq!(w, world(2, 2, 42));
        assert_ne!(w, world(2, 2, 43));
        assert_eq!(w.lac_ids, vec!["57001", "57002"]);
    }

    #[test]
    fn stations_inside_radius_and_distinct() {
        let geo = GeoConfig::default();
        for seed in 0..5 {
            let w = world(6, 25, seed);
            let mut keys = std::collections::HashSet::new();
            for (c, st) in w.lac_centers.iter().zip(&w.stations) {
                for p in st {
                    assert!(great_circle_distance(*p, *c, geo) <= w.scatter_radius_km);
                    assert_eq!(*p, p.rounded());
                    assert!(keys.insert(p.key()));
                }
            }
        }
    }

    #[test]
    fn tiny_box_fails() {
        let mut spec = WorldSpec::new(5, 2);
        spec.bbox = BBox { min_lon: 120.0, max_lon: 120.001, min_lat: 29.0, max_lat: 29.001 };
        assert!(matches!(generate_world(&spec, 1), Err(SynthError::BoxTooSmall { .. })));
        let mut spec = WorldSpec::new(1, 50);
        spec.scatter_radius_km = 0.001;
        assert!(matches!(generate_world(&spec, 1), Err(SynthError::BoxTooSmall { .. })));
    }

    #[test]
    fn persona_rows_are_stochastic() {
        let w = world(4, 5, 1);
        let p = Persona::random(&w, 0.9, 20, 3).unwrap();
        p.validate(&w).unwrap();
        for slot in 0..20 {
            for l in 0..4 {
                assert!((p.modulated_row(&w, l, slot, 20).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert_ne!(w.locate(p.home).0, w.locate(p.work).0);
        assert!(Persona::random(&w, 1.5, 20, 3).is_err());
    }

    #[test]
    fn full_regularity_repeats_days() {
        let w = world(3, 4, 2);
        let p = Persona::random(&w, 1.0, 15, 5).unwrap();
        let labels = generate_labels(&w, &p, 2, 15, 9);
        assert_eq!(labels[..15], labels[15..]);
        assert_eq!(labels[..15], p.routine(&w, 15)[..]);
    }

    #[test]
    fn record_counts_and_order() {
        let w = world(4, 10, 3);
        let p = Persona::random(&w, 0.9, 200, 1).unwrap();
        let recs = generate_trajectory(&w, &p, "u", 23, 200, 4).unwrap();
        assert_eq!(recs.len(), 4600);
        let geo = GeoConfig::default();
        for pair in recs.windows(2) {
            assert!(pair[0].stime < pair[1].stime && pair[0].etime < pair[1].stime);
            let km = great_circle_distance(pair[0].location, pair[1].location, geo);
            let hours = (pair[1].stime - pair[0].etime) as f64 / 3600.0;
            assert!(km / hours <= TRAVEL_SPEED_KMH + 1e-9);
        }
        assert!(recs.iter().all(|r| r.is_valid() && r.etime - r.stime >= 1 && r.etime - r.stime <= 300));
        assert_eq!(recs, generate_trajectory(&w, &p, "u", 23, 200, 4).unwrap());
    }

    fn chi_square_critical(dof: usize) -> f64 {
        ChiSquared::new(dof as f64).unwrap().inverse_cdf(0.99)
    }

    #[test]
    fn zero_regularity_is_uniform_over_stations() {
        let w = world(1, 8, 4);
        let p = Persona::random(&w, 0.0, 100, 2).unwrap();
        let labels = generate_labels(&w, &p, 1000, 100, 6);
        let mut counts = [0usize; 8];
        labels.iter().for_each(|&l| counts[l] += 1);
        let e = labels.len() as f64 / 8.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(stat < chi_square_critical(7), "chi2 {stat}");
    }

    #[test]
    fn area_transitions_match_their_rows() {
        let w = world(3, 2, 5);
        let mut p = Persona::random(&w, 0.0, 100, 8).unwrap();
        p.anchor_strength = 0.0;
        let labels = generate_labels(&w, &p, 1000, 100, 1);
        let mut counts = vec![vec![0usize; 3]; 3];
        for pair in labels.windows(2) {
            counts[w.locate(pair[0]).0][w.locate(pair[1]).0] += 1;
        }
        for (a, row) in counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            let stat: f64 = row
                .iter()
                .zip(&p.lac_transition[a])
                .map(|(&c, &q)| (c as f64 - n as f64 * q).powi(2) / (n as f64 * q))
                .sum();
            assert!(stat < chi_square_critical(2), "row {a}: chi2 {stat}");
        }
    }

    #[test]
    fn predictability_grows_with_regularity() {
        for seed in 0..6 {
            let w = world(2 + seed as usize % 2, 3, seed);
            let p = Persona::random(&w, 0.0, 6, seed).unwrap();
            let accs: Vec<f64> =
                (0..=10).map(|k| bayes_accuracy(&w, &p.clone().with_regularity(k as f64 / 10.0), 4, 6)).collect();
            for pair in accs.windows(2) {
                assert!(pair[1] >= pair[0] - 1e-12, "seed {seed}: {accs:?}");
            }
            assert!((accs[10] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bayes_oracle_matches_simulation() {
        let w = world(2, 3, 7);
        let p = Persona::random(&w, 0.6, 10, 3).unwrap();
        let oracle = bayes_accuracy(&w, &p, 2000, 10);
        // empirical accuracy of the same predictor on a long sample
        let routine = p.routine(&w, 10);
        let labels = generate_labels(&w, &p, 2000, 10, 11);
        let mut prev = p.home;
        let mut hits = 0usize;
        for (t, &l) in labels.iter().enumerate() {
            let d = p.step_distribution(&w, &routine, prev, t % 10);
            hits += usize::from(crate::nn::argmax(&d) == l);
            prev = l;
        }
        let acc = hits as f64 / labels.len() as f64;
        let sigma = (oracle * (1.0 - oracle) / labels.len() as f64).sqrt();
        assert!((acc - oracle).abs() < 3.0 * sigma, "{acc} vs {oracle}");
    }

    #[test]
    fn injection_examples() {
        let w = world(2, 3, 1);
        let p = Persona::random(&w, 0.9, 50, 1).unwrap();
        let recs = generate_trajectory(&w, &p, "u", 4, 50, 2).unwrap();
        let (same, truth) = inject_anomalies(&recs, &w, 0.0, 3).unwrap();
        assert_eq!(same, recs);
        assert!(truth.is_empty());

        let mut two = recs[..1].to_vec();
        two.push(UdrRecord { stime: recs[0].etime + 60, etime: recs[0].etime + 90, ..recs[0].clone() });
        let (_, truth) = inject_anomalies(&two, &w, 1.0, 3).unwrap();
        assert_eq!(truth.len(), 1);
        assert!(inject_anomalies(&two, &w, 1.1, 3).is_err());
    }

    #[test]
    fn cleaning_recovers_injected_locations() {
        let cfg = CleanConfig::default();
        let geo = GeoConfig::default();
        for seed in 0..5 {
            let w = world(4, 10, seed);
            let p = Persona::random(&w, 0.9, 100, seed).unwrap();
            let recs = generate_trajectory(&w, &p, "u", 10, 100, seed).unwrap();
            let (dirty, truth) = inject_anomalies(&recs, &w, 0.05, seed).unwrap();
            assert!(!truth.is_empty());
            let cleaned = clean_pipeline(dirty, &cfg);
            let pts = &cleaned[0].points;
            let recovered = truth
                .iter()
                .filter(|t| pts.iter().any(|q| q.stime == t.stime && q.location == t.original && q.lacid == t.original_lacid))
                .count();
            assert!(recovered as f64 >= 0.95 * truth.len() as f64, "seed {seed}: {recovered}/{}", truth.len());
            for pair in pts.windows(2) {
                let km = great_circle_distance(pair[0].location, pair[1].location, geo);
                let gap = (pair[1].stime - pair[0].etime).max(1);
                assert!(km / (gap as f64 / 3600.0) <= cfg.v_max_kmh);
            }
        }
    }
}
