//! Deterministic synthetic city: trips drawn from a known speed law, with optional planted
//! outliers, so estimators can be checked against ground truth.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{BoundingBox, GeoPoint, ProjectedPoint, Projection};
use crate::region::RegionPartition;
use crate::time::{TimeSlotConfig, WEEK_SECONDS};
use crate::trip::{Trip, TripId};

const CHUNK: usize = 8192;
const MAX_RESAMPLE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub center: GeoPoint,
    /// Standard deviation of the isotropic Gaussian, meters.
    pub sd_m: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialLaw {
    Uniform,
    Hotspots(Vec<Hotspot>),
}

/// Speed multiplier and amplitude for trips from one region to another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRule {
    pub origin: u32,
    pub dest: u32,
    pub multiplier: f64,
    /// Overrides the global amplitude when set.
    pub amplitude: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLaw {
    pub rows: u32,
    pub cols: u32,
    pub rules: Vec<PairRule>,
}

/// Speeds inside `[start, start + hours·3600)` are multiplied by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolidayDip {
    pub start: i64,
    pub hours: u32,
    pub factor: f64,
}

/// `V*(s) = base · multiplier · (1 + a·sin(2π·slot/T))`, constant within each slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedLaw {
    pub base_mph: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub regions: Option<RegionLaw>,
    #[serde(default)]
    pub holiday: Option<HolidayDip>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierFamily {
    /// Duration multiplied by U(6, 12), as if the meter kept running.
    ExtremeSpeed,
    /// Distance and duration both multiplied by U(2, 3).
    Detour,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierPlant {
    pub fraction: f64,
    pub families: Vec<OutlierFamily>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub bbox: BoundingBox,
    pub n_trips: usize,
    /// Epoch seconds of the first instant; the generator does not require a Monday.
    pub start: i64,
    pub duration_weeks: u32,
    pub spatial: SpatialLaw,
    pub speed: SpeedLaw,
    /// Standard deviation of the log of the multiplicative duration noise.
    pub noise_sd: f64,
    /// Route length is endpoint L1 times `1 + circuity·field`, with a smooth field in [0, 1].
    #[serde(default)]
    pub circuity: f64,
    #[serde(default)]
    pub min_trip_miles: f64,
    #[serde(default)]
    pub fare: bool,
    #[serde(default)]
    pub outliers: Option<OutlierPlant>,
    pub seed: u64,
}

/// Monday 2013-10-07 00:00 UTC.
pub const DEFAULT_START: i64 = 1_381_104_000;

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            bbox: BoundingBox::manhattan(),
            n_trips: 100_000,
            start: DEFAULT_START,
            duration_weeks: 9,
            spatial: SpatialLaw::Hotspots(default_hotspots()),
            speed: SpeedLaw { base_mph: 12.0, amplitude: 0.5, regions: None, holiday: None },
            noise_sd: 0.2,
            circuity: 0.5,
            min_trip_miles: 0.3,
            fare: false,
            outliers: None,
            seed: 7,
        }
    }
}

/// Eight busy spots spread over the default box.
pub fn default_hotspots() -> Vec<Hotspot> {
    [
        (40.712, -74.008),
        (40.728, -73.990),
        (40.742, -74.000),
        (40.750, -73.978),
        (40.762, -73.968),
        (40.778, -73.955),
        (40.795, -73.945),
        (40.812, -73.940),
    ]
    .iter()
    .map(|&(lat, lon)| Hotspot { center: GeoPoint { lat, lon }, sd_m: 250.0, weight: 1.0 })
    .collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_trips == 0 {
            return bad("n_trips must be positive".into());
        }
        if self.duration_weeks == 0 {
            return bad("duration_weeks must be positive".into());
        }
        let s = &self.speed;
        if !(s.base_mph > 0.0 && s.base_mph.is_finite()) {
            return bad(format!("base speed must be positive, got {}", s.base_mph));
        }
        if !(s.amplitude.abs() < 1.0) {
            return bad(format!("amplitude must satisfy |a| < 1, got {}", s.amplitude));
        }
        if let Some(r) = &s.regions {
            if r.rows == 0 || r.cols == 0 {
                return bad("region grid must be nonempty".into());
            }
            let n = r.rows * r.cols;
            for rule in &r.rules {
                if rule.origin >= n || rule.dest >= n {
                    return bad(format!("region rule {}->{} outside {n} regions", rule.origin, rule.dest));
                }
                if !(rule.multiplier > 0.0) {
                    return bad("region multiplier must be positive".into());
                }
                if rule.amplitude.is_some_and(|a| !(a.abs() < 1.0)) {
                    return bad("region amplitude must satisfy |a| < 1".into());
                }
            }
        }
        if let Some(h) = &s.holiday {
            if !(h.factor > 0.0) {
                return bad("holiday factor must be positive".into());
            }
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be nonnegative".into());
        }
        if !(self.circuity >= 0.0) || !(self.min_trip_miles >= 0.0) {
            return bad("circuity and min_trip_miles must be nonnegative".into());
        }
        if let SpatialLaw::Hotspots(h) = &self.spatial {
            if h.is_empty() {
                return bad("hotspot list is empty".into());
            }
            if h.iter().any(|h| !(h.sd_m > 0.0 && h.weight > 0.0) || !self.bbox.contains(h.center)) {
                return bad("hotspots need positive sd and weight and a center inside the box".into());
            }
        }
        if let Some(o) = &self.outliers {
            if !(0.0..=0.3).contains(&o.fraction) {
                return bad(format!("outlier fraction must be in [0, 0.3], got {}", o.fraction));
            }
            if o.fraction > 0.0 && o.families.is_empty() {
                return bad("outlier plant needs at least one family".into());
            }
        }
        Ok(())
    }

    pub fn end(&self) -> i64 {
        self.start + self.duration_weeks as i64 * WEEK_SECONDS
    }
}

/// The true regime speed for an OD pair at a time.
#[derive(Debug, Clone)]
pub struct SpeedOracle {
    law: SpeedLaw,
    partition: Option<RegionPartition>,
    slots: TimeSlotConfig,
}

impl SpeedOracle {
    pub fn new(law: &SpeedLaw, bbox: &BoundingBox) -> Result<Self> {
        let partition = match &law.regions {
            Some(r) => Some(RegionPartition::new(*bbox, r.rows, r.cols)?),
            None => None,
        };
        Ok(SpeedOracle { law: law.clone(), partition, slots: TimeSlotConfig::default() })
    }

    fn rule(&self, o: GeoPoint, d: GeoPoint) -> Option<&PairRule> {
        let (regions, partition) = (self.law.regions.as_ref()?, self.partition.as_ref()?);
        let (i, j) = partition.pair_of(o, d).ok()?;
        regions.rules.iter().find(|r| r.origin == i && r.dest == j)
    }

    pub fn speed(&self, o: GeoPoint, d: GeoPoint, t: i64) -> f64 {
        let (mult, amp) = match self.rule(o, d) {
            Some(r) => (r.multiplier, r.amplitude.unwrap_or(self.law.amplitude)),
            None => (1.0, self.law.amplitude),
        };
        self.law.base_mph * mult * self.profile(amp, t) * self.holiday_factor(t)
    }

    /// Speed for trips not covered by any region rule.
    pub fn default_speed(&self, t: i64) -> f64 {
        self.law.base_mph * self.profile(self.law.amplitude, t) * self.holiday_factor(t)
    }

    fn profile(&self, amp: f64, t: i64) -> f64 {
        let slot = self.slots.slot_of(t).relative as f64;
        1.0 + amp * (2.0 * PI * slot / self.slots.period_slots as f64).sin()
    }

    fn holiday_factor(&self, t: i64) -> f64 {
        match self.law.holiday {
            Some(h) if t >= h.start && t < h.start + h.hours as i64 * 3600 => h.factor,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    /// Regime speed at each trip's start, aligned with trip ids.
    pub true_speed: Vec<f64>,
    pub outliers: Vec<(TripId, OutlierFamily)>,
}

impl GroundTruth {
    pub fn outlier_ids(&self) -> Vec<TripId> {
        self.outliers.iter().map(|o| o.0).collect()
    }

    pub fn write_json<W: std::io::Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Wavelength of the circuity field, meters.
const CIRCUITY_WAVELENGTH_M: f64 = 2000.0;

/// Smooth field in [0, 1] controlling route circuity near a point.
fn circuity_field(p: ProjectedPoint) -> f64 {
    let k = 2.0 * PI / CIRCUITY_WAVELENGTH_M;
    0.5 + 0.5 * (k * p.x).sin() * (0.8 * k * p.y).cos()
}

fn sample_point(rng: &mut ChaCha8Rng, spec: &SynthSpec, proj: &Projection, cum: &[f64]) -> ProjectedPoint {
    let (w, h) = proj.extent();
    match &spec.spatial {
        SpatialLaw::Uniform => ProjectedPoint { x: rng.gen::<f64>() * w, y: rng.gen::<f64>() * h },
        SpatialLaw::Hotspots(spots) => {
            let u = rng.gen::<f64>() * cum[cum.len() - 1];
            let k = cum.partition_point(|&c| c <= u).min(spots.len() - 1);
            let c = proj.project_unchecked(spots[k].center);
            let n = Normal::new(0.0, spots[k].sd_m).expect("positive sd");
            for _ in 0..MAX_RESAMPLE {
                let p = ProjectedPoint { x: c.x + n.sample(rng), y: c.y + n.sample(rng) };
                if p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h {
                    return p;
                }
            }
            c
        }
    }
}

fn fare_for(distance: f64, duration: f64) -> f64 {
    ((2.5 + 2.5 * distance + 0.35 * duration / 60.0) * 100.0).round() / 100.0
}

/// Generates `spec.n_trips` trips with ids `0..n` in start-time order.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Trip>, GroundTruth)> {
    spec.validate()?;
    let proj = spec.bbox.projection();
    let oracle = SpeedOracle::new(&spec.speed, &spec.bbox)?;
    let cum: Vec<f64> = match &spec.spatial {
        SpatialLaw::Hotspots(h) => h
            .iter()
            .scan(0.0, |acc, h| {
                *acc += h.weight;
                Some(*acc)
            })
            .collect(),
        SpatialLaw::Uniform => Vec::new(),
    };
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let span = spec.end() - spec.start;
    let chunks = spec.n_trips.div_ceil(CHUNK);

    let mut rows: Vec<(Trip, f64)> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(chunk as u64 + 1);
            let n = CHUNK.min(spec.n_trips - chunk * CHUNK);
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let (mut o, mut d) = (sample_point(&mut rng, spec, &proj, &cum), sample_point(&mut rng, spec, &proj, &cum));
                for _ in 0..MAX_RESAMPLE {
                    if o.l1(&d) / crate::geo::METERS_PER_MILE >= spec.min_trip_miles {
                        break;
                    }
                    o = sample_point(&mut rng, spec, &proj, &cum);
                    d = sample_point(&mut rng, spec, &proj, &cum);
                }
                let l1 = (o.l1(&d) / crate::geo::METERS_PER_MILE).max(1e-3);
                let c = 1.0 + spec.circuity * 0.5 * (circuity_field(o) + circuity_field(d));
                let distance = l1 * c;
                let start_time = spec.start + rng.gen_range(0..span);
                let (origin, destination) = (proj.unproject(o), proj.unproject(d));
                let v = oracle.speed(origin, destination, start_time);
                let duration = distance / v * 3600.0 * noise.sample(&mut rng).exp();
                let trip = Trip { id: 0, origin, destination, start_time, distance, duration, fare: None };
                out.push((trip, v));
            }
            out
        })
        .collect();

    rows.sort_by_key(|a| a.0.start_time);
    for (i, (t, _)) in rows.iter_mut().enumerate() {
        t.id = i as TripId;
    }

    let mut outliers = Vec::new();
    if let Some(plant) = spec.outliers.as_ref().filter(|p| p.fraction > 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let count = (plant.fraction * rows.len() as f64).round() as usize;
        let mut ids: Vec<usize> = (0..rows.len()).collect();
        ids.partial_shuffle(&mut rng, count);
        let mut chosen: Vec<usize> = ids[..count].to_vec();
        chosen.sort_unstable();
        for (k, &i) in chosen.iter().enumerate() {
            let family = plant.families[k % plant.families.len()];
            let t = &mut rows[i].0;
            match family {
                OutlierFamily::ExtremeSpeed => t.duration *= rng.gen_range(6.0..12.0),
                OutlierFamily::Detour => {
                    let f = rng.gen_range(2.0..3.0);
                    t.distance *= f;
                    t.duration *= f;
                }
            }
            outliers.push((t.id, family));
        }
    }

    let (trips, true_speed): (Vec<Trip>, Vec<f64>) = rows
        .into_iter()
        .map(|(mut t, v)| {
            if spec.fare {
                t.fare = Some(fare_for(t.distance, t.duration));
            }
            (t, v)
        })
        .unzip();
    Ok((trips, GroundTruth { spec: spec.clone(), true_speed, outliers }))
}
