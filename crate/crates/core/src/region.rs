//! Speed references per (origin region, destination region) over a coarse uniform grid.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{BoundingBox, GeoPoint};
use crate::speed::{
    fit_absolute, fit_relative, AbsoluteOptions, AbsoluteReference, AbsoluteSeries, ReferenceMode,
    RelativeReference, SpeedReference,
};
use crate::time::TimeSlotConfig;
use crate::trip::{Query, Trip};

pub const DEFAULT_MIN_SUPPORT: u64 = 10;
/// Pairs with at least this share of empty slots get a relative reference even in absolute mode.
pub const MAX_MISSING_FOR_PAIR_ARIMA: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub bbox: BoundingBox,
    pub rows: u32,
    pub cols: u32,
}

impl RegionPartition {
    pub fn new(bbox: BoundingBox, rows: u32, cols: u32) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("region grid needs at least one row and one column".into()));
        }
        Ok(RegionPartition { bbox, rows, cols })
    }

    pub fn len(&self) -> u32 {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Region of an in-box point; the north and east edges belong to the last row/column.
    pub fn region_of(&self, p: GeoPoint) -> Result<u32> {
        if !self.bbox.contains(p) {
            return Err(Error::OutOfBounds { lat: p.lat, lon: p.lon });
        }
        let fy = (p.lat - self.bbox.lat_min) / (self.bbox.lat_max - self.bbox.lat_min);
        let fx = (p.lon - self.bbox.lon_min) / (self.bbox.lon_max - self.bbox.lon_min);
        let row = ((fy * self.rows as f64) as u32).min(self.rows - 1);
        let col = ((fx * self.cols as f64) as u32).min(self.cols - 1);
        Ok(row * self.cols + col)
    }

    pub fn pair_of(&self, o: GeoPoint, d: GeoPoint) -> Result<(u32, u32)> {
        Ok((self.region_of(o)?, self.region_of(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PairReference {
    Relative(RelativeReference),
    Absolute(Box<AbsoluteReference>),
}

impl PairReference {
    pub(crate) fn value(&self, s: i64, min_support: u64) -> Option<f64> {
        match self {
            PairReference::Relative(r) => r.supported(s, min_support),
            PairReference::Absolute(a) => a.slot_value(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPairReference {
    pub partition: RegionPartition,
    pub mode: ReferenceMode,
    pub min_support: u64,
    pub global: SpeedReference,
    pub pairs: HashMap<(u32, u32), PairReference>,
}

fn group_by_pair(trips: &[Trip], partition: &RegionPartition) -> BTreeMap<(u32, u32), Vec<Trip>> {
    let mut groups: BTreeMap<(u32, u32), Vec<Trip>> = BTreeMap::new();
    for t in trips {
        if let Ok(key) = partition.pair_of(t.origin, t.destination) {
            groups.entry(key).or_default().push(*t);
        }
    }
    groups
}

/// Fits the global reference and one reference per region pair that has at least one slot
/// with `min_support` trips.
pub fn build_region_references(
    trips: &[Trip],
    partition: &RegionPartition,
    cfg: &TimeSlotConfig,
    mode: ReferenceMode,
    min_support: u64,
    opts: &AbsoluteOptions,
) -> Result<RegionPairReference> {
    let global = SpeedReference::fit(trips, cfg, mode, opts)?;
    let groups = group_by_pair(trips, partition);
    let pair_opts = AbsoluteOptions { min_support, ..*opts };
    let pairs: HashMap<(u32, u32), PairReference> = groups
        .par_iter()
        .filter_map(|(key, group)| {
            let rel = fit_relative(group, cfg);
            if !rel.counts.iter().any(|&c| c >= min_support.max(1)) {
                return None;
            }
            if mode == ReferenceMode::Absolute {
                let dense = AbsoluteSeries::from_trips(group, cfg, min_support)
                    .is_some_and(|s| s.missing_fraction() < MAX_MISSING_FOR_PAIR_ARIMA);
                if dense {
                    if let Ok(abs) = fit_absolute(group, cfg, &pair_opts) {
                        return Some((*key, PairReference::Absolute(Box::new(abs))));
                    }
                }
            }
            Some((*key, PairReference::Relative(rel)))
        })
        .collect();
    Ok(RegionPairReference { partition: *partition, mode, min_support, global, pairs })
}

impl RegionPairReference {
    /// Pair value if present for the slot, else the global chain.
    pub fn lookup_pair(&self, o: GeoPoint, d: GeoPoint, s: i64) -> Result<f64> {
        let key = self.partition.pair_of(o, d)?;
        if let Some(v) = self.pairs.get(&key).and_then(|p| p.value(s, self.min_support)) {
            return Ok(v);
        }
        self.global.lookup(s)
    }

    /// Reference speeds at a neighbor's start time and at the query time, both taken from
    /// the query's region pair when it covers both slots and from the global reference
    /// otherwise.
    pub fn reference_pair(&self, q: &Query, neighbor_start: i64) -> Result<(f64, f64)> {
        let key = self.partition.pair_of(q.origin, q.destination)?;
        if let Some(p) = self.pairs.get(&key) {
            if let (Some(vi), Some(vq)) =
                (p.value(neighbor_start, self.min_support), p.value(q.start_time, self.min_support))
            {
                return Ok((vi, vq));
            }
        }
        Ok((self.global.lookup(neighbor_start)?, self.global.lookup(q.start_time)?))
    }

    pub fn with_stream(&self, stream: &[Trip]) -> RegionPairReference {
        let groups = group_by_pair(stream, &self.partition);
        let pairs = self
            .pairs
            .iter()
            .map(|(key, p)| {
                let p = match p {
                    PairReference::Absolute(a) => PairReference::Absolute(Box::new(
                        a.with_stream(groups.get(key).map(Vec::as_slice).unwrap_or(&[])),
                    )),
                    rel => rel.clone(),
                };
                (*key, p)
            })
            .collect();
        RegionPairReference { global: self.global.with_stream(stream), pairs, ..self.clone() }
    }

    /// Rows `origin_region,dest_region,kind,slot,value,count`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["origin_region", "dest_region", "kind", "slot", "value", "count"])?;
        let mut keys: Vec<_> = self.pairs.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let (i, j) = (key.0.to_string(), key.1.to_string());
            match &self.pairs[&key] {
                PairReference::Relative(r) => {
                    for (k, (v, c)) in r.values.iter().zip(&r.counts).enumerate() {
                        if let Some(v) = v {
                            w.write_record([&i, &j, "relative", &k.to_string(), &v.to_string(), &c.to_string()])?;
                        }
                    }
                }
                PairReference::Absolute(a) => {
                    for (k, (v, c)) in a.series.values.iter().zip(&a.series.counts).enumerate() {
                        if let Some(v) = v {
                            let slot = (a.series.start_slot + k as i64).to_string();
                            w.write_record([&i, &j, "absolute", &slot, &v.to_string(), &c.to_string()])?;
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}
