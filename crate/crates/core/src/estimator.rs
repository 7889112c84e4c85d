//! Travel-time predictors over a neighbor set, and the batch query path.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::Projection;
use crate::index::{GridIndex, NeighborSet};
use crate::region::RegionPairReference;
use crate::speed::{ReferenceMode, SpeedReference};
use crate::trip::{Query, Trip};

pub const SCALING_MIN: f64 = 0.2;
pub const SCALING_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "AVG")]
    Avg,
    #[serde(rename = "WEIGHTED")]
    Weighted,
    #[serde(rename = "TEMP_rel")]
    TempRel,
    #[serde(rename = "TEMP_abs")]
    TempAbs,
    #[serde(rename = "TEMP_rel+R")]
    TempRelR,
    #[serde(rename = "TEMP_abs+R")]
    TempAbsR,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Lr,
        Method::Avg,
        Method::Weighted,
        Method::TempRel,
        Method::TempAbs,
        Method::TempRelR,
        Method::TempAbsR,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Lr => "LR",
            Method::Avg => "AVG",
            Method::Weighted => "WEIGHTED",
            Method::TempRel => "TEMP_rel",
            Method::TempAbs => "TEMP_abs",
            Method::TempRelR => "TEMP_rel+R",
            Method::TempAbsR => "TEMP_abs+R",
        }
    }

    /// Reference mode and whether it is refined by region pairs.
    pub fn reference(&self) -> Option<(ReferenceMode, bool)> {
        match self {
            Method::TempRel => Some((ReferenceMode::Relative, false)),
            Method::TempAbs => Some((ReferenceMode::Absolute, false)),
            Method::TempRelR => Some((ReferenceMode::Relative, true)),
            Method::TempAbsR => Some((ReferenceMode::Absolute, true)),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', '+'], "_");
        Ok(match norm.as_str() {
            "lr" => Method::Lr,
            "avg" => Method::Avg,
            "weighted" | "soft" => Method::Weighted,
            "temp_rel" => Method::TempRel,
            "temp_abs" => Method::TempAbs,
            "temp_rel_r" => Method::TempRelR,
            "temp_abs_r" => Method::TempAbsR,
            _ => return Err(Error::Parse(format!("unknown method {s:?}"))),
        })
    }
}

/// Duration as a linear function of endpoint L1 distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrModel {
    pub beta0: f64,
    pub beta1: f64,
}

pub fn fit_lr(trips: &[Trip], proj: &Projection) -> Result<LrModel> {
    if trips.len() < 2 {
        return Err(Error::DegenerateDesign(format!("{} trips", trips.len())));
    }
    let n = trips.len() as f64;
    let xs: Vec<f64> = trips.iter().map(|t| t.endpoint_l1_miles(proj)).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = trips.iter().map(|t| t.duration).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, t) in xs.iter().zip(trips) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (t.duration - my);
    }
    if !(sxx > 1e-12 * (1.0 + mx * mx) * n) {
        return Err(Error::DegenerateDesign("all endpoint distances are identical".into()));
    }
    let beta1 = sxy / sxx;
    Ok(LrModel { beta0: my - beta1 * mx, beta1 })
}

impl LrModel {
    pub fn predict(&self, q: &Query, proj: &Projection) -> f64 {
        self.beta0 + self.beta1 * proj.l1_miles(q.origin, q.destination)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// Seconds.
    pub value: f64,
    pub neighbor_count: usize,
    pub method: Method,
    pub mean_scaling_factor: Option<f64>,
    /// Reference speed at the query time, when a temporal reference was used.
    pub query_reference: Option<f64>,
    pub fallback: bool,
}

impl Estimate {
    fn plain(value: f64, neighbor_count: usize, method: Method) -> Self {
        Estimate { value, neighbor_count, method, mean_scaling_factor: None, query_reference: None, fallback: false }
    }
}

pub fn estimate_avg(index: &GridIndex, ns: &NeighborSet) -> Result<Estimate> {
    if ns.is_empty() {
        return Err(Error::NoNeighbors);
    }
    let sum: f64 = ns.entries.iter().map(|n| index.trip(n.index).duration).sum();
    Ok(Estimate::plain(sum / ns.len() as f64, ns.len(), Method::Avg))
}

/// Default soft weight `1 / (origin cell distance + destination cell distance + 1)`.
pub fn default_weights(ns: &NeighborSet) -> Vec<f64> {
    ns.entries.iter().map(|n| 1.0 / (n.origin_l1 + n.dest_l1 + 1) as f64).collect()
}

pub fn estimate_weighted(index: &GridIndex, ns: &NeighborSet, weights: Option<&[f64]>) -> Result<Estimate> {
    if ns.is_empty() {
        return Err(Error::NoNeighbors);
    }
    let owned;
    let w = match weights {
        Some(w) => w,
        None => {
            owned = default_weights(ns);
            &owned
        }
    };
    if w.len() != ns.len() || w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Config("weights must be positive, one per neighbor".into()));
    }
    let (num, den) = ns
        .entries
        .iter()
        .zip(w)
        .fold((0.0, 0.0), |(a, b), (n, &wi)| (a + wi * index.trip(n.index).duration, b + wi));
    Ok(Estimate::plain(num / den, ns.len(), Method::Weighted))
}

/// `V(s_i) / V(s_q)` clamped to `[SCALING_MIN, SCALING_MAX]`.
pub fn scaling_factor(ref_value_i: f64, ref_value_q: f64) -> Result<f64> {
    if !(ref_value_i > 0.0 && ref_value_q > 0.0) || !ref_value_i.is_finite() || !ref_value_q.is_finite() {
        return Err(Error::NoReferenceAvailable);
    }
    Ok((ref_value_i / ref_value_q).clamp(SCALING_MIN, SCALING_MAX))
}

/// Supplies reference speeds `(V(s_i), V(s_q))` for scaling neighbor durations.
pub trait ScalingReference: Sync {
    fn reference_speeds(&self, q: &Query, neighbor_starts: &[i64]) -> Result<Vec<(f64, f64)>>;
}

impl ScalingReference for SpeedReference {
    fn reference_speeds(&self, q: &Query, neighbor_starts: &[i64]) -> Result<Vec<(f64, f64)>> {
        let vq = self.lookup(q.start_time)?;
        neighbor_starts.iter().map(|&s| Ok((self.lookup(s)?, vq))).collect()
    }
}

impl ScalingReference for RegionPairReference {
    fn reference_speeds(&self, q: &Query, neighbor_starts: &[i64]) -> Result<Vec<(f64, f64)>> {
        let key = self.partition.pair_of(q.origin, q.destination)?;
        let pair = self.pairs.get(&key);
        let vq_pair = pair.and_then(|p| p.value(q.start_time, self.min_support));
        let vq_global = self.global.lookup(q.start_time)?;
        neighbor_starts
            .iter()
            .map(|&s| {
                if let (Some(p), Some(vq)) = (pair, vq_pair) {
                    if let Some(vi) = p.value(s, self.min_support) {
                        return Ok((vi, vq));
                    }
                }
                Ok((self.global.lookup(s)?, vq_global))
            })
            .collect()
    }
}

/// Mean of neighbor durations each scaled by `V(s_i) / V(s_q)`.
pub fn estimate_temp(
    index: &GridIndex,
    ns: &NeighborSet,
    reference: &dyn ScalingReference,
    q: &Query,
    method: Method,
) -> Result<Estimate> {
    if ns.is_empty() {
        return Err(Error::NoNeighbors);
    }
    let starts: Vec<i64> = ns.entries.iter().map(|n| index.trip(n.index).start_time).collect();
    let speeds = reference.reference_speeds(q, &starts)?;
    let mut total = 0.0;
    let mut factor_sum = 0.0;
    for (n, &(vi, vq)) in ns.entries.iter().zip(&speeds) {
        let f = scaling_factor(vi, vq)?;
        factor_sum += f;
        total += f * index.trip(n.index).duration;
    }
    let k = ns.len() as f64;
    Ok(Estimate {
        value: total / k,
        neighbor_count: ns.len(),
        method,
        mean_scaling_factor: Some(factor_sum / k),
        query_reference: speeds.first().map(|s| s.1),
        fallback: false,
    })
}

/// Everything a method needs to answer a query.
#[derive(Clone, Copy)]
pub struct Predictor<'a> {
    pub index: &'a GridIndex,
    pub tau: u32,
    pub lr: Option<&'a LrModel>,
    pub reference: Option<&'a dyn ScalingReference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Ok(Estimate),
    NoCoverage,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub query_id: u64,
    pub method: Method,
    pub status: QueryStatus,
}

impl BatchRow {
    pub fn estimate(&self) -> Option<&Estimate> {
        match &self.status {
            QueryStatus::Ok(e) => Some(e),
            _ => None,
        }
    }
}

impl<'a> Predictor<'a> {
    pub fn predict(&self, method: Method, q: &Query) -> Result<Estimate> {
        let proj = self.index.projection();
        if method == Method::Lr {
            let lr = self.lr.ok_or_else(|| Error::Config("LR model not fitted".into()))?;
            return Ok(Estimate::plain(lr.predict(q, proj), 0, Method::Lr));
        }
        let ns = self.index.neighbors(q, self.tau)?;
        match method {
            Method::Avg => estimate_avg(self.index, &ns),
            Method::Weighted => estimate_weighted(self.index, &ns, None),
            _ => {
                let reference = self
                    .reference
                    .ok_or_else(|| Error::Config(format!("{method} needs a speed reference")))?;
                estimate_temp(self.index, &ns, reference, q, method)
            }
        }
    }

    fn answer(&self, method: Method, q: &Query, lr_fallback: bool) -> QueryStatus {
        match self.predict(method, q) {
            Ok(e) => QueryStatus::Ok(e),
            Err(Error::NoNeighbors) | Err(Error::OutOfBounds { .. }) => match (lr_fallback, self.lr) {
                (true, Some(lr)) => QueryStatus::Ok(Estimate {
                    fallback: true,
                    ..Estimate::plain(lr.predict(q, self.index.projection()), 0, Method::Lr)
                }),
                _ => QueryStatus::NoCoverage,
            },
            Err(e) => QueryStatus::Failed(e.to_string()),
        }
    }
}

/// Answers every query independently. Output order matches input order and does not depend
/// on `threads`.
pub fn estimate_batch(
    predictor: &Predictor<'_>,
    method: Method,
    queries: &[(u64, Query)],
    threads: usize,
    lr_fallback: bool,
) -> Result<Vec<BatchRow>> {
    let run = || {
        queries
            .par_iter()
            .map(|(id, q)| BatchRow { query_id: *id, method, status: predictor.answer(method, q, lr_fallback) })
            .collect()
    };
    if threads == 0 {
        return Ok(run());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(run))
}

/// Rows `query_id,method,estimate_seconds,neighbor_count,status`.
pub fn write_batch_csv<W: Write>(w: W, rows: &[BatchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["query_id", "method", "estimate_seconds", "neighbor_count", "status"])?;
    for r in rows {
        let (value, count, status, method) = match &r.status {
            QueryStatus::Ok(e) if e.fallback => (format!("{:.3}", e.value), "0".to_string(), "fallback_lr".to_string(), Method::Lr),
            QueryStatus::Ok(e) => (format!("{:.3}", e.value), e.neighbor_count.to_string(), "ok".to_string(), r.method),
            QueryStatus::NoCoverage => (String::new(), "0".into(), "no_coverage".into(), r.method),
            QueryStatus::Failed(msg) => (String::new(), "0".into(), format!("error: {msg}"), r.method),
        };
        w.write_record(&[r.query_id.to_string(), method.name().to_string(), value, count, status])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{BoundingBox, GeoPoint, ProjectedPoint};
    use crate::speed::fit_relative;
    use crate::time::TimeSlotConfig;

    const MONDAY: i64 = 1_385_942_400;

    fn bbox() -> BoundingBox {
        BoundingBox::manhattan()
    }

    fn trip(id: u64, dx_m: f64, start: i64, duration: f64) -> Trip {
        let proj = bbox().projection();
        Trip {
            id,
            origin: proj.unproject(ProjectedPoint { x: 1000.0, y: 1000.0 }),
            destination: proj.unproject(ProjectedPoint { x: 1000.0 + dx_m, y: 3000.0 }),
            start_time: start,
            distance: 1.5,
            duration,
            fare: None,
        }
    }

    #[test]
    fn lr_exact_line() {
        let proj = bbox().projection();
        let trips: Vec<_> = (0..20)
            .map(|i| {
                let mut t = trip(i, 100.0 * i as f64, MONDAY, 0.0);
                t.duration = 60.0 * proj.l1_miles(t.origin, t.destination) + 30.0;
                t
            })
            .collect();
        let m = fit_lr(&trips, &proj).unwrap();
        assert!((m.beta1 - 60.0).abs() < 1e-6 && (m.beta0 - 30.0).abs() < 1e-6);
    }

    #[test]
    fn lr_degenerate() {
        let proj = bbox().projection();
        let trips = vec![trip(1, 0.0, MONDAY, 100.0), trip(2, 0.0, MONDAY, 200.0)];
        assert!(matches!(fit_lr(&trips, &proj), Err(Error::DegenerateDesign(_))));
        assert!(matches!(fit_lr(&trips[..1], &proj), Err(Error::DegenerateDesign(_))));
    }

    fn setup(durations: &[(f64, i64)]) -> (GridIndex, Query) {
        let trips: Vec<_> = durations.iter().enumerate().map(|(i, &(d, s))| trip(i as u64, 0.0, s, d)).collect();
        let idx = GridIndex::build(&trips, 50.0, &bbox()).unwrap();
        (idx, Query::from(&trips[0]))
    }

    #[test]
    fn average_of_neighbors() {
        let (idx, q) = setup(&[(100.0, MONDAY), (200.0, MONDAY)]);
        let ns = idx.neighbors(&q, 0).unwrap();
        assert_eq!(estimate_avg(&idx, &ns).unwrap().value, 150.0);
        let (idx, q) = setup(&[(321.0, MONDAY)]);
        assert_eq!(estimate_avg(&idx, &idx.neighbors(&q, 0).unwrap()).unwrap().value, 321.0);
        assert!(matches!(estimate_avg(&idx, &NeighborSet::default()), Err(Error::NoNeighbors)));
    }

    #[test]
    fn weighted_reductions() {
        let (idx, q) = setup(&[(100.0, MONDAY), (200.0, MONDAY), (600.0, MONDAY)]);
        let ns = idx.neighbors(&q, 0).unwrap();
        let eq = estimate_weighted(&idx, &ns, Some(&[2.0, 2.0, 2.0])).unwrap();
        assert!((eq.value - estimate_avg(&idx, &ns).unwrap().value).abs() < 1e-12);
        let dom = estimate_weighted(&idx, &ns, Some(&[1e-9, 1e-9, 1.0])).unwrap();
        assert!((dom.value - 600.0).abs() < 1e-3);
        assert!(estimate_weighted(&idx, &ns, Some(&[1.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn scaling_factor_rules() {
        assert_eq!(scaling_factor(7.0, 7.0).unwrap(), 1.0);
        assert_eq!(scaling_factor(20.0, 10.0).unwrap(), 2.0);
        assert_eq!(scaling_factor(100.0, 10.0).unwrap(), 5.0);
        assert_eq!(scaling_factor(1.0, 10.0).unwrap(), 0.2);
        assert!(matches!(scaling_factor(0.0, 10.0), Err(Error::NoReferenceAvailable)));
    }

    #[test]
    fn constant_reference_equals_average() {
        let (idx, q) = setup(&[(100.0, MONDAY), (250.0, MONDAY + 5 * 3600), (400.0, MONDAY + 50 * 3600)]);
        let cfg = TimeSlotConfig::default();
        let flat: Vec<_> = (0..100).map(|i| trip(100 + i, 0.0, MONDAY + i as i64 * 4000, 360.0)).collect();
        let reference = SpeedReference::Relative(fit_relative(&flat, &cfg));
        let ns = idx.neighbors(&q, 0).unwrap();
        let t = estimate_temp(&idx, &ns, &reference, &q, Method::TempRel).unwrap();
        assert_eq!(t.value, estimate_avg(&idx, &ns).unwrap().value);
        assert_eq!(t.mean_scaling_factor, Some(1.0));
    }

    #[test]
    fn uniform_factor_two() {
        // Neighbors in slot 2 at 20 mph; the query in slot 5 where traffic runs at 10 mph.
        let (idx, _) = setup(&[(100.0, MONDAY + 2 * 3600), (300.0, MONDAY + 2 * 3600 + 60)]);
        let cfg = TimeSlotConfig::default();
        let mut ref_trips = vec![trip(50, 0.0, MONDAY + 2 * 3600, 180.0)];
        ref_trips.push(trip(51, 0.0, MONDAY + 5 * 3600, 360.0));
        let reference = SpeedReference::Relative(fit_relative(&ref_trips, &cfg));
        let q = Query { start_time: MONDAY + 5 * 3600 + 10, ..Query::from(idx.trip(0)) };
        let ns = idx.neighbors(&q, 0).unwrap();
        let t = estimate_temp(&idx, &ns, &reference, &q, Method::TempRel).unwrap();
        assert!((t.value - 2.0 * 200.0).abs() < 1e-9);
    }

    #[test]
    fn batch_fallback_and_determinism() {
        let (idx, q) = setup(&[(100.0, MONDAY), (200.0, MONDAY)]);
        let proj = bbox().projection();
        let lr = LrModel { beta0: 50.0, beta1: 100.0 };
        let far = Query {
            origin: proj.unproject(ProjectedPoint { x: 5000.0, y: 5000.0 }),
            destination: GeoPoint { lat: 40.8, lon: -73.95 },
            start_time: MONDAY,
        };
        let p = Predictor { index: &idx, tau: 1, lr: Some(&lr), reference: None };
        let rows = estimate_batch(&p, Method::Avg, &[(1, q), (2, far)], 1, true).unwrap();
        assert_eq!(rows[0].estimate().unwrap().value, 150.0);
        let fb = rows[1].estimate().unwrap();
        assert!(fb.fallback && fb.method == Method::Lr);
        assert!((fb.value - lr.predict(&far, &proj)).abs() < 1e-12);
        let none = estimate_batch(&p, Method::Avg, &[(2, far)], 2, false).unwrap();
        assert_eq!(none[0].status, QueryStatus::NoCoverage);
        let mut buf = Vec::new();
        write_batch_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("1,AVG,150.000,2,ok"));
        assert!(text.contains("2,LR,"));
        assert!(text.contains("fallback_lr"));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
