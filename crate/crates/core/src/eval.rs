//! Splits, accuracy metrics, breakdowns and the speed-ratio diagnostic.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{estimate_batch, fit_lr, BatchRow, LrModel, Method, Predictor, ScalingReference};
use crate::geo::BoundingBox;
use crate::index::{GridIndex, DEFAULT_CELL_SIZE};
use crate::outlier::{filter_pipeline, FeaturePair, FilterStage};
use crate::region::{build_region_references, RegionPairReference, RegionPartition, DEFAULT_MIN_SUPPORT};
use crate::speed::{AbsoluteOptions, ReferenceMode, SpeedReference};
use crate::time::TimeSlotConfig;
use crate::trip::{Query, Trip};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mre: f64,
    pub medae: f64,
    pub medre: f64,
    pub n_evaluated: usize,
    pub n_nocoverage: usize,
}

/// Median with the midpoint convention for even lengths. Sorts in place.
pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn compute_metrics(truth: &[f64], estimates: &[f64]) -> Result<MetricReport> {
    if truth.len() != estimates.len() {
        return Err(Error::LengthMismatch(truth.len(), estimates.len()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&y) = truth.iter().find(|&&y| !(y > 0.0)) {
        return Err(Error::NonPositiveTruth(y));
    }
    let mut abs: Vec<f64> = truth.iter().zip(estimates).map(|(y, e)| (y - e).abs()).collect();
    let mut rel: Vec<f64> = abs.iter().zip(truth).map(|(a, y)| a / y).collect();
    let sum_abs: f64 = abs.iter().sum();
    let sum_y: f64 = truth.iter().sum();
    Ok(MetricReport {
        mae: sum_abs / truth.len() as f64,
        mre: sum_abs / sum_y,
        medae: median(&mut abs),
        medre: median(&mut rel),
        n_evaluated: truth.len(),
        n_nocoverage: 0,
    })
}

/// Half-open `[start, end)` epoch-second intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: (i64, i64),
    pub test: (i64, i64),
    /// Uniform sample of this many test queries.
    pub subsample: Option<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.train, self.test);
        if a.0 >= a.1 || b.0 >= b.1 {
            return Err(Error::Config("split intervals must be nonempty".into()));
        }
        if a.1 > b.0 {
            return Err(Error::Config("training interval must end before the test interval starts".into()));
        }
        Ok(())
    }

    pub fn split(&self, trips: &[Trip]) -> Result<(Vec<Trip>, Vec<Trip>)> {
        self.validate()?;
        let inside = |t: &Trip, (s, e): (i64, i64)| t.start_time >= s && t.start_time < e;
        let train = trips.iter().filter(|t| inside(t, self.train)).copied().collect();
        let test = trips.iter().filter(|t| inside(t, self.test)).copied().collect();
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub cell_size: f64,
    pub bbox: BoundingBox,
    pub slots: TimeSlotConfig,
    pub region_rows: u32,
    pub region_cols: u32,
    pub min_support: u64,
    pub absolute: AbsoluteOptions,
    /// Outlier pipeline applied to the training set; `None` keeps it unfiltered.
    pub filter_train: Option<Vec<FeaturePair>>,
    /// Outlier pipeline applied to the test set.
    pub filter_test: Option<Vec<FeaturePair>>,
    /// Feed test-period observations into the absolute references as a stream.
    pub stream_test: bool,
    pub lr_fallback: bool,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            cell_size: DEFAULT_CELL_SIZE,
            bbox: BoundingBox::manhattan(),
            slots: TimeSlotConfig::default(),
            region_rows: 8,
            region_cols: 8,
            min_support: DEFAULT_MIN_SUPPORT,
            absolute: AbsoluteOptions::default(),
            filter_train: None,
            filter_test: None,
            stream_test: true,
            lr_fallback: false,
            threads: 0,
        }
    }
}

/// The speed references required by a set of methods.
#[derive(Debug, Clone, Default)]
pub struct References {
    pub relative: Option<SpeedReference>,
    pub absolute: Option<SpeedReference>,
    pub region_relative: Option<RegionPairReference>,
    pub region_absolute: Option<RegionPairReference>,
}

impl References {
    /// Fits every reference the methods need on `train`. Absolute references additionally
    /// receive `stream` as later observations, if given.
    pub fn fit(methods: &[Method], train: &[Trip], stream: Option<&[Trip]>, cfg: &ExperimentConfig) -> Result<References> {
        let needs: HashSet<(ReferenceMode, bool)> = methods.iter().filter_map(Method::reference).collect();
        let partition = RegionPartition::new(cfg.bbox, cfg.region_rows, cfg.region_cols)?;
        let mut out = References::default();
        for (mode, regional) in needs {
            let fitted_region = || {
                build_region_references(train, &partition, &cfg.slots, mode, cfg.min_support, &cfg.absolute)
            };
            match (mode, regional) {
                (ReferenceMode::Relative, false) => {
                    out.relative = Some(SpeedReference::fit(train, &cfg.slots, mode, &cfg.absolute)?)
                }
                (ReferenceMode::Absolute, false) => {
                    let r = SpeedReference::fit(train, &cfg.slots, mode, &cfg.absolute)?;
                    out.absolute = Some(match stream {
                        Some(s) => r.with_stream(s),
                        None => r,
                    });
                }
                (ReferenceMode::Relative, true) => out.region_relative = Some(fitted_region()?),
                (ReferenceMode::Absolute, true) => {
                    let r = fitted_region()?;
                    out.region_absolute = Some(match stream {
                        Some(s) => r.with_stream(s),
                        None => r,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn for_method(&self, method: Method) -> Option<&dyn ScalingReference> {
        match method.reference()? {
            (ReferenceMode::Relative, false) => self.relative.as_ref().map(|r| r as &dyn ScalingReference),
            (ReferenceMode::Absolute, false) => self.absolute.as_ref().map(|r| r as &dyn ScalingReference),
            (ReferenceMode::Relative, true) => self.region_relative.as_ref().map(|r| r as &dyn ScalingReference),
            (ReferenceMode::Absolute, true) => self.region_absolute.as_ref().map(|r| r as &dyn ScalingReference),
        }
    }
}

/// One evaluated test trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub query_id: u64,
    pub truth: f64,
    pub estimate: f64,
    pub distance: f64,
    pub neighbor_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub report: MetricReport,
    #[serde(skip)]
    pub items: Vec<EvalItem>,
    #[serde(skip)]
    pub rows: Vec<BatchRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tau: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub n_queries: usize,
    pub coverage: f64,
    pub filter_train: Vec<FilterStage>,
    pub filter_test: Vec<FilterStage>,
    pub results: Vec<MethodResult>,
}

impl ExperimentReport {
    pub fn get(&self, m: Method) -> Option<&MetricReport> {
        self.results.iter().find(|r| r.method == m).map(|r| &r.report)
    }
}

/// Scores the rows of one batch against the test trips they were asked for.
pub fn score_rows(rows: &[BatchRow], queries: &[Trip]) -> Result<(MetricReport, Vec<EvalItem>)> {
    if rows.len() != queries.len() {
        return Err(Error::LengthMismatch(rows.len(), queries.len()));
    }
    let items: Vec<EvalItem> = rows
        .iter()
        .zip(queries)
        .filter_map(|(r, t)| {
            r.estimate().map(|e| EvalItem {
                query_id: t.id,
                truth: t.duration,
                estimate: e.value,
                distance: t.distance,
                neighbor_count: e.neighbor_count,
            })
        })
        .collect();
    let n_nocoverage = rows.len() - items.len();
    if items.is_empty() {
        return Ok((MetricReport { n_nocoverage, ..MetricReport::default() }, items));
    }
    let truth: Vec<f64> = items.iter().map(|i| i.truth).collect();
    let est: Vec<f64> = items.iter().map(|i| i.estimate).collect();
    let mut report = compute_metrics(&truth, &est)?;
    report.n_nocoverage = n_nocoverage;
    Ok((report, items))
}

/// Filter, index the training trips, fit references, answer every test trip and score.
pub fn run_experiment(
    trips: &[Trip],
    split: &SplitSpec,
    methods: &[Method],
    tau: u32,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    let (mut train, mut test) = split.split(trips)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let proj = cfg.bbox.projection();
    let mut filter_train = Vec::new();
    if let Some(pairs) = &cfg.filter_train {
        let (kept, stages) = filter_pipeline(&train, pairs, &proj)?;
        train = kept;
        filter_train = stages;
    }
    let mut filter_test = Vec::new();
    if let Some(pairs) = &cfg.filter_test {
        let (kept, stages) = filter_pipeline(&test, pairs, &proj)?;
        test = kept;
        filter_test = stages;
    }
    let n_test = test.len();
    let queries_trips: Vec<Trip> = match split.subsample {
        Some(k) if k < test.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
            let mut picked: Vec<Trip> = test.choose_multiple(&mut rng, k).copied().collect();
            picked.sort_by_key(|t| t.id);
            picked
        }
        _ => test.clone(),
    };

    let index = GridIndex::build(&train, cfg.cell_size, &cfg.bbox)?;
    let needs_lr = cfg.lr_fallback || methods.contains(&Method::Lr);
    let lr: Option<LrModel> = if needs_lr { Some(fit_lr(index.trips(), &proj)?) } else { None };
    let stream = cfg.stream_test.then_some(test.as_slice());
    let refs = References::fit(methods, index.trips(), stream, cfg)?;
    let queries: Vec<(u64, Query)> = queries_trips.iter().map(|t| (t.id, Query::from(t))).collect();
    let coverage = index.coverage(&queries.iter().map(|q| q.1).collect::<Vec<_>>(), tau);

    let mut results = Vec::with_capacity(methods.len());
    for &method in methods {
        let predictor = Predictor { index: &index, tau, lr: lr.as_ref(), reference: refs.for_method(method) };
        let rows = estimate_batch(&predictor, method, &queries, cfg.threads, cfg.lr_fallback)?;
        let (report, items) = score_rows(&rows, &queries_trips)?;
        log::info!("{method}: MAE {:.3} MRE {:.4} over {} queries", report.mae, report.mre, report.n_evaluated);
        results.push(MethodResult { method, report, items, rows });
    }
    Ok(ExperimentReport {
        tau,
        n_train: index.len(),
        n_test,
        n_queries: queries.len(),
        coverage,
        filter_train,
        filter_test,
        results,
    })
}

/// Writes one row per method: `method,mae,mre,medae,medre,n_evaluated,n_nocoverage`.
pub fn write_report_csv<W: Write>(w: W, results: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["method", "mae", "mre", "medae", "medre", "n_evaluated", "n_nocoverage"])?;
    for (name, r) in results {
        w.write_record(&[
            name.clone(),
            format!("{:.3}", r.mae),
            format!("{:.4}", r.mre),
            format!("{:.3}", r.medae),
            format!("{:.4}", r.medre),
            r.n_evaluated.to_string(),
            r.n_nocoverage.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakdownKey {
    TripTime,
    TripDistance,
    NeighborCount,
}

impl std::str::FromStr for BreakdownKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trip_time" => Ok(BreakdownKey::TripTime),
            "trip_distance" | "distance" => Ok(BreakdownKey::TripDistance),
            "neighbor_count" | "neighbors" => Ok(BreakdownKey::NeighborCount),
            _ => Err(Error::Parse(format!("unknown breakdown key {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub lo: f64,
    pub hi: f64,
    pub population: usize,
    /// `None` for an empty bin.
    pub report: Option<MetricReport>,
}

/// Groups items into `[edges[k], edges[k+1])` bins, the last bin closed. Items outside every
/// bin are ignored.
pub fn breakdown(items: &[EvalItem], by: BreakdownKey, edges: &[f64]) -> Result<Vec<BinReport>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("breakdown needs at least two increasing bin edges".into()));
    }
    let key = |i: &EvalItem| match by {
        BreakdownKey::TripTime => i.truth,
        BreakdownKey::TripDistance => i.distance,
        BreakdownKey::NeighborCount => i.neighbor_count as f64,
    };
    let last = edges.len() - 2;
    (0..=last)
        .into_par_iter()
        .map(|k| {
            let (lo, hi) = (edges[k], edges[k + 1]);
            let members: Vec<&EvalItem> = items
                .iter()
                .filter(|i| {
                    let v = key(i);
                    v >= lo && (v < hi || (k == last && v == hi))
                })
                .collect();
            let report = if members.is_empty() {
                None
            } else {
                let truth: Vec<f64> = members.iter().map(|i| i.truth).collect();
                let est: Vec<f64> = members.iter().map(|i| i.estimate).collect();
                Some(compute_metrics(&truth, &est)?)
            };
            Ok(BinReport { lo, hi, population: members.len(), report })
        })
        .collect()
}

/// Rows `lo,hi,population,mae,mre,medae,medre`, metrics left blank for empty bins.
pub fn write_breakdown_csv<W: Write>(w: W, bins: &[BinReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["lo", "hi", "population", "mae", "mre", "medae", "medre", "empty"])?;
    for b in bins {
        let m = |f: fn(&MetricReport) -> f64| b.report.as_ref().map(|r| format!("{:.4}", f(r))).unwrap_or_default();
        w.write_record(&[
            b.lo.to_string(),
            b.hi.to_string(),
            b.population.to_string(),
            m(|r| r.mae),
            m(|r| r.mre),
            m(|r| r.medae),
            m(|r| r.medre),
            (b.report.is_none() as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// OLS fit of duration ratio `t_q / t_i` on reference ratio `V(s_i) / V(s_q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// `(reference ratio, duration ratio)` per sampled pair.
    pub pairs: Vec<(f64, f64)>,
}

/// Least-squares line through `(x, y)` points: `(slope, intercept, r2)`.
pub fn ols(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(Error::InsufficientPairs(points.len()));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::DegenerateDesign("reference ratios are all equal".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok((slope, my - slope * mx, r2))
}

/// Samples query trips from `queries`, pairs each with one random neighbor from the index,
/// and regresses duration ratios on reference-speed ratios.
pub fn assumption_report(
    index: &GridIndex,
    queries: &[Trip],
    reference: &dyn ScalingReference,
    tau: u32,
    sample_pairs: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(sample_pairs);
    if !queries.is_empty() {
        for _ in 0..sample_pairs.saturating_mul(20) {
            if pairs.len() >= sample_pairs {
                break;
            }
            let tq = &queries[rng.gen_range(0..queries.len())];
            let q = Query::from(tq);
            let Ok(ns) = index.neighbors(&q, tau) else { continue };
            let candidates: Vec<_> = ns.entries.iter().filter(|n| index.trip(n.index).id != tq.id).collect();
            let Some(n) = candidates.choose(&mut rng) else { continue };
            let ti = index.trip(n.index);
            let Ok(speeds) = reference.reference_speeds(&q, &[ti.start_time]) else { continue };
            let (vi, vq) = speeds[0];
            if vi > 0.0 && vq > 0.0 {
                pairs.push((vi / vq, tq.duration / ti.duration));
            }
        }
    }
    if pairs.len() < 2 {
        return Err(Error::InsufficientPairs(pairs.len()));
    }
    let (slope, intercept, r2) = ols(&pairs)?;
    Ok(AssumptionReport { slope, intercept, r2, pairs })
}

pub fn write_scatter_csv<W: Write>(w: W, report: &AssumptionReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["reference_ratio", "duration_ratio"])?;
    for (x, y) in &report.pairs {
        w.write_record(&[x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A published result, printed next to local numbers for orientation only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub dataset: &'static str,
    pub method: &'static str,
    pub mae: f64,
    pub mre: f64,
    pub medae: f64,
    pub medre: f64,
}

const fn row(dataset: &'static str, method: &'static str, mae: f64, mre: f64, medae: f64, medre: f64) -> PublishedRow {
    PublishedRow { dataset, method, mae, mre, medae, medre }
}

/// Published figures for the NYC and Shanghai taxi datasets.
pub const PUBLISHED: &[PublishedRow] = &[
    row("NYC", "LR", 194.604, 0.2949, 164.820, 0.3017),
    row("NYC", "AVG", 178.459, 0.2704, 120.834, 0.2345),
    row("NYC", "TEMP_rel", 149.815, 0.2270, 97.365, 0.1907),
    row("NYC", "TEMP_abs", 143.311, 0.2171, 98.780, 0.1890),
    row("NYC", "TEMP_rel+R", 143.719, 0.2178, 92.067, 0.1805),
    row("NYC", "TEMP_abs+R", 142.334, 0.2157, 98.046, 0.1874),
    row("NYC 260k", "BING", 202.684, 0.3157, 134.000, 0.2718),
    row("NYC 260k", "BING(traffic)", 242.402, 0.3776, 182.000, 0.3395),
    row("NYC 260k", "TEMP_abs+R", 135.365, 0.2108, 94.940, 0.1839),
    row("Shanghai", "LR", 130.710, 0.6399, 138.796, 0.6173),
    row("Shanghai", "BAIDU", 111.484, 0.5451, 73.001, 0.5001),
    row("Shanghai", "SEGMENT", 119.833, 0.5866, 84.704, 0.4947),
    row("Shanghai", "SUBPATH", 113.566, 0.5560, 75.913, 0.4820),
    row("Shanghai", "AVG", 94.202, 0.4615, 60.183, 0.3739),
    row("Shanghai", "TEMP_rel", 92.428, 0.4527, 55.317, 0.3678),
];

pub fn published(dataset: &str, method: Method) -> Option<&'static PublishedRow> {
    PUBLISHED.iter().find(|r| r.dataset == dataset && r.method == method.name())
}
