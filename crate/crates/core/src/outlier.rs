//! Robust line fit `y = omega1 * x + omega2 + e` whose error is a two-component
//! mixture: Gaussian inliers with weight `1 - p` and Student-t outliers with
//! weight `p`. Fitted by expectation-conditional-maximization; the per-trip
//! posterior of the t component is the outlier score.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geo::Projection;
use crate::trip::{Trip, TripId};

pub const MIN_TRIPS: usize = 100;
pub const DEFAULT_NU: f64 = 3.0;
pub const P_INIT: f64 = 0.05;
pub const P_MIN: f64 = 0.001;
pub const P_MAX: f64 = 0.30;
pub const MAX_ITERATIONS: usize = 200;
pub const TOLERANCE: f64 = 1e-6;
/// Lower bound on the ratio of the outlier scale to the inlier scale.
pub const MIN_SCALE_RATIO: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Duration,
    Distance,
    Fare,
    EndpointL1,
}

impl Feature {
    pub fn value(&self, trip: &Trip, proj: &Projection) -> Option<f64> {
        match self {
            Feature::Duration => Some(trip.duration),
            Feature::Distance => Some(trip.distance),
            Feature::Fare => trip.fare,
            Feature::EndpointL1 => Some(trip.endpoint_l1_miles(proj)),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Feature::Duration => "duration",
            Feature::Distance => "distance",
            Feature::Fare => "fare",
            Feature::EndpointL1 => "endpoint_l1",
        }
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "duration" | "time" => Ok(Feature::Duration),
            "distance" => Ok(Feature::Distance),
            "fare" => Ok(Feature::Fare),
            "endpoint_l1" | "endpoint_l1_distance" => Ok(Feature::EndpointL1),
            other => Err(Error::Parse(format!("unknown feature {other:?}"))),
        }
    }
}

/// Regression of `y` on `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeaturePair {
    pub x: Feature,
    pub y: Feature,
}

impl FeaturePair {
    pub fn new(x: Feature, y: Feature) -> Result<Self> {
        if x == y {
            return Err(Error::Config(format!("feature pair uses {} twice", x.name())));
        }
        Ok(FeaturePair { x, y })
    }

    /// time~distance, time~fare, distance~fare, distance~endpoint L1, time~endpoint L1.
    pub fn default_pipeline() -> Vec<FeaturePair> {
        use Feature::*;
        vec![
            FeaturePair { x: Distance, y: Duration },
            FeaturePair { x: Fare, y: Duration },
            FeaturePair { x: Fare, y: Distance },
            FeaturePair { x: EndpointL1, y: Distance },
            FeaturePair { x: EndpointL1, y: Duration },
        ]
    }
}

impl fmt::Display for FeaturePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.y.name(), self.x.name())
    }
}

impl FromStr for FeaturePair {
    type Err = Error;

    /// `y:x`, e.g. `duration:distance`.
    fn from_str(s: &str) -> Result<Self> {
        let (y, x) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("feature pair {s:?} is not of the form y:x")))?;
        FeaturePair::new(x.parse()?, y.parse()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierModel {
    pub pair: FeaturePair,
    pub omega1: f64,
    pub omega2: f64,
    pub sigma2: f64,
    /// Squared scale of the t component.
    pub t_scale2: f64,
    pub nu: f64,
    pub p_outlier: f64,
    /// Outlier posterior per fitted trip, ordered by trip id.
    #[serde(skip)]
    pub scores: Vec<(TripId, f64)>,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: Vec<f64>,
}

fn ln_gauss(r: f64, sigma2: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() - 0.5 * r * r / sigma2
}

fn ln_student(r: f64, scale2: f64, nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI * scale2).ln()
        - 0.5 * (nu + 1.0) * (1.0 + r * r / (nu * scale2)).ln()
}

struct Params {
    omega1: f64,
    omega2: f64,
    sigma2: f64,
    t_scale2: f64,
    p: f64,
    nu: f64,
}

impl Params {
    /// Returns (outlier posterior, log mixture density) of one residual.
    fn posterior(&self, r: f64) -> (f64, f64) {
        let lg = (1.0 - self.p).ln() + ln_gauss(r, self.sigma2);
        let lt = self.p.ln() + ln_student(r, self.t_scale2, self.nu);
        let m = lg.max(lt);
        let lse = m + ((lg - m).exp() + (lt - m).exp()).ln();
        ((lt - lse).exp(), lse)
    }
}

fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        sxx += wi * (xi - mx) * (xi - mx);
        sxy += wi * (xi - mx) * (yi - my);
    }
    if !(sxx > 0.0) || !sxx.is_finite() {
        return Err(Error::DegenerateDesign("feature x has no spread".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// (id, x, y) for trips that carry both features, sorted by id.
fn features(trips: &[Trip], pair: FeaturePair, proj: &Projection) -> Vec<(TripId, f64, f64)> {
    let mut rows: Vec<_> = trips
        .iter()
        .filter_map(|t| Some((t.id, pair.x.value(t, proj)?, pair.y.value(t, proj)?)))
        .collect();
    rows.sort_by_key(|r| r.0);
    rows
}

pub fn fit_outlier_model(trips: &[Trip], pair: FeaturePair, proj: &Projection) -> Result<OutlierModel> {
    let rows = features(trips, pair, proj);
    fit_rows(&rows, pair)
}

fn fit_rows(rows: &[(TripId, f64, f64)], pair: FeaturePair) -> Result<OutlierModel> {
    let n = rows.len();
    if n < MIN_TRIPS {
        return Err(Error::InsufficientData { needed: MIN_TRIPS, got: n });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let nf = n as f64;

    let (omega1, omega2) = weighted_line(&x, &y, &vec![1.0; n])?;
    let mean_y = y.iter().sum::<f64>() / nf;
    let var_y = y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / nf;
    let floor = 1e-12 * (1.0 + var_y);
    let resid_var =
        x.iter().zip(&y).map(|(xi, yi)| (yi - omega1 * xi - omega2).powi(2)).sum::<f64>() / nf;
    let mut params = Params {
        omega1,
        omega2,
        sigma2: resid_var.max(floor),
        t_scale2: (4.0 * resid_var).max(floor),
        p: P_INIT,
        nu: DEFAULT_NU,
    };

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut scores = vec![0.0; n];
    let mut iterations = 0;
    for it in 0..=MAX_ITERATIONS {
        // E-step: outlier posterior and the t component's latent precision weight.
        let estep: Vec<(f64, f64, f64)> = x
            .par_iter()
            .zip(y.par_iter())
            .map(|(&xi, &yi)| {
                let r = yi - params.omega1 * xi - params.omega2;
                let (t, ll) = params.posterior(r);
                let u = (params.nu + 1.0) / (params.nu + r * r / params.t_scale2);
                (t, u, ll)
            })
            .collect();
        let ll: f64 = estep.iter().map(|e| e.2).sum();
        for (s, e) in scores.iter_mut().zip(&estep) {
            *s = e.0;
        }
        if let Some(&prev) = trace.last() {
            if (ll - prev).abs() < TOLERANCE {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if it == MAX_ITERATIONS {
            break;
        }
        iterations = it + 1;

        // CM-steps: line given scales, then scales and mixture weight given the line.
        let w: Vec<f64> =
            estep.iter().map(|&(t, u, _)| (1.0 - t) / params.sigma2 + t * u / params.t_scale2).collect();
        let (o1, o2) = weighted_line(&x, &y, &w)?;
        params.omega1 = o1;
        params.omega2 = o2;
        let mut s_in = 0.0;
        let mut w_in = 0.0;
        let mut s_out = 0.0;
        let mut w_out = 0.0;
        for ((&xi, &yi), &(t, u, _)) in x.iter().zip(&y).zip(&estep) {
            let r2 = (yi - o1 * xi - o2).powi(2);
            s_in += (1.0 - t) * r2;
            w_in += 1.0 - t;
            s_out += t * u * r2;
            w_out += t;
        }
        let c = MIN_SCALE_RATIO;
        let sigma2 = if w_in > 0.0 { s_in / w_in } else { params.sigma2 };
        let t_scale2 = if w_out > 1e-12 { s_out / w_out } else { params.t_scale2 };
        if t_scale2 >= c * sigma2 {
            params.sigma2 = sigma2.max(floor);
            params.t_scale2 = t_scale2.max(c * params.sigma2);
        } else {
            // Constraint active: maximize over the shared scale with t_scale2 = c * sigma2.
            params.sigma2 = ((s_in + s_out / c) / (w_in + w_out)).max(floor);
            params.t_scale2 = c * params.sigma2;
        }
        params.p = (w_out / nf).clamp(P_MIN, P_MAX);
    }
    if !converged {
        log::warn!("outlier EM for {pair} did not converge in {MAX_ITERATIONS} iterations");
    }
    Ok(OutlierModel {
        pair,
        omega1: params.omega1,
        omega2: params.omega2,
        sigma2: params.sigma2,
        t_scale2: params.t_scale2,
        nu: params.nu,
        p_outlier: params.p,
        scores: rows.iter().map(|r| r.0).zip(scores).collect(),
        iterations,
        converged,
        log_likelihood: trace,
    })
}

impl OutlierModel {
    fn params(&self) -> Params {
        Params {
            omega1: self.omega1,
            omega2: self.omega2,
            sigma2: self.sigma2,
            t_scale2: self.t_scale2,
            p: self.p_outlier,
            nu: self.nu,
        }
    }

    /// Outlier posteriors of `trips` under the fitted parameters, ordered by trip id.
    pub fn score(&self, trips: &[Trip], proj: &Projection) -> Vec<(TripId, f64)> {
        let params = self.params();
        features(trips, self.pair, proj)
            .par_iter()
            .map(|&(id, x, y)| (id, params.posterior(y - self.omega1 * x - self.omega2).0))
            .collect()
    }
}

/// Highest `round(p * n)` scores; ties go to the lower trip id.
pub fn top_scores(scores: &[(TripId, f64)], p: f64) -> Vec<TripId> {
    let k = (p * scores.len() as f64).round() as usize;
    let mut ranked: Vec<_> = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut ids: Vec<TripId> = ranked.into_iter().take(k).map(|r| r.0).collect();
    ids.sort_unstable();
    ids
}

pub fn flag_outliers(model: &OutlierModel, trips: &[Trip], proj: &Projection) -> Vec<TripId> {
    top_scores(&model.score(trips, proj), model.p_outlier)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStage {
    pub pair: FeaturePair,
    pub model: OutlierModel,
    pub input_trips: usize,
    pub flagged: Vec<TripId>,
}

/// Applies the pairs in order, each fitted on the survivors of the previous one.
pub fn filter_pipeline(
    trips: &[Trip],
    pairs: &[FeaturePair],
    proj: &Projection,
) -> Result<(Vec<Trip>, Vec<FilterStage>)> {
    if pairs.is_empty() {
        return Err(Error::Config("outlier pipeline needs at least one feature pair".into()));
    }
    let mut survivors = trips.to_vec();
    let mut stages = Vec::with_capacity(pairs.len());
    for &pair in pairs {
        // A pair whose features most trips lack (fares missing from the source, say) is
        // skipped rather than failing the whole pipeline.
        let model = match fit_outlier_model(&survivors, pair, proj) {
            Err(Error::InsufficientData { needed, got }) => {
                log::warn!("filter {pair}: skipped, {got} trips carry both features (need {needed})");
                continue;
            }
            other => other?,
        };
        let flagged = top_scores(&model.scores, model.p_outlier);
        let drop: HashSet<TripId> = flagged.iter().copied().collect();
        let input_trips = survivors.len();
        survivors.retain(|t| !drop.contains(&t.id));
        log::info!(
            "filter {pair}: slope {:.4} intercept {:.4} p {:.4} flagged {} of {input_trips}",
            model.omega1,
            model.omega2,
            model.p_outlier,
            flagged.len()
        );
        stages.push(FilterStage { pair, model, input_trips, flagged });
    }
    Ok((survivors, stages))
}
