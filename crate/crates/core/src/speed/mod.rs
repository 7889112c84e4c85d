//! Temporal speed references.
//!
//! The relative reference folds all trips into the weekly window and averages
//! per-trip speeds in each slot. The absolute reference keeps the unfolded
//! per-slot series and extends it past the training data by forecasting the
//! seasonal difference `V[t] - V[t - T]` with an ARIMA model.

pub mod arima;

use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::TimeSlotConfig;
use crate::trip::Trip;
pub use arima::{fit_arima, select_order, ArimaModel, ArimaOrder, ArimaState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    Relative,
    Absolute,
}

impl FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rel" | "relative" => Ok(ReferenceMode::Relative),
            "abs" | "absolute" => Ok(ReferenceMode::Absolute),
            other => Err(Error::Parse(format!("unknown reference mode {other:?}"))),
        }
    }
}

fn mean_speed(trips: &[Trip]) -> Option<f64> {
    if trips.is_empty() {
        None
    } else {
        Some(trips.iter().map(Trip::speed_mph).sum::<f64>() / trips.len() as f64)
    }
}

/// Average speed per slot of the folded weekly window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeReference {
    pub config: TimeSlotConfig,
    pub values: Vec<Option<f64>>,
    pub counts: Vec<u64>,
    pub global_mean: Option<f64>,
}

pub fn fit_relative(trips: &[Trip], cfg: &TimeSlotConfig) -> RelativeReference {
    let t = cfg.period_slots as usize;
    let mut sums = vec![0.0; t];
    let mut counts = vec![0u64; t];
    for trip in trips {
        let k = cfg.slot_of(trip.start_time).relative;
        sums[k] += trip.speed_mph();
        counts[k] += 1;
    }
    let values = sums.iter().zip(&counts).map(|(s, &c)| (c > 0).then(|| s / c as f64)).collect();
    RelativeReference { config: *cfg, values, counts, global_mean: mean_speed(trips) }
}

impl RelativeReference {
    pub fn slot_value(&self, relative_slot: usize) -> Option<f64> {
        self.values.get(relative_slot).copied().flatten()
    }

    /// Value for the slot of `s` if that slot has at least `min_support` trips.
    pub fn supported(&self, s: i64, min_support: u64) -> Option<f64> {
        let k = self.config.slot_of(s).relative;
        if self.counts[k] >= min_support.max(1) {
            self.values[k]
        } else {
            None
        }
    }

    /// Slot value, else the global mean speed.
    pub fn lookup(&self, s: i64) -> Result<f64> {
        self.slot_value(self.config.slot_of(s).relative)
            .or(self.global_mean)
            .ok_or(Error::NoReferenceAvailable)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["slot", "value", "count", "interpolated"])?;
        for (k, (v, c)) in self.values.iter().zip(&self.counts).enumerate() {
            w.write_record(&[
                k.to_string(),
                v.map(|v| v.to_string()).unwrap_or_default(),
                c.to_string(),
                "0".into(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, cfg: &TimeSlotConfig) -> Result<RelativeReference> {
        let t = cfg.period_slots as usize;
        let mut values = vec![None; t];
        let mut counts = vec![0u64; t];
        let mut rdr = csv::Reader::from_reader(r);
        for rec in rdr.records() {
            let rec = rec?;
            let bad = || Error::Parse(format!("bad reference row {:?}", rec));
            let k: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if k >= t {
                return Err(Error::Parse(format!("slot {k} outside the {t}-slot window")));
            }
            values[k] = match rec.get(1).unwrap_or("") {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|_| bad())?),
            };
            counts[k] = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        }
        let total: u64 = counts.iter().zip(&values).filter(|(_, v)| v.is_some()).map(|(c, _)| c).sum();
        let global_mean = (total > 0).then(|| {
            values.iter().zip(&counts).filter_map(|(v, &c)| v.map(|v| v * c as f64)).sum::<f64>()
                / total as f64
        });
        Ok(RelativeReference { config: *cfg, values, counts, global_mean })
    }
}

/// Per-slot average speed on the absolute timeline. Slots without enough trips are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsoluteSeries {
    pub start_slot: i64,
    pub values: Vec<Option<f64>>,
    pub counts: Vec<u64>,
}

impl AbsoluteSeries {
    pub fn from_trips(trips: &[Trip], cfg: &TimeSlotConfig, min_support: u64) -> Option<AbsoluteSeries> {
        let slots: Vec<i64> = trips.iter().map(|t| cfg.absolute_slot(t.start_time)).collect();
        let start = *slots.iter().min()?;
        let end = *slots.iter().max()?;
        let m = (end - start + 1) as usize;
        let mut sums = vec![0.0; m];
        let mut counts = vec![0u64; m];
        for (t, s) in trips.iter().zip(&slots) {
            let i = (s - start) as usize;
            sums[i] += t.speed_mph();
            counts[i] += 1;
        }
        let values = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| (c >= min_support.max(1)).then(|| s / c as f64))
            .collect();
        Some(AbsoluteSeries { start_slot: start, values, counts })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end_slot(&self) -> i64 {
        self.start_slot + self.values.len() as i64 - 1
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 1.0;
        }
        self.values.iter().filter(|v| v.is_none()).count() as f64 / self.values.len() as f64
    }

    pub fn get(&self, slot: i64) -> Option<f64> {
        let i = slot - self.start_slot;
        if i < 0 {
            return None;
        }
        self.values.get(i as usize).copied().flatten()
    }

    /// Fills missing slots linearly between observed neighbors (edges copy the nearest
    /// observation). Returns the filled values and a per-slot interpolated flag. Gaps longer
    /// than `max_gap` slots are refused.
    pub fn interpolate(&self, max_gap: usize) -> Result<(Vec<f64>, Vec<bool>)> {
        let observed: Vec<usize> = (0..self.values.len()).filter(|&i| self.values[i].is_some()).collect();
        let (&first, &last) = match (observed.first(), observed.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::SeriesTooShort("series has no observed slots".into())),
        };
        let too_long = |gap: usize| {
            Error::SeriesTooShort(format!("gap of {gap} missing slots exceeds the limit of {max_gap}"))
        };
        if first > max_gap {
            return Err(too_long(first));
        }
        if self.values.len() - 1 - last > max_gap {
            return Err(too_long(self.values.len() - 1 - last));
        }
        let mut filled = vec![0.0; self.values.len()];
        let mut flags = vec![false; self.values.len()];
        for (i, v) in self.values.iter().enumerate() {
            match v {
                Some(v) => filled[i] = *v,
                None => flags[i] = true,
            }
        }
        let v = |i: usize| self.values[i].unwrap();
        filled[..first].fill(v(first));
        filled[last + 1..].fill(v(last));
        for w in observed.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a - 1 > max_gap {
                return Err(too_long(b - a - 1));
            }
            for (k, slot) in filled[a + 1..b].iter_mut().enumerate() {
                let f = (k + 1) as f64 / (b - a) as f64;
                *slot = v(a) + f * (v(b) - v(a));
            }
        }
        Ok((filled, flags))
    }
}

/// `Y[t] = V[t] - V[t - period]`; missing if either operand is missing.
pub fn seasonal_difference(series: &[Option<f64>], period: usize) -> Result<Vec<Option<f64>>> {
    if series.len() <= period {
        return Err(Error::SeriesTooShort(format!(
            "seasonal difference needs more than {period} slots, got {}",
            series.len()
        )));
    }
    Ok((period..series.len())
        .map(|t| match (series[t], series[t - period]) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        })
        .collect())
}

fn seasonal_difference_filled(v: &[f64], period: usize) -> Vec<f64> {
    (period..v.len()).map(|t| v[t] - v[t - period]).collect()
}

/// Speed forecast for `target_slot`, at most one season past the end of `series`.
pub fn forecast_speed(
    series: &AbsoluteSeries,
    model: &ArimaModel,
    target_slot: i64,
    period: usize,
) -> Result<f64> {
    let horizon = target_slot - series.end_slot();
    if horizon <= 0 {
        return Err(Error::Config(format!(
            "target slot {target_slot} is not after the last observed slot {}",
            series.end_slot()
        )));
    }
    if horizon > period as i64 {
        return Err(Error::HorizonTooFar { horizon, period: period as i64 });
    }
    let (filled, _) = series.interpolate(period / 2)?;
    if filled.len() <= period {
        return Err(Error::SeriesTooShort("history shorter than one season".into()));
    }
    let y = seasonal_difference_filled(&filled, period);
    let state = ArimaState::new(model.clone(), &y);
    let y_hat = state.forecast(horizon as usize)[horizon as usize - 1];
    Ok(y_hat + filled[(filled.len() as i64 + horizon - 1 - period as i64) as usize])
}

/// Absolute reference: observed history, a relative fallback, one season of forecasts and
/// optionally one-step-ahead forecasts over a stream of later observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsoluteReference {
    pub series: AbsoluteSeries,
    pub filled: Vec<f64>,
    pub interpolated: Vec<bool>,
    pub model: ArimaModel,
    pub forecasts: Vec<f64>,
    pub online: Vec<f64>,
    pub relative: RelativeReference,
    pub min_support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsoluteOptions {
    pub order: ArimaOrder,
    /// Pick the order by AIC instead of using `order`.
    pub select_order: bool,
    pub min_support: u64,
}

impl Default for AbsoluteOptions {
    fn default() -> Self {
        AbsoluteOptions { order: ArimaOrder::default(), select_order: false, min_support: 1 }
    }
}

pub fn fit_absolute(trips: &[Trip], cfg: &TimeSlotConfig, opts: &AbsoluteOptions) -> Result<AbsoluteReference> {
    let period = cfg.period_slots as usize;
    let series = AbsoluteSeries::from_trips(trips, cfg, opts.min_support)
        .ok_or_else(|| Error::SeriesTooShort("no trips".into()))?;
    let (filled, interpolated) = series.interpolate(period / 2)?;
    if filled.len() <= period {
        return Err(Error::SeriesTooShort(format!(
            "absolute reference needs more than {period} slots of history, got {}",
            filled.len()
        )));
    }
    let y = seasonal_difference_filled(&filled, period);
    let model = if opts.select_order { select_order(&y)? } else { fit_arima(&y, opts.order)? };
    let state = ArimaState::new(model.clone(), &y);
    let m = filled.len();
    let forecasts = state
        .forecast(period)
        .into_iter()
        .enumerate()
        .map(|(k, y_hat)| y_hat + filled[m + k - period])
        .collect();
    Ok(AbsoluteReference {
        series,
        filled,
        interpolated,
        model,
        forecasts,
        online: Vec::new(),
        relative: fit_relative(trips, cfg),
        min_support: opts.min_support,
    })
}

impl AbsoluteReference {
    pub fn config(&self) -> &TimeSlotConfig {
        &self.relative.config
    }

    /// Adds one-step-ahead forecasts for the slots covered by `stream`, each using only
    /// observations from earlier slots. Stream trips inside the training history are ignored.
    pub fn with_stream(&self, stream: &[Trip]) -> AbsoluteReference {
        let cfg = *self.config();
        let period = cfg.period_slots as usize;
        let end = self.series.end_slot();
        let later: Vec<Trip> =
            stream.iter().filter(|t| cfg.absolute_slot(t.start_time) > end).copied().collect();
        let mut out = self.clone();
        out.online.clear();
        let Some(obs) = AbsoluteSeries::from_trips(&later, &cfg, self.min_support) else {
            return out;
        };
        let y = seasonal_difference_filled(&self.filled, period);
        let mut state = ArimaState::new(self.model.clone(), &y);
        let mut v = self.filled.clone();
        for slot in end + 1..=obs.end_slot() {
            let t = v.len();
            let base = v[t - period];
            let v_hat = state.predict_next() + base;
            out.online.push(v_hat);
            let actual = obs.get(slot).unwrap_or(v_hat);
            v.push(actual);
            state.observe(actual - base);
        }
        out
    }

    /// Value at the requested slot only, without falling back.
    pub fn slot_value(&self, s: i64) -> Option<f64> {
        let a = self.config().absolute_slot(s);
        if a <= self.series.end_slot() {
            return self.series.get(a);
        }
        let k = (a - self.series.end_slot() - 1) as usize;
        self.online.get(k).or_else(|| self.forecasts.get(k)).copied()
    }

    pub fn lookup(&self, s: i64) -> Result<f64> {
        match self.slot_value(s) {
            Some(v) => Ok(v),
            None => self.relative.lookup(s),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["slot", "value", "count", "interpolated"])?;
        for (i, (v, c)) in self.filled.iter().zip(&self.series.counts).enumerate() {
            w.write_record(&[
                (self.series.start_slot + i as i64).to_string(),
                v.to_string(),
                c.to_string(),
                (self.interpolated[i] as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpeedReference {
    Relative(RelativeReference),
    Absolute(Box<AbsoluteReference>),
}

impl SpeedReference {
    pub fn fit(trips: &[Trip], cfg: &TimeSlotConfig, mode: ReferenceMode, opts: &AbsoluteOptions) -> Result<Self> {
        Ok(match mode {
            ReferenceMode::Relative => SpeedReference::Relative(fit_relative(trips, cfg)),
            ReferenceMode::Absolute => SpeedReference::Absolute(Box::new(fit_absolute(trips, cfg, opts)?)),
        })
    }

    pub fn mode(&self) -> ReferenceMode {
        match self {
            SpeedReference::Relative(_) => ReferenceMode::Relative,
            SpeedReference::Absolute(_) => ReferenceMode::Absolute,
        }
    }

    /// Requested slot, then the weekly slot mean, then the global mean speed.
    pub fn lookup(&self, s: i64) -> Result<f64> {
        match self {
            SpeedReference::Relative(r) => r.lookup(s),
            SpeedReference::Absolute(a) => a.lookup(s),
        }
    }

    pub fn with_stream(&self, stream: &[Trip]) -> SpeedReference {
        match self {
            SpeedReference::Relative(_) => self.clone(),
            SpeedReference::Absolute(a) => SpeedReference::Absolute(Box::new(a.with_stream(stream))),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        match self {
            SpeedReference::Relative(r) => r.write_csv(w),
            SpeedReference::Absolute(a) => a.write_csv(w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;

    const MONDAY: i64 = 1_385_942_400; // 2013-12-02T00:00:00Z

    fn trip_at(start: i64, mph: f64) -> Trip {
        Trip {
            id: 0,
            origin: GeoPoint { lat: 40.75, lon: -73.99 },
            destination: GeoPoint { lat: 40.76, lon: -73.98 },
            start_time: start,
            distance: 1.0,
            duration: 3600.0 / mph,
            fare: None,
        }
    }

    #[test]
    fn constant_speed_profile() {
        let trips: Vec<_> = (0..500).map(|i| trip_at(MONDAY + i * 1234, 10.0)).collect();
        let r = fit_relative(&trips, &TimeSlotConfig::default());
        for v in r.values.iter().flatten() {
            assert!((v - 10.0).abs() < 1e-9);
        }
        assert_eq!(r.values.len(), 168);
    }

    #[test]
    fn slot_mean_of_two_trips() {
        let s = MONDAY + 5 * 3600 + 10;
        let r = fit_relative(&[trip_at(s, 10.0), trip_at(s + 60, 20.0)], &TimeSlotConfig::default());
        assert!((r.values[5].unwrap() - 15.0).abs() < 1e-12);
        assert_eq!(r.counts[5], 2);
    }

    #[test]
    fn empty_relative_slot_falls_back_to_global_mean() {
        let r = fit_relative(&[trip_at(MONDAY, 10.0), trip_at(MONDAY + 60, 30.0)], &TimeSlotConfig::default());
        assert_eq!(r.lookup(MONDAY + 3 * 3600).unwrap(), 20.0);
        assert_eq!(r.lookup(MONDAY + 600).unwrap(), 20.0);
        let empty = fit_relative(&[], &TimeSlotConfig::default());
        assert!(matches!(empty.lookup(MONDAY), Err(Error::NoReferenceAvailable)));
    }

    #[test]
    fn relative_csv_roundtrip() {
        let trips: Vec<_> = (0..300).map(|i| trip_at(MONDAY + i * 3000, 5.0 + (i % 7) as f64)).collect();
        let cfg = TimeSlotConfig::default();
        let r = fit_relative(&trips, &cfg);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let back = RelativeReference::read_csv(buf.as_slice(), &cfg).unwrap();
        assert_eq!(back.values, r.values);
        assert_eq!(back.counts, r.counts);
        assert!((back.global_mean.unwrap() - r.global_mean.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn seasonal_difference_cases() {
        let periodic: Vec<Option<f64>> = (0..50).map(|t| Some((t % 7) as f64)).collect();
        assert!(seasonal_difference(&periodic, 7).unwrap().iter().all(|y| *y == Some(0.0)));
        let linear: Vec<Option<f64>> = (0..50).map(|t| Some(t as f64)).collect();
        assert!(seasonal_difference(&linear, 7).unwrap().iter().all(|y| *y == Some(7.0)));
        let mut gappy = linear.clone();
        gappy[3] = None;
        let y = seasonal_difference(&gappy, 7).unwrap();
        assert_eq!(y.len(), 43);
        assert_eq!(y[0], Some(7.0));
        assert_eq!(y[2], Some(7.0));
        assert_eq!(y[10 - 7], None);
        assert!(matches!(seasonal_difference(&linear[..7], 7), Err(Error::SeriesTooShort(_))));
    }

    #[test]
    fn interpolation_and_gap_limit() {
        let s = AbsoluteSeries {
            start_slot: 0,
            values: vec![None, Some(1.0), None, None, Some(4.0), None],
            counts: vec![0, 1, 0, 0, 1, 0],
        };
        let (v, f) = s.interpolate(2).unwrap();
        assert_eq!(v, vec![1.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
        assert_eq!(f, vec![true, false, true, true, false, true]);
        assert!(matches!(s.interpolate(1), Err(Error::SeriesTooShort(_))));
    }

    fn weekly(v: impl Fn(i64) -> f64, weeks: i64) -> Vec<Trip> {
        let mut trips = Vec::new();
        for h in 0..weeks * 168 {
            for k in 0..3 {
                trips.push(trip_at(MONDAY + h * 3600 + k * 600, v(h)));
            }
        }
        trips
    }

    fn profile(h: i64) -> f64 {
        12.0 + 5.0 * (2.0 * std::f64::consts::PI * (h % 168) as f64 / 168.0).sin()
    }

    #[test]
    fn periodic_history_forecasts_last_week() {
        let cfg = TimeSlotConfig::default();
        let trips = weekly(profile, 4);
        let abs = fit_absolute(&trips, &cfg, &AbsoluteOptions::default()).unwrap();
        let end = abs.series.end_slot();
        for h in 1..=168 {
            let f = forecast_speed(&abs.series, &abs.model, end + h, 168).unwrap();
            assert!((f - abs.series.get(end + h - 168).unwrap()).abs() < 1e-9);
        }
        assert!(matches!(
            forecast_speed(&abs.series, &abs.model, end + 169, 168),
            Err(Error::HorizonTooFar { .. })
        ));
        // Dispatch: one hour past the end equals the forecast.
        let s = cfg.slot_start(end + 1) + 30;
        let f = forecast_speed(&abs.series, &abs.model, end + 1, 168).unwrap();
        assert!((abs.lookup(s).unwrap() - f).abs() < 1e-12);
    }

    #[test]
    fn weekly_increment_is_carried_forward() {
        let cfg = TimeSlotConfig::default();
        let c = 0.5;
        let trips = weekly(|h| profile(h) + c * (h / 168) as f64, 5);
        let abs = fit_absolute(&trips, &cfg, &AbsoluteOptions::default()).unwrap();
        let end = abs.series.end_slot();
        let f = forecast_speed(&abs.series, &abs.model, end + 10, 168).unwrap();
        let base = abs.series.get(end + 10 - 168).unwrap();
        assert!((f - (base + c)).abs() < 1e-6, "{f} vs {}", base + c);
    }

    #[test]
    fn relative_and_absolute_agree_on_periodic_history() {
        let cfg = TimeSlotConfig::default();
        let trips = weekly(profile, 3);
        let rel = SpeedReference::fit(&trips, &cfg, ReferenceMode::Relative, &AbsoluteOptions::default()).unwrap();
        let abs = SpeedReference::fit(&trips, &cfg, ReferenceMode::Absolute, &AbsoluteOptions::default()).unwrap();
        for h in (0..3 * 168).step_by(7) {
            let s = MONDAY + h * 3600 + 100;
            assert!((rel.lookup(s).unwrap() - abs.lookup(s).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn absolute_history_lookup_is_exact_slot_value() {
        let cfg = TimeSlotConfig::default();
        let mut trips = weekly(profile, 3);
        let s = MONDAY + 30 * 3600 + 5;
        trips.push(trip_at(s, 40.0));
        let abs = fit_absolute(&trips, &cfg, &AbsoluteOptions::default()).unwrap();
        let expected = (3.0 * profile(30) + 40.0) / 4.0;
        assert!((abs.lookup(s).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn online_stream_tracks_level_shift() {
        let cfg = TimeSlotConfig::default();
        let train = weekly(profile, 3);
        let abs = fit_absolute(&train, &cfg, &AbsoluteOptions::default()).unwrap();
        // The following week runs 30% faster.
        let stream: Vec<_> = weekly(|h| 1.3 * profile(h), 4).into_iter().skip(3 * 168 * 3).collect();
        let online = abs.with_stream(&stream);
        assert_eq!(online.online.len(), 168);
        let s = MONDAY + (3 * 168 + 50) * 3600;
        let truth = 1.3 * profile(50);
        assert!((online.lookup(s).unwrap() - truth).abs() < (abs.lookup(s).unwrap() - truth).abs());
        assert!((online.lookup(s).unwrap() - truth).abs() < 0.05 * truth);
    }
}
