//! Trip CSV loading, GPS occupancy-run extraction and dataset statistics.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{BoundingBox, GeoPoint, Projection, METERS_PER_MILE};
use crate::time::{format_timestamp, parse_timestamp};
use crate::trip::{Trip, TripId};

const CHUNK_ROWS: usize = 100_000;

/// Column names of a trip CSV. Either `dropoff_datetime` or `trip_seconds` must be set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripRecordSchema {
    pub id: Option<String>,
    pub pickup_lat: String,
    pub pickup_lon: String,
    pub dropoff_lat: String,
    pub dropoff_lon: String,
    pub pickup_datetime: String,
    pub dropoff_datetime: Option<String>,
    pub trip_seconds: Option<String>,
    pub trip_distance: String,
    pub fare: Option<String>,
    /// Offset applied to naive datetimes (local = UTC + offset).
    pub timezone_offset: i64,
}

impl Default for TripRecordSchema {
    /// Column names of the 2013 NYC taxi trip files, which is also what `synth` writes.
    fn default() -> Self {
        TripRecordSchema {
            id: Some("trip_id".into()),
            pickup_lat: "pickup_latitude".into(),
            pickup_lon: "pickup_longitude".into(),
            dropoff_lat: "dropoff_latitude".into(),
            dropoff_lon: "dropoff_longitude".into(),
            pickup_datetime: "pickup_datetime".into(),
            dropoff_datetime: Some("dropoff_datetime".into()),
            trip_seconds: Some("trip_time_in_secs".into()),
            trip_distance: "trip_distance".into(),
            fare: Some("fare_amount".into()),
            timezone_offset: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Unparseable,
    NonPositiveDuration,
    NonPositiveDistance,
    NegativeFare,
    OutOfBounds,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectReport {
    pub rows: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
}

impl RejectReport {
    pub fn total(&self) -> usize {
        self.rejected.values().sum()
    }

    fn add(&mut self, reason: RejectReason) {
        *self.rejected.entry(reason).or_default() += 1;
    }
}

struct ColumnIndex {
    id: Option<usize>,
    pickup_lat: usize,
    pickup_lon: usize,
    dropoff_lat: usize,
    dropoff_lon: usize,
    pickup_datetime: usize,
    dropoff_datetime: Option<usize>,
    trip_seconds: Option<usize>,
    trip_distance: usize,
    fare: Option<usize>,
}

impl ColumnIndex {
    fn resolve(schema: &TripRecordSchema, header: &csv::StringRecord) -> Result<Self> {
        let find = |name: &str| header.iter().position(|h| h.trim() == name);
        let require = |name: &str| {
            find(name).ok_or_else(|| Error::MalformedHeader(format!("missing column {name:?}")))
        };
        let optional = |name: &Option<String>| name.as_deref().and_then(find);
        let idx = ColumnIndex {
            id: optional(&schema.id),
            pickup_lat: require(&schema.pickup_lat)?,
            pickup_lon: require(&schema.pickup_lon)?,
            dropoff_lat: require(&schema.dropoff_lat)?,
            dropoff_lon: require(&schema.dropoff_lon)?,
            pickup_datetime: require(&schema.pickup_datetime)?,
            dropoff_datetime: optional(&schema.dropoff_datetime),
            trip_seconds: optional(&schema.trip_seconds),
            trip_distance: require(&schema.trip_distance)?,
            fare: optional(&schema.fare),
        };
        if idx.dropoff_datetime.is_none() && idx.trip_seconds.is_none() {
            return Err(Error::MalformedHeader(
                "need either a dropoff datetime or a trip seconds column".into(),
            ));
        }
        Ok(idx)
    }

    fn parse(
        &self,
        rec: &csv::StringRecord,
        row: u64,
        tz: i64,
        bbox: &BoundingBox,
    ) -> std::result::Result<Trip, RejectReason> {
        use RejectReason::*;
        let field = |i: usize| rec.get(i).map(str::trim).ok_or(Unparseable);
        let num = |i: usize| field(i)?.parse::<f64>().map_err(|_| Unparseable);
        let id: TripId = match self.id {
            Some(i) => field(i)?.parse().map_err(|_| Unparseable)?,
            None => row,
        };
        let origin = GeoPoint { lat: num(self.pickup_lat)?, lon: num(self.pickup_lon)? };
        let destination = GeoPoint { lat: num(self.dropoff_lat)?, lon: num(self.dropoff_lon)? };
        let start_time = parse_timestamp(field(self.pickup_datetime)?, tz).map_err(|_| Unparseable)?;
        let dropoff = match self.dropoff_datetime {
            Some(i) => match field(i)? {
                "" => None,
                s => Some(parse_timestamp(s, tz).map_err(|_| Unparseable)?),
            },
            None => None,
        };
        let duration = match (dropoff, self.trip_seconds) {
            (Some(end), _) => (end - start_time) as f64,
            (None, Some(i)) => num(i)?,
            (None, None) => return Err(Unparseable),
        };
        let distance = num(self.trip_distance)?;
        let fare = match self.fare {
            Some(i) => match field(i)? {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|_| Unparseable)?),
            },
            None => None,
        };
        if !(duration.is_finite() && distance.is_finite() && origin.lat.is_finite() && origin.lon.is_finite())
        {
            return Err(Unparseable);
        }
        if duration <= 0.0 {
            return Err(NonPositiveDuration);
        }
        if distance <= 0.0 {
            return Err(NonPositiveDistance);
        }
        if fare.is_some_and(|f| f < 0.0 || !f.is_finite()) {
            return Err(NegativeFare);
        }
        if !bbox.contains(origin) || !bbox.contains(destination) {
            return Err(OutOfBounds);
        }
        Ok(Trip { id, origin, destination, start_time, distance, duration, fare })
    }
}

pub fn load_trips(
    path: impl AsRef<Path>,
    schema: &TripRecordSchema,
    bbox: &BoundingBox,
) -> Result<(Vec<Trip>, RejectReport)> {
    let file = std::fs::File::open(path)?;
    read_trips(file, schema, bbox)
}

/// Parses trips from any CSV reader. Rows are parsed in parallel chunks; output keeps input order.
pub fn read_trips<R: Read>(
    reader: R,
    schema: &TripRecordSchema,
    bbox: &BoundingBox,
) -> Result<(Vec<Trip>, RejectReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::MalformedHeader(e.to_string()))?.clone();
    let cols = ColumnIndex::resolve(schema, &header)?;

    let mut trips = Vec::new();
    let mut report = RejectReport::default();
    let mut chunk: Vec<(u64, std::result::Result<csv::StringRecord, csv::Error>)> =
        Vec::with_capacity(CHUNK_ROWS);
    let mut records = rdr.into_records();
    let mut row: u64 = 0;
    loop {
        chunk.clear();
        for rec in records.by_ref().take(CHUNK_ROWS) {
            chunk.push((row, rec));
            row += 1;
        }
        if chunk.is_empty() {
            break;
        }
        let parsed: Vec<_> = chunk
            .par_iter()
            .map(|(row, rec)| match rec {
                Ok(rec) => cols.parse(rec, *row, schema.timezone_offset, bbox),
                Err(_) => Err(RejectReason::Unparseable),
            })
            .collect();
        for p in parsed {
            report.rows += 1;
            match p {
                Ok(t) => trips.push(t),
                Err(reason) => report.add(reason),
            }
        }
    }
    report.accepted = trips.len();
    Ok((trips, report))
}

/// Writes trips with the default schema's column names.
pub fn write_trips<W: Write>(writer: W, trips: &[Trip], timezone_offset: i64) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "trip_id",
        "pickup_datetime",
        "dropoff_datetime",
        "pickup_latitude",
        "pickup_longitude",
        "dropoff_latitude",
        "dropoff_longitude",
        "trip_time_in_secs",
        "trip_distance",
        "fare_amount",
    ])?;
    for t in trips {
        let end = t.start_time + t.duration.round() as i64;
        w.write_record(&[
            t.id.to_string(),
            format_timestamp(t.start_time, timezone_offset),
            format_timestamp(end, timezone_offset),
            format!("{:.7}", t.origin.lat),
            format!("{:.7}", t.origin.lon),
            format!("{:.7}", t.destination.lat),
            format!("{:.7}", t.destination.lon),
            format!("{}", t.duration),
            format!("{}", t.distance),
            t.fare.map(|f| format!("{f:.2}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One raw taxi GPS sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsRecord {
    pub vehicle_id: String,
    pub speed: f64,
    pub lon: f64,
    pub lat: f64,
    pub occupancy: u8,
    pub timestamp: i64,
}

pub fn read_gps<R: Read>(reader: R, timezone_offset: i64) -> Result<Vec<GpsRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::MalformedHeader(e.to_string()))?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MalformedHeader(format!("missing column {name:?}")))
    };
    let (vid, spd, lon, lat, occ, ts) = (
        find("vehicle_id")?,
        find("speed")?,
        find("lon")?,
        find("lat")?,
        find("occupancy")?,
        find("timestamp")?,
    );
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse(format!("gps row {}: bad {what}", i + 1));
        let num = |j: usize, what: &str| {
            rec.get(j).and_then(|s| s.trim().parse::<f64>().ok()).ok_or_else(|| bad(what))
        };
        out.push(GpsRecord {
            vehicle_id: rec.get(vid).unwrap_or_default().trim().to_string(),
            speed: num(spd, "speed")?,
            lon: num(lon, "lon")?,
            lat: num(lat, "lat")?,
            occupancy: match rec.get(occ).map(str::trim) {
                Some("0") => 0,
                Some("1") => 1,
                _ => return Err(bad("occupancy")),
            },
            timestamp: parse_timestamp(rec.get(ts).unwrap_or_default(), timezone_offset)
                .map_err(|_| bad("timestamp"))?,
        });
    }
    Ok(out)
}

/// Turns each maximal occupied run of a vehicle into one trip. Distance is the summed
/// projected L1 length of consecutive hops. Runs of a single record, or with zero
/// elapsed time or zero length, are dropped.
///
/// Output is sorted by (vehicle, start time) and numbered from 0, so it does not
/// depend on how different vehicles' records are interleaved.
pub fn extract_trips_from_gps<I>(records: I, proj: &Projection) -> Result<Vec<Trip>>
where
    I: IntoIterator<Item = GpsRecord>,
{
    let mut by_vehicle: BTreeMap<String, Vec<GpsRecord>> = BTreeMap::new();
    for r in records {
        let v = by_vehicle.entry(r.vehicle_id.clone()).or_default();
        if let Some(last) = v.last() {
            if r.timestamp < last.timestamp {
                return Err(Error::UnorderedInput { vehicle: r.vehicle_id, timestamp: r.timestamp });
            }
        }
        v.push(r);
    }

    let mut trips = Vec::new();
    for records in by_vehicle.values() {
        for run in records.split(|r| r.occupancy == 0) {
            if run.len() < 2 {
                continue;
            }
            let (first, last) = (&run[0], &run[run.len() - 1]);
            let duration = (last.timestamp - first.timestamp) as f64;
            let meters: f64 = run
                .windows(2)
                .map(|w| {
                    let a = proj.project_unchecked(GeoPoint { lat: w[0].lat, lon: w[0].lon });
                    let b = proj.project_unchecked(GeoPoint { lat: w[1].lat, lon: w[1].lon });
                    a.l1(&b)
                })
                .sum();
            if duration <= 0.0 || meters <= 0.0 {
                continue;
            }
            trips.push(Trip {
                id: trips.len() as TripId,
                origin: GeoPoint { lat: first.lat, lon: first.lon },
                destination: GeoPoint { lat: last.lat, lon: last.lon },
                start_time: first.timestamp,
                distance: meters / METERS_PER_MILE,
                duration,
                fare: None,
            });
        }
    }
    Ok(trips)
}

pub const STAT_QUANTILES: [f64; 11] = [0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub per_day: BTreeMap<String, usize>,
    pub duration_quantiles: Vec<(f64, f64)>,
    pub distance_quantiles: Vec<(f64, f64)>,
    pub mean_duration: f64,
    pub median_duration: f64,
    pub mean_distance: f64,
    pub median_distance: f64,
}

/// Linear-interpolated empirical quantile of sorted data (midpoint median for even lengths).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn dataset_stats(trips: &[Trip], timezone_offset: i64) -> Result<Stats> {
    if trips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut durations: Vec<f64> = trips.iter().map(|t| t.duration).collect();
    let mut distances: Vec<f64> = trips.iter().map(|t| t.distance).collect();
    durations.sort_by(f64::total_cmp);
    distances.sort_by(f64::total_cmp);
    let mut per_day = BTreeMap::new();
    for t in trips {
        let day = format_timestamp(t.start_time, timezone_offset)[..10].to_string();
        *per_day.entry(day).or_insert(0) += 1;
    }
    let n = trips.len() as f64;
    let qs = |v: &[f64]| STAT_QUANTILES.iter().map(|&q| (q, quantile_sorted(v, q))).collect();
    Ok(Stats {
        count: trips.len(),
        per_day,
        duration_quantiles: qs(&durations),
        distance_quantiles: qs(&distances),
        mean_duration: durations.iter().sum::<f64>() / n,
        median_duration: quantile_sorted(&durations, 0.5),
        mean_distance: distances.iter().sum::<f64>() / n,
        median_distance: quantile_sorted(&distances, 0.5),
    })
}

impl Stats {
    /// Quantile table in long form: `feature,quantile,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["feature", "quantile", "value"])?;
        for (name, table) in [("duration", &self.duration_quantiles), ("distance", &self.distance_quantiles)] {
            for (q, v) in table {
                w.write_record(&[name.to_string(), q.to_string(), v.to_string()])?;
            }
        }
        for (day, count) in &self.per_day {
            w.write_record(&["day_count".to_string(), day.clone(), count.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "trip_id,pickup_datetime,dropoff_datetime,pickup_latitude,pickup_longitude,dropoff_latitude,dropoff_longitude,trip_time_in_secs,trip_distance,fare_amount\n";

    fn load(body: &str) -> (Vec<Trip>, RejectReport) {
        let csv = format!("{HEADER}{body}");
        read_trips(csv.as_bytes(), &TripRecordSchema::default(), &BoundingBox::manhattan()).unwrap()
    }

    #[test]
    fn zero_duration_row_is_rejected() {
        let (trips, rep) = load("1,2013-01-01 10:00:00,2013-01-01 10:00:00,40.75,-73.99,40.76,-73.98,0,1.2,6.5\n");
        assert!(trips.is_empty());
        assert_eq!(rep.rejected[&RejectReason::NonPositiveDuration], 1);
    }

    #[test]
    fn valid_row_becomes_trip() {
        let (trips, rep) = load("7,2013-01-01 10:00:00,2013-01-01 10:10:00,40.75,-73.99,40.76,-73.98,600,1.2,6.5\n");
        assert_eq!(rep.total(), 0);
        assert_eq!(trips.len(), 1);
        assert_eq!(trips[0].id, 7);
        assert_eq!(trips[0].duration, 600.0);
        assert_eq!(trips[0].fare, Some(6.5));
    }

    #[test]
    fn counts_add_up() {
        let body = "\
1,2013-01-01 10:00:00,2013-01-01 10:10:00,40.75,-73.99,40.76,-73.98,600,1.2,6.5
2,2013-01-01 11:00:00,2013-01-01 11:05:00,40.75,-73.99,40.76,-73.98,300,0.9,5.0
3,2013-01-01 12:00:00,2013-01-01 12:20:00,40.72,-73.99,40.80,-73.95,1200,4.0,16.0
4,2013-01-01 12:00:00,2013-01-01 12:20:00,41.72,-73.99,40.80,-73.95,1200,4.0,16.0
5,garbage,2013-01-01 12:20:00,40.72,-73.99,40.80,-73.95,1200,4.0,16.0
";
        let (trips, rep) = load(body);
        assert_eq!(trips.len(), 3);
        assert_eq!(rep.total(), 2);
        assert_eq!(rep.rows, trips.len() + rep.total());
        assert_eq!(rep.rejected[&RejectReason::OutOfBounds], 1);
        assert_eq!(rep.rejected[&RejectReason::Unparseable], 1);
    }

    #[test]
    fn duration_from_trip_seconds_when_no_dropoff() {
        let schema = TripRecordSchema { dropoff_datetime: None, ..Default::default() };
        let csv = format!("{HEADER}1,2013-01-01 10:00:00,,40.75,-73.99,40.76,-73.98,420,1.2,\n");
        let (trips, _) = read_trips(csv.as_bytes(), &schema, &BoundingBox::manhattan()).unwrap();
        assert_eq!(trips[0].duration, 420.0);
        assert_eq!(trips[0].fare, None);
    }

    #[test]
    fn missing_columns_is_malformed_header() {
        let schema = TripRecordSchema { dropoff_datetime: None, trip_seconds: None, ..Default::default() };
        let r = read_trips(HEADER.as_bytes(), &schema, &BoundingBox::manhattan());
        assert!(matches!(r, Err(Error::MalformedHeader(_))));
        let r = read_trips("a,b\n1,2\n".as_bytes(), &TripRecordSchema::default(), &BoundingBox::manhattan());
        assert!(matches!(r, Err(Error::MalformedHeader(_))));
    }

    fn gps(v: &str, occ: u8, ts: i64, lat: f64) -> GpsRecord {
        GpsRecord { vehicle_id: v.into(), speed: 0.0, lon: -73.99, lat, occupancy: occ, timestamp: ts }
    }

    #[test]
    fn single_occupied_run() {
        let proj = BoundingBox::manhattan().projection();
        let recs = vec![
            gps("a", 0, 0, 40.750),
            gps("a", 1, 10, 40.751),
            gps("a", 1, 20, 40.752),
            gps("a", 1, 30, 40.754),
            gps("a", 0, 40, 40.755),
        ];
        let trips = extract_trips_from_gps(recs, &proj).unwrap();
        assert_eq!(trips.len(), 1);
        assert_eq!(trips[0].start_time, 10);
        assert_eq!(trips[0].duration, 20.0);
        let meters = 0.003 * 6_371_000.0 * std::f64::consts::PI / 180.0;
        assert!((trips[0].distance - meters / METERS_PER_MILE).abs() < 1e-9);
    }

    #[test]
    fn length_one_runs_are_dropped() {
        let proj = BoundingBox::manhattan().projection();
        let recs = vec![gps("a", 1, 0, 40.75), gps("a", 0, 10, 40.76), gps("a", 1, 20, 40.77)];
        assert!(extract_trips_from_gps(recs, &proj).unwrap().is_empty());
    }

    #[test]
    fn regressing_timestamps_are_rejected() {
        let proj = BoundingBox::manhattan().projection();
        let recs = vec![gps("a", 1, 10, 40.75), gps("a", 1, 5, 40.76)];
        assert!(matches!(extract_trips_from_gps(recs, &proj), Err(Error::UnorderedInput { .. })));
    }

    #[test]
    fn interleaved_vehicles() {
        let proj = BoundingBox::manhattan().projection();
        let a = vec![
            gps("a", 0, 0, 40.750),
            gps("a", 1, 10, 40.751),
            gps("a", 1, 20, 40.752),
            gps("a", 1, 30, 40.753),
            gps("a", 0, 40, 40.754),
        ];
        let b = vec![
            gps("b", 1, 5, 40.760),
            gps("b", 1, 15, 40.762),
            gps("b", 0, 25, 40.764),
            gps("b", 0, 35, 40.766),
            gps("b", 0, 45, 40.768),
        ];
        // Oracle: each vehicle on its own.
        let mut oracle = Vec::new();
        for recs in [&a, &b] {
            for mut t in extract_trips_from_gps(recs.clone(), &proj).unwrap() {
                t.id = oracle.len() as u64;
                oracle.push(t);
            }
        }
        let mut mixed = Vec::new();
        for (x, y) in a.iter().zip(&b) {
            mixed.push(y.clone());
            mixed.push(x.clone());
        }
        let trips = extract_trips_from_gps(mixed, &proj).unwrap();
        assert_eq!(trips.len(), 2);
        assert_eq!(trips, oracle);
    }

    fn trip_with(duration: f64, distance: f64) -> Trip {
        Trip {
            id: 0,
            origin: GeoPoint { lat: 40.75, lon: -73.99 },
            destination: GeoPoint { lat: 40.76, lon: -73.98 },
            start_time: 1_356_998_400,
            distance,
            duration,
            fare: None,
        }
    }

    #[test]
    fn stats_small() {
        let trips: Vec<_> = [100.0, 200.0, 300.0].iter().map(|&d| trip_with(d, 1.0)).collect();
        let s = dataset_stats(&trips, 0).unwrap();
        assert_eq!(s.median_duration, 200.0);
        assert_eq!(s.mean_duration, 200.0);
        assert_eq!(s.per_day["2013-01-01"], 3);
    }

    #[test]
    fn stats_single_trip() {
        let s = dataset_stats(&[trip_with(42.0, 3.0)], 0).unwrap();
        assert!(s.duration_quantiles.iter().all(|&(_, v)| v == 42.0));
        assert!(s.distance_quantiles.iter().all(|&(_, v)| v == 3.0));
    }

    #[test]
    fn stats_empty() {
        assert!(matches!(dataset_stats(&[], 0), Err(Error::EmptyDataset)));
    }
}
