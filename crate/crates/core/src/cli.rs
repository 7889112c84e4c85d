//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::estimator::{estimate_batch, fit_lr, write_batch_csv, Method, Predictor, QueryStatus};
use crate::eval::{
    breakdown, published, run_experiment, write_breakdown_csv, write_report_csv, BreakdownKey, References,
};
use crate::geo::GeoPoint;
use crate::index::GridIndex;
use crate::ingest::{dataset_stats, extract_trips_from_gps, load_trips, read_gps, write_trips, RejectReport};
use crate::outlier::filter_pipeline;
use crate::region::{build_region_references, RegionPartition};
use crate::speed::{ReferenceMode, SpeedReference};
use crate::synth::{generate, SynthSpec};
use crate::time::parse_timestamp;
use crate::trip::{Query, Trip};

#[derive(Debug, Parser)]
#[command(name = "odtime", version, about = "Origin-destination travel time estimation from historical trips")]
pub struct Cli {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for batch estimation and index build (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a trip CSV and write the accepted trips in the standard schema.
    Ingest(IngestArgs),
    /// Segment raw GPS samples into occupied trips.
    ExtractGps(IoArgs),
    /// Remove outliers with the mixture-model pipeline.
    Filter(FilterArgs),
    /// Build the grid neighbor index and write a snapshot.
    BuildIndex(BuildArgs),
    /// Fit a speed reference and write it as CSV.
    FitRef(FitRefArgs),
    /// Estimate travel time for one query or a batch of queries.
    Estimate(EstimateArgs),
    /// Run a train/test experiment and report metrics.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic trip set with ground truth.
    Synth(SynthArgs),
    /// Summary statistics of a trip CSV.
    Stats(IoArgs),
}

#[derive(Debug, Args)]
pub struct IoArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// JSON file mapping schema fields to column names.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// Comma-separated `y:x` feature pairs.
    #[arg(long, value_delimiter = ',')]
    pub pairs: Option<Vec<String>>,
    /// Write fitted models and flagged ids as JSON.
    #[arg(long)]
    pub models: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cell_size: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitRefArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// `rel` or `abs`.
    #[arg(long, default_value = "rel")]
    pub mode: String,
    /// Fit per region-pair references.
    #[arg(long)]
    pub regions: bool,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Index snapshot written by build-index.
    #[arg(long, conflicts_with = "trips")]
    pub index: Option<PathBuf>,
    /// Build the index from this trip CSV instead of a snapshot.
    #[arg(long)]
    pub trips: Option<PathBuf>,
    #[arg(long, default_value = "TEMP_rel")]
    pub method: String,
    #[arg(long)]
    pub tau: Option<u32>,
    /// `origin_lat,origin_lon,dest_lat,dest_lon,start` with an ISO-8601 start.
    #[arg(long, conflicts_with = "queries")]
    pub query: Option<String>,
    /// CSV with columns query_id,origin_lat,origin_lon,dest_lat,dest_lon,start_time.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Answer queries without neighbors by linear regression.
    #[arg(long)]
    pub lr_fallback: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Per-method metrics as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print published NYC figures beside the results.
    #[arg(long)]
    pub paper_reference: bool,
    /// Breakdown key: trip_time, trip_distance or neighbor_count.
    #[arg(long)]
    pub breakdown: Option<String>,
    /// Comma-separated bin edges for the breakdown.
    #[arg(long, value_delimiter = ',', requires = "breakdown")]
    pub bins: Option<Vec<f64>>,
    /// Breakdown CSV path (stdout when omitted).
    #[arg(long, requires = "breakdown")]
    pub breakdown_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthetic spec; the built-in default when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ground-truth JSON sidecar; by default the output path with extension `truth.json`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub n_trips: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueryRecord {
    query_id: u64,
    origin_lat: f64,
    origin_lon: f64,
    dest_lat: f64,
    dest_lon: f64,
    start_time: String,
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on usage errors and 2
/// on data errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse(_) | Error::InvalidSpec(_) => 1,
                _ => 2,
            }
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn read_trip_file(path: &Path, cfg: &Config) -> Result<Vec<Trip>> {
    let (trips, report) = load_trips(path, &cfg.schema(), &cfg.bbox()?)?;
    log_rejects(&report);
    Ok(trips)
}

fn log_rejects(report: &RejectReport) {
    log::info!("read {} rows, accepted {}, rejected {}", report.rows, report.accepted, report.total());
    for (reason, n) in &report.rejected {
        log::info!("  rejected {n} rows: {reason:?}");
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cfg.threads > 0 {
        // Only the first call in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match cli.command {
        Command::Ingest(a) => {
            let mut schema = cfg.schema();
            if let Some(p) = &a.schema {
                schema = serde_json::from_reader(BufReader::new(File::open(p)?))?;
            }
            let (trips, report) = load_trips(&a.io.input, &schema, &cfg.bbox()?)?;
            log_rejects(&report);
            write_trips(output(a.io.out.as_deref())?, &trips, cfg.timezone_offset)?;
            serde_json::to_writer(io::stderr(), &report)?;
            eprintln!();
        }
        Command::ExtractGps(a) => {
            let records = read_gps(BufReader::new(File::open(&a.input)?), cfg.timezone_offset)?;
            let trips = extract_trips_from_gps(records, &cfg.bbox()?.projection())?;
            log::info!("extracted {} trips", trips.len());
            write_trips(output(a.out.as_deref())?, &trips, cfg.timezone_offset)?;
        }
        Command::Filter(a) => {
            let trips = read_trip_file(&a.io.input, &cfg)?;
            let pairs = match a.pairs {
                Some(p) => p.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?,
                None => cfg.filter_pairs()?,
            };
            let (kept, stages) = filter_pipeline(&trips, &pairs, &cfg.bbox()?.projection())?;
            log::info!("kept {} of {} trips", kept.len(), trips.len());
            write_trips(output(a.io.out.as_deref())?, &kept, cfg.timezone_offset)?;
            if let Some(p) = a.models {
                serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &stages)?;
            }
        }
        Command::BuildIndex(a) => {
            let trips = read_trip_file(&a.input, &cfg)?;
            let index = GridIndex::build(&trips, a.cell_size.unwrap_or(cfg.cell_size), &cfg.bbox()?)?;
            log::info!(
                "indexed {} trips in {} buckets, densest origin cell holds {:.4} of trips",
                index.len(),
                index.bucket_count(),
                index.max_bucket_fraction()
            );
            let mut w = BufWriter::new(File::create(&a.out)?);
            index.write_snapshot(&mut w)?;
            w.flush()?;
        }
        Command::FitRef(a) => {
            let trips = read_trip_file(&a.io.input, &cfg)?;
            let mode: ReferenceMode = a.mode.parse()?;
            let out = output(a.io.out.as_deref())?;
            if a.regions {
                let partition = RegionPartition::new(cfg.bbox()?, cfg.region_rows, cfg.region_cols)?;
                let r = build_region_references(
                    &trips,
                    &partition,
                    &cfg.slots(),
                    mode,
                    cfg.min_support,
                    &cfg.absolute_options(),
                )?;
                log::info!("fitted {} region-pair references", r.pairs.len());
                r.write_csv(out)?;
            } else {
                SpeedReference::fit(&trips, &cfg.slots(), mode, &cfg.absolute_options())?.write_csv(out)?;
            }
        }
        Command::Estimate(a) => estimate(a, &cfg)?,
        Command::Evaluate(a) => evaluate(a, &cfg)?,
        Command::Synth(a) => {
            let mut spec: SynthSpec = match &a.spec {
                Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))?,
                None => SynthSpec::default(),
            };
            if let Some(n) = a.n_trips {
                spec.n_trips = n;
            }
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let (trips, truth) = generate(&spec)?;
            write_trips(output(a.out.as_deref())?, &trips, 0)?;
            let truth_path = a.truth.or_else(|| a.out.as_ref().map(|p| p.with_extension("truth.json")));
            if let Some(p) = truth_path {
                truth.write_json(BufWriter::new(File::create(p)?))?;
            }
            log::info!("generated {} trips, {} planted outliers", trips.len(), truth.outliers.len());
        }
        Command::Stats(a) => {
            let trips = read_trip_file(&a.input, &cfg)?;
            dataset_stats(&trips, cfg.timezone_offset)?.write_csv(output(a.out.as_deref())?)?;
        }
    }
    Ok(())
}

fn parse_query(s: &str, tz: i64) -> Result<Query> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(Error::Parse(format!("query {s:?} must be lat,lon,lat,lon,start")));
    }
    let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Parse(format!("bad coordinate {v:?}")));
    Ok(Query {
        origin: GeoPoint::new(num(parts[0])?, num(parts[1])?)?,
        destination: GeoPoint::new(num(parts[2])?, num(parts[3])?)?,
        start_time: parse_timestamp(parts[4], tz)?,
    })
}

fn estimate(a: EstimateArgs, cfg: &Config) -> Result<()> {
    let method: Method = a.method.parse()?;
    let tau = a.tau.unwrap_or(cfg.tau);
    let index = match (&a.index, &a.trips, &cfg.index, &cfg.trips) {
        (Some(p), _, _, _) => GridIndex::read_snapshot(BufReader::new(File::open(p)?))?,
        (None, Some(p), _, _) => GridIndex::build(&read_trip_file(p, cfg)?, cfg.cell_size, &cfg.bbox()?)?,
        (None, None, Some(p), _) => GridIndex::read_snapshot(BufReader::new(File::open(p)?))?,
        (None, None, None, Some(p)) => GridIndex::build(&read_trip_file(p, cfg)?, cfg.cell_size, &cfg.bbox()?)?,
        _ => return Err(Error::Config("estimate needs --index or --trips".into())),
    };
    let queries: Vec<(u64, Query)> = match (&a.query, &a.queries) {
        (Some(q), _) => vec![(0, parse_query(q, cfg.timezone_offset)?)],
        (None, Some(p)) => {
            let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(p)?));
            rdr.deserialize::<QueryRecord>()
                .map(|r| {
                    let r = r?;
                    Ok((
                        r.query_id,
                        Query {
                            origin: GeoPoint::new(r.origin_lat, r.origin_lon)?,
                            destination: GeoPoint::new(r.dest_lat, r.dest_lon)?,
                            start_time: parse_timestamp(&r.start_time, cfg.timezone_offset)?,
                        },
                    ))
                })
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(Error::Config("estimate needs --query or --queries".into())),
    };
    let lr = if a.lr_fallback || cfg.lr_fallback || method == Method::Lr {
        Some(fit_lr(index.trips(), index.projection())?)
    } else {
        None
    };
    let exp = crate::eval::ExperimentConfig { bbox: *index.bbox(), ..cfg.experiment()? };
    let refs = References::fit(&[method], index.trips(), None, &exp)?;
    let predictor = Predictor { index: &index, tau, lr: lr.as_ref(), reference: refs.for_method(method) };
    let rows = estimate_batch(&predictor, method, &queries, cfg.threads, a.lr_fallback || cfg.lr_fallback)?;
    if a.query.is_some() {
        let mut out = output(a.out.as_deref())?;
        match &rows[0].status {
            QueryStatus::Ok(e) => writeln!(
                out,
                "estimate_seconds={:.1} method={} neighbors={} status={}",
                e.value,
                e.method,
                e.neighbor_count,
                if e.fallback { "fallback_lr" } else { "ok" }
            )?,
            QueryStatus::NoCoverage => writeln!(out, "estimate_seconds=NA method={method} neighbors=0 status=no_coverage")?,
            QueryStatus::Failed(msg) => writeln!(out, "estimate_seconds=NA method={method} neighbors=0 status=error: {msg}")?,
        }
        out.flush()?;
    } else {
        write_batch_csv(output(a.out.as_deref())?, &rows)?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs, cfg: &Config) -> Result<()> {
    let input = a
        .input
        .clone()
        .or_else(|| cfg.trips.clone())
        .ok_or_else(|| Error::Config("evaluate needs --input or trips in the config".into()))?;
    let trips = read_trip_file(&input, cfg)?;
    if trips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let first = trips.iter().map(|t| t.start_time).min().unwrap_or(0);
    let last = trips.iter().map(|t| t.start_time).max().unwrap_or(0);
    let split = cfg.split(first, last)?;
    let methods: Vec<Method> = match &a.methods {
        Some(m) => m.iter().map(|s| s.parse()).collect::<Result<_>>()?,
        None => cfg.methods()?,
    };
    let tau = a.tau.unwrap_or(cfg.tau);
    let report = run_experiment(&trips, &split, &methods, tau, &cfg.experiment()?)?;

    #[derive(Serialize)]
    struct Row<'a> {
        method: &'a str,
        #[serde(flatten)]
        report: &'a crate::eval::MetricReport,
        #[serde(skip_serializing_if = "Option::is_none")]
        published_nyc_mae: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        published_nyc_mre: Option<f64>,
    }
    let rows: Vec<Row> = report
        .results
        .iter()
        .map(|r| {
            let p = a.paper_reference.then(|| published("NYC", r.method)).flatten();
            Row {
                method: r.method.name(),
                report: &r.report,
                published_nyc_mae: p.map(|p| p.mae),
                published_nyc_mre: p.map(|p| p.mre),
            }
        })
        .collect();
    let json = serde_json::json!({
        "tau": tau,
        "n_train": report.n_train,
        "n_test": report.n_test,
        "n_queries": report.n_queries,
        "coverage": report.coverage,
        "results": rows,
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    if a.paper_reference {
        eprintln!("published reference (NYC taxi data, not an expected output):");
        for r in &report.results {
            if let Some(p) = published("NYC", r.method) {
                eprintln!(
                    "  {:<11} local MAE {:>9.3}  published MAE {:>8.3}  local MRE {:.4}  published MRE {:.4}",
                    r.method.name(),
                    r.report.mae,
                    p.mae,
                    r.report.mre,
                    p.mre
                );
            }
        }
    }
    if let Some(p) = &a.out {
        let table: Vec<_> = report.results.iter().map(|r| (r.method.name().to_string(), r.report)).collect();
        write_report_csv(BufWriter::new(File::create(p)?), &table)?;
    }
    if let Some(key) = &a.breakdown {
        let key: BreakdownKey = key.parse()?;
        let edges = a.bins.clone().ok_or_else(|| Error::Config("--breakdown needs --bins".into()))?;
        let mut w = output(a.breakdown_out.as_deref())?;
        for r in &report.results {
            writeln!(w, "# {}", r.method)?;
            write_breakdown_csv(&mut w, &breakdown(&r.items, key, &edges)?)?;
        }
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["odtime", "--bogus"]), 1);
        assert_eq!(run(["odtime", "frobnicate"]), 1);
        assert_eq!(run(["odtime", "--help"]), 0);
    }

    #[test]
    fn data_errors_exit_two() {
        assert_eq!(run(["odtime", "stats", "--input", "/nonexistent/trips.csv"]), 2);
    }

    #[test]
    fn query_parsing() {
        let q = parse_query("40.75,-73.99,40.77,-73.96,2013-12-05T18:00", 0).unwrap();
        assert_eq!(q.origin, GeoPoint { lat: 40.75, lon: -73.99 });
        assert_eq!(q.start_time, 1_386_266_400);
        assert!(parse_query("40.75,-73.99,40.77", 0).is_err());
    }
}
