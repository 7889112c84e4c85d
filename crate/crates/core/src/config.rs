//! Flat key-value run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Method;
use crate::eval::{ExperimentConfig, SplitSpec};
use crate::geo::BoundingBox;
use crate::index::DEFAULT_CELL_SIZE;
use crate::ingest::TripRecordSchema;
use crate::outlier::FeaturePair;
use crate::region::DEFAULT_MIN_SUPPORT;
use crate::speed::arima::ArimaOrder;
use crate::speed::AbsoluteOptions;
use crate::time::{parse_timestamp, TimeSlotConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub cell_size: f64,
    pub tau: u32,
    pub slot_seconds: i64,
    pub period_slots: i64,
    pub timezone_offset: i64,
    pub arima_p: usize,
    pub arima_d: usize,
    pub arima_q: usize,
    pub select_order: bool,
    pub region_rows: u32,
    pub region_cols: u32,
    pub min_support: u64,
    /// Outlier pipeline as `y:x` feature pairs.
    pub filter_pairs: Vec<String>,
    pub filter_train: bool,
    pub filter_test: bool,
    pub methods: Vec<String>,
    pub lr_fallback: bool,
    pub stream_test: bool,
    /// 0 uses every available core.
    pub threads: usize,
    pub seed: u64,
    pub train_start: Option<String>,
    pub train_end: Option<String>,
    pub test_start: Option<String>,
    pub test_end: Option<String>,
    pub subsample: Option<usize>,
    pub trips: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        let bbox = BoundingBox::manhattan();
        Config {
            lat_min: bbox.lat_min,
            lat_max: bbox.lat_max,
            lon_min: bbox.lon_min,
            lon_max: bbox.lon_max,
            cell_size: DEFAULT_CELL_SIZE,
            tau: 3,
            slot_seconds: 3600,
            period_slots: 168,
            timezone_offset: 0,
            arima_p: 2,
            arima_d: 1,
            arima_q: 0,
            select_order: false,
            region_rows: 8,
            region_cols: 8,
            min_support: DEFAULT_MIN_SUPPORT,
            filter_pairs: FeaturePair::default_pipeline().iter().map(ToString::to_string).collect(),
            filter_train: true,
            filter_test: true,
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            lr_fallback: false,
            stream_test: true,
            threads: 0,
            seed: 42,
            train_start: None,
            train_end: None,
            test_start: None,
            test_end: None,
            subsample: None,
            trips: None,
            index: None,
            output: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox()?;
        if !(self.cell_size > 0.0) {
            return Err(Error::Config("cell_size must be positive".into()));
        }
        self.slots().validate()?;
        if self.region_rows == 0 || self.region_cols == 0 {
            return Err(Error::Config("region grid must be nonempty".into()));
        }
        self.filter_pairs()?;
        self.methods()?;
        Ok(())
    }

    pub fn bbox(&self) -> Result<BoundingBox> {
        BoundingBox::new(self.lat_min, self.lat_max, self.lon_min, self.lon_max)
    }

    pub fn slots(&self) -> TimeSlotConfig {
        TimeSlotConfig {
            slot_seconds: self.slot_seconds,
            period_slots: self.period_slots,
            timezone_offset: self.timezone_offset,
        }
    }

    pub fn schema(&self) -> TripRecordSchema {
        TripRecordSchema { timezone_offset: self.timezone_offset, ..TripRecordSchema::default() }
    }

    pub fn absolute_options(&self) -> AbsoluteOptions {
        AbsoluteOptions {
            order: ArimaOrder { p: self.arima_p, d: self.arima_d, q: self.arima_q },
            select_order: self.select_order,
            min_support: 1,
        }
    }

    pub fn filter_pairs(&self) -> Result<Vec<FeaturePair>> {
        self.filter_pairs.iter().map(|s| s.parse()).collect()
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|s| s.parse()).collect()
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let pairs = self.filter_pairs()?;
        Ok(ExperimentConfig {
            cell_size: self.cell_size,
            bbox: self.bbox()?,
            slots: self.slots(),
            region_rows: self.region_rows,
            region_cols: self.region_cols,
            min_support: self.min_support,
            absolute: self.absolute_options(),
            filter_train: (self.filter_train && !pairs.is_empty()).then(|| pairs.clone()),
            filter_test: (self.filter_test && !pairs.is_empty()).then_some(pairs),
            stream_test: self.stream_test,
            lr_fallback: self.lr_fallback,
            threads: self.threads,
        })
    }

    /// The configured split, or, when the interval keys are missing, the last week of
    /// `[first, last]` as test and everything before it as training.
    pub fn split(&self, first: i64, last: i64) -> Result<SplitSpec> {
        let t = |s: &Option<String>| s.as_deref().map(|s| parse_timestamp(s, self.timezone_offset)).transpose();
        let week = self.slot_seconds * self.period_slots;
        let test_end = t(&self.test_end)?.unwrap_or(last + 1);
        let test_start = t(&self.test_start)?.unwrap_or(test_end - week);
        let train_end = t(&self.train_end)?.unwrap_or(test_start);
        let train_start = t(&self.train_start)?.unwrap_or(first.min(train_end - 1));
        let split = SplitSpec {
            train: (train_start, train_end),
            test: (test_start, test_end),
            subsample: self.subsample,
            seed: self.seed,
        };
        split.validate()?;
        Ok(split)
    }
}
