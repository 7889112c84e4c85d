//! Time slots on the absolute timeline and in the folded weekly window.

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WEEK_SECONDS: i64 = 7 * 86_400;
/// 1970-01-05 00:00 was the first Monday after the Unix epoch.
const MONDAY_ANCHOR: i64 = 4 * 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSlotConfig {
    pub slot_seconds: i64,
    pub period_slots: i64,
    /// Added to epoch seconds before slotting (local time = UTC + offset).
    pub timezone_offset: i64,
}

impl Default for TimeSlotConfig {
    fn default() -> Self {
        TimeSlotConfig { slot_seconds: 3600, period_slots: 168, timezone_offset: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub absolute: i64,
    pub relative: usize,
}

impl TimeSlotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slot_seconds <= 0 || self.period_slots <= 0 {
            return Err(Error::Config(format!(
                "slot_seconds ({}) and period_slots ({}) must be positive",
                self.slot_seconds, self.period_slots
            )));
        }
        Ok(())
    }

    pub fn absolute_slot(&self, t: i64) -> i64 {
        (t + self.timezone_offset).div_euclid(self.slot_seconds)
    }

    /// Folds an absolute slot into the weekly window, slot 0 starting Monday 00:00 local.
    pub fn relative_of_absolute(&self, absolute: i64) -> usize {
        let anchor = MONDAY_ANCHOR.div_euclid(self.slot_seconds);
        (absolute - anchor).rem_euclid(self.period_slots) as usize
    }

    pub fn slot_of(&self, t: i64) -> Slot {
        let absolute = self.absolute_slot(t);
        Slot { absolute, relative: self.relative_of_absolute(absolute) }
    }

    /// Epoch seconds at which an absolute slot begins.
    pub fn slot_start(&self, absolute: i64) -> i64 {
        absolute * self.slot_seconds - self.timezone_offset
    }
}

pub fn slot_of(t: i64, cfg: &TimeSlotConfig) -> Slot {
    cfg.slot_of(t)
}

/// Parses an ISO-8601-like local timestamp (`2013-12-05T18:00`, `2013-12-05 18:00:00`,
/// `2013-12-05`) or raw epoch seconds. Local times are converted to epoch seconds by
/// subtracting `timezone_offset`.
pub fn parse_timestamp(s: &str, timezone_offset: i64) -> Result<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    const FORMATS: [&str; 6] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
    ];
    for f in FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, f) {
            return Ok(dt.and_utc().timestamp() - timezone_offset);
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp() - timezone_offset);
    }
    Err(Error::Parse(format!("unrecognized timestamp {s:?}")))
}

pub fn format_timestamp(t: i64, timezone_offset: i64) -> String {
    chrono::DateTime::from_timestamp(t + timezone_offset, 0)
        .map(|d| d.naive_utc().format("%Y-%m-%dT%H:%M:%S").to_string())
        .unwrap_or_else(|| t.to_string())
}
