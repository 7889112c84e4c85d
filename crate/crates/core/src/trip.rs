use serde::{Deserialize, Serialize};

use crate::geo::{GeoPoint, Projection};

pub type TripId = u64;

/// One historical origin-destination trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub id: TripId,
    pub origin: GeoPoint,
    pub destination: GeoPoint,
    /// Epoch seconds.
    pub start_time: i64,
    /// Miles.
    pub distance: f64,
    /// Seconds.
    pub duration: f64,
    pub fare: Option<f64>,
}

impl Trip {
    /// Miles per hour.
    pub fn speed_mph(&self) -> f64 {
        self.distance / (self.duration / 3600.0)
    }

    pub fn is_valid(&self) -> bool {
        self.duration.is_finite()
            && self.distance.is_finite()
            && self.duration > 0.0
            && self.distance > 0.0
            && self.fare.is_none_or(|f| f.is_finite() && f >= 0.0)
    }

    pub fn endpoint_l1_miles(&self, proj: &Projection) -> f64 {
        proj.l1_miles(self.origin, self.destination)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub origin: GeoPoint,
    pub destination: GeoPoint,
    pub start_time: i64,
}

impl From<&Trip> for Query {
    fn from(t: &Trip) -> Self {
        Query { origin: t.origin, destination: t.destination, start_time: t.start_time }
    }
}
