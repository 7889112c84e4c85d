//! Geographic points, the local equirectangular projection and raster cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const METERS_PER_MILE: f64 = 1609.344;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::OutOfBounds { lat, lon });
        }
        Ok(GeoPoint { lat, lon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        if !(lat_min < lat_max && lon_min < lon_max) {
            return Err(Error::Config(format!(
                "degenerate bounding box [{lat_min}, {lat_max}] x [{lon_min}, {lon_max}]"
            )));
        }
        GeoPoint::new(lat_min, lon_min)?;
        GeoPoint::new(lat_max, lon_max)?;
        Ok(BoundingBox { lat_min, lat_max, lon_min, lon_max })
    }

    /// Manhattan and its immediate surroundings.
    pub fn manhattan() -> Self {
        BoundingBox { lat_min: 40.70, lat_max: 40.88, lon_min: -74.02, lon_max: -73.91 }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.lat_min && p.lat <= self.lat_max && p.lon >= self.lon_min && p.lon <= self.lon_max
    }

    pub fn projection(&self) -> Projection {
        Projection::new(*self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
}

impl ProjectedPoint {
    pub fn l1(&self, other: &ProjectedPoint) -> f64 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub col: u32,
    pub row: u32,
}

impl GridCell {
    pub fn l1(&self, other: &GridCell) -> u32 {
        self.col.abs_diff(other.col) + self.row.abs_diff(other.row)
    }
}

/// Equirectangular projection anchored at the south-west corner of a bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    bbox: BoundingBox,
    meters_per_deg_lat: f64,
    meters_per_deg_lon: f64,
}

impl Projection {
    pub fn new(bbox: BoundingBox) -> Self {
        let lat_mid = 0.5 * (bbox.lat_min + bbox.lat_max);
        let meters_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Projection {
            bbox,
            meters_per_deg_lat,
            meters_per_deg_lon: meters_per_deg_lat * lat_mid.to_radians().cos(),
        }
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn project(&self, p: GeoPoint) -> Result<ProjectedPoint> {
        if !self.bbox.contains(p) {
            return Err(Error::OutOfBounds { lat: p.lat, lon: p.lon });
        }
        Ok(self.project_unchecked(p))
    }

    pub fn project_unchecked(&self, p: GeoPoint) -> ProjectedPoint {
        ProjectedPoint {
            x: (p.lon - self.bbox.lon_min) * self.meters_per_deg_lon,
            y: (p.lat - self.bbox.lat_min) * self.meters_per_deg_lat,
        }
    }

    pub fn unproject(&self, p: ProjectedPoint) -> GeoPoint {
        GeoPoint {
            lat: self.bbox.lat_min + p.y / self.meters_per_deg_lat,
            lon: self.bbox.lon_min + p.x / self.meters_per_deg_lon,
        }
    }

    /// Extent of the box in meters (east, north).
    pub fn extent(&self) -> (f64, f64) {
        let ne = self.project_unchecked(GeoPoint { lat: self.bbox.lat_max, lon: self.bbox.lon_max });
        (ne.x, ne.y)
    }

    /// L1 distance in miles between two in-box points.
    pub fn l1_miles(&self, a: GeoPoint, b: GeoPoint) -> f64 {
        self.project_unchecked(a).l1(&self.project_unchecked(b)) / METERS_PER_MILE
    }
}

pub fn project(p: GeoPoint, bbox: &BoundingBox) -> Result<ProjectedPoint> {
    Projection::new(*bbox).project(p)
}

/// Floor division of projected coordinates into square cells. Points on a
/// boundary belong to the upper/right cell.
pub fn to_cell(p: ProjectedPoint, cell_size: f64) -> GridCell {
    debug_assert!(cell_size > 0.0);
    GridCell {
        col: (p.x / cell_size).floor().max(0.0) as u32,
        row: (p.y / cell_size).floor().max(0.0) as u32,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox() -> BoundingBox {
        BoundingBox::new(40.70, 40.88, -74.02, -73.91).unwrap()
    }

    #[test]
    fn southwest_corner_is_origin() {
        let p = project(GeoPoint { lat: 40.70, lon: -74.02 }, &bbox()).unwrap();
        assert_eq!((p.x, p.y), (0.0, 0.0));
    }

    #[test]
    fn one_degree_latitude() {
        let b = BoundingBox::new(10.0, 12.0, 0.0, 1.0).unwrap();
        let p = project(GeoPoint { lat: 11.0, lon: 0.0 }, &b).unwrap();
        let expected = std::f64::consts::PI / 180.0 * 6_371_000.0;
        assert!((p.y - expected).abs() < 1e-6);
        assert!((p.y - 111_195.0).abs() < 1.0);
    }

    #[test]
    fn west_of_box_is_out_of_bounds() {
        let r = project(GeoPoint { lat: 40.75, lon: -74.05 }, &bbox());
        assert!(matches!(r, Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn cell_floor_rules() {
        let c = |x, y| to_cell(ProjectedPoint { x, y }, 50.0);
        assert_eq!(c(0.0, 0.0), GridCell { col: 0, row: 0 });
        assert_eq!(c(49.99, 50.0), GridCell { col: 0, row: 1 });
        assert_eq!(c(125.0, 75.0), GridCell { col: 2, row: 1 });
    }

    #[test]
    fn projected_l1_agrees_with_great_circle_legs() {
        // Great-circle lengths of the north-south and east-west legs at the midpoint latitude.
        let b = bbox();
        let proj = b.projection();
        let a = GeoPoint { lat: 40.71, lon: -74.01 };
        let c = GeoPoint { lat: 40.87, lon: -73.92 };
        let hav = |p: GeoPoint, q: GeoPoint| {
            let (p1, p2) = (p.lat.to_radians(), q.lat.to_radians());
            let dphi = p2 - p1;
            let dl = (q.lon - p.lon).to_radians();
            let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
            2.0 * EARTH_RADIUS_M * h.sqrt().asin()
        };
        let mid = 0.5 * (a.lat + c.lat);
        let gc = hav(a, GeoPoint { lat: c.lat, lon: a.lon })
            + hav(GeoPoint { lat: mid, lon: a.lon }, GeoPoint { lat: mid, lon: c.lon });
        let l1 = proj.project(a).unwrap().l1(&proj.project(c).unwrap());
        assert!((l1 - gc).abs() / gc < 0.01, "{l1} vs {gc}");
    }

    #[test]
    fn unproject_inverts_project() {
        let proj = bbox().projection();
        let p = GeoPoint { lat: 40.7712, lon: -73.9634 };
        let back = proj.unproject(proj.project(p).unwrap());
        assert!((back.lat - p.lat).abs() < 1e-12 && (back.lon - p.lon).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn to_cell_is_monotone(x in 0.0f64..1e5, dx in 0.0f64..1e3, y in 0.0f64..1e5) {
            let a = to_cell(ProjectedPoint { x, y }, 50.0);
            let b = to_cell(ProjectedPoint { x: x + dx, y }, 50.0);
            proptest::prop_assert!(b.col >= a.col);
        }
    }
}
