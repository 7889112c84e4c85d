//! Raster index over trip origins and destinations.
//!
//! Trips are bucketed twice: by (origin cell, destination cell) for small
//! neighborhoods and by origin cell alone for large ones. Bucket contents are
//! contiguous slices of one item array, sorted by trip id.

use std::collections::HashMap;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{to_cell, BoundingBox, GeoPoint, GridCell, Projection};
use crate::trip::{Query, Trip, TripId};

pub const DEFAULT_CELL_SIZE: f64 = 50.0;
/// Largest tau served from the composite (origin, destination) buckets.
pub const PAIR_LOOKUP_MAX_TAU: u32 = 3;

const SNAPSHOT_MAGIC: &[u8; 8] = b"ODTIDX\0\0";
const SNAPSHOT_VERSION: u32 = 1;

type Span = (u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct GridIndex {
    cell_size: f64,
    projection: Projection,
    cols: u32,
    rows: u32,
    trips: Vec<Trip>,
    origin_cells: Vec<GridCell>,
    dest_cells: Vec<GridCell>,
    pair_buckets: HashMap<(GridCell, GridCell), Span>,
    pair_items: Vec<u32>,
    origin_buckets: HashMap<GridCell, Span>,
    origin_items: Vec<u32>,
    rejected: Vec<TripId>,
}

/// One neighboring trip, by position in the index's trip table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Neighbor {
    pub index: u32,
    pub origin_l1: u32,
    pub dest_l1: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeighborSet {
    pub entries: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn diamond(center: GridCell, tau: u32) -> impl Iterator<Item = (GridCell, u32)> {
    let t = tau as i64;
    (-t..=t).flat_map(move |dc| {
        let rem = t - dc.abs();
        (-rem..=rem).filter_map(move |dr| {
            let col = center.col as i64 + dc;
            let row = center.row as i64 + dr;
            (col >= 0 && row >= 0).then(|| {
                (GridCell { col: col as u32, row: row as u32 }, (dc.abs() + dr.abs()) as u32)
            })
        })
    })
}

fn spans<K: Copy + Eq + std::hash::Hash + Ord + Send + Sync>(
    keys: &[K],
) -> (HashMap<K, Span>, Vec<u32>) {
    let mut order: Vec<u32> = (0..keys.len() as u32).collect();
    order.par_sort_by(|&a, &b| keys[a as usize].cmp(&keys[b as usize]).then(a.cmp(&b)));
    let mut map = HashMap::new();
    let mut start = 0usize;
    while start < order.len() {
        let key = keys[order[start] as usize];
        let mut end = start + 1;
        while end < order.len() && keys[order[end] as usize] == key {
            end += 1;
        }
        map.insert(key, (start as u32, (end - start) as u32));
        start = end;
    }
    (map, order)
}

impl GridIndex {
    /// Indexes every trip whose endpoints lie in `bbox`; the ids of the others are kept in
    /// [`GridIndex::rejected`]. The result does not depend on the order of `trips`.
    pub fn build(trips: &[Trip], cell_size: f64, bbox: &BoundingBox) -> Result<GridIndex> {
        if !(cell_size > 0.0) {
            return Err(Error::Config(format!("cell size must be positive, got {cell_size}")));
        }
        let projection = bbox.projection();
        let (w, h) = projection.extent();
        let cols = (w / cell_size).floor() as u32 + 1;
        let rows = (h / cell_size).floor() as u32 + 1;

        let mut sorted = trips.to_vec();
        sorted.par_sort_by_key(|t| t.id);
        let cells: Vec<Option<(GridCell, GridCell)>> = sorted
            .par_iter()
            .map(|t| {
                let o = projection.project(t.origin).ok()?;
                let d = projection.project(t.destination).ok()?;
                Some((to_cell(o, cell_size), to_cell(d, cell_size)))
            })
            .collect();
        let mut kept = Vec::with_capacity(sorted.len());
        let mut origin_cells = Vec::with_capacity(sorted.len());
        let mut dest_cells = Vec::with_capacity(sorted.len());
        let mut rejected = Vec::new();
        for (t, c) in sorted.into_iter().zip(cells) {
            match c {
                Some((o, d)) => {
                    kept.push(t);
                    origin_cells.push(o);
                    dest_cells.push(d);
                }
                None => rejected.push(t.id),
            }
        }
        if kept.len() > u32::MAX as usize {
            return Err(Error::Config("too many trips for one index".into()));
        }
        let pair_keys: Vec<(GridCell, GridCell)> =
            origin_cells.iter().copied().zip(dest_cells.iter().copied()).collect();
        let (pair_buckets, pair_items) = spans(&pair_keys);
        let (origin_buckets, origin_items) = spans(&origin_cells);
        Ok(GridIndex {
            cell_size,
            projection,
            cols,
            rows,
            trips: kept,
            origin_cells,
            dest_cells,
            pair_buckets,
            pair_items,
            origin_buckets,
            origin_items,
            rejected,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn bbox(&self) -> &BoundingBox {
        self.projection.bbox()
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn trips(&self) -> &[Trip] {
        &self.trips
    }

    pub fn trip(&self, index: u32) -> &Trip {
        &self.trips[index as usize]
    }

    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }

    pub fn rejected(&self) -> &[TripId] {
        &self.rejected
    }

    /// Number of raster cells covering the bounding box.
    pub fn cell_count(&self) -> u64 {
        self.cols as u64 * self.rows as u64
    }

    pub fn bucket_count(&self) -> usize {
        self.pair_buckets.len()
    }

    /// Share of all trips that start in the most populated origin cell.
    pub fn max_bucket_fraction(&self) -> f64 {
        if self.trips.is_empty() {
            return 0.0;
        }
        let largest = self.origin_buckets.values().map(|s| s.1).max().unwrap_or(0);
        largest as f64 / self.trips.len() as f64
    }

    pub fn cells_of(&self, origin: GeoPoint, destination: GeoPoint) -> Result<(GridCell, GridCell)> {
        let o = self.projection.project(origin)?;
        let d = self.projection.project(destination)?;
        Ok((to_cell(o, self.cell_size), to_cell(d, self.cell_size)))
    }

    pub fn origin_cell(&self, index: u32) -> GridCell {
        self.origin_cells[index as usize]
    }

    pub fn dest_cell(&self, index: u32) -> GridCell {
        self.dest_cells[index as usize]
    }

    fn visit(&self, oc: GridCell, dc: GridCell, tau: u32, mut f: impl FnMut(Neighbor) -> bool) {
        if tau <= PAIR_LOOKUP_MAX_TAU {
            for (o, ol1) in diamond(oc, tau) {
                if !self.origin_buckets.contains_key(&o) {
                    continue;
                }
                for (d, dl1) in diamond(dc, tau) {
                    if let Some(&(start, len)) = self.pair_buckets.get(&(o, d)) {
                        for &i in &self.pair_items[start as usize..(start + len) as usize] {
                            if !f(Neighbor { index: i, origin_l1: ol1, dest_l1: dl1 }) {
                                return;
                            }
                        }
                    }
                }
            }
        } else {
            for (o, ol1) in diamond(oc, tau) {
                if let Some(&(start, len)) = self.origin_buckets.get(&o) {
                    for &i in &self.origin_items[start as usize..(start + len) as usize] {
                        let dl1 = self.dest_cells[i as usize].l1(&dc);
                        if dl1 <= tau && !f(Neighbor { index: i, origin_l1: ol1, dest_l1: dl1 }) {
                            return;
                        }
                    }
                }
            }
        }
    }

    /// Trips whose origin cell and destination cell are each within grid L1 distance
    /// `tau` of the query's cells, sorted by trip table position.
    pub fn neighbors(&self, q: &Query, tau: u32) -> Result<NeighborSet> {
        let (oc, dc) = self.cells_of(q.origin, q.destination)?;
        Ok(self.neighbors_of_cells(oc, dc, tau))
    }

    pub fn neighbors_of_cells(&self, oc: GridCell, dc: GridCell, tau: u32) -> NeighborSet {
        let mut entries = Vec::new();
        self.visit(oc, dc, tau, |n| {
            entries.push(n);
            true
        });
        entries.sort_unstable();
        NeighborSet { entries }
    }

    pub fn has_neighbor(&self, q: &Query, tau: u32) -> Result<bool> {
        let (oc, dc) = self.cells_of(q.origin, q.destination)?;
        let mut found = false;
        self.visit(oc, dc, tau, |_| {
            found = true;
            false
        });
        Ok(found)
    }

    /// Fraction of queries with at least one neighbor. Out-of-box queries count as uncovered.
    pub fn coverage(&self, queries: &[Query], tau: u32) -> f64 {
        if queries.is_empty() {
            return 0.0;
        }
        let covered = queries
            .par_iter()
            .filter(|q| self.has_neighbor(q, tau).unwrap_or(false))
            .count();
        covered as f64 / queries.len() as f64
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let bbox = self.bbox();
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        for v in [self.cell_size, bbox.lat_min, bbox.lat_max, bbox.lon_min, bbox.lon_max] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.trips.len() as u64).to_le_bytes())?;
        for (t, (o, d)) in self.trips.iter().zip(self.origin_cells.iter().zip(&self.dest_cells)) {
            w.write_all(&t.id.to_le_bytes())?;
            for v in [t.origin.lat, t.origin.lon, t.destination.lat, t.destination.lon] {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&t.start_time.to_le_bytes())?;
            w.write_all(&t.distance.to_le_bytes())?;
            w.write_all(&t.duration.to_le_bytes())?;
            w.write_all(&[t.fare.is_some() as u8])?;
            w.write_all(&t.fare.unwrap_or(0.0).to_le_bytes())?;
            for c in [o.col, o.row, d.col, d.row] {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        let mut buckets: Vec<_> = self.pair_buckets.iter().collect();
        buckets.sort();
        w.write_all(&(buckets.len() as u64).to_le_bytes())?;
        for ((o, d), (start, len)) in buckets {
            for c in [o.col, o.row, d.col, d.row, *start, *len] {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for &i in &self.pair_items {
            w.write_all(&i.to_le_bytes())?;
        }
        w.write_all(&(self.rejected.len() as u64).to_le_bytes())?;
        for id in &self.rejected {
            w.write_all(&id.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: R) -> Result<GridIndex> {
        let mut r = SnapshotReader(r);
        let mut magic = [0u8; 8];
        r.0.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot("not an index snapshot".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported snapshot version {version}")));
        }
        let cell_size = r.f64()?;
        let bbox = BoundingBox::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?)?;
        let projection = bbox.projection();
        let (w, h) = projection.extent();
        let n = r.u64()? as usize;
        let mut trips = Vec::with_capacity(n);
        let mut origin_cells = Vec::with_capacity(n);
        let mut dest_cells = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.u64()?;
            let origin = GeoPoint { lat: r.f64()?, lon: r.f64()? };
            let destination = GeoPoint { lat: r.f64()?, lon: r.f64()? };
            let start_time = r.u64()? as i64;
            let distance = r.f64()?;
            let duration = r.f64()?;
            let has_fare = r.u8()? != 0;
            let fare = r.f64()?;
            trips.push(Trip {
                id,
                origin,
                destination,
                start_time,
                distance,
                duration,
                fare: has_fare.then_some(fare),
            });
            origin_cells.push(GridCell { col: r.u32()?, row: r.u32()? });
            dest_cells.push(GridCell { col: r.u32()?, row: r.u32()? });
        }
        let nb = r.u64()? as usize;
        let mut pair_buckets = HashMap::with_capacity(nb);
        for _ in 0..nb {
            let o = GridCell { col: r.u32()?, row: r.u32()? };
            let d = GridCell { col: r.u32()?, row: r.u32()? };
            let span = (r.u32()?, r.u32()?);
            if span.0 as usize + span.1 as usize > n {
                return Err(Error::Snapshot("bucket span out of range".into()));
            }
            pair_buckets.insert((o, d), span);
        }
        let mut pair_items = Vec::with_capacity(n);
        for _ in 0..n {
            let i = r.u32()?;
            if i as usize >= n {
                return Err(Error::Snapshot("bucket item out of range".into()));
            }
            pair_items.push(i);
        }
        let nr = r.u64()? as usize;
        let rejected = (0..nr).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let (origin_buckets, origin_items) = spans(&origin_cells);
        Ok(GridIndex {
            cell_size,
            projection,
            cols: (w / cell_size).floor() as u32 + 1,
            rows: (h / cell_size).floor() as u32 + 1,
            trips,
            origin_cells,
            dest_cells,
            pair_buckets,
            pair_items,
            origin_buckets,
            origin_items,
            rejected,
        })
    }
}

struct SnapshotReader<R>(R);

impl<R: Read> SnapshotReader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| Error::Snapshot(format!("truncated snapshot: {e}")))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

/// Linear-scan reference for [`GridIndex::neighbors`].
pub fn brute_force_neighbors(index: &GridIndex, q: &Query, tau: u32) -> Result<NeighborSet> {
    let (oc, dc) = index.cells_of(q.origin, q.destination)?;
    let entries = (0..index.len() as u32)
        .filter_map(|i| {
            let ol1 = index.origin_cell(i).l1(&oc);
            let dl1 = index.dest_cell(i).l1(&dc);
            (ol1 <= tau && dl1 <= tau).then_some(Neighbor { index: i, origin_l1: ol1, dest_l1: dl1 })
        })
        .collect();
    Ok(NeighborSet { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::ProjectedPoint;

    fn bbox() -> BoundingBox {
        BoundingBox::manhattan()
    }

    /// Trip whose endpoints sit at the centers of the given cells.
    fn trip_at(id: u64, o: (u32, u32), d: (u32, u32)) -> Trip {
        let proj = bbox().projection();
        let at = |c: (u32, u32)| {
            proj.unproject(ProjectedPoint { x: (c.0 as f64 + 0.5) * 50.0, y: (c.1 as f64 + 0.5) * 50.0 })
        };
        Trip {
            id,
            origin: at(o),
            destination: at(d),
            start_time: 0,
            distance: 1.0,
            duration: 300.0,
            fare: None,
        }
    }

    fn query_of(t: &Trip) -> Query {
        Query::from(t)
    }

    #[test]
    fn shared_cells_share_a_bucket() {
        let trips = vec![trip_at(1, (10, 10), (40, 40)), trip_at(2, (10, 10), (40, 40))];
        let idx = GridIndex::build(&trips, 50.0, &bbox()).unwrap();
        assert_eq!(idx.bucket_count(), 1);
        assert_eq!(idx.max_bucket_fraction(), 1.0);
    }

    #[test]
    fn tau_zero_exact_cells() {
        let trips = vec![trip_at(1, (10, 10), (40, 40)), trip_at(2, (11, 10), (40, 40))];
        let idx = GridIndex::build(&trips, 50.0, &bbox()).unwrap();
        let ns = idx.neighbors(&query_of(&trips[0]), 0).unwrap();
        assert_eq!(ns.entries, vec![Neighbor { index: 0, origin_l1: 0, dest_l1: 0 }]);
    }

    #[test]
    fn tau_threshold_excludes_four_cells_away() {
        let trips = vec![trip_at(1, (14, 10), (40, 40)), trip_at(2, (12, 11), (40, 40))];
        let idx = GridIndex::build(&trips, 50.0, &bbox()).unwrap();
        let q = query_of(&trip_at(99, (10, 10), (40, 40)));
        let ns = idx.neighbors(&q, 3).unwrap();
        assert_eq!(ns.len(), 1);
        assert_eq!(idx.trip(ns.entries[0].index).id, 2);
        assert_eq!(ns.entries[0].origin_l1, 3);
    }

    #[test]
    fn large_tau_uses_origin_buckets() {
        let trips = vec![trip_at(1, (14, 10), (40, 45)), trip_at(2, (12, 11), (40, 40)), trip_at(3, (10, 10), (47, 40))];
        let idx = GridIndex::build(&trips, 50.0, &bbox()).unwrap();
        let q = query_of(&trip_at(99, (10, 10), (40, 40)));
        for tau in [4, 5, 6, 7] {
            assert_eq!(idx.neighbors(&q, tau).unwrap(), brute_force_neighbors(&idx, &q, tau).unwrap());
        }
        assert_eq!(idx.neighbors(&q, 6).unwrap().len(), 2);
    }

    #[test]
    fn out_of_box_trip_is_collected_not_fatal() {
        let mut bad = trip_at(5, (1, 1), (2, 2));
        bad.origin.lat = 41.5;
        let idx = GridIndex::build(&[trip_at(1, (1, 1), (2, 2)), bad], 50.0, &bbox()).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.rejected(), &[5]);
        let q = Query { origin: bad.origin, destination: bad.destination, start_time: 0 };
        assert!(matches!(idx.neighbors(&q, 3), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn coverage_extremes() {
        let trips = vec![trip_at(1, (10, 10), (40, 40))];
        let idx = GridIndex::build(&trips, 50.0, &bbox()).unwrap();
        let q = vec![query_of(&trip_at(9, (150, 300), (1, 1)))];
        assert_eq!(idx.coverage(&q, 0), 0.0);
        assert_eq!(idx.coverage(&q, 2000), 1.0);
        let empty = GridIndex::build(&[], 50.0, &bbox()).unwrap();
        assert_eq!(empty.coverage(&q, 3), 0.0);
        assert_eq!(empty.max_bucket_fraction(), 0.0);
    }

    #[test]
    fn snapshot_roundtrip() {
        let trips: Vec<_> =
            (0..50).map(|i| trip_at(i, ((i * 7 % 30) as u32, 5), (9, (i * 3 % 20) as u32))).collect();
        let idx = GridIndex::build(&trips, 50.0, &bbox()).unwrap();
        let mut buf = Vec::new();
        idx.write_snapshot(&mut buf).unwrap();
        let back = GridIndex::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, idx);
        assert!(GridIndex::read_snapshot(&buf[..buf.len() - 3]).is_err());
        assert!(GridIndex::read_snapshot(&b"garbage!garbage!"[..]).is_err());
    }

    #[test]
    fn diamond_has_expected_size() {
        assert_eq!(diamond(GridCell { col: 10, row: 10 }, 3).count(), 25);
        assert_eq!(diamond(GridCell { col: 0, row: 0 }, 1).count(), 3);
    }
}
