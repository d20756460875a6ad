//! Panorama metadata: records, the in-memory index, backends and caching.

mod backend;
mod cache;
mod fetch;
mod snap;

pub use backend::{HttpMetadataBackend, MetadataBackend, MockBackend, CREDENTIAL_VAR, DEFAULT_METADATA_URL};
pub use cache::MetadataCache;
pub use fetch::{fetch_metadata, MetadataFetcher};
pub use snap::{
    interpolate_panoramas, road_bearing_at, snap_point, snap_section, RejectReason, RejectedCandidate,
    SnapConfig, SnapResult,
};

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{haversine_distance, GeoError, GeoPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanoError {
    #[error("empty panorama id")]
    EmptyId,
    #[error("duplicate panorama id {0}")]
    DuplicateId(String),
    #[error("invalid capture month {0}")]
    InvalidMonth(u8),
    #[error("panorama {0} is not part of the chain")]
    NotInChain(String),
    #[error("a road chain needs at least 2 panoramas, got {0}")]
    ChainTooShort(usize),
    #[error("snap for {0} was not accepted")]
    NotAccepted(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Year and month a panorama was captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDate")]
pub struct CaptureDate {
    pub year: u16,
    pub month: u8,
}

#[derive(Deserialize)]
struct RawDate {
    year: u16,
    month: u8,
}

impl TryFrom<RawDate> for CaptureDate {
    type Error = PanoError;
    fn try_from(raw: RawDate) -> Result<Self, Self::Error> {
        CaptureDate::new(raw.year, raw.month)
    }
}

impl CaptureDate {
    pub fn new(year: u16, month: u8) -> Result<Self, PanoError> {
        if !(1..=12).contains(&month) {
            return Err(PanoError::InvalidMonth(month));
        }
        Ok(CaptureDate { year, month })
    }
}

/// One street-view panorama.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoramaRecord {
    pub pano_id: String,
    #[serde(flatten)]
    pub location: GeoPoint,
    #[serde(flatten)]
    pub capture_date: CaptureDate,
    /// Adjacent panoramas along the drive path.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub neighbours: Vec<String>,
}

const CELL_DEG: f64 = 0.001;
const METERS_PER_DEG: f64 = std::f64::consts::PI * crate::geodesy::EARTH_RADIUS_M / 180.0;

/// Panorama set with a coarse spatial grid and an undirected adjacency graph.
#[derive(Debug, Clone, Default)]
pub struct PanoIndex {
    records: Vec<PanoramaRecord>,
    by_id: HashMap<String, usize>,
    grid: HashMap<(i64, i64), Vec<usize>>,
    adjacency: Vec<Vec<usize>>,
}

fn cell_of(p: GeoPoint) -> (i64, i64) {
    ((p.lat() / CELL_DEG).floor() as i64, (p.lon() / CELL_DEG).floor() as i64)
}

impl PanoIndex {
    pub fn new(records: Vec<PanoramaRecord>) -> Result<Self, PanoError> {
        let mut by_id = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.pano_id.is_empty() {
                return Err(PanoError::EmptyId);
            }
            CaptureDate::new(r.capture_date.year, r.capture_date.month)?;
            if by_id.insert(r.pano_id.clone(), i).is_some() {
                return Err(PanoError::DuplicateId(r.pano_id.clone()));
            }
        }
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            grid.entry(cell_of(r.location)).or_default().push(i);
        }
        let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); records.len()];
        for (i, r) in records.iter().enumerate() {
            for n in &r.neighbours {
                if let Some(&j) = by_id.get(n) {
                    if i != j {
                        adjacency[i].insert(j);
                        adjacency[j].insert(i);
                    }
                }
            }
        }
        let mut adjacency: Vec<Vec<usize>> = adjacency.into_iter().map(|s| s.into_iter().collect()).collect();
        for list in &mut adjacency {
            list.sort_by(|a, b| records[*a].pano_id.cmp(&records[*b].pano_id));
        }
        Ok(PanoIndex {
            records,
            by_id,
            grid,
            adjacency,
        })
    }

    /// Builds an index keeping the first record seen for each id.
    pub fn from_unique(records: impl IntoIterator<Item = PanoramaRecord>) -> Result<Self, PanoError> {
        let mut seen = BTreeSet::new();
        let unique: Vec<_> = records
            .into_iter()
            .filter(|r| seen.insert(r.pano_id.clone()))
            .collect();
        Self::new(unique)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PanoramaRecord] {
        &self.records
    }

    pub fn get(&self, pano_id: &str) -> Option<&PanoramaRecord> {
        self.by_id.get(pano_id).map(|&i| &self.records[i])
    }

    fn position(&self, pano_id: &str) -> Option<usize> {
        self.by_id.get(pano_id).copied()
    }

    pub fn has_adjacency(&self, pano_id: &str) -> bool {
        self.position(pano_id)
            .is_some_and(|i| !self.adjacency[i].is_empty())
    }

    /// All panoramas within `radius_m`, nearest first; ties broken by id.
    pub fn within(&self, point: GeoPoint, radius_m: f64) -> Vec<(&PanoramaRecord, f64)> {
        let dlat = radius_m / METERS_PER_DEG;
        let coslat = point.lat().to_radians().cos();
        let mut hits: Vec<(&PanoramaRecord, f64)> = if coslat < 0.01 || dlat > 1.0 {
            self.records
                .iter()
                .map(|r| (r, haversine_distance(point, r.location)))
                .filter(|(_, d)| *d <= radius_m)
                .collect()
        } else {
            let dlon = dlat / coslat;
            let (lat0, lon0) = (
                ((point.lat() - dlat) / CELL_DEG).floor() as i64,
                ((point.lon() - dlon) / CELL_DEG).floor() as i64,
            );
            let (lat1, lon1) = (
                ((point.lat() + dlat) / CELL_DEG).floor() as i64,
                ((point.lon() + dlon) / CELL_DEG).floor() as i64,
            );
            let mut out = Vec::new();
            for la in lat0..=lat1 {
                for lo in lon0..=lon1 {
                    if let Some(ids) = self.grid.get(&(la, lo)) {
                        for &i in ids {
                            let d = haversine_distance(point, self.records[i].location);
                            if d <= radius_m {
                                out.push((&self.records[i], d));
                            }
                        }
                    }
                }
            }
            out
        };
        hits.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.pano_id.cmp(&b.0.pano_id)));
        hits
    }

    /// Nearest panorama regardless of distance.
    pub fn nearest(&self, point: GeoPoint) -> Option<(&PanoramaRecord, f64)> {
        self.records
            .iter()
            .map(|r| (r, haversine_distance(point, r.location)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.pano_id.cmp(&b.0.pano_id)))
    }

    /// Number of neighbour hops from `from` to `to`, searching at most `max_hops`.
    pub fn hops_between(&self, from: &str, to: &str, max_hops: usize) -> Option<usize> {
        let (start, goal) = (self.position(from)?, self.position(to)?);
        let mut depth = vec![usize::MAX; self.records.len()];
        let mut queue = VecDeque::from([start]);
        depth[start] = 0;
        while let Some(i) = queue.pop_front() {
            if i == goal {
                return Some(depth[i]);
            }
            if depth[i] == max_hops {
                continue;
            }
            for &j in &self.adjacency[i] {
                if depth[j] == usize::MAX {
                    depth[j] = depth[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        None
    }

    /// Shortest neighbour path from `from` to `to`, both endpoints included.
    pub fn path(&self, from: &str, to: &str) -> Option<Vec<&PanoramaRecord>> {
        let (start, goal) = (self.position(from)?, self.position(to)?);
        let mut parent = vec![usize::MAX; self.records.len()];
        parent[start] = start;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            if i == goal {
                let mut path = vec![goal];
                let mut cur = goal;
                while cur != start {
                    cur = parent[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path.into_iter().map(|k| &self.records[k]).collect());
            }
            for &j in &self.adjacency[i] {
                if parent[j] == usize::MAX {
                    parent[j] = i;
                    queue.push_back(j);
                }
            }
        }
        None
    }
}

/// Reads panorama records from JSON lines, skipping blank lines.
pub fn read_records_jsonl(text: &str) -> Result<Vec<PanoramaRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, lat: f64, lon: f64, neighbours: &[&str]) -> PanoramaRecord {
        PanoramaRecord {
            pano_id: id.into(),
            location: GeoPoint::new(lat, lon).unwrap(),
            capture_date: CaptureDate::new(2009, 6).unwrap(),
            neighbours: neighbours.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn record_json_shape() {
        let r = rec("P001", 53.3, -0.2, &["P002"]);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            r#"{"pano_id":"P001","lat":53.3,"lon":-0.2,"year":2009,"month":6,"neighbours":["P002"]}"#
        );
        assert_eq!(serde_json::from_str::<PanoramaRecord>(&json).unwrap(), r);
        let bad = r#"{"pano_id":"P001","lat":53.3,"lon":-0.2,"year":2009,"month":13}"#;
        assert!(serde_json::from_str::<PanoramaRecord>(bad).is_err());
        let bad = r#"{"pano_id":"P001","lat":93.3,"lon":-0.2,"year":2009,"month":1}"#;
        assert!(serde_json::from_str::<PanoramaRecord>(bad).is_err());
    }

    #[test]
    fn index_invariants() {
        assert_eq!(
            PanoIndex::new(vec![rec("A", 0.0, 0.0, &[]), rec("A", 0.0, 0.1, &[])]).unwrap_err(),
            PanoError::DuplicateId("A".into())
        );
        assert_eq!(PanoIndex::new(vec![rec("", 0.0, 0.0, &[])]).unwrap_err(), PanoError::EmptyId);
    }

    #[test]
    fn within_matches_linear_scan() {
        let mut records = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                records.push(rec(&format!("p{i}_{j}"), 53.0 + i as f64 * 0.0003, -0.2 + j as f64 * 0.0004, &[]));
            }
        }
        let index = PanoIndex::new(records.clone()).unwrap();
        let q = GeoPoint::new(53.005, -0.19).unwrap();
        let got: Vec<_> = index.within(q, 60.0).into_iter().map(|(r, _)| r.pano_id.clone()).collect();
        let mut want: Vec<_> = records
            .iter()
            .map(|r| (haversine_distance(q, r.location), r.pano_id.clone()))
            .filter(|(d, _)| *d <= 60.0)
            .collect();
        want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(got, want.into_iter().map(|(_, id)| id).collect::<Vec<_>>());
        assert!(!got.is_empty());
    }

    #[test]
    fn graph_queries() {
        let index = PanoIndex::new(vec![
            rec("a", 0.0, 0.0, &["b"]),
            rec("b", 0.0, 0.0001, &["c"]),
            rec("c", 0.0, 0.0002, &[]),
            rec("d", 0.0, 0.0003, &[]),
        ])
        .unwrap();
        assert_eq!(index.hops_between("a", "c", 8), Some(2));
        assert_eq!(index.hops_between("c", "a", 8), Some(2));
        assert_eq!(index.hops_between("a", "c", 1), None);
        assert_eq!(index.hops_between("a", "d", 8), None);
        let path: Vec<_> = index.path("a", "c").unwrap().iter().map(|r| r.pano_id.as_str()).collect();
        assert_eq!(path, ["a", "b", "c"]);
        assert!(index.has_adjacency("c"));
        assert!(!index.has_adjacency("d"));
    }
}
