//! On-disk metadata cache: one JSON-lines file per 0.01° x 0.01° tile.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::PanoramaRecord;
use crate::geodesy::GeoPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    /// `None` records "no panorama here".
    record: Option<PanoramaRecord>,
    cached_at: u64,
}

type Tile = HashMap<String, CacheEntry>;

#[derive(Debug)]
pub struct MetadataCache {
    dir: PathBuf,
    negative_ttl: Option<Duration>,
    tiles: Mutex<HashMap<(i64, i64), Tile>>,
}

/// Cache key: the point rounded to 6 decimal places.
pub fn cache_key(point: GeoPoint) -> String {
    format!("{:.6},{:.6}", point.lat(), point.lon())
}

fn tile_of(point: GeoPoint) -> (i64, i64) {
    let lat: f64 = format!("{:.6}", point.lat()).parse().unwrap_or(point.lat());
    let lon: f64 = format!("{:.6}", point.lon()).parse().unwrap_or(point.lon());
    ((lat * 100.0).floor() as i64, (lon * 100.0).floor() as i64)
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl MetadataCache {
    /// `negative_ttl = None` keeps "no panorama" answers forever.
    pub fn open(dir: impl Into<PathBuf>, negative_ttl: Option<Duration>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(MetadataCache {
            dir,
            negative_ttl,
            tiles: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn tile_path(&self, tile: (i64, i64)) -> PathBuf {
        self.dir.join(format!("tile_{}_{}.jsonl", tile.0, tile.1))
    }

    fn load_tile(&self, tile: (i64, i64)) -> io::Result<Tile> {
        let path = self.tile_path(tile);
        let mut map = Tile::new();
        match fs::read_to_string(&path) {
            Ok(text) => {
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    // A torn trailing line from an interrupted run is ignored.
                    if let Ok(entry) = serde_json::from_str::<CacheEntry>(line) {
                        map.insert(entry.key.clone(), entry);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        Ok(map)
    }

    /// `Some(answer)` on a hit; `None` on a miss or an expired negative entry.
    pub fn get(&self, point: GeoPoint) -> io::Result<Option<Option<PanoramaRecord>>> {
        let tile = tile_of(point);
        let mut tiles = self.tiles.lock().unwrap_or_else(|e| e.into_inner());
        if !tiles.contains_key(&tile) {
            let loaded = self.load_tile(tile)?;
            tiles.insert(tile, loaded);
        }
        let Some(entry) = tiles[&tile].get(&cache_key(point)) else {
            return Ok(None);
        };
        if entry.record.is_none() {
            if let Some(ttl) = self.negative_ttl {
                if now_secs().saturating_sub(entry.cached_at) >= ttl.as_secs() {
                    return Ok(None);
                }
            }
        }
        Ok(Some(entry.record.clone()))
    }

    pub fn put(&self, point: GeoPoint, record: Option<&PanoramaRecord>) -> io::Result<()> {
        let tile = tile_of(point);
        let entry = CacheEntry {
            key: cache_key(point),
            record: record.cloned(),
            cached_at: now_secs(),
        };
        let mut tiles = self.tiles.lock().unwrap_or_else(|e| e.into_inner());
        if !tiles.contains_key(&tile) {
            let loaded = self.load_tile(tile)?;
            tiles.insert(tile, loaded);
        }
        let mut line = serde_json::to_string(&entry).map_err(io::Error::other)?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.tile_path(tile))?;
        file.write_all(line.as_bytes())?;
        tiles.get_mut(&tile).unwrap().insert(entry.key.clone(), entry);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pano::CaptureDate;

    fn record() -> PanoramaRecord {
        PanoramaRecord {
            pano_id: "P1".into(),
            location: GeoPoint::new(53.3, -0.2).unwrap(),
            capture_date: CaptureDate::new(2021, 8).unwrap(),
            neighbours: vec![],
        }
    }

    #[test]
    fn persists_across_instances() {
        let dir = tempfile::tempdir().unwrap();
        let p = GeoPoint::new(53.3000001, -0.2).unwrap();
        let q = GeoPoint::new(53.31, -0.25).unwrap();
        {
            let cache = MetadataCache::open(dir.path(), None).unwrap();
            assert_eq!(cache.get(p).unwrap(), None);
            cache.put(p, Some(&record())).unwrap();
            cache.put(q, None).unwrap();
        }
        let cache = MetadataCache::open(dir.path(), None).unwrap();
        assert_eq!(cache.get(p).unwrap(), Some(Some(record())));
        // rounding to 6 places makes these the same key
        assert_eq!(cache.get(GeoPoint::new(53.3, -0.2).unwrap()).unwrap(), Some(Some(record())));
        assert_eq!(cache.get(q).unwrap(), Some(None));
        let files = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 2);
        assert!(dir.path().join("tile_5330_-20.jsonl").exists());
    }

    #[test]
    fn negative_entries_expire() {
        let dir = tempfile::tempdir().unwrap();
        let q = GeoPoint::new(53.31, -0.25).unwrap();
        let cache = MetadataCache::open(dir.path(), Some(Duration::ZERO)).unwrap();
        cache.put(q, None).unwrap();
        assert_eq!(cache.get(q).unwrap(), None);
    }
}
