//! GeoJSON (RFC 7946) views of the manifest and snap results.

use serde_json::{json, Map, Value};

use crate::curate::DatasetManifest;
use crate::geodesy::GeoPoint;
use crate::pano::SnapResult;

/// Snap results of one survey section.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SectionSnaps {
    pub section_id: String,
    pub results: Vec<SnapResult>,
}

fn point(p: GeoPoint, properties: Map<String, Value>) -> Value {
    json!({
        "type": "Feature",
        "geometry": { "type": "Point", "coordinates": [p.lon(), p.lat()] },
        "properties": properties,
    })
}

fn collection(features: Vec<Value>) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&json!({ "type": "FeatureCollection", "features": features }))
        .expect("geojson serializes");
    out.push(b'\n');
    out
}

fn props(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

/// One Point per sample, at its panorama.
pub fn manifest_geojson(manifest: &DatasetManifest) -> Vec<u8> {
    let features = manifest
        .samples
        .iter()
        .map(|s| {
            point(
                s.location,
                props(json!({
                    "sample_id": s.sample_id,
                    "label": s.label,
                    "score": s.raw_score,
                    "status": s.status,
                    "purge_reason": s.purge_reason,
                    "split": s.split,
                    "section_id": s.section_id,
                    "pano_id": s.pano_id,
                    "heading": s.heading.degrees(),
                    "side": s.side,
                    "octant": s.octant,
                })),
            )
        })
        .collect();
    collection(features)
}

/// One Point per survey point, at the survey location.
pub fn snaps_geojson(sections: &[SectionSnaps]) -> Vec<u8> {
    let features = sections
        .iter()
        .flat_map(|sec| {
            sec.results.iter().map(move |r| {
                point(
                    r.source,
                    props(json!({
                        "section_id": sec.section_id,
                        "point_index": r.point_index,
                        "accepted": r.accepted,
                        "pano_id": r.pano_id(),
                        "distance_m": r.distance_m,
                        "reject_reason": r.reject_reason,
                    })),
                )
            })
        })
        .collect();
    collection(features)
}
