//! Snapping survey points to panoramas, filling gaps between snaps, and
//! deriving the road bearing at a panorama.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{PanoError, PanoIndex, PanoramaRecord};
use crate::geodesy::{forward_bearing, haversine_distance, intermediate, Bearing, GeoPoint};
use crate::survey::SurveySection;

/// Panorama spacing lower bound used to convert distances into hop budgets.
const MIN_PANO_SPACING_M: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnapConfig {
    pub threshold_m: f64,
    /// Neighbour hops allowed between consecutive accepted snaps.
    pub max_hops: usize,
    /// Without adjacency data, consecutive snaps may be at most this many
    /// mean survey spacings apart.
    pub spacing_factor: f64,
    /// Sampling step when interpolating without adjacency data.
    pub interpolation_step_m: f64,
}

impl Default for SnapConfig {
    fn default() -> Self {
        SnapConfig {
            threshold_m: 25.0,
            max_hops: 8,
            spacing_factor: 2.0,
            interpolation_step_m: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    TooFar,
    RoadDiscontinuity,
    NoCandidates,
}

/// A closer candidate passed over because it broke road continuity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedCandidate {
    pub pano_id: String,
    pub distance_m: f64,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapResult {
    pub source: GeoPoint,
    /// Position of the source point within its section.
    pub point_index: usize,
    /// Absent only when there were no candidates at all.
    pub pano: Option<PanoramaRecord>,
    pub distance_m: Option<f64>,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_candidates: Vec<RejectedCandidate>,
}

impl SnapResult {
    pub fn pano_id(&self) -> Option<&str> {
        self.pano.as_ref().map(|p| p.pano_id.as_str())
    }

    fn accept(point_index: usize, source: GeoPoint, pano: &PanoramaRecord, d: f64) -> Self {
        SnapResult {
            source,
            point_index,
            pano: Some(pano.clone()),
            distance_m: Some(d),
            accepted: true,
            reject_reason: None,
            rejected_candidates: Vec::new(),
        }
    }

    fn reject(point_index: usize, source: GeoPoint, pano: Option<(&PanoramaRecord, f64)>, reason: RejectReason) -> Self {
        SnapResult {
            source,
            point_index,
            pano: pano.map(|(p, _)| p.clone()),
            distance_m: pano.map(|(_, d)| d),
            accepted: false,
            reject_reason: Some(reason),
            rejected_candidates: Vec::new(),
        }
    }
}

/// Snaps a single point to a known panorama, e.g. one returned by a metadata lookup.
pub fn snap_point(source: GeoPoint, pano: Option<&PanoramaRecord>, config: &SnapConfig) -> SnapResult {
    match pano {
        None => SnapResult::reject(0, source, None, RejectReason::NoCandidates),
        Some(p) => {
            let d = haversine_distance(source, p.location);
            if d <= config.threshold_m {
                SnapResult::accept(0, source, p, d)
            } else {
                SnapResult::reject(0, source, Some((p, d)), RejectReason::TooFar)
            }
        }
    }
}

/// Maps every survey point of `section` to a panorama.
///
/// The first accepted snap is the nearest panorama within the threshold. Each
/// later candidate must be reachable from the previous accepted panorama: within
/// `max_hops` neighbour hops when that panorama has adjacency data, otherwise
/// within `spacing_factor` mean survey spacings. The hop budget grows with the
/// gap between survey points when that gap exceeds what `max_hops` covers.
pub fn snap_section(section: &SurveySection, index: &PanoIndex, config: &SnapConfig) -> Vec<SnapResult> {
    let spacing_limit = (config.spacing_factor * section.mean_spacing_m()).max(config.threshold_m);
    let mut previous: Option<(usize, &PanoramaRecord)> = None;
    let mut results = Vec::with_capacity(section.points.len());

    for (i, point) in section.points.iter().enumerate() {
        let source = point.location;
        if index.is_empty() {
            results.push(SnapResult::reject(i, source, None, RejectReason::NoCandidates));
            continue;
        }
        let candidates = index.within(source, config.threshold_m);
        if candidates.is_empty() {
            results.push(SnapResult::reject(i, source, index.nearest(source), RejectReason::TooFar));
            continue;
        }
        let Some((prev_point, prev)) = previous else {
            let (pano, d) = candidates[0];
            results.push(SnapResult::accept(i, source, pano, d));
            previous = Some((i, pano));
            continue;
        };

        let gap = haversine_distance(section.points[prev_point].location, source);
        let hop_budget = config
            .max_hops
            .max((config.spacing_factor * gap / MIN_PANO_SPACING_M).ceil() as usize);
        let use_graph = index.has_adjacency(&prev.pano_id);
        let consistent = |cand: &PanoramaRecord| {
            if cand.pano_id == prev.pano_id {
                true
            } else if use_graph {
                index.hops_between(&prev.pano_id, &cand.pano_id, hop_budget).is_some()
            } else {
                haversine_distance(prev.location, cand.location) <= spacing_limit
            }
        };

        let mut rejected = Vec::new();
        let mut chosen = None;
        for &(cand, d) in &candidates {
            if consistent(cand) {
                chosen = Some((cand, d));
                break;
            }
            rejected.push(RejectedCandidate {
                pano_id: cand.pano_id.clone(),
                distance_m: d,
                reason: RejectReason::RoadDiscontinuity,
            });
        }
        let mut result = match chosen {
            Some((pano, d)) => {
                previous = Some((i, pano));
                SnapResult::accept(i, source, pano, d)
            }
            None => SnapResult::reject(i, source, Some(candidates[0]), RejectReason::RoadDiscontinuity),
        };
        result.rejected_candidates = rejected;
        results.push(result);
    }
    results
}

/// Panoramas strictly between two accepted snaps, ordered along the road.
///
/// Follows the neighbour chain when one connects the two panoramas; otherwise
/// samples the great-circle segment every `interpolation_step_m` and snaps each
/// sample to its nearest panorama within the threshold.
pub fn interpolate_panoramas(
    a: &SnapResult,
    b: &SnapResult,
    index: &PanoIndex,
    config: &SnapConfig,
) -> Result<Vec<PanoramaRecord>, PanoError> {
    let pa = accepted_pano(a)?;
    let pb = accepted_pano(b)?;
    if pa.pano_id == pb.pano_id {
        return Ok(Vec::new());
    }
    if index.has_adjacency(&pa.pano_id) {
        if let Some(path) = index.path(&pa.pano_id, &pb.pano_id) {
            return Ok(path[1..path.len() - 1].iter().map(|r| (*r).clone()).collect());
        }
    }

    let total = haversine_distance(pa.location, pb.location);
    let step = config.interpolation_step_m.max(0.1);
    let bearing = forward_bearing(pa.location, pb.location)?;
    let endpoints: HashSet<&str> = [pa.pano_id.as_str(), pb.pano_id.as_str()].into();
    let mut seen = HashSet::new();
    let mut found: Vec<(f64, PanoramaRecord)> = Vec::new();
    let mut k = 1;
    while (k as f64) * step < total {
        let sample = intermediate(pa.location, pb.location, k as f64 * step / total);
        if let Some(&(pano, _)) = index.within(sample, config.threshold_m).first() {
            if !endpoints.contains(pano.pano_id.as_str()) && seen.insert(pano.pano_id.clone()) {
                found.push((along_track(pa.location, bearing, pano.location), pano.clone()));
            }
        }
        k += 1;
    }
    found.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.pano_id.cmp(&y.1.pano_id)));
    Ok(found.into_iter().map(|(_, r)| r).collect())
}

fn accepted_pano(s: &SnapResult) -> Result<&PanoramaRecord, PanoError> {
    match (&s.pano, s.accepted) {
        (Some(p), true) => Ok(p),
        _ => Err(PanoError::NotAccepted(s.source.to_string())),
    }
}

fn along_track(origin: GeoPoint, bearing: Bearing, p: GeoPoint) -> f64 {
    let d = haversine_distance(origin, p);
    match forward_bearing(origin, p) {
        Ok(b) => d * (b.degrees() - bearing.degrees()).to_radians().cos(),
        Err(_) => 0.0,
    }
}

/// Road direction at `pano_id` from its neighbours in an ordered chain.
pub fn road_bearing_at(pano_id: &str, chain: &[PanoramaRecord]) -> Result<Bearing, PanoError> {
    if chain.len() < 2 {
        return Err(PanoError::ChainTooShort(chain.len()));
    }
    let pos = chain
        .iter()
        .position(|r| r.pano_id == pano_id)
        .ok_or_else(|| PanoError::NotInChain(pano_id.to_string()))?;
    let (from, to) = if pos == 0 {
        (&chain[0], &chain[1])
    } else if pos == chain.len() - 1 {
        (&chain[pos - 1], &chain[pos])
    } else {
        (&chain[pos - 1], &chain[pos + 1])
    };
    Ok(forward_bearing(from.location, to.location)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::destination;
    use crate::pano::CaptureDate;
    use crate::survey::{Locality, SurveyPoint, VergeScore};
    use crate::geodesy::CompassOctant;

    fn rec(id: &str, p: GeoPoint, neighbours: Vec<String>) -> PanoramaRecord {
        PanoramaRecord {
            pano_id: id.into(),
            location: p,
            capture_date: CaptureDate::new(2009, 7).unwrap(),
            neighbours,
        }
    }

    fn section(points: Vec<GeoPoint>) -> SurveySection {
        SurveySection {
            section_id: "s".into(),
            locality: Locality::Wolds,
            rnr: false,
            points: points
                .into_iter()
                .map(|location| SurveyPoint {
                    location,
                    scores: vec![VergeScore { octant: CompassOctant::N, species_count: 4 }],
                })
                .collect(),
        }
    }

    fn origin() -> GeoPoint {
        GeoPoint::new(53.3, -0.2).unwrap()
    }

    #[test]
    fn too_far_and_no_candidates() {
        let far = destination(origin(), Bearing::new(0.0), 40.0);
        let index = PanoIndex::new(vec![rec("P", far, vec![])]).unwrap();
        let s = section(vec![origin(), destination(origin(), Bearing::new(180.0), 5.0)]);
        let r = snap_section(&s, &index, &SnapConfig::default());
        assert!(!r[0].accepted);
        assert_eq!(r[0].reject_reason, Some(RejectReason::TooFar));
        assert!((r[0].distance_m.unwrap() - 40.0).abs() < 1e-6);

        let r = snap_section(&s, &PanoIndex::default(), &SnapConfig::default());
        assert!(r.iter().all(|x| x.reject_reason == Some(RejectReason::NoCandidates) && x.pano.is_none()));
    }

    #[test]
    fn spacing_rule_without_adjacency() {
        // Two panoramas 200 m apart, both within threshold of their survey points,
        // but far beyond twice the survey spacing of 20 m.
        let a = rec("A", origin(), vec![]);
        let b = rec("B", destination(origin(), Bearing::new(90.0), 200.0), vec![]);
        let c = rec("C", destination(origin(), Bearing::new(90.0), 20.0), vec![]);
        let index = PanoIndex::new(vec![a, b.clone(), c]).unwrap();
        let s = section(vec![
            origin(),
            destination(origin(), Bearing::new(90.0), 19.0),
        ]);
        let r = snap_section(&s, &index, &SnapConfig::default());
        assert!(r.iter().all(|x| x.accepted));
        assert_eq!(r[1].pano_id(), Some("C"));

        let s = section(vec![origin(), destination(origin(), Bearing::new(90.0), 20.0), b.location]);
        let r = snap_section(&s, &index, &SnapConfig { spacing_factor: 0.5, ..SnapConfig::default() });
        assert!(r[1].accepted);
        // mean spacing 100 m * 0.5 = 50 m < 180 m from C to B
        assert_eq!(r[2].reject_reason, Some(RejectReason::RoadDiscontinuity));
    }

    #[test]
    fn road_bearing_positions() {
        let chain: Vec<_> = (0..3)
            .map(|i| rec(&format!("p{i}"), GeoPoint::new(0.0, i as f64 * 0.001).unwrap(), vec![]))
            .collect();
        for r in &chain {
            assert!((road_bearing_at(&r.pano_id, &chain).unwrap().degrees() - 90.0).abs() < 1e-9);
        }
        let pair = &chain[..2];
        assert_eq!(road_bearing_at("p0", pair).unwrap(), road_bearing_at("p1", pair).unwrap());
        assert_eq!(road_bearing_at("p0", &chain[..1]), Err(PanoError::ChainTooShort(1)));
        assert_eq!(road_bearing_at("zz", &chain), Err(PanoError::NotInChain("zz".into())));
    }

    #[test]
    fn interpolation_degenerate_cases() {
        let a = rec("A", origin(), vec!["B".into()]);
        let b = rec("B", destination(origin(), Bearing::new(90.0), 15.0), vec![]);
        let index = PanoIndex::new(vec![a.clone(), b.clone()]).unwrap();
        let cfg = SnapConfig::default();
        let sa = snap_point(a.location, Some(&a), &cfg);
        let sb = snap_point(b.location, Some(&b), &cfg);
        assert!(interpolate_panoramas(&sa, &sb, &index, &cfg).unwrap().is_empty());
        assert!(interpolate_panoramas(&sa, &sa, &index, &cfg).unwrap().is_empty());
        let bad = snap_point(origin(), None, &cfg);
        assert!(matches!(interpolate_panoramas(&sa, &bad, &index, &cfg), Err(PanoError::NotAccepted(_))));
    }
}
