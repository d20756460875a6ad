//! Turns snapped, scored panoramas into labelled image requests.
//!
//! For each panorama the verge on each side of the road is looked up in the
//! survey's octant scores. A scored verge yields three 45° images whose
//! headings are set by [`HeadingPolicy`], all carrying the verge's label.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{
    destination, octant_of, perpendicular_bearing, Bearing, CompassOctant, GeoPoint, VergeSide,
};
use crate::pano::{
    interpolate_panoramas, road_bearing_at, CaptureDate, PanoError, PanoIndex, PanoramaRecord, SnapConfig, SnapResult,
};
use crate::survey::{quantize_score, Locality, Scheme, ScoreClass, SurveyError, SurveySection, VergeScore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractError {
    #[error("field of view {0} outside (0, 120]")]
    InvalidFov(f64),
    #[error("pitch {0} outside [-90, 90]")]
    InvalidPitch(f64),
    #[error("road layout has no panoramas or no length")]
    EmptyLayout,
    #[error("grid spacing must be positive, got {0}")]
    InvalidSpacing(f64),
    #[error(transparent)]
    Survey(#[from] SurveyError),
    #[error(transparent)]
    Pano(#[from] PanoError),
}

/// Where the three images of a matched verge point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadingPolicy {
    /// Matched octant's center and the two neighbouring octant centers.
    #[default]
    OctantCenters,
    /// Exact perpendicular to the road, and ±45° around it.
    Perpendicular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionParams {
    pub fov: f64,
    pub pitch: f64,
    pub width: u32,
    pub height: u32,
    pub heading_policy: HeadingPolicy,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        ExtractionParams {
            fov: 45.0,
            pitch: 20.0,
            width: 640,
            height: 640,
            heading_policy: HeadingPolicy::OctantCenters,
        }
    }
}

impl ExtractionParams {
    pub fn validate(&self) -> Result<(), ExtractError> {
        if !(self.fov > 0.0 && self.fov <= 120.0) {
            return Err(ExtractError::InvalidFov(self.fov));
        }
        if !(-90.0..=90.0).contains(&self.pitch) {
            return Err(ExtractError::InvalidPitch(self.pitch));
        }
        Ok(())
    }
}

/// `(pano_id, heading, fov, pitch)` at hundredth-of-a-degree resolution.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct IdentityKey {
    pub pano_id: String,
    pub heading_centi: u32,
    pub fov_centi: u32,
    pub pitch_centi: i32,
}

impl IdentityKey {
    pub fn new(pano_id: &str, heading: Bearing, fov: f64, pitch: f64) -> Self {
        IdentityKey {
            pano_id: pano_id.to_string(),
            heading_centi: ((heading.degrees() * 100.0).round() as u32) % 36_000,
            fov_centi: (fov * 100.0).round() as u32,
            pitch_centi: (pitch * 100.0).round() as i32,
        }
    }
}

fn centi(v: i64) -> String {
    let sign = if v < 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", v.abs() / 100, v.abs() % 100)
}

impl fmt::Display for IdentityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}|{}|{}",
            self.pano_id,
            centi(self.heading_centi as i64),
            centi(self.fov_centi as i64),
            centi(self.pitch_centi as i64)
        )
    }
}

impl From<IdentityKey> for String {
    fn from(k: IdentityKey) -> Self {
        k.to_string()
    }
}

impl TryFrom<String> for IdentityKey {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        let mut parts = s.rsplitn(4, '|');
        let (Some(pitch), Some(fov), Some(heading), Some(pano)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(format!("bad identity key {s:?}"));
        };
        let num = |x: &str| x.parse::<f64>().map_err(|_| format!("bad identity key {s:?}"));
        Ok(IdentityKey::new(pano, Bearing::new(num(heading)?), num(fov)?, num(pitch)?))
    }
}

/// One image to pull from a panorama.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub pano_id: String,
    pub heading: Bearing,
    pub fov: f64,
    pub pitch: f64,
    pub width: u32,
    pub height: u32,
    pub label: ScoreClass,
    pub raw_score: u32,
    pub octant: CompassOctant,
    pub side: VergeSide,
    pub section_id: String,
    pub locality: Locality,
    pub capture_date: CaptureDate,
    pub location: GeoPoint,
}

impl ImageRequest {
    pub fn identity_key(&self) -> IdentityKey {
        IdentityKey::new(&self.pano_id, self.heading, self.fov, self.pitch)
    }

    pub fn spec(&self) -> ImageSpec {
        ImageSpec {
            pano_id: self.pano_id.clone(),
            heading: self.heading,
            fov: self.fov,
            pitch: self.pitch,
            width: self.width,
            height: self.height,
        }
    }
}

/// Camera parameters of one image, as sent to the static image endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub pano_id: String,
    pub heading: Bearing,
    pub fov: f64,
    pub pitch: f64,
    pub width: u32,
    pub height: u32,
}

impl ImageSpec {
    pub fn identity_key(&self) -> IdentityKey {
        IdentityKey::new(&self.pano_id, self.heading, self.fov, self.pitch)
    }

    /// Query string for the static image endpoint. Parameter order is fixed:
    /// `pano, heading, fov, pitch, size, key`, with angles at 2 decimals.
    pub fn static_query(&self, credential: &str) -> String {
        format!(
            "pano={}&heading={:.2}&fov={:.2}&pitch={:.2}&size={}x{}&key={}",
            self.pano_id,
            self.heading.degrees(),
            self.fov,
            self.pitch,
            self.width,
            self.height,
            credential
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedVerge {
    pub pano_id: String,
    pub side: VergeSide,
    pub octant: CompassOctant,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionPlan {
    pub requests: Vec<ImageRequest>,
    pub skipped: Vec<SkippedVerge>,
}

impl ExtractionPlan {
    /// Appends `other`, dropping requests whose identity key is already planned.
    pub fn merge(&mut self, other: ExtractionPlan) {
        let mut keys: BTreeSet<IdentityKey> = self.requests.iter().map(|r| r.identity_key()).collect();
        for r in other.requests {
            if keys.insert(r.identity_key()) {
                self.requests.push(r);
            }
        }
        self.skipped.extend(other.skipped);
        self.sort();
    }

    fn sort(&mut self) {
        self.requests.sort_by(|a, b| {
            a.pano_id
                .cmp(&b.pano_id)
                .then(a.heading.degrees().total_cmp(&b.heading.degrees()))
        });
    }
}

/// A verge whose perpendicular octant has a survey score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VergeMatch {
    pub side: VergeSide,
    pub score: VergeScore,
    pub perpendicular: Bearing,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OctantMatches {
    pub matches: Vec<VergeMatch>,
    pub skipped: Vec<SkippedVerge>,
}

pub const NO_PERPENDICULAR_SCORE: &str = "no score in perpendicular octant";

/// Pairs each verge of the road at `pano` with the score of its perpendicular octant.
pub fn match_octant_scores(pano: &PanoramaRecord, road: Bearing, scores: &[VergeScore]) -> OctantMatches {
    let mut out = OctantMatches::default();
    for side in [VergeSide::Right, VergeSide::Left] {
        let perpendicular = perpendicular_bearing(road, side);
        let octant = octant_of(perpendicular);
        match scores.iter().find(|s| s.octant == octant) {
            Some(score) => out.matches.push(VergeMatch {
                side,
                score: *score,
                perpendicular,
            }),
            None => out.skipped.push(SkippedVerge {
                pano_id: pano.pano_id.clone(),
                side,
                octant,
                reason: NO_PERPENDICULAR_SCORE.into(),
            }),
        }
    }
    out
}

/// Survey attributes stamped on every request from one section.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionContext {
    pub section_id: String,
    pub locality: Locality,
    pub rnr: bool,
}

pub fn plan_images(
    pano: &PanoramaRecord,
    matches: &OctantMatches,
    section: &SectionContext,
    scheme: Scheme,
    params: &ExtractionParams,
) -> Result<ExtractionPlan, ExtractError> {
    params.validate()?;
    let mut plan = ExtractionPlan {
        requests: Vec::new(),
        skipped: matches.skipped.clone(),
    };
    let mut keys = BTreeSet::new();
    for m in &matches.matches {
        let label = quantize_score(m.score.species_count as i64, scheme, section.rnr)?;
        let center = match params.heading_policy {
            HeadingPolicy::OctantCenters => m.score.octant.center(),
            HeadingPolicy::Perpendicular => m.perpendicular,
        };
        for delta in [-45.0, 0.0, 45.0] {
            let req = ImageRequest {
                pano_id: pano.pano_id.clone(),
                heading: center.offset(delta),
                fov: params.fov,
                pitch: params.pitch,
                width: params.width,
                height: params.height,
                label,
                raw_score: m.score.species_count,
                octant: m.score.octant,
                side: m.side,
                section_id: section.section_id.clone(),
                locality: section.locality,
                capture_date: pano.capture_date,
                location: pano.location,
            };
            if keys.insert(req.identity_key()) {
                plan.requests.push(req);
            }
        }
    }
    plan.sort();
    Ok(plan)
}

/// Requests for one survey section, plus the panorama chain they came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SectionPlan {
    pub plan: ExtractionPlan,
    /// Panorama ids in road order: accepted snaps with the panoramas between them.
    pub chain: Vec<String>,
}

/// Plans images for every panorama along a snapped section.
///
/// Panoramas between consecutive accepted snaps are filled in, and each takes
/// the scores of the survey point snapped at or before it. Fewer than two
/// panoramas give no road direction and so no requests.
pub fn plan_section(
    section: &SurveySection,
    snaps: &[SnapResult],
    index: &PanoIndex,
    scheme: Scheme,
    params: &ExtractionParams,
    snap_config: &SnapConfig,
) -> Result<SectionPlan, ExtractError> {
    let accepted: Vec<&SnapResult> = snaps.iter().filter(|s| s.accepted && s.pano.is_some()).collect();
    let mut chain: Vec<(PanoramaRecord, usize)> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut push = |chain: &mut Vec<(PanoramaRecord, usize)>, rec: &PanoramaRecord, point: usize| {
        if seen.insert(rec.pano_id.clone()) {
            chain.push((rec.clone(), point));
        }
    };
    for (i, snap) in accepted.iter().enumerate() {
        if i > 0 {
            let prev = accepted[i - 1];
            for rec in interpolate_panoramas(prev, snap, index, snap_config)? {
                push(&mut chain, &rec, prev.point_index);
            }
        }
        if let Some(rec) = &snap.pano {
            push(&mut chain, rec, snap.point_index);
        }
    }
    let records: Vec<PanoramaRecord> = chain.iter().map(|(r, _)| r.clone()).collect();
    let mut out = SectionPlan {
        plan: ExtractionPlan::default(),
        chain: records.iter().map(|r| r.pano_id.clone()).collect(),
    };
    if records.len() < 2 {
        return Ok(out);
    }
    let ctx = SectionContext {
        section_id: section.section_id.clone(),
        locality: section.locality,
        rnr: section.rnr,
    };
    for (rec, point) in &chain {
        let road = road_bearing_at(&rec.pano_id, &records)?;
        let scores = section.points.get(*point).map_or(&[][..], |p| &p.scores[..]);
        let matches = match_octant_scores(rec, road, scores);
        out.plan.merge(plan_images(rec, &matches, &ctx, scheme, params)?);
    }
    Ok(out)
}

/// Panoramas placed along a straight road, for sampling experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadLayout {
    pub start: GeoPoint,
    pub bearing: Bearing,
    pub length_m: f64,
    /// Distance of each panorama from `start` along the road.
    pub pano_offsets_m: Vec<f64>,
}

impl RoadLayout {
    pub fn panoramas(&self) -> Vec<PanoramaRecord> {
        self.pano_offsets_m
            .iter()
            .enumerate()
            .map(|(i, d)| PanoramaRecord {
                pano_id: format!("G{i:03}"),
                location: destination(self.start, self.bearing, *d),
                capture_date: CaptureDate { year: 2009, month: 6 },
                neighbours: Vec::new(),
            })
            .collect()
    }

    fn check(&self) -> Result<(), ExtractError> {
        if self.pano_offsets_m.is_empty() || !(self.length_m >= 0.0) {
            return Err(ExtractError::EmptyLayout);
        }
        Ok(())
    }

    fn verge_heading(&self) -> Bearing {
        perpendicular_bearing(self.bearing, VergeSide::Right)
    }
}

fn collision_rate(keys: &[IdentityKey]) -> f64 {
    if keys.is_empty() {
        return 0.0;
    }
    let unique: BTreeSet<&IdentityKey> = keys.iter().collect();
    (keys.len() - unique.len()) as f64 / keys.len() as f64
}

/// Duplicate fraction when images are requested every `grid_spacing_m` and
/// each request resolves to its nearest panorama.
pub fn simulate_grid_sampling(layout: &RoadLayout, grid_spacing_m: f64) -> Result<f64, ExtractError> {
    layout.check()?;
    if !(grid_spacing_m > 0.0) {
        return Err(ExtractError::InvalidSpacing(grid_spacing_m));
    }
    let index = PanoIndex::new(layout.panoramas())?;
    let params = ExtractionParams::default();
    let heading = layout.verge_heading();
    let mut keys = Vec::new();
    let mut k = 0usize;
    while k as f64 * grid_spacing_m <= layout.length_m + 1e-9 {
        let request_at = destination(layout.start, layout.bearing, k as f64 * grid_spacing_m);
        let (pano, _) = index.nearest(request_at).ok_or(ExtractError::EmptyLayout)?;
        keys.push(IdentityKey::new(&pano.pano_id, heading, params.fov, params.pitch));
        k += 1;
    }
    Ok(collision_rate(&keys))
}

/// Duplicate fraction when one request is planned per panorama.
pub fn simulate_panorama_sampling(layout: &RoadLayout) -> Result<f64, ExtractError> {
    layout.check()?;
    let params = ExtractionParams::default();
    let heading = layout.verge_heading();
    let keys: Vec<_> = layout
        .panoramas()
        .iter()
        .map(|p| IdentityKey::new(&p.pano_id, heading, params.fov, params.pitch))
        .collect();
    Ok(collision_rate(&keys))
}
