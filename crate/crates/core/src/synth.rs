//! Synthetic fixtures whose outcomes are known by construction.
//!
//! Used by the test suites, the benches and the CLI's `synth` command.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curate::{DatasetManifest, FilterCriteria, PurgeList, PurgeReason, Split};
use crate::extract::{ExtractionParams, ImageRequest, RoadLayout};
use crate::geodesy::{destination, haversine_distance, Bearing, CompassOctant, GeoPoint, VergeSide};
use crate::metrics::PredictionRow;
use crate::pano::{CaptureDate, PanoramaRecord};
use crate::survey::{quantize_score, write_kml, KmlMapping, Locality, Scheme, SurveyPoint, SurveySection, VergeScore};

/// Point `along_m` down the road from `origin` and `lateral_m` to its right.
pub fn offset_point(origin: GeoPoint, road: Bearing, along_m: f64, lateral_m: f64) -> GeoPoint {
    let on_road = destination(origin, road, along_m);
    destination(on_road, road.offset(90.0), lateral_m)
}

/// Straight chain of `count` panoramas, `spacing_m` apart, linked to their neighbours.
pub fn road_chain(
    prefix: &str,
    start: GeoPoint,
    road: Bearing,
    count: usize,
    spacing_m: f64,
    date: CaptureDate,
) -> Vec<PanoramaRecord> {
    let id = |i: usize| format!("{prefix}{i:03}");
    (0..count)
        .map(|i| {
            let mut neighbours = Vec::new();
            if i > 0 {
                neighbours.push(id(i - 1));
            }
            if i + 1 < count {
                neighbours.push(id(i + 1));
            }
            PanoramaRecord {
                pano_id: id(i),
                location: destination(start, road, i as f64 * spacing_m),
                capture_date: date,
                neighbours,
            }
        })
        .collect()
}

fn fixture_origin() -> GeoPoint {
    GeoPoint::new(53.3, -0.2).expect("valid")
}

fn summer_2009() -> CaptureDate {
    CaptureDate { year: 2009, month: 7 }
}

fn scored_point(location: GeoPoint) -> SurveyPoint {
    SurveyPoint {
        location,
        scores: vec![
            VergeScore { octant: CompassOctant::N, species_count: 6 },
            VergeScore { octant: CompassOctant::S, species_count: 10 },
        ],
    }
}

/// Survey points along a road with the panorama each should snap to.
#[derive(Debug, Clone)]
pub struct SnapCase {
    pub panoramas: Vec<PanoramaRecord>,
    pub section: SurveySection,
    pub expected: Vec<String>,
}

pub const STRAIGHT_SPACING_M: f64 = 15.0;

/// 60 panoramas every 15 m on an east-bound road, and `points` survey points
/// at random positions along it, up to 5 m to either side.
pub fn straight_road_case(seed: u64, points: usize) -> SnapCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let road = Bearing::new(90.0);
    let n = 60;
    let panoramas = road_chain("R", fixture_origin(), road, n, STRAIGHT_SPACING_M, summer_2009());
    let span = (n - 1) as f64 * STRAIGHT_SPACING_M;
    let mut along: Vec<f64> = (0..points).map(|_| rng.random_range(0.0..span)).collect();
    along.sort_by(f64::total_cmp);
    let mut pts = Vec::new();
    let mut expected = Vec::new();
    for a in along {
        let lateral = rng.random_range(-5.0..5.0);
        let p = offset_point(fixture_origin(), road, a, lateral);
        let nearest = panoramas
            .iter()
            .min_by(|x, y| haversine_distance(p, x.location).total_cmp(&haversine_distance(p, y.location)))
            .expect("non-empty");
        expected.push(nearest.pano_id.clone());
        pts.push(scored_point(p));
    }
    SnapCase {
        panoramas,
        section: SurveySection {
            section_id: format!("straight-{seed}"),
            locality: Locality::Wolds,
            rnr: false,
            points: pts,
        },
        expected,
    }
}

/// A surveyed road crossed by an unconnected road, with one survey point
/// nearer a panorama on the crossing road than to any on its own.
#[derive(Debug, Clone)]
pub struct JunctionCase {
    pub panoramas: Vec<PanoramaRecord>,
    pub section: SurveySection,
    /// Index of the point by the crossing.
    pub junction_point: usize,
    /// The crossing-road panorama nearest that point.
    pub wrong_road_pano: String,
    /// The surveyed road's panorama nearest that point.
    pub right_road_pano: String,
}

pub fn junction_case(seed: u64) -> JunctionCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = fixture_origin();
    let east = Bearing::new(90.0);
    let north = Bearing::new(0.0);
    let mut panoramas = road_chain("A", origin, east, 21, 15.0, summer_2009());
    // crossing road runs north between A010 and A011, no panorama at the crossing
    let cross_x = 157.5;
    let here = |x: f64, y: f64| destination(destination(origin, east, x), north, y);
    panoramas.extend(road_chain("B", here(cross_x, 127.5), Bearing::new(180.0), 18, 15.0, summer_2009()));

    loop {
        let b_y = if rng.random_bool(0.5) { 7.5 } else { -7.5 };
        let a_x = if rng.random_bool(0.5) { 150.0 } else { 165.0 };
        let bias = rng.random_range(0.05..0.2);
        let jitter = rng.random_range(-1.0..1.0);
        let (ax, ay, bx, by) = (a_x, 0.0, cross_x, b_y);
        let t = 0.5 + bias;
        let (dx, dy) = (bx - ax, by - ay);
        let len = (dx * dx + dy * dy).sqrt();
        let px = ax + t * dx - dy / len * jitter;
        let py = ay + t * dy + dx / len * jitter;
        let p = here(px, py);

        let dist = |r: &PanoramaRecord| haversine_distance(p, r.location);
        let nearest_of = |prefix: char| {
            panoramas
                .iter()
                .filter(|r| r.pano_id.starts_with(prefix))
                .min_by(|x, y| dist(x).total_cmp(&dist(y)))
                .expect("non-empty")
        };
        let (a, b) = (nearest_of('A'), nearest_of('B'));
        if !(dist(b) < dist(a) && dist(a) <= 25.0) {
            continue;
        }
        let points = vec![
            scored_point(here(30.0, 2.0)),
            scored_point(here(90.0, -2.0)),
            scored_point(p),
            scored_point(here(240.0, 2.0)),
            scored_point(here(285.0, -1.0)),
        ];
        return JunctionCase {
            wrong_road_pano: b.pano_id.clone(),
            right_road_pano: a.pano_id.clone(),
            panoramas,
            section: SurveySection {
                section_id: format!("junction-{seed}"),
                locality: Locality::Wolds,
                rnr: false,
                points,
            },
            junction_point: 2,
        };
    }
}

pub const GRID_SPACING_M: f64 = 15.0;

/// 18 grid requests every 15 m over a road whose panoramas are 15 m apart,
/// except at two gaps where a panorama is missing and its neighbour sits 3 m
/// closer to the gap. The grid point in each gap resolves to the same
/// panorama as the one before it: 2 duplicates in 18.
pub fn grid_duplication_layout() -> RoadLayout {
    let mut offsets = Vec::new();
    for k in 0..18 {
        match k {
            5 | 12 => continue,
            4 | 11 => offsets.push(k as f64 * GRID_SPACING_M + 3.0),
            _ => offsets.push(k as f64 * GRID_SPACING_M),
        }
    }
    RoadLayout {
        start: fixture_origin(),
        bearing: Bearing::new(90.0),
        length_m: 17.0 * GRID_SPACING_M,
        pano_offsets_m: offsets,
    }
}

/// Active class sizes of the curated set.
pub const CURATED_CLASS_COUNTS: [usize; 4] = [3452, 1631, 546, 320];
pub const DUPLICATE_COUNT: usize = 44;
pub const PURGE_COUNT: usize = 889;
pub const NARROW_MATCHES: usize = 3396;
const NON_MATCHING: usize = 500;

/// Planned requests in which 44 share an identity key with an earlier section's request.
#[derive(Debug, Clone)]
pub struct CurationFixture {
    pub requests: Vec<ImageRequest>,
    /// 889 samples that are still Active after deduplication.
    pub purge: PurgeList,
}

/// Requests where one locality in one year is about half of the two-locality, two-year set.
#[derive(Debug, Clone)]
pub struct FilterFixture {
    pub requests: Vec<ImageRequest>,
    pub narrow: FilterCriteria,
    pub wide: FilterCriteria,
    /// After the wide filter, these 889 bad images leave exactly the curation set.
    pub purge_after_wide: PurgeList,
}

fn class_raw_score(class: usize, i: usize) -> u32 {
    [0, 4, 8, 12][class] + (i % 4) as u32
}

fn request(pano_id: String, section_id: String, raw: u32, at: GeoPoint) -> ImageRequest {
    let params = ExtractionParams::default();
    ImageRequest {
        pano_id,
        heading: Bearing::new(90.0),
        fov: params.fov,
        pitch: params.pitch,
        width: params.width,
        height: params.height,
        label: quantize_score(raw as i64, Scheme::FourClass, false).expect("non-negative"),
        raw_score: raw,
        octant: CompassOctant::E,
        side: VergeSide::Right,
        section_id,
        locality: Locality::Wolds,
        capture_date: summer_2009(),
        location: at,
    }
}

fn build_curation_sets() -> (CurationFixture, FilterFixture) {
    let at = fixture_origin();
    let total: usize = CURATED_CLASS_COUNTS.iter().sum();
    let mut originals = Vec::with_capacity(total);
    for (c, n) in CURATED_CLASS_COUNTS.iter().enumerate() {
        for i in 0..*n {
            originals.push(request(format!("P{c}{i:04}"), format!("A{c}-{:03}", i / 40), class_raw_score(c, i), at));
        }
    }
    // 137 is coprime to the total, so these picks are distinct
    let dup_of: BTreeMap<usize, usize> = (0..DUPLICATE_COUNT).map(|k| ((k * 137) % total, k)).collect();

    // curation order: each duplicate copy sits just before its original, so
    // it has the smaller sample id but the later section
    let mut requests = Vec::with_capacity(total + DUPLICATE_COUNT);
    let mut original_pos = Vec::with_capacity(total);
    for (j, r) in originals.iter().enumerate() {
        if let Some(k) = dup_of.get(&j) {
            let mut copy = r.clone();
            copy.section_id = format!("Z-shared-{k:02}");
            requests.push(copy);
        }
        original_pos.push(requests.len());
        requests.push(r.clone());
    }

    // wide list: curation requests with a bad image after every sixth
    let mut wide_list: Vec<(ImageRequest, bool)> = Vec::with_capacity(requests.len() + PURGE_COUNT);
    let mut bad = 0;
    for (i, r) in requests.iter().enumerate() {
        wide_list.push((r.clone(), false));
        if i % 6 == 5 && bad < PURGE_COUNT {
            let raw = class_raw_score(bad % 4, bad);
            wide_list.push((request(format!("X{bad:04}"), format!("B-{:03}", bad / 40), raw, at), true));
            bad += 1;
        }
    }
    assert_eq!(bad, PURGE_COUNT);

    // duplicated originals and their copies never match the narrow filter;
    // among the rest a coprime stride picks exactly the narrow count
    let duplicated_pano: std::collections::BTreeSet<String> =
        dup_of.keys().map(|j| originals[*j].pano_id.clone()).collect();
    let free = wide_list.iter().filter(|(r, _)| !duplicated_pano.contains(&r.pano_id)).count();
    let mut m = 0usize;
    let mut attrs: BTreeMap<String, (Locality, CaptureDate)> = BTreeMap::new();
    for (r, _) in &wide_list {
        let a = if duplicated_pano.contains(&r.pano_id) {
            (Locality::NorthernEdge, CaptureDate { year: 2021, month: 7 })
        } else {
            let month = 6 + ((m / 3) % 3) as u8;
            let a = if (m * 7919) % free < NARROW_MATCHES {
                (Locality::Wolds, CaptureDate { year: 2009, month })
            } else {
                match m % 3 {
                    0 => (Locality::Wolds, CaptureDate { year: 2021, month }),
                    1 => (Locality::NorthernEdge, CaptureDate { year: 2009, month }),
                    _ => (Locality::NorthernEdge, CaptureDate { year: 2021, month }),
                }
            };
            m += 1;
            a
        };
        attrs.insert(r.pano_id.clone(), a);
    }
    let stamp = |r: &mut ImageRequest| {
        let (l, d) = attrs[&r.pano_id];
        r.locality = l;
        r.capture_date = d;
    };
    for (r, _) in &mut wide_list {
        stamp(r);
    }
    for r in &mut requests {
        stamp(r);
    }

    let sid = |pos: usize| format!("S{:06}", pos + 1);
    let purge = PurgeList {
        entries: (0..PURGE_COUNT)
            .map(|k| {
                let j = (k * 389 + 11) % total;
                (sid(original_pos[j]), reason_for(k))
            })
            .collect(),
    };
    let purge_after_wide = PurgeList {
        entries: wide_list
            .iter()
            .enumerate()
            .filter(|(_, (_, is_bad))| *is_bad)
            .enumerate()
            .map(|(k, (pos, _))| (sid(pos), reason_for(k)))
            .collect(),
    };

    let mut filter_requests: Vec<ImageRequest> = wide_list.into_iter().map(|(r, _)| r).collect();
    for i in 0..NON_MATCHING {
        let mut r = request(format!("Y{i:04}"), format!("C-{:03}", i / 40), class_raw_score(i % 4, i), at);
        match i % 3 {
            0 => r.locality = Locality::LimestoneGrassland,
            1 => r.capture_date = CaptureDate { year: 2009, month: 12 },
            _ => r.capture_date = CaptureDate { year: 2015, month: 7 },
        }
        filter_requests.push(r);
    }
    let summer: std::collections::BTreeSet<u8> = [6, 7, 8].into();
    (
        CurationFixture { requests, purge },
        FilterFixture {
            requests: filter_requests,
            narrow: FilterCriteria {
                localities: [Locality::Wolds].into(),
                years: [2009].into(),
                months: summer.clone(),
            },
            wide: FilterCriteria {
                localities: [Locality::Wolds, Locality::NorthernEdge].into(),
                years: [2009, 2021].into(),
                months: summer,
            },
            purge_after_wide,
        },
    )
}

fn reason_for(k: usize) -> PurgeReason {
    [PurgeReason::Car, PurgeReason::House, PurgeReason::CutVerge, PurgeReason::VergeNotVisible][k % 4]
}

pub fn curation_fixture() -> CurationFixture {
    build_curation_sets().0
}

pub fn filter_fixture() -> FilterFixture {
    build_curation_sets().1
}

/// Shape of a synthetic survey world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldSpec {
    pub roads: usize,
    pub sections_per_road: usize,
    pub panos_per_section: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            roads: 4,
            sections_per_road: 5,
            panos_per_section: 10,
            seed: 0,
        }
    }
}

/// Counts a correct pipeline must produce on a [`SyntheticWorld`] with the
/// default filter (Wolds and Northern Edge, 2009 and 2021, June to August).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExpectedCounts {
    pub sections: usize,
    pub diagnostics: usize,
    pub planned: usize,
    pub filtered: usize,
    pub duplicates: usize,
    pub purged: usize,
    pub final_active: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub sections: Vec<SurveySection>,
    pub panoramas: Vec<PanoramaRecord>,
    pub purge: PurgeList,
    pub expected: ExpectedCounts,
}

fn road_attributes(road: usize) -> (Locality, CaptureDate) {
    match road % 4 {
        0 => (Locality::Wolds, CaptureDate { year: 2009, month: 7 }),
        1 => (Locality::Wolds, CaptureDate { year: 2009, month: 6 }),
        2 => (Locality::NorthernEdge, CaptureDate { year: 2021, month: 8 }),
        // winter capture: planned but filtered out
        _ => (Locality::Wolds, CaptureDate { year: 2009, month: 12 }),
    }
}

/// A placemark the parser must reject, to exercise diagnostics.
const BROKEN_PLACEMARK: &str = "<Placemark><name>no-geometry</name><ExtendedData><Data name=\"score_N\"><value>4</value></Data></ExtendedData></Placemark>\n";

impl SyntheticWorld {
    /// East-bound roads 0.01° of latitude apart, each split into sections that
    /// share their boundary panorama. Survey points sit on every third
    /// panorama, a few metres off the road, so the rest must be interpolated.
    pub fn generate(spec: WorldSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let road = Bearing::new(90.0);
        let m = spec.panos_per_section.max(2);
        let per_road = spec.sections_per_road * (m - 1) + 1;
        let mut sections = Vec::new();
        let mut panoramas = Vec::new();
        let mut expected = ExpectedCounts {
            diagnostics: 1,
            ..ExpectedCounts::default()
        };
        let mut section_no = 0usize;
        for r in 0..spec.roads {
            let (locality, date) = road_attributes(r);
            let start = GeoPoint::new(53.3 + 0.01 * r as f64, -0.2).expect("valid");
            let chain = road_chain(&format!("R{r}P"), start, road, per_road, 15.0, date);
            let mut prev_sides: Vec<VergeSide> = Vec::new();
            for s in 0..spec.sections_per_road {
                let first = s * (m - 1);
                let mut idx: Vec<usize> = (first..first + m).step_by(3).collect();
                if *idx.last().expect("non-empty") != first + m - 1 {
                    idx.push(first + m - 1);
                }
                let mut scores = Vec::new();
                let mut sides = Vec::new();
                let only_one = rng.random_bool(0.2);
                for (k, (side, octant)) in [(VergeSide::Right, CompassOctant::S), (VergeSide::Left, CompassOctant::N)]
                    .into_iter()
                    .enumerate()
                {
                    if only_one && k == section_no % 2 {
                        continue;
                    }
                    let class = (section_no + k) % 4;
                    let count = [1, 5, 9, 14][class] + rng.random_range(0..3);
                    scores.push(VergeScore { octant, species_count: count });
                    sides.push(side);
                }
                scores.sort_by_key(|v| v.octant);
                let points = idx
                    .iter()
                    .map(|&i| {
                        let along = i as f64 * 15.0 + rng.random_range(-3.0..3.0);
                        let lateral = if i % 2 == 0 { 3.0 } else { -3.0 };
                        SurveyPoint {
                            location: offset_point(start, road, along, lateral),
                            scores: scores.clone(),
                        }
                    })
                    .collect();
                sections.push(SurveySection {
                    section_id: format!("R{r}-S{s:02}"),
                    locality,
                    rnr: false,
                    points,
                });
                let planned = 3 * sides.len() * m;
                expected.sections += 1;
                expected.planned += planned;
                if r % 4 != 3 {
                    expected.filtered += planned;
                    if s > 0 {
                        expected.duplicates += 3 * sides.iter().filter(|x| prev_sides.contains(x)).count();
                    }
                }
                prev_sides = sides;
                section_no += 1;
            }
            panoramas.extend(chain);
        }
        // ids of the first section are never duplicates
        let purge = PurgeList {
            entries: (0..4).map(|k| (format!("S{:06}", 2 * k + 1), reason_for(k))).collect(),
        };
        expected.purged = purge.entries.len();
        expected.final_active = expected.filtered - expected.duplicates - expected.purged;
        SyntheticWorld {
            sections,
            panoramas,
            purge,
            expected,
        }
    }

    pub fn kml(&self) -> String {
        let mut text = write_kml(&self.sections, &KmlMapping::default());
        let at = text.rfind("</Document>").expect("document end");
        text.insert_str(at, BROKEN_PLACEMARK);
        text
    }

    pub fn panoramas_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.panoramas {
            out.push_str(&serde_json::to_string(p).expect("serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes `survey.kml`, `panoramas.jsonl` and `purge.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("survey.kml"), self.kml())?;
        fs::write(dir.join("panoramas.jsonl"), self.panoramas_jsonl())?;
        fs::write(dir.join("purge.csv"), self.purge.to_csv())?;
        Ok(())
    }
}

/// Stand-in classifier output for the `split` samples: right with probability
/// `accuracy`, otherwise one class off. Scores put most mass on the prediction.
pub fn mock_predictions(manifest: &DatasetManifest, split: Split, accuracy: f64, seed: u64) -> Vec<PredictionRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = manifest.header.scheme.num_classes();
    manifest
        .active()
        .filter(|s| s.split == Some(split))
        .map(|s| {
            let pred = if rng.random_bool(accuracy.clamp(0.0, 1.0)) {
                s.label
            } else if s.label == k || (s.label > 1 && rng.random_bool(0.5)) {
                s.label - 1
            } else {
                s.label + 1
            };
            let mut scores: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.2)).collect();
            scores[pred as usize - 1] += 0.8;
            let sum: f64 = scores.iter().sum();
            PredictionRow {
                sample_id: s.sample_id.clone(),
                true_class: s.label,
                pred_class: pred,
                scores: scores.iter().map(|v| (v / sum * 1e6).round() / 1e6).collect(),
            }
        })
        .collect()
}
