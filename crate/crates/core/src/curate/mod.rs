//! Dataset curation: filtering planned requests, the sample manifest,
//! duplicate and purge bookkeeping, splits, folds and class balancing.

mod download;
mod split;

pub use download::{
    download_images, image_path_for, DownloadSummary, HttpImageBackend, ImageBackend, MockImageBackend, DEFAULT_IMAGE_URL,
};
pub use split::{make_folds, oversample_plan, split, SplitFractions};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{IdentityKey, ImageRequest};
use crate::geodesy::{Bearing, CompassOctant, GeoPoint, VergeSide};
use crate::pano::CaptureDate;
use crate::survey::{Locality, Scheme};

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("filter criteria have an empty {0} set")]
    EmptyCriteria(&'static str),
    #[error("month {0} outside 1..12")]
    InvalidMonth(u8),
    #[error("unknown sample ids in purge list: {}", .0.join(", "))]
    UnknownSamples(Vec<String>),
    #[error("purge list line {line}: {message}")]
    PurgeList { line: usize, message: String },
    #[error("class {label} has {count} active samples, need at least {needed}")]
    ClassTooSmall { label: u8, count: usize, needed: usize },
    #[error("class {0} has no samples in the split")]
    EmptyClass(u8),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("fold count must be at least 2, got {0}")]
    InvalidFoldCount(usize),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("unsupported manifest schema {schema:?} version {version}")]
    UnsupportedSchema { schema: String, version: u32 },
    #[error("duplicate sample id {0}")]
    DuplicateSampleId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Backend(#[from] crate::net::BackendError),
}

/// Which captures and localities to keep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterCriteria {
    pub localities: BTreeSet<Locality>,
    pub years: BTreeSet<u16>,
    pub months: BTreeSet<u8>,
}

impl FilterCriteria {
    pub fn validate(&self) -> Result<(), CurateError> {
        if self.localities.is_empty() {
            return Err(CurateError::EmptyCriteria("localities"));
        }
        if self.years.is_empty() {
            return Err(CurateError::EmptyCriteria("years"));
        }
        if self.months.is_empty() {
            return Err(CurateError::EmptyCriteria("months"));
        }
        if let Some(m) = self.months.iter().find(|m| !(1..=12).contains(*m)) {
            return Err(CurateError::InvalidMonth(*m));
        }
        Ok(())
    }

    pub fn accepts(&self, locality: Locality, date: CaptureDate) -> bool {
        self.localities.contains(&locality) && self.years.contains(&date.year) && self.months.contains(&date.month)
    }
}

/// Keeps the requests whose locality and capture date satisfy `criteria`.
pub fn apply_filters(requests: Vec<ImageRequest>, criteria: &FilterCriteria) -> Result<Vec<ImageRequest>, CurateError> {
    criteria.validate()?;
    Ok(requests
        .into_iter()
        .filter(|r| criteria.accepts(r.locality, r.capture_date))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Active,
    Purged,
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PurgeReason {
    Car,
    House,
    CutVerge,
    VergeNotVisible,
    Other,
}

impl FromStr for PurgeReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "car" => Ok(PurgeReason::Car),
            "house" => Ok(PurgeReason::House),
            "cutverge" => Ok(PurgeReason::CutVerge),
            "vergenotvisible" => Ok(PurgeReason::VergeNotVisible),
            "other" => Ok(PurgeReason::Other),
            _ => Err(format!("unknown purge reason {s:?}")),
        }
    }
}

impl fmt::Display for PurgeReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PurgeReason::Car => "Car",
            PurgeReason::House => "House",
            PurgeReason::CutVerge => "CutVerge",
            PurgeReason::VergeNotVisible => "VergeNotVisible",
            PurgeReason::Other => "Other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchStatus {
    #[default]
    Pending,
    Fetched,
    Failed,
}

/// One labelled image in the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub image_path: Option<String>,
    pub identity_key: IdentityKey,
    /// Ordinal class under the manifest's scheme.
    pub label: u8,
    pub raw_score: u32,
    pub section_id: String,
    pub pano_id: String,
    pub capture_date: CaptureDate,
    pub octant: CompassOctant,
    pub side: VergeSide,
    pub locality: Locality,
    #[serde(flatten)]
    pub location: GeoPoint,
    pub heading: Bearing,
    pub fov: f64,
    pub pitch: f64,
    pub width: u32,
    pub height: u32,
    pub status: SampleStatus,
    pub purge_reason: Option<PurgeReason>,
    pub split: Option<Split>,
    pub fold: Option<u8>,
    pub fetch: FetchStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fetch_error: Option<String>,
}

impl Sample {
    pub fn from_request(sample_id: String, req: &ImageRequest) -> Self {
        Sample {
            sample_id,
            image_path: None,
            identity_key: req.identity_key(),
            label: req.label.ordinal,
            raw_score: req.raw_score,
            section_id: req.section_id.clone(),
            pano_id: req.pano_id.clone(),
            capture_date: req.capture_date,
            octant: req.octant,
            side: req.side,
            locality: req.locality,
            location: req.location,
            heading: req.heading,
            fov: req.fov,
            pitch: req.pitch,
            width: req.width,
            height: req.height,
            status: SampleStatus::Active,
            purge_reason: None,
            split: None,
            fold: None,
            fetch: FetchStatus::Pending,
            fetch_error: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == SampleStatus::Active
    }
}

pub const MANIFEST_SCHEMA: &str = "vergepipe-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema: String,
    pub version: u32,
    pub scheme: Scheme,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatusCounts {
    pub total: usize,
    pub active: usize,
    pub purged: usize,
    pub duplicate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn new(scheme: Scheme, seed: u64) -> Self {
        DatasetManifest {
            header: ManifestHeader {
                schema: MANIFEST_SCHEMA.into(),
                version: MANIFEST_VERSION,
                scheme,
                seed,
            },
            samples: Vec::new(),
        }
    }

    /// One sample per request, ids assigned in input order.
    pub fn from_requests<'a>(requests: impl IntoIterator<Item = &'a ImageRequest>, scheme: Scheme, seed: u64) -> Self {
        let mut m = Self::new(scheme, seed);
        m.samples = requests
            .into_iter()
            .enumerate()
            .map(|(i, r)| Sample::from_request(format!("S{:06}", i + 1), r))
            .collect();
        m
    }

    pub fn counts(&self) -> StatusCounts {
        let mut c = StatusCounts {
            total: self.samples.len(),
            ..StatusCounts::default()
        };
        for s in &self.samples {
            match s.status {
                SampleStatus::Active => c.active += 1,
                SampleStatus::Purged => c.purged += 1,
                SampleStatus::Duplicate => c.duplicate += 1,
            }
        }
        c
    }

    pub fn active(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.is_active())
    }

    /// Active samples per label.
    pub fn class_counts(&self) -> BTreeMap<u8, usize> {
        let mut out = BTreeMap::new();
        for s in self.active() {
            *out.entry(s.label).or_insert(0) += 1;
        }
        out
    }

    /// Marks every Active sample whose identity key was already claimed, in
    /// `(section_id, sample_id)` order, as a Duplicate. Returns how many changed.
    pub fn dedup(&mut self) -> usize {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&self.samples[a], &self.samples[b]);
            x.section_id.cmp(&y.section_id).then_with(|| x.sample_id.cmp(&y.sample_id))
        });
        let mut seen = BTreeSet::new();
        let mut changed = 0;
        for i in order {
            let s = &mut self.samples[i];
            if !s.is_active() {
                continue;
            }
            if !seen.insert(s.identity_key.clone()) {
                s.status = SampleStatus::Duplicate;
                changed += 1;
            }
        }
        changed
    }

    /// Marks the listed samples Purged. Already purged samples keep their
    /// first reason. Nothing changes if any id is unknown.
    pub fn apply_purge(&mut self, list: &PurgeList) -> Result<usize, CurateError> {
        let by_id: HashMap<&str, usize> = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.sample_id.as_str(), i))
            .collect();
        let mut unknown: Vec<String> = list
            .entries
            .iter()
            .filter(|(id, _)| !by_id.contains_key(id.as_str()))
            .map(|(id, _)| id.clone())
            .collect();
        if !unknown.is_empty() {
            unknown.sort();
            unknown.dedup();
            return Err(CurateError::UnknownSamples(unknown));
        }
        let targets: Vec<(usize, PurgeReason)> = list.entries.iter().map(|(id, r)| (by_id[id.as_str()], *r)).collect();
        let mut changed = 0;
        for (i, reason) in targets {
            let s = &mut self.samples[i];
            if s.status != SampleStatus::Purged {
                s.status = SampleStatus::Purged;
                s.purge_reason = Some(reason);
                s.split = None;
                s.fold = None;
                changed += 1;
            }
        }
        Ok(changed)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, CurateError> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(t) if t.trim().is_empty()));
        let (_, first) = lines.next().ok_or(CurateError::Manifest {
            line: 1,
            message: "missing header line".into(),
        })?;
        let header: ManifestHeader = serde_json::from_str(&first?).map_err(|e| CurateError::Manifest {
            line: 1,
            message: e.to_string(),
        })?;
        if header.schema != MANIFEST_SCHEMA || header.version != MANIFEST_VERSION {
            return Err(CurateError::UnsupportedSchema {
                schema: header.schema,
                version: header.version,
            });
        }
        let mut samples = Vec::new();
        let mut ids = BTreeSet::new();
        for (i, line) in lines {
            let s: Sample = serde_json::from_str(&line?).map_err(|e| CurateError::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            if !ids.insert(s.sample_id.clone()) {
                return Err(CurateError::DuplicateSampleId(s.sample_id));
            }
            samples.push(s);
        }
        Ok(DatasetManifest { header, samples })
    }
}

/// Manually flagged bad images, read from `sample_id,reason` CSV.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PurgeList {
    pub entries: Vec<(String, PurgeReason)>,
}

impl PurgeList {
    pub fn from_csv<R: Read>(r: R) -> Result<Self, CurateError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            // header is line 1
            let line = i + 2;
            let rec = rec.map_err(|e| CurateError::PurgeList { line, message: e.to_string() })?;
            let (Some(id), Some(reason)) = (rec.get(0), rec.get(1)) else {
                return Err(CurateError::PurgeList {
                    line,
                    message: "expected sample_id,reason".into(),
                });
            };
            let reason = reason.parse().map_err(|message| CurateError::PurgeList { line, message })?;
            entries.push((id.to_string(), reason));
        }
        Ok(PurgeList { entries })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,reason\n");
        for (id, r) in &self.entries {
            out.push_str(&format!("{id},{r}\n"));
        }
        out
    }
}
