//! Stage-by-stage driver: each stage reads its predecessors' artifacts from the
//! output directory and writes its own, stamped with content hashes so an
//! unchanged re-run is skipped.

mod config;
mod geojson;

pub use config::{
    interpolate_env, BackendMode, ConfigError, CurationConfig, EvaluateConfig, FilterConfig, NetworkConfig, PathsConfig,
    RunConfig,
};
pub use geojson::{manifest_geojson, snaps_geojson, SectionSnaps};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::curate::{
    apply_filters, download_images, make_folds, oversample_plan, split, DatasetManifest, HttpImageBackend, ImageBackend,
    MockImageBackend, PurgeList, Split,
};
use crate::extract::{plan_section, ExtractionPlan, ImageRequest, SkippedVerge};
use crate::geodesy::{haversine_distance, intermediate, GeoPoint};
use crate::metrics::{confusion, export_report, pr_points, read_predictions, report, write_predictions, ReportFormat};
use crate::net::RateLimiter;
use crate::pano::{
    read_records_jsonl, snap_section, HttpMetadataBackend, MetadataBackend, MetadataCache, MetadataFetcher,
    MockBackend, PanoIndex, PanoramaRecord, CREDENTIAL_VAR,
};
use crate::survey::{parse_kml, Diagnostic, SurveySection};
use crate::synth::mock_predictions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Snap,
    Plan,
    Curate,
    Split,
    Fetch,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Snap,
        Stage::Plan,
        Stage::Curate,
        Stage::Split,
        Stage::Fetch,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Snap => "snap",
            Stage::Plan => "plan",
            Stage::Curate => "curate",
            Stage::Split => "split",
            Stage::Fetch => "fetch",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

pub const SECTIONS: &str = "sections.json";
pub const DIAGNOSTICS: &str = "diagnostics.jsonl";
pub const PANORAMAS: &str = "panoramas.jsonl";
pub const SNAPS: &str = "snaps.json";
pub const SNAPS_GEOJSON: &str = "snaps.geojson";
pub const PLAN: &str = "plan.json";
pub const CURATED_MANIFEST: &str = "manifest.curated.jsonl";
pub const CURATION_SUMMARY: &str = "curation.json";
pub const SPLIT_MANIFEST: &str = "manifest.split.jsonl";
pub const OVERSAMPLE: &str = "oversample.csv";
pub const MANIFEST_GEOJSON: &str = "manifest.geojson";
pub const SPLIT_SUMMARY: &str = "split.json";
pub const MANIFEST: &str = "manifest.jsonl";
pub const FETCH_SUMMARY: &str = "fetch.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const PR_CURVES: &str = "pr_curves.json";
const STAMP_DIR: &str = ".stamps";

pub fn report_file(format: ReportFormat) -> &'static str {
    match format {
        ReportFormat::Text => "report.txt",
        ReportFormat::Json => "report.json",
        ReportFormat::Csv => "report.csv",
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact {}: run the `{stage}` stage first", .artifact.display())]
    MissingArtifact { stage: Stage, artifact: PathBuf },
    #[error("{stage} stage failed: {message}")]
    Failed { stage: Stage, message: String },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Result of running one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    /// Inputs and outputs matched the last run, so nothing was recomputed.
    pub reused: bool,
    pub summary: Value,
    /// Artifact name to sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    stage: Stage,
    input_hash: String,
    outputs: BTreeMap<String, String>,
    summary: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn pretty(value: &impl Serialize) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("artifact serializes");
        out.push(b'\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanArtifact {
    summary: PlanSummary,
    requests: Vec<ImageRequest>,
    skipped: Vec<SkippedVerge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PlanSummary {
    sections: usize,
    sections_without_chain: usize,
    planned: usize,
    filtered: usize,
    skipped_verges: usize,
}

/// Artifacts a stage produced, in write order.
type Outputs = Vec<(String, Vec<u8>)>;

/// Runs stages against one configuration and output directory.
pub struct Pipeline {
    config: RunConfig,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        Pipeline { config }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.paths.output_dir
    }

    fn fail(stage: Stage) -> impl Fn(&dyn fmt::Display) -> PipelineError {
        move |e| PipelineError::Failed {
            stage,
            message: e.to_string(),
        }
    }

    /// Bytes of an artifact written by `producer`.
    fn artifact(&self, producer: Stage, name: &str) -> Result<Vec<u8>, PipelineError> {
        let path = self.output_dir().join(name);
        if !path.is_file() {
            return Err(PipelineError::MissingArtifact {
                stage: producer,
                artifact: path,
            });
        }
        fs::read(&path).map_err(|source| PipelineError::Io { path, source })
    }

    fn external(&self, path: &Path) -> Result<Vec<u8>, PipelineError> {
        fs::read(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Predecessor artifacts and external files a stage reads.
    fn inputs(&self, stage: Stage) -> Result<Vec<(String, Vec<u8>)>, PipelineError> {
        let p = &self.config.paths;
        let mut out = Vec::new();
        let ext = |path: &Path, out: &mut Vec<(String, Vec<u8>)>| -> Result<(), PipelineError> {
            out.push((path.display().to_string(), self.external(path)?));
            Ok(())
        };
        match stage {
            Stage::Ingest => {
                for k in &p.kml {
                    ext(k, &mut out)?;
                }
            }
            Stage::Snap => {
                out.push((SECTIONS.into(), self.artifact(Stage::Ingest, SECTIONS)?));
                if self.config.backend == BackendMode::Mock {
                    if let Some(f) = &p.panoramas {
                        ext(f, &mut out)?;
                    }
                }
            }
            Stage::Plan => {
                out.push((SECTIONS.into(), self.artifact(Stage::Ingest, SECTIONS)?));
                out.push((SNAPS.into(), self.artifact(Stage::Snap, SNAPS)?));
                out.push((PANORAMAS.into(), self.artifact(Stage::Snap, PANORAMAS)?));
            }
            Stage::Curate => {
                out.push((PLAN.into(), self.artifact(Stage::Plan, PLAN)?));
                if let Some(f) = &p.purge_list {
                    ext(f, &mut out)?;
                }
            }
            Stage::Split => out.push((CURATED_MANIFEST.into(), self.artifact(Stage::Curate, CURATED_MANIFEST)?)),
            Stage::Fetch => out.push((SPLIT_MANIFEST.into(), self.artifact(Stage::Split, SPLIT_MANIFEST)?)),
            Stage::Evaluate => {
                out.push((MANIFEST.into(), self.artifact(Stage::Fetch, MANIFEST)?));
                if let Some(f) = &p.predictions {
                    ext(f, &mut out)?;
                }
            }
        }
        Ok(out)
    }

    /// Configuration that can change a stage's output.
    fn stage_settings(&self, stage: Stage) -> Value {
        let c = &self.config;
        let n = &c.network;
        match stage {
            Stage::Ingest => json!({ "kml": c.kml }),
            Stage::Snap => json!({
                "backend": c.backend,
                "snap": c.snap,
                "metadata_url": n.metadata_url,
                "mock_coverage_m": n.mock_coverage_m,
            }),
            Stage::Plan => json!({
                "scheme": c.scheme,
                "extraction": c.extraction,
                "filter": c.filter,
                "snap": c.snap,
            }),
            Stage::Curate => json!({
                "scheme": c.scheme,
                "seed": c.seed,
                "dedup": c.curation.dedup,
                "purge_list": c.paths.purge_list.is_some(),
            }),
            Stage::Split => json!({ "seed": c.seed, "curation": c.curation }),
            Stage::Fetch => json!({ "backend": c.backend, "image_url": n.image_url }),
            Stage::Evaluate => json!({
                "seed": c.seed,
                "backend": c.backend,
                "evaluate": c.evaluate,
                "predictions": c.paths.predictions.is_some(),
            }),
        }
    }

    fn input_hash(&self, stage: Stage, inputs: &[(String, Vec<u8>)]) -> String {
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(b"\0");
        h.update(self.stage_settings(stage).to_string().as_bytes());
        // external file names depend on where the run lives; only content counts
        for (_, bytes) in inputs {
            h.update(b"\0");
            h.update(sha256_hex(bytes).as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.output_dir().join(STAMP_DIR).join(format!("{stage}.json"))
    }

    /// The stored stamp when it matches `input_hash` and every output is intact.
    fn reusable(&self, stage: Stage, input_hash: &str) -> Option<Stamp> {
        let stamp: Stamp = serde_json::from_slice(&fs::read(self.stamp_path(stage)).ok()?).ok()?;
        if stamp.input_hash != input_hash {
            return None;
        }
        for (name, hash) in &stamp.outputs {
            let bytes = fs::read(self.output_dir().join(name)).ok()?;
            if &sha256_hex(&bytes) != hash {
                return None;
            }
        }
        if stage == Stage::Fetch {
            let manifest = DatasetManifest::read_jsonl(fs::read(self.output_dir().join(MANIFEST)).ok()?.as_slice()).ok()?;
            let missing = manifest
                .samples
                .iter()
                .filter_map(|s| s.image_path.as_ref())
                .any(|p| !self.output_dir().join(p).is_file());
            if missing {
                return None;
            }
        }
        Some(stamp)
    }

    /// Runs one stage, or confirms its artifacts are current.
    pub fn run(&self, stage: Stage) -> Result<StageOutcome, PipelineError> {
        let inputs = self.inputs(stage)?;
        let input_hash = self.input_hash(stage, &inputs);
        if let Some(stamp) = self.reusable(stage, &input_hash) {
            info!("{stage}: inputs unchanged, reusing artifacts");
            return Ok(StageOutcome {
                stage,
                reused: true,
                summary: stamp.summary,
                outputs: stamp.outputs,
            });
        }
        info!("{stage}: running");
        let inputs: HashMap<String, Vec<u8>> = inputs.into_iter().collect();
        let (outputs, summary) = match stage {
            Stage::Ingest => self.ingest(),
            Stage::Snap => self.snap(&inputs),
            Stage::Plan => self.plan(&inputs),
            Stage::Curate => self.curate(&inputs),
            Stage::Split => self.split(&inputs),
            Stage::Fetch => self.fetch(&inputs),
            Stage::Evaluate => self.evaluate(&inputs),
        }?;
        let mut hashes = BTreeMap::new();
        for (name, bytes) in &outputs {
            write_atomic(&self.output_dir().join(name), bytes)?;
            hashes.insert(name.clone(), sha256_hex(bytes));
        }
        let stamp = Stamp {
            stage,
            input_hash,
            outputs: hashes.clone(),
            summary: summary.clone(),
        };
        write_atomic(&self.stamp_path(stage), &pretty(&stamp))?;
        info!("{stage}: {summary}");
        Ok(StageOutcome {
            stage,
            reused: false,
            summary,
            outputs: hashes,
        })
    }

    /// Runs every stage in order, stopping at the first failure.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>, PipelineError> {
        Stage::ALL.into_iter().map(|s| self.run(s)).collect()
    }

    fn ingest(&self) -> Result<(Outputs, Value), PipelineError> {
        let fail = Self::fail(Stage::Ingest);
        let mut sections: Vec<SurveySection> = Vec::new();
        let mut diagnostics: Vec<Diagnostic> = Vec::new();
        for path in &self.config.paths.kml {
            let bytes = self.external(path)?;
            let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
            let outcome = parse_kml(&bytes, &self.config.kml)
                .map_err(|e| fail(&format!("{}: {e}", path.display())))?
                .with_file(&name);
            sections.extend(outcome.sections);
            diagnostics.extend(outcome.diagnostics);
        }
        let mut ids = std::collections::BTreeSet::new();
        if let Some(dup) = sections.iter().find(|s| !ids.insert(s.section_id.as_str())) {
            return Err(fail(&format!("section id {} appears more than once", dup.section_id)));
        }
        for d in &diagnostics {
            warn!("skipped placemark {} in {}: {}", d.placemark_index, d.file.as_deref().unwrap_or("?"), d.reason);
        }
        let summary = json!({
            "sections": sections.len(),
            "points": sections.iter().map(|s| s.points.len()).sum::<usize>(),
            "diagnostics": diagnostics.len(),
        });
        Ok((
            vec![(SECTIONS.into(), pretty(&sections)), (DIAGNOSTICS.into(), jsonl(&diagnostics))],
            summary,
        ))
    }

    fn api_key(&self, stage: Stage) -> Result<String, PipelineError> {
        self.config
            .network
            .api_key
            .clone()
            .or_else(|| std::env::var(CREDENTIAL_VAR).ok())
            .filter(|k| !k.is_empty())
            .ok_or_else(|| PipelineError::Failed {
                stage,
                message: format!("the live backend needs network.api_key or the {CREDENTIAL_VAR} environment variable"),
            })
    }

    fn limiter(&self) -> Arc<RateLimiter> {
        Arc::new(RateLimiter::new(self.config.network.rate_per_sec))
    }

    fn metadata_backend(&self) -> Result<Arc<dyn MetadataBackend>, PipelineError> {
        let fail = Self::fail(Stage::Snap);
        let n = &self.config.network;
        Ok(match self.config.backend {
            BackendMode::Mock => {
                let path = self.config.paths.panoramas.as_ref().ok_or_else(|| fail(&"no panorama fixture configured"))?;
                let text = String::from_utf8(self.external(path)?).map_err(|e| fail(&e))?;
                Arc::new(MockBackend::from_jsonl(&text, n.mock_coverage_m).map_err(|e| fail(&e))?)
            }
            BackendMode::Live => Arc::new(HttpMetadataBackend::new(
                n.metadata_url.clone(),
                self.api_key(Stage::Snap)?,
                Duration::from_secs(n.timeout_s),
            )),
        })
    }

    /// Survey points plus samples every `interpolation_step_m` between them.
    fn query_points(&self, section: &SurveySection) -> Vec<GeoPoint> {
        let step = self.config.snap.interpolation_step_m;
        let mut out = Vec::new();
        for (i, p) in section.points.iter().enumerate() {
            out.push(p.location);
            if let Some(next) = section.points.get(i + 1) {
                let d = haversine_distance(p.location, next.location);
                let n = (d / step).ceil() as usize;
                out.extend((1..n).map(|j| intermediate(p.location, next.location, j as f64 / n as f64)));
            }
        }
        out
    }

    fn snap(&self, inputs: &HashMap<String, Vec<u8>>) -> Result<(Outputs, Value), PipelineError> {
        let fail = Self::fail(Stage::Snap);
        let sections: Vec<SurveySection> = serde_json::from_slice(&inputs[SECTIONS]).map_err(|e| fail(&e))?;
        let n = &self.config.network;
        let cache_dir = self.config.cache_dir();
        let cache = MetadataCache::open(&cache_dir, n.negative_ttl_hours.map(|h| Duration::from_secs(h * 3600)))
            .map_err(|source| PipelineError::Io { path: cache_dir, source })?;
        let fetcher = MetadataFetcher::new(self.metadata_backend()?)
            .with_cache(cache)
            .with_retry(n.retry)
            .with_limiter(self.limiter())
            .with_workers(n.workers);

        let points: Vec<GeoPoint> = sections.iter().flat_map(|s| self.query_points(s)).collect();
        let mut records: Vec<PanoramaRecord> = Vec::new();
        let mut failed = 0usize;
        let mut empty = 0usize;
        for (point, result) in points.iter().zip(fetcher.fetch_many(&points)) {
            match result {
                Ok(Some(r)) => records.push(r),
                Ok(None) => empty += 1,
                Err(e) if e.is_terminal() => return Err(fail(&e)),
                Err(e) => {
                    warn!("metadata lookup at {:.6},{:.6} failed: {e}", point.lat(), point.lon());
                    failed += 1;
                }
            }
        }
        records.sort_by(|a, b| a.pano_id.cmp(&b.pano_id));
        let index = PanoIndex::from_unique(records).map_err(|e| fail(&e))?;

        let snaps: Vec<SectionSnaps> = sections
            .iter()
            .map(|s| SectionSnaps {
                section_id: s.section_id.clone(),
                results: snap_section(s, &index, &self.config.snap),
            })
            .collect();
        let total: usize = snaps.iter().map(|s| s.results.len()).sum();
        let accepted: usize = snaps.iter().flat_map(|s| &s.results).filter(|r| r.accepted).count();
        let summary = json!({
            "lookups": points.len(),
            "lookups_failed": failed,
            "lookups_without_panorama": empty,
            "panoramas": index.len(),
            "survey_points": total,
            "accepted": accepted,
            "rejected": total - accepted,
        });
        Ok((
            vec![
                (PANORAMAS.into(), jsonl(index.records())),
                (SNAPS.into(), pretty(&snaps)),
                (SNAPS_GEOJSON.into(), snaps_geojson(&snaps)),
            ],
            summary,
        ))
    }

    fn plan(&self, inputs: &HashMap<String, Vec<u8>>) -> Result<(Outputs, Value), PipelineError> {
        let fail = Self::fail(Stage::Plan);
        let sections: Vec<SurveySection> = serde_json::from_slice(&inputs[SECTIONS]).map_err(|e| fail(&e))?;
        let snaps: Vec<SectionSnaps> = serde_json::from_slice(&inputs[SNAPS]).map_err(|e| fail(&e))?;
        let text = std::str::from_utf8(&inputs[PANORAMAS]).map_err(|e| fail(&e))?;
        let index = PanoIndex::new(read_records_jsonl(text).map_err(|e| fail(&e))?).map_err(|e| fail(&e))?;
        let by_id: HashMap<&str, &SectionSnaps> = snaps.iter().map(|s| (s.section_id.as_str(), s)).collect();

        // requests stay per section so curation can see cross-section duplicates
        let mut all = ExtractionPlan::default();
        let mut without_chain = 0;
        for section in &sections {
            let snap = by_id
                .get(section.section_id.as_str())
                .ok_or_else(|| fail(&format!("no snap results for section {}", section.section_id)))?;
            let sp = plan_section(
                section,
                &snap.results,
                &index,
                self.config.scheme,
                &self.config.extraction,
                &self.config.snap,
            )
            .map_err(|e| fail(&format!("section {}: {e}", section.section_id)))?;
            if sp.chain.len() < 2 {
                warn!("section {}: fewer than 2 panoramas, nothing planned", section.section_id);
                without_chain += 1;
            }
            all.requests.extend(sp.plan.requests);
            all.skipped.extend(sp.plan.skipped);
        }
        let planned = all.requests.len();
        let requests = match self.config.filter.criteria() {
            Some(c) => apply_filters(all.requests, &c).map_err(|e| fail(&e))?,
            None => all.requests,
        };
        let summary = PlanSummary {
            sections: sections.len(),
            sections_without_chain: without_chain,
            planned,
            filtered: requests.len(),
            skipped_verges: all.skipped.len(),
        };
        let artifact = PlanArtifact {
            summary,
            requests,
            skipped: all.skipped,
        };
        Ok((vec![(PLAN.into(), pretty(&artifact))], serde_json::to_value(summary).expect("summary")))
    }

    fn curate(&self, inputs: &HashMap<String, Vec<u8>>) -> Result<(Outputs, Value), PipelineError> {
        let fail = Self::fail(Stage::Curate);
        let plan: PlanArtifact = serde_json::from_slice(&inputs[PLAN]).map_err(|e| fail(&e))?;
        let mut manifest = DatasetManifest::from_requests(&plan.requests, self.config.scheme, self.config.seed);
        let duplicates = if self.config.curation.dedup { manifest.dedup() } else { 0 };
        let after_dedup = manifest.counts().active;
        let purged = match &self.config.paths.purge_list {
            Some(path) => {
                let list = PurgeList::from_csv(inputs[&path.display().to_string()].as_slice()).map_err(|e| fail(&e))?;
                manifest.apply_purge(&list).map_err(|e| fail(&e))?
            }
            None => 0,
        };
        let counts = manifest.counts();
        let summary = json!({
            "planned": counts.total,
            "duplicates": duplicates,
            "active_after_dedup": after_dedup,
            "purged": purged,
            "active": counts.active,
            "class_counts": manifest.class_counts(),
        });
        Ok((
            vec![
                (CURATED_MANIFEST.into(), manifest.to_jsonl()),
                (CURATION_SUMMARY.into(), pretty(&summary)),
            ],
            summary,
        ))
    }

    fn split(&self, inputs: &HashMap<String, Vec<u8>>) -> Result<(Outputs, Value), PipelineError> {
        let fail = Self::fail(Stage::Split);
        let mut manifest = DatasetManifest::read_jsonl(inputs[CURATED_MANIFEST].as_slice()).map_err(|e| fail(&e))?;
        let c = &self.config.curation;
        split(&mut manifest, c.split, self.config.seed, c.group_by_pano).map_err(|e| fail(&e))?;
        make_folds(&mut manifest, c.folds, self.config.seed, c.group_by_pano).map_err(|e| fail(&e))?;
        let extra = oversample_plan(&manifest, Split::Train, None).map_err(|e| fail(&e))?;

        let mut oversample = String::from("sample_id,extra_copies\n");
        for (id, reps) in &extra {
            oversample.push_str(&format!("{id},{reps}\n"));
        }
        let mut per_split: BTreeMap<Split, BTreeMap<u8, usize>> = BTreeMap::new();
        let mut per_fold: BTreeMap<u8, usize> = BTreeMap::new();
        for s in manifest.active() {
            if let Some(sp) = s.split {
                *per_split.entry(sp).or_default().entry(s.label).or_default() += 1;
            }
            if let Some(f) = s.fold {
                *per_fold.entry(f).or_default() += 1;
            }
        }
        let summary = json!({
            "class_counts": per_split,
            "fold_sizes": per_fold,
            "oversampled_train_copies": extra.iter().map(|(_, r)| *r as usize).sum::<usize>(),
        });
        Ok((
            vec![
                (SPLIT_MANIFEST.into(), manifest.to_jsonl()),
                (OVERSAMPLE.into(), oversample.into_bytes()),
                (MANIFEST_GEOJSON.into(), manifest_geojson(&manifest)),
                (SPLIT_SUMMARY.into(), pretty(&summary)),
            ],
            summary,
        ))
    }

    fn fetch(&self, inputs: &HashMap<String, Vec<u8>>) -> Result<(Outputs, Value), PipelineError> {
        let fail = Self::fail(Stage::Fetch);
        let mut manifest = DatasetManifest::read_jsonl(inputs[SPLIT_MANIFEST].as_slice()).map_err(|e| fail(&e))?;
        let n = &self.config.network;
        let backend: Box<dyn ImageBackend> = match self.config.backend {
            BackendMode::Mock => Box::new(MockImageBackend::labelled(
                manifest.samples.iter().map(|s| (s.identity_key.clone(), s.label)).collect(),
            )),
            BackendMode::Live => Box::new(HttpImageBackend::new(
                n.image_url.clone(),
                self.api_key(Stage::Fetch)?,
                Duration::from_secs(n.timeout_s),
            )),
        };
        let result = download_images(&mut manifest, backend.as_ref(), self.output_dir(), &n.retry, &self.limiter(), n.workers);
        let summary = match result {
            Ok(s) => s,
            Err(e) => {
                // keep what was fetched so a re-run resumes, but leave no stamp
                write_atomic(&self.output_dir().join(MANIFEST), &manifest.to_jsonl())?;
                return Err(fail(&e));
            }
        };
        let summary = json!({
            "fetched": summary.fetched,
            "cached": summary.cached,
            "failed": summary.failed,
        });
        Ok((
            vec![(MANIFEST.into(), manifest.to_jsonl()), (FETCH_SUMMARY.into(), pretty(&summary))],
            summary,
        ))
    }

    fn evaluate(&self, inputs: &HashMap<String, Vec<u8>>) -> Result<(Outputs, Value), PipelineError> {
        let fail = Self::fail(Stage::Evaluate);
        let manifest = DatasetManifest::read_jsonl(inputs[MANIFEST].as_slice()).map_err(|e| fail(&e))?;
        let ev = &self.config.evaluate;
        let mut outputs: Outputs = Vec::new();
        let rows = match (&self.config.paths.predictions, self.config.backend) {
            (Some(path), _) => read_predictions(inputs[&path.display().to_string()].as_slice())
                .map_err(|e| fail(&format!("{}: {e}", path.display())))?,
            (None, BackendMode::Mock) => {
                let rows = mock_predictions(&manifest, ev.split, ev.mock_accuracy, self.config.seed);
                let mut buf = Vec::new();
                write_predictions(&rows, &mut buf).map_err(|e| fail(&e))?;
                outputs.push((PREDICTIONS.into(), buf));
                rows
            }
            (None, BackendMode::Live) => return Err(fail(&"no predictions file configured (paths.predictions)")),
        };
        let labels: HashMap<&str, u8> = manifest.active().map(|s| (s.sample_id.as_str(), s.label)).collect();
        for r in &rows {
            match labels.get(r.sample_id.as_str()) {
                None => return Err(fail(&format!("prediction for unknown or inactive sample {}", r.sample_id))),
                Some(&l) if l != r.true_class => {
                    return Err(fail(&format!(
                        "sample {}: true_class {} disagrees with manifest label {l}",
                        r.sample_id, r.true_class
                    )))
                }
                _ => {}
            }
        }
        let k = manifest.header.scheme.num_classes() as usize;
        let y_true: Vec<u8> = rows.iter().map(|r| r.true_class).collect();
        let y_pred: Vec<u8> = rows.iter().map(|r| r.pred_class).collect();
        let cm = confusion(&y_true, &y_pred, k).map_err(|e| fail(&e))?;
        let names = manifest.header.scheme.class_names();
        let rep = report(&cm, ev.kappa, Some(&names)).map_err(|e| fail(&e))?;
        for f in &ev.formats {
            outputs.push((report_file(*f).into(), export_report(&rep, *f)));
        }
        if rows.iter().all(|r| !r.scores.is_empty()) {
            let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.scores.clone()).collect();
            let curves = pr_points(&y_true, &scores, k).map_err(|e| fail(&e))?;
            outputs.push((PR_CURVES.into(), pretty(&curves)));
        }
        let summary = json!({
            "predictions": rows.len(),
            "overall_accuracy_pct": rep.overall_accuracy_pct,
            "macro_f1": rep.macro_avg.f1,
            "weighted_f1": rep.weighted_avg.f1,
            "kappa": rep.kappa,
        });
        Ok((outputs, summary))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{SyntheticWorld, WorldSpec};

    fn world_config(dir: &Path) -> RunConfig {
        let world = SyntheticWorld::generate(WorldSpec::default());
        world.write_to(dir).unwrap();
        let mut cfg = RunConfig::from_toml(&RunConfig::synthetic_example()).unwrap();
        cfg.resolve_paths(dir);
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn synthetic_world_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = world_config(dir.path());
        let expected = SyntheticWorld::generate(WorldSpec::default()).expected;
        let p = Pipeline::new(cfg);
        let out = p.run_all().unwrap();
        assert!(out.iter().all(|o| !o.reused));
        assert_eq!(out[0].summary["sections"], expected.sections);
        assert_eq!(out[0].summary["diagnostics"], expected.diagnostics);
        assert_eq!(out[2].summary["planned"], expected.planned);
        assert_eq!(out[2].summary["filtered"], expected.filtered);
        assert_eq!(out[3].summary["duplicates"], expected.duplicates);
        assert_eq!(out[3].summary["purged"], expected.purged);
        assert_eq!(out[3].summary["active"], expected.final_active);
        assert_eq!(out[5].summary["fetched"], expected.final_active);
        for name in [MANIFEST, "report.txt", "report.json", "report.csv", PR_CURVES, MANIFEST_GEOJSON, SNAPS_GEOJSON] {
            assert!(dir.path().join("out").join(name).is_file(), "{name}");
        }
    }

    #[test]
    fn unchanged_rerun_is_noop_and_changes_propagate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = world_config(dir.path());
        let p = Pipeline::new(cfg.clone());
        let first = p.run_all().unwrap();
        let second = p.run_all().unwrap();
        assert!(second.iter().all(|o| o.reused));
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.outputs, b.outputs);
        }

        // a new seed reshuffles the split but leaves upstream stages alone
        let mut reseeded = cfg;
        reseeded.seed = 7;
        let third = Pipeline::new(reseeded).run_all().unwrap();
        assert!(third[..2].iter().all(|o| o.reused));
        assert!(!third[4].reused);
    }

    #[test]
    fn tampered_output_triggers_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(world_config(dir.path()));
        p.run(Stage::Ingest).unwrap();
        let path = dir.path().join("out").join(SECTIONS);
        let good = fs::read(&path).unwrap();
        fs::write(&path, b"[]").unwrap();
        let again = p.run(Stage::Ingest).unwrap();
        assert!(!again.reused);
        assert_eq!(fs::read(&path).unwrap(), good);
    }

    #[test]
    fn missing_predecessor_names_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(world_config(dir.path()));
        let err = p.run(Stage::Plan).unwrap_err();
        assert!(matches!(err, PipelineError::MissingArtifact { stage: Stage::Ingest, .. }), "{err}");
        p.run(Stage::Ingest).unwrap();
        let err = p.run(Stage::Plan).unwrap_err();
        assert!(err.to_string().contains("`snap`"), "{err}");
    }

    #[test]
    fn deleting_downstream_leaves_upstream_intact() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(world_config(dir.path()));
        p.run_all().unwrap();
        let out = dir.path().join("out");
        let curated = fs::read(out.join(CURATED_MANIFEST)).unwrap();
        fs::remove_file(out.join(SPLIT_MANIFEST)).unwrap();
        fs::remove_file(out.join(MANIFEST)).unwrap();
        let again = p.run_all().unwrap();
        assert!(again[..4].iter().all(|o| o.reused));
        assert!(!again[4].reused);
        assert_eq!(fs::read(out.join(CURATED_MANIFEST)).unwrap(), curated);
    }

    #[test]
    fn live_backend_without_credential_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = world_config(dir.path());
        cfg.backend = BackendMode::Live;
        cfg.network.api_key = Some(String::new());
        let p = Pipeline::new(cfg);
        p.run(Stage::Ingest).unwrap();
        if std::env::var(CREDENTIAL_VAR).is_err() {
            let err = p.run(Stage::Snap).unwrap_err();
            assert!(err.to_string().contains(CREDENTIAL_VAR), "{err}");
        }
    }
}
