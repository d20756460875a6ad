//! Run configuration: one TOML document with `${VAR}` interpolation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curate::{FilterCriteria, Split, SplitFractions};
use crate::extract::ExtractionParams;
use crate::metrics::{KappaWeighting, ReportFormat};
use crate::net::RetryPolicy;
use crate::pano::{SnapConfig, DEFAULT_METADATA_URL};
use crate::survey::{KmlMapping, Locality, Scheme};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: environment variable {var} is not set")]
    MissingEnv { var: String, line: usize },
    #[error("line {line}: unterminated ${{...}} reference")]
    BadReference { line: usize },
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Live,
    #[default]
    Mock,
}

impl FromStr for BackendMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(BackendMode::Live),
            "mock" => Ok(BackendMode::Mock),
            _ => Err(format!("unknown backend {s:?}, expected live or mock")),
        }
    }
}

impl fmt::Display for BackendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendMode::Live => "live",
            BackendMode::Mock => "mock",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Survey KML files, read in order.
    pub kml: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Metadata cache; defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Panorama fixture served by the mock backend.
    #[serde(default)]
    pub panoramas: Option<PathBuf>,
    /// `sample_id,reason` CSV of images to drop.
    #[serde(default)]
    pub purge_list: Option<PathBuf>,
    /// Classifier output to evaluate; the mock backend generates one when absent.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub enabled: bool,
    pub localities: BTreeSet<Locality>,
    pub years: BTreeSet<u16>,
    pub months: BTreeSet<u8>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            enabled: true,
            localities: [Locality::Wolds, Locality::NorthernEdge].into(),
            years: [2009, 2021].into(),
            months: [6, 7, 8].into(),
        }
    }
}

impl FilterConfig {
    pub fn criteria(&self) -> Option<FilterCriteria> {
        self.enabled.then(|| FilterCriteria {
            localities: self.localities.clone(),
            years: self.years.clone(),
            months: self.months.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub dedup: bool,
    pub split: SplitFractions,
    /// Keep all images of a panorama in one split.
    pub group_by_pano: bool,
    pub folds: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            dedup: true,
            split: SplitFractions::default(),
            group_by_pano: true,
            folds: 5,
        }
    }
}

pub const DEFAULT_IMAGE_URL: &str = crate::curate::DEFAULT_IMAGE_URL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub workers: usize,
    pub rate_per_sec: f64,
    pub timeout_s: u64,
    pub retry: RetryPolicy,
    pub metadata_url: String,
    pub image_url: String,
    /// Falls back to the credential environment variable when unset.
    pub api_key: Option<String>,
    /// How long "no panorama here" answers stay cached; forever when unset.
    pub negative_ttl_hours: Option<u64>,
    /// Mock lookups return nothing beyond this distance.
    pub mock_coverage_m: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            workers: 4,
            rate_per_sec: 10.0,
            timeout_s: 30,
            retry: RetryPolicy::default(),
            metadata_url: DEFAULT_METADATA_URL.into(),
            image_url: DEFAULT_IMAGE_URL.into(),
            api_key: None,
            negative_ttl_hours: None,
            mock_coverage_m: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub kappa: KappaWeighting,
    pub formats: Vec<ReportFormat>,
    pub split: Split,
    /// Hit rate of the stand-in classifier used with the mock backend.
    pub mock_accuracy: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            kappa: KappaWeighting::Quadratic,
            formats: vec![ReportFormat::Text, ReportFormat::Json, ReportFormat::Csv],
            split: Split::Test,
            mock_accuracy: 0.85,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: BackendMode,
    #[serde(default)]
    pub scheme: Scheme,
    pub paths: PathsConfig,
    #[serde(default)]
    pub kml: KmlMapping,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub snap: SnapConfig,
    #[serde(default)]
    pub extraction: ExtractionParams,
    #[serde(default)]
    pub curation: CurationConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

/// Replaces `${NAME}` with the environment variable `NAME`.
pub fn interpolate_env(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let mut rest = line;
        while let Some(start) = rest.find("${") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find('}').ok_or(ConfigError::BadReference { line: i + 1 })?;
            let var = &after[..end];
            let value = lookup(var).ok_or_else(|| ConfigError::MissingEnv {
                var: var.to_string(),
                line: i + 1,
            })?;
            out.push_str(&value);
            rest = &after[end + 1..];
        }
        out.push_str(rest);
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let text = interpolate_env(text, |v| std::env::var(v).ok())?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads, interpolates and validates a config; relative paths are taken
    /// from the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        paths.kml.iter_mut().for_each(fix);
        fix(&mut paths.output_dir);
        for p in [&mut paths.cache_dir, &mut paths.panoramas, &mut paths.purge_list, &mut paths.predictions]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("cache"))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.paths.kml.is_empty() {
            return Err(invalid("paths.kml", "at least one KML file is required"));
        }
        if self.backend == BackendMode::Mock && self.paths.panoramas.is_none() {
            return Err(invalid("paths.panoramas", "the mock backend needs a panorama fixture"));
        }
        if let Some(c) = self.filter.criteria() {
            c.validate().map_err(|e| invalid("filter", e.to_string()))?;
        }
        let s = &self.snap;
        if !(s.threshold_m > 0.0) {
            return Err(invalid("snap.threshold_m", "must be positive"));
        }
        if !(s.interpolation_step_m > 0.0) {
            return Err(invalid("snap.interpolation_step_m", "must be positive"));
        }
        if !(s.spacing_factor > 0.0) {
            return Err(invalid("snap.spacing_factor", "must be positive"));
        }
        self.extraction
            .validate()
            .map_err(|e| invalid("extraction", e.to_string()))?;
        self.curation
            .split
            .validate()
            .map_err(|e| invalid("curation.split", e.to_string()))?;
        if self.curation.folds < 2 {
            return Err(invalid("curation.folds", "must be at least 2"));
        }
        let n = &self.network;
        if n.workers == 0 {
            return Err(invalid("network.workers", "must be at least 1"));
        }
        if !(n.rate_per_sec > 0.0) {
            return Err(invalid("network.rate_per_sec", "must be positive"));
        }
        if n.retry.max_attempts == 0 {
            return Err(invalid("network.retry.max_attempts", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.evaluate.mock_accuracy) {
            return Err(invalid("evaluate.mock_accuracy", "must be within [0, 1]"));
        }
        if self.evaluate.formats.is_empty() {
            return Err(invalid("evaluate.formats", "at least one format is required"));
        }
        Ok(())
    }

    /// Minimal config for a directory written by [`crate::synth::SyntheticWorld::write_to`].
    pub fn synthetic_example() -> String {
        "# Synthetic end-to-end run against the mock backend.\n\
         seed = 0\n\
         backend = \"mock\"\n\
         scheme = \"four_class\"\n\
         \n\
         [paths]\n\
         kml = [\"survey.kml\"]\n\
         panoramas = \"panoramas.jsonl\"\n\
         purge_list = \"purge.csv\"\n\
         output_dir = \"out\"\n\
         \n\
         [filter]\n\
         localities = [\"Wolds\", \"NorthernEdge\"]\n\
         years = [2009, 2021]\n\
         months = [6, 7, 8]\n\
         \n\
         [network]\n\
         rate_per_sec = 1000.0\n\
         \n\
         [network.retry]\n\
         base_delay_ms = 0\n\
         max_delay_ms = 0\n"
            .to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "[paths]\nkml = [\"a.kml\"]\npanoramas = \"p.jsonl\"\noutput_dir = \"out\"\n"
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_toml(minimal()).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.backend, BackendMode::Mock);
        assert_eq!(cfg.snap, SnapConfig::default());
        assert_eq!(cfg.curation.folds, 5);
        assert_eq!(cfg.network.workers, 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let err = RunConfig::from_toml(&format!("{}[snap]\nthreshold = 3\n", minimal())).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("threshold"), "{msg}");
        assert!(msg.contains("line 6"), "{msg}");
        assert!(RunConfig::from_toml(&format!("colour = 1\n{}", minimal())).is_err());
    }

    #[test]
    fn field_level_validation() {
        let mut cfg = RunConfig::from_toml(minimal()).unwrap();
        cfg.extraction.fov = 0.0;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { field, .. }) if field == "extraction"));
        let mut cfg = RunConfig::from_toml(minimal()).unwrap();
        cfg.filter.months.clear();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { field, .. }) if field == "filter"));
        let mut cfg = RunConfig::from_toml(minimal()).unwrap();
        cfg.paths.panoramas = None;
        assert!(cfg.validate().is_err());
        cfg.backend = BackendMode::Live;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn env_interpolation() {
        let env = |v: &str| (v == "KEY").then(|| "s3cret".to_string());
        assert_eq!(interpolate_env("api_key = \"${KEY}\"\n", env).unwrap(), "api_key = \"s3cret\"\n");
        assert!(matches!(
            interpolate_env("a = 1\nb = \"${NOPE}\"\n", env),
            Err(ConfigError::MissingEnv { line: 2, .. })
        ));
        assert!(matches!(interpolate_env("x = \"${KEY\"", env), Err(ConfigError::BadReference { line: 1 })));
    }

    #[test]
    fn relative_paths_resolved() {
        let mut cfg = RunConfig::from_toml(minimal()).unwrap();
        cfg.resolve_paths(Path::new("/data/run"));
        assert_eq!(cfg.paths.kml[0], PathBuf::from("/data/run/a.kml"));
        assert_eq!(cfg.cache_dir(), PathBuf::from("/data/run/out/cache"));
    }

    #[test]
    fn example_parses() {
        let cfg = RunConfig::from_toml(&RunConfig::synthetic_example()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.network.retry.base_delay_ms, 0);
    }
}
