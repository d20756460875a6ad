use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{CurateError, DatasetManifest, FetchStatus, Sample};
use crate::extract::{IdentityKey, ImageSpec};
use crate::net::{parallel_map, BackendError, RateLimiter, RetryPolicy};
use crate::pano::CREDENTIAL_VAR;

pub const DEFAULT_IMAGE_URL: &str = "https://maps.googleapis.com/maps/api/streetview";

pub trait ImageBackend: Send + Sync {
    fn fetch_image(&self, spec: &ImageSpec) -> Result<Vec<u8>, BackendError>;
    /// File extension for stored images.
    fn extension(&self) -> &str;
}

impl Sample {
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

/// Relative storage path for an image: `images/<h0h1>/<sha256 of key>.<ext>`.
pub fn image_path_for(key: &IdentityKey, extension: &str) -> String {
    let hash = hex::encode(Sha256::digest(key.to_string().as_bytes()));
    format!("images/{}/{}.{}", &hash[..2], hash, extension)
}

const MOCK_SIDE: usize = 16;

/// Offline backend producing small deterministic PPM images.
///
/// Without labels each image gets a colour hashed from its identity key. With
/// labels, the colour encodes the class and the hash only adds mild noise, so
/// a classifier trained on the output has a learnable signal.
#[derive(Debug, Default)]
pub struct MockImageBackend {
    labels: HashMap<IdentityKey, u8>,
    failing: Mutex<HashMap<IdentityKey, usize>>,
    calls: AtomicUsize,
}

const CLASS_COLOURS: [[u8; 3]; 5] = [[200, 40, 40], [40, 200, 40], [40, 40, 200], [200, 200, 40], [200, 40, 200]];

impl MockImageBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn labelled(labels: HashMap<IdentityKey, u8>) -> Self {
        MockImageBackend {
            labels,
            ..Self::default()
        }
    }

    /// The next `times` fetches of `key` fail with a network error.
    pub fn fail(&self, key: IdentityKey, times: usize) {
        self.failing.lock().unwrap().insert(key, times);
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn render(&self, key: &IdentityKey) -> Vec<u8> {
        let hash = Sha256::digest(key.to_string().as_bytes());
        let base = match self.labels.get(key) {
            Some(l) => CLASS_COLOURS[(*l as usize).saturating_sub(1) % CLASS_COLOURS.len()],
            None => [hash[0], hash[1], hash[2]],
        };
        let mut out = format!("P6\n{MOCK_SIDE} {MOCK_SIDE}\n255\n").into_bytes();
        for i in 0..MOCK_SIDE * MOCK_SIDE {
            let jitter = hash[i % hash.len()] % 32;
            for c in base {
                out.push(c.saturating_add(jitter));
            }
        }
        out
    }
}

impl ImageBackend for MockImageBackend {
    fn fetch_image(&self, spec: &ImageSpec) -> Result<Vec<u8>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = spec.identity_key();
        if let Some(left) = self.failing.lock().unwrap().get_mut(&key) {
            if *left > 0 {
                *left -= 1;
                return Err(BackendError::Network(format!("injected failure for {key}")));
            }
        }
        Ok(self.render(&key))
    }

    fn extension(&self) -> &str {
        "ppm"
    }
}

pub struct HttpImageBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
}

impl HttpImageBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpImageBackend {
            agent,
            base_url: base_url.into(),
            api_key: api_key.into(),
        }
    }

    pub fn request_url(&self, spec: &ImageSpec) -> String {
        format!("{}?{}", self.base_url, spec.static_query(&self.api_key))
    }
}

impl ImageBackend for HttpImageBackend {
    fn fetch_image(&self, spec: &ImageSpec) -> Result<Vec<u8>, BackendError> {
        let mut resp = self
            .agent
            .get(&self.request_url(spec))
            .call()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let is_image = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.starts_with("image/"));
        let body = resp
            .body_mut()
            .with_config()
            .limit(20 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        match status {
            200..=299 if is_image => Ok(body),
            401 | 403 => Err(BackendError::Auth {
                credential_var: CREDENTIAL_VAR.into(),
                detail: format!("HTTP {status}"),
            }),
            429 => Err(BackendError::Quota {
                credential_var: CREDENTIAL_VAR.into(),
                detail: "HTTP 429".into(),
            }),
            500..=599 => Err(BackendError::Network(format!("HTTP {status}"))),
            _ => Err(BackendError::malformed(&String::from_utf8_lossy(&body))),
        }
    }

    fn extension(&self) -> &str {
        "jpg"
    }
}

/// Per-sample outcome counts; samples sharing an identity key cost one fetch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DownloadSummary {
    pub fetched: usize,
    pub cached: usize,
    pub failed: usize,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("part");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// Fetches an image for every Active sample that has none stored under `root`.
///
/// A per-image failure marks that sample `Failed` and the batch carries on.
/// Credential or quota errors stop the batch: results gathered so far are
/// recorded in the manifest and the error is returned.
pub fn download_images(
    manifest: &mut DatasetManifest,
    backend: &dyn ImageBackend,
    root: &Path,
    retry: &RetryPolicy,
    limiter: &RateLimiter,
    workers: usize,
) -> Result<DownloadSummary, CurateError> {
    let mut summary = DownloadSummary::default();
    // one fetch per identity key; samples sharing a key share the file
    let mut pending: Vec<(ImageSpec, String)> = Vec::new();
    let mut waiting: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter_mut().enumerate() {
        if !s.is_active() {
            continue;
        }
        let rel = image_path_for(&s.identity_key, backend.extension());
        if root.join(&rel).is_file() {
            s.image_path = Some(rel);
            s.fetch = FetchStatus::Fetched;
            s.fetch_error = None;
            summary.cached += 1;
            continue;
        }
        let slot = waiting.entry(rel.clone()).or_default();
        if slot.is_empty() {
            pending.push((s.spec(), rel));
        }
        slot.push(i);
    }

    let results = parallel_map(&pending, workers, |(spec, rel)| {
        let bytes = retry.run(|| {
            limiter.acquire();
            backend.fetch_image(spec)
        })?;
        let path: PathBuf = root.join(rel);
        write_atomic(&path, &bytes).map_err(|e| BackendError::Network(format!("writing {}: {e}", path.display())))
    });

    let mut terminal = None;
    for ((_, rel), result) in pending.into_iter().zip(results) {
        for &i in &waiting[&rel] {
            let s = &mut manifest.samples[i];
            match &result {
                Ok(()) => {
                    s.image_path = Some(rel.clone());
                    s.fetch = FetchStatus::Fetched;
                    s.fetch_error = None;
                    summary.fetched += 1;
                }
                Err(e) => {
                    s.fetch = FetchStatus::Failed;
                    s.fetch_error = Some(e.to_string());
                    summary.failed += 1;
                }
            }
        }
        if let Err(e) = result {
            if e.is_terminal() && terminal.is_none() {
                terminal = Some(e);
            }
        }
    }
    match terminal {
        Some(e) => Err(e.into()),
        None => Ok(summary),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curate::tests::requests;
    use crate::survey::{Locality, Scheme};

    fn manifest(n_panos: usize) -> DatasetManifest {
        let mut reqs = Vec::new();
        for p in 0..n_panos {
            reqs.extend(requests(&format!("P{p}"), "S1", Locality::Wolds, (2009, 7), 5));
        }
        DatasetManifest::from_requests(&reqs, Scheme::FourClass, 0)
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    #[test]
    fn downloads_once_then_uses_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(2);
        let backend = MockImageBackend::new();
        let s = download_images(&mut m, &backend, dir.path(), &fast(), &RateLimiter::unlimited(), 4).unwrap();
        assert_eq!(s, DownloadSummary { fetched: 6, cached: 0, failed: 0 });
        for sample in &m.samples {
            let rel = sample.image_path.as_ref().unwrap();
            let bytes = fs::read(dir.path().join(rel)).unwrap();
            assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
            assert_eq!(sample.fetch, FetchStatus::Fetched);
        }
        let s = download_images(&mut m, &backend, dir.path(), &fast(), &RateLimiter::unlimited(), 4).unwrap();
        assert_eq!(s, DownloadSummary { fetched: 0, cached: 6, failed: 0 });
        assert_eq!(backend.call_count(), 6);
    }

    #[test]
    fn one_failure_does_not_abort() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(4);
        m.samples.truncate(10);
        let backend = MockImageBackend::new();
        backend.fail(m.samples[3].identity_key.clone(), 10);
        backend.fail(m.samples[5].identity_key.clone(), 2);
        let s = download_images(&mut m, &backend, dir.path(), &fast(), &RateLimiter::unlimited(), 3).unwrap();
        assert_eq!(s, DownloadSummary { fetched: 9, cached: 0, failed: 1 });
        assert_eq!(m.samples[3].fetch, FetchStatus::Failed);
        assert!(m.samples[3].fetch_error.as_ref().unwrap().contains("injected"));
        assert!(m.samples[3].image_path.is_none());
    }

    #[test]
    fn paths_are_content_addressed() {
        let m = manifest(1);
        let a = image_path_for(&m.samples[0].identity_key, "ppm");
        assert_eq!(a, image_path_for(&m.samples[0].identity_key, "ppm"));
        assert_ne!(a, image_path_for(&m.samples[1].identity_key, "ppm"));
        assert!(a.starts_with("images/") && a.ends_with(".ppm") && a.len() == "images/xx/.ppm".len() + 64);
    }

    #[test]
    fn labelled_mock_encodes_class() {
        let m = manifest(1);
        let labels = m.samples.iter().map(|s| (s.identity_key.clone(), 3)).collect();
        let b = MockImageBackend::labelled(labels);
        let img = b.fetch_image(&m.samples[0].spec()).unwrap();
        let px = &img[img.len() - 3..];
        assert!(px[2] > px[0] && px[2] > px[1]);
    }
}
