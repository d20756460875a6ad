use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;

use super::{read_records_jsonl, CaptureDate, PanoIndex, PanoramaRecord};
use crate::geodesy::GeoPoint;
use crate::net::BackendError;

/// Environment variable holding the street-view API credential.
pub const CREDENTIAL_VAR: &str = "SV_API_KEY";

/// Source of "nearest panorama to this point" answers.
pub trait MetadataBackend: Send + Sync {
    fn lookup(&self, point: GeoPoint) -> Result<Option<PanoramaRecord>, BackendError>;
}

/// File-backed backend answering from a JSON-lines panorama fixture.
#[derive(Debug)]
pub struct MockBackend {
    index: PanoIndex,
    coverage_m: f64,
    calls: AtomicUsize,
    injected: Mutex<VecDeque<BackendError>>,
}

impl MockBackend {
    /// Panoramas further than `coverage_m` from a query are not returned.
    pub fn new(records: Vec<PanoramaRecord>, coverage_m: f64) -> Result<Self, super::PanoError> {
        Ok(MockBackend {
            index: PanoIndex::new(records)?,
            coverage_m,
            calls: AtomicUsize::new(0),
            injected: Mutex::new(VecDeque::new()),
        })
    }

    pub fn from_jsonl(text: &str, coverage_m: f64) -> Result<Self, BackendError> {
        let records = read_records_jsonl(text).map_err(|e| BackendError::malformed(&e.to_string()))?;
        Self::new(records, coverage_m).map_err(|e| BackendError::malformed(&e.to_string()))
    }

    /// Number of lookups served, including failed ones.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Makes the next lookups fail with `errors`, in order.
    pub fn inject_failures(&self, errors: impl IntoIterator<Item = BackendError>) {
        self.injected.lock().unwrap().extend(errors);
    }

    pub fn index(&self) -> &PanoIndex {
        &self.index
    }
}

impl MetadataBackend for MockBackend {
    fn lookup(&self, point: GeoPoint) -> Result<Option<PanoramaRecord>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(e) = self.injected.lock().unwrap().pop_front() {
            return Err(e);
        }
        Ok(self
            .index
            .within(point, self.coverage_m)
            .first()
            .map(|(r, _)| (*r).clone()))
    }
}

/// Client for the street-view metadata endpoint.
pub struct HttpMetadataBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
}

pub const DEFAULT_METADATA_URL: &str = "https://maps.googleapis.com/maps/api/streetview/metadata";

#[derive(Deserialize)]
struct MetadataResponse {
    status: String,
    pano_id: Option<String>,
    location: Option<LatLng>,
    date: Option<String>,
    #[serde(default)]
    neighbours: Vec<String>,
}

#[derive(Deserialize)]
struct LatLng {
    lat: f64,
    lng: f64,
}

impl HttpMetadataBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpMetadataBackend {
            agent,
            base_url: base_url.into(),
            api_key: api_key.into(),
        }
    }

    /// Reads the credential from [`CREDENTIAL_VAR`].
    pub fn from_env(base_url: impl Into<String>, timeout: Duration) -> Result<Self, BackendError> {
        let key = std::env::var(CREDENTIAL_VAR).map_err(|_| BackendError::Auth {
            credential_var: CREDENTIAL_VAR.into(),
            detail: "variable not set".into(),
        })?;
        Ok(Self::new(base_url, key, timeout))
    }

    pub fn request_url(&self, point: GeoPoint) -> String {
        format!(
            "{}?location={:.6},{:.6}&key={}",
            self.base_url,
            point.lat(),
            point.lon(),
            self.api_key
        )
    }
}

/// Maps an HTTP status and body from the metadata endpoint to a lookup result.
pub(crate) fn interpret_metadata(status: u16, body: &str) -> Result<Option<PanoramaRecord>, BackendError> {
    let auth = |detail: String| BackendError::Auth {
        credential_var: CREDENTIAL_VAR.into(),
        detail,
    };
    match status {
        401 | 403 => return Err(auth(format!("HTTP {status}"))),
        429 => {
            return Err(BackendError::Quota {
                credential_var: CREDENTIAL_VAR.into(),
                detail: "HTTP 429".into(),
            })
        }
        500..=599 => return Err(BackendError::Network(format!("HTTP {status}"))),
        200..=299 => {}
        _ => return Err(BackendError::malformed(&format!("HTTP {status}: {body}"))),
    }
    let resp: MetadataResponse = serde_json::from_str(body).map_err(|_| BackendError::malformed(body))?;
    match resp.status.as_str() {
        "OK" => {}
        "ZERO_RESULTS" | "NOT_FOUND" => return Ok(None),
        "REQUEST_DENIED" => return Err(auth(resp.status)),
        "OVER_QUERY_LIMIT" => {
            return Err(BackendError::Quota {
                credential_var: CREDENTIAL_VAR.into(),
                detail: resp.status,
            })
        }
        "UNKNOWN_ERROR" => return Err(BackendError::Network(resp.status)),
        _ => return Err(BackendError::malformed(body)),
    }
    let (Some(pano_id), Some(loc), Some(date)) = (resp.pano_id, resp.location, resp.date) else {
        return Err(BackendError::malformed(body));
    };
    let location = GeoPoint::new(loc.lat, loc.lng).map_err(|_| BackendError::malformed(body))?;
    let capture_date = parse_date(&date).ok_or_else(|| BackendError::malformed(body))?;
    if pano_id.is_empty() {
        return Err(BackendError::malformed(body));
    }
    Ok(Some(PanoramaRecord {
        pano_id,
        location,
        capture_date,
        neighbours: resp.neighbours,
    }))
}

fn parse_date(s: &str) -> Option<CaptureDate> {
    let (y, m) = s.split_once('-')?;
    let m = m.split('-').next()?;
    CaptureDate::new(y.parse().ok()?, m.parse().ok()?).ok()
}

impl MetadataBackend for HttpMetadataBackend {
    fn lookup(&self, point: GeoPoint) -> Result<Option<PanoramaRecord>, BackendError> {
        let mut resp = self
            .agent
            .get(&self.request_url(point))
            .call()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        interpret_metadata(status, &body)
    }
}
