use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use vergepipe_core::curate::{HttpImageBackend, ImageBackend};
use vergepipe_core::extract::ImageSpec;
use vergepipe_core::geodesy::{destination, Bearing, GeoPoint, EARTH_RADIUS_M};
use vergepipe_core::net::{BackendError, RateLimiter, RetryPolicy};
use vergepipe_core::pano::{
    snap_point, HttpMetadataBackend, MetadataBackend, MetadataCache, MetadataFetcher, MockBackend, PanoramaRecord,
    SnapConfig,
};

fn no_wait() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 0,
        max_delay_ms: 0,
    }
}

/// Central angle from Earth-centred unit vectors.
fn vector_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let v = |p: GeoPoint| {
        let (la, lo) = (p.lat().to_radians(), p.lon().to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    };
    let (u, w) = (v(a), v(b));
    let c = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
    let s = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    EARTH_RADIUS_M * s.atan2(u[0] * w[0] + u[1] * w[1] + u[2] * w[2])
}

#[test]
fn mock_fixture_pano_at_known_offset() {
    let query = GeoPoint::new(53.3, -0.2).unwrap();
    let at = destination(query, Bearing::new(63.0), 12.3);
    let fixture = format!(
        "{{\"pano_id\":\"P001\",\"lat\":{},\"lon\":{},\"year\":2009,\"month\":6}}\n",
        at.lat(),
        at.lon()
    );
    let mock = MockBackend::from_jsonl(&fixture, 50.0).unwrap();
    let pano = mock.lookup(query).unwrap().expect("covered");
    assert_eq!(pano.pano_id, "P001");
    let snap = snap_point(query, Some(&pano), &SnapConfig::default());
    assert!(snap.accepted);
    let d = snap.distance_m.unwrap();
    assert!((d - vector_distance(query, pano.location)).abs() < 1e-6, "{d}");
    assert!((d - 12.3).abs() < 1e-6, "{d}");
}

#[test]
fn no_coverage_is_cached_as_negative() {
    let dir = tempfile::tempdir().unwrap();
    let mock = Arc::new(MockBackend::new(Vec::new(), 50.0).unwrap());
    let fetcher = MetadataFetcher::new(mock.clone())
        .with_cache(MetadataCache::open(dir.path(), None).unwrap())
        .with_limiter(Arc::new(RateLimiter::unlimited()));
    let p = GeoPoint::new(53.3, -0.2).unwrap();
    assert_eq!(fetcher.fetch(p).unwrap(), None);
    assert_eq!(fetcher.fetch(p).unwrap(), None);
    assert_eq!(mock.call_count(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cache_round_trip(points in prop::collection::vec((53.0f64..53.6, -0.6f64..0.0), 1..12)) {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<PanoramaRecord> = points
            .iter()
            .enumerate()
            .map(|(i, (lat, lon))| PanoramaRecord {
                pano_id: format!("P{i:03}"),
                location: GeoPoint::new(*lat, *lon).unwrap(),
                capture_date: vergepipe_core::pano::CaptureDate::new(2021, 7).unwrap(),
                neighbours: Vec::new(),
            })
            .collect();
        let mock = Arc::new(MockBackend::new(records, 30.0).unwrap());
        let queries: Vec<GeoPoint> = points.iter().map(|(lat, lon)| GeoPoint::new(lat + 5e-5, *lon).unwrap()).collect();
        let fetcher = MetadataFetcher::new(mock.clone())
            .with_cache(MetadataCache::open(dir.path(), None).unwrap())
            .with_limiter(Arc::new(RateLimiter::unlimited()));
        let first = fetcher.fetch_many(&queries);
        let calls = mock.call_count();
        prop_assert_eq!(calls, queries.len());

        // a fresh cache handle on the same directory serves everything
        let reopened = MetadataFetcher::new(mock.clone())
            .with_cache(MetadataCache::open(dir.path(), None).unwrap())
            .with_limiter(Arc::new(RateLimiter::unlimited()));
        let second = reopened.fetch_many(&queries);
        prop_assert_eq!(mock.call_count(), calls);
        prop_assert_eq!(first, second);
    }
}

/// Serves `responses` in order, one connection each, and returns the request lines.
fn serve(responses: Vec<String>) -> (String, thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut seen = Vec::new();
        for resp in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            seen.push(line.trim_end().to_string());
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h == "\r\n" || h.is_empty() {
                    break;
                }
            }
            stream.write_all(resp.as_bytes()).unwrap();
        }
        seen
    });
    (url, handle)
}

fn http(status: &str, content_type: &str, body: &str) -> String {
    format!(
        "HTTP/1.1 {status}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
}

#[test]
fn http_metadata_backend_against_local_server() {
    let ok = r#"{"status":"OK","pano_id":"abc","location":{"lat":53.30001,"lng":-0.20002},"date":"2021-07"}"#;
    let (url, server) = serve(vec![
        http("200 OK", "application/json", ok),
        http("200 OK", "application/json", r#"{"status":"ZERO_RESULTS"}"#),
        http("503 Service Unavailable", "text/plain", "busy"),
        http("200 OK", "application/json", ok),
        http("403 Forbidden", "text/plain", "no"),
    ]);
    let backend = Arc::new(HttpMetadataBackend::new(format!("{url}/meta"), "k3y", Duration::from_secs(5)));
    let fetcher = MetadataFetcher::new(backend)
        .with_retry(no_wait())
        .with_limiter(Arc::new(RateLimiter::unlimited()))
        .with_workers(1);
    let p = GeoPoint::new(53.3, -0.2).unwrap();

    let rec = fetcher.fetch(p).unwrap().unwrap();
    assert_eq!(rec.pano_id, "abc");
    assert_eq!((rec.capture_date.year, rec.capture_date.month), (2021, 7));
    assert_eq!(fetcher.fetch(p).unwrap(), None);
    // the 503 is retried and the next answer used
    assert_eq!(fetcher.fetch(p).unwrap().unwrap().pano_id, "abc");
    let err = fetcher.fetch(p).unwrap_err();
    assert!(matches!(err, BackendError::Auth { .. }), "{err}");
    assert!(err.is_terminal());

    let lines = server.join().unwrap();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "GET /meta?location=53.300000,-0.200000&key=k3y HTTP/1.1");
}

#[test]
fn http_image_backend_against_local_server() {
    let (url, server) = serve(vec![
        http("200 OK", "image/jpeg", "JPEGDATA"),
        http("200 OK", "application/json", r#"{"error":"nope"}"#),
        http("429 Too Many Requests", "text/plain", ""),
    ]);
    let backend = HttpImageBackend::new(format!("{url}/img"), "k", Duration::from_secs(5));
    let spec = ImageSpec {
        pano_id: "abc".into(),
        heading: Bearing::new(90.0),
        fov: 45.0,
        pitch: 20.0,
        width: 640,
        height: 640,
    };
    assert_eq!(backend.fetch_image(&spec).unwrap(), b"JPEGDATA");
    assert!(matches!(backend.fetch_image(&spec), Err(BackendError::Malformed { .. })));
    assert!(matches!(backend.fetch_image(&spec), Err(BackendError::Quota { .. })));
    let lines = server.join().unwrap();
    assert_eq!(
        lines[0],
        "GET /img?pano=abc&heading=90.00&fov=45.00&pitch=20.00&size=640x640&key=k HTTP/1.1"
    );
}
