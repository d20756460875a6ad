use std::sync::Arc;

use super::{MetadataBackend, MetadataCache, PanoramaRecord};
use crate::geodesy::GeoPoint;
use crate::net::{parallel_map, BackendError, RateLimiter, RetryPolicy};

/// Cache-first metadata client with retries, rate limiting and a worker pool.
pub struct MetadataFetcher {
    backend: Arc<dyn MetadataBackend>,
    cache: Option<MetadataCache>,
    retry: RetryPolicy,
    limiter: Arc<RateLimiter>,
    workers: usize,
}

impl MetadataFetcher {
    pub fn new(backend: Arc<dyn MetadataBackend>) -> Self {
        MetadataFetcher {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            limiter: Arc::new(RateLimiter::new(10.0)),
            workers: 4,
        }
    }

    pub fn with_cache(mut self, cache: MetadataCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_limiter(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn fetch(&self, point: GeoPoint) -> Result<Option<PanoramaRecord>, BackendError> {
        fetch_metadata(point, self.backend.as_ref(), self.cache.as_ref(), &self.retry, &self.limiter)
    }

    /// Fetches many points concurrently; results are in input order.
    pub fn fetch_many(&self, points: &[GeoPoint]) -> Vec<Result<Option<PanoramaRecord>, BackendError>> {
        parallel_map(points, self.workers, |p| self.fetch(*p))
    }
}

/// Nearest panorama to `point`, served from `cache` when present.
///
/// Network failures are retried per `retry`; every successful answer, including
/// "no panorama", is written back to the cache.
pub fn fetch_metadata(
    point: GeoPoint,
    backend: &dyn MetadataBackend,
    cache: Option<&MetadataCache>,
    retry: &RetryPolicy,
    limiter: &RateLimiter,
) -> Result<Option<PanoramaRecord>, BackendError> {
    let cache_err = |e: std::io::Error| BackendError::Network(format!("cache: {e}"));
    if let Some(cache) = cache {
        if let Some(hit) = cache.get(point).map_err(cache_err)? {
            return Ok(hit);
        }
    }
    let answer = retry.run(|| {
        limiter.acquire();
        backend.lookup(point)
    })?;
    if let Some(cache) = cache {
        cache.put(point, answer.as_ref()).map_err(cache_err)?;
    }
    Ok(answer)
}
