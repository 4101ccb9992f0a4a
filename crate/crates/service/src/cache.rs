//! Least-recently-used store of fused full-slice features.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use dualarb::geometry::RefMode;
use dualarb::model::Prepared;
use dualarb::Result;
use lru::LruCache;
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FeatureCacheKey {
    pub volume_id: String,
    pub slice_id: String,
    /// Scale in units of `1 / SCALE_STEPS`.
    pub scale_steps: u32,
    pub ref_mode: RefMode,
    pub checkpoint: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub capacity: usize,
    pub hits: u64,
    pub misses: u64,
}

pub struct FeatureCache {
    inner: Mutex<LruCache<FeatureCacheKey, Arc<Prepared<f32>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl FeatureCache {
    pub fn new(capacity: usize) -> Self {
        FeatureCache {
            inner: Mutex::new(LruCache::new(NonZeroUsize::new(capacity.max(1)).unwrap())),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Returns the cached entry or computes it without holding the lock.
    /// Entries are never replaced: if two misses race, the first insert wins.
    pub fn get_or_compute(
        &self,
        key: &FeatureCacheKey,
        compute: impl FnOnce() -> Result<Prepared<f32>>,
    ) -> Result<(Arc<Prepared<f32>>, bool)> {
        if let Some(p) = self.inner.lock().unwrap().get(key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok((p.clone(), true));
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let fresh = Arc::new(compute()?);
        let mut guard = self.inner.lock().unwrap();
        let kept = guard.get_or_insert(key.clone(), || fresh).clone();
        Ok((kept, false))
    }

    pub fn stats(&self) -> CacheStats {
        let guard = self.inner.lock().unwrap();
        CacheStats {
            entries: guard.len(),
            capacity: guard.cap().get(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}
