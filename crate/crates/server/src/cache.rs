//! Byte-budgeted LRU cache with single-flight computation.
//!
//! Values are handed out as `Arc`s, so eviction never invalidates a
//! response that is still being written. Concurrent requests for a key that
//! is being computed wait for that one computation instead of starting
//! their own.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::{Arc, Mutex};

/// Anything whose memory footprint can be estimated.
pub trait Weighted {
    fn weight(&self) -> usize;
}

impl Weighted for Vec<u8> {
    fn weight(&self) -> usize {
        self.len()
    }
}

/// Where a value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Memory,
    /// Another request computed it while this one waited.
    Shared,
    Computed,
}

struct Entry<V> {
    value: Arc<V>,
    weight: usize,
    last_used: u64,
}

struct Lru<K, V> {
    entries: HashMap<K, Entry<V>>,
    bytes: usize,
    tick: u64,
}

type Flight<V> = Arc<Mutex<Option<Arc<V>>>>;

pub struct ArtifactCache<K, V> {
    budget: usize,
    lru: Mutex<Lru<K, V>>,
    in_flight: Mutex<HashMap<K, Flight<V>>>,
}

impl<K: Eq + Hash + Clone, V: Weighted> ArtifactCache<K, V> {
    pub fn new(budget_bytes: usize) -> Self {
        Self {
            budget: budget_bytes,
            lru: Mutex::new(Lru {
                entries: HashMap::new(),
                bytes: 0,
                tick: 0,
            }),
            in_flight: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, key: &K) -> Option<Arc<V>> {
        let mut lru = self.lru.lock().unwrap();
        lru.tick += 1;
        let tick = lru.tick;
        lru.entries.get_mut(key).map(|e| {
            e.last_used = tick;
            e.value.clone()
        })
    }

    pub fn insert(&self, key: K, value: Arc<V>) {
        let weight = value.weight();
        if weight > self.budget {
            return;
        }
        let mut lru = self.lru.lock().unwrap();
        lru.tick += 1;
        let tick = lru.tick;
        if let Some(old) = lru.entries.insert(
            key,
            Entry {
                value,
                weight,
                last_used: tick,
            },
        ) {
            lru.bytes -= old.weight;
        }
        lru.bytes += weight;
        while lru.bytes > self.budget {
            let victim = lru
                .entries
                .iter()
                .min_by_key(|(_, e)| e.last_used)
                .map(|(k, _)| k.clone())
                .expect("over budget implies an entry");
            let e = lru.entries.remove(&victim).unwrap();
            lru.bytes -= e.weight;
        }
    }

    pub fn bytes(&self) -> usize {
        self.lru.lock().unwrap().bytes
    }

    pub fn len(&self) -> usize {
        self.lru.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the cached value or computes it once, however many callers
    /// ask concurrently. Failed computations are not cached.
    pub fn get_or_compute<E>(&self, key: &K, compute: impl FnOnce() -> Result<V, E>) -> Result<(Arc<V>, Source), E> {
        if let Some(v) = self.get(key) {
            return Ok((v, Source::Memory));
        }
        let flight = self
            .in_flight
            .lock()
            .unwrap()
            .entry(key.clone())
            .or_insert_with(|| Arc::new(Mutex::new(None)))
            .clone();
        let mut slot = flight.lock().unwrap();
        if let Some(v) = slot.as_ref() {
            return Ok((v.clone(), Source::Shared));
        }
        if let Some(v) = self.get(key) {
            return Ok((v, Source::Memory));
        }
        let result = compute().map(Arc::new);
        if let Ok(v) = &result {
            *slot = Some(v.clone());
            self.insert(key.clone(), v.clone());
        }
        drop(slot);
        self.in_flight.lock().unwrap().remove(key);
        result.map(|v| (v, Source::Computed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn evicts_least_recently_used() {
        let cache: ArtifactCache<u32, Vec<u8>> = ArtifactCache::new(10);
        cache.insert(1, Arc::new(vec![0; 4]));
        cache.insert(2, Arc::new(vec![0; 4]));
        assert!(cache.get(&1).is_some());
        cache.insert(3, Arc::new(vec![0; 4]));
        assert!(cache.get(&2).is_none());
        assert!(cache.get(&1).is_some() && cache.get(&3).is_some());
        assert_eq!(cache.bytes(), 8);
        cache.insert(4, Arc::new(vec![0; 11]));
        assert!(cache.get(&4).is_none());
    }

    #[test]
    fn evicted_values_stay_valid() {
        let cache: ArtifactCache<u32, Vec<u8>> = ArtifactCache::new(4);
        cache.insert(1, Arc::new(vec![7; 4]));
        let held = cache.get(&1).unwrap();
        cache.insert(2, Arc::new(vec![0; 4]));
        assert!(cache.get(&1).is_none());
        assert_eq!(*held, vec![7; 4]);
    }

    #[test]
    fn single_flight() {
        let cache: Arc<ArtifactCache<u32, Vec<u8>>> = Arc::new(ArtifactCache::new(1 << 20));
        let calls = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (cache, calls) = (cache.clone(), calls.clone());
                std::thread::spawn(move || {
                    cache
                        .get_or_compute::<()>(&5, || {
                            calls.fetch_add(1, Ordering::SeqCst);
                            std::thread::sleep(std::time::Duration::from_millis(50));
                            Ok(vec![1, 2, 3])
                        })
                        .unwrap()
                        .0
                })
            })
            .collect();
        for h in handles {
            assert_eq!(*h.join().unwrap(), vec![1, 2, 3]);
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn errors_are_not_cached() {
        let cache: ArtifactCache<u32, Vec<u8>> = ArtifactCache::new(100);
        assert!(cache.get_or_compute(&1, || Err::<Vec<u8>, _>("boom")).is_err());
        let (v, src) = cache.get_or_compute::<()>(&1, || Ok(vec![1])).unwrap();
        assert_eq!((v.as_slice(), src), (&[1u8][..], Source::Computed));
        assert_eq!(cache.get_or_compute::<()>(&1, || Ok(vec![2])).unwrap().1, Source::Memory);
    }
}
