//! LRU cache model over TD slice regions: write-allocate, byte-weighted
//! capacity, regions larger than capacity bypass.

use std::collections::BTreeMap;

use crate::taskgen::TensorSlice;

/// Region identity: one TD slice on one tensor.
pub type RegionKey = (usize, Vec<usize>, Vec<usize>);

pub fn region_key(s: &TensorSlice) -> RegionKey {
    (s.tensor_id, s.offsets.clone(), s.extents.clone())
}

#[derive(Debug, Clone)]
pub struct LruCache {
    capacity: usize,
    used: usize,
    clock: u64,
    /// region -> (bytes, last-use tick)
    resident: BTreeMap<RegionKey, (usize, u64)>,
    pub read_bytes: u64,
    pub read_hit_bytes: u64,
}

impl LruCache {
    pub fn new(capacity: usize) -> LruCache {
        LruCache { capacity, used: 0, clock: 0, resident: BTreeMap::new(), read_bytes: 0, read_hit_bytes: 0 }
    }

    fn touch(&mut self, key: &RegionKey) {
        self.clock += 1;
        if let Some(e) = self.resident.get_mut(key) {
            e.1 = self.clock;
        }
    }

    fn install(&mut self, key: RegionKey, bytes: usize) {
        if bytes > self.capacity {
            return; // bypass: never installed
        }
        if let Some((old, _)) = self.resident.get(&key).copied() {
            self.used -= old;
            self.resident.remove(&key);
        }
        while self.used + bytes > self.capacity {
            // evict the least recently used region (ties by key order)
            let victim = self
                .resident
                .iter()
                .min_by_key(|(k, (_, t))| (*t, (*k).clone()))
                .map(|(k, _)| k.clone())
                .expect("capacity accounting broken");
            let (b, _) = self.resident.remove(&victim).unwrap();
            self.used -= b;
        }
        self.used += bytes;
        self.clock += 1;
        self.resident.insert(key, (bytes, self.clock));
    }

    /// Returns (time contribution, hit flag).
    pub fn access(
        &mut self,
        slice: &TensorSlice,
        bytes: usize,
        is_write: bool,
        l2_time_per_byte: f64,
        hbm_time_per_byte: f64,
    ) -> (f64, bool) {
        if bytes == 0 {
            return (0.0, false);
        }
        let key = region_key(slice);
        if is_write {
            self.install(key, bytes);
            return (0.0, true);
        }
        self.read_bytes += bytes as u64;
        let hit = self.resident.contains_key(&key);
        if hit {
            self.read_hit_bytes += bytes as u64;
            self.touch(&key);
            (bytes as f64 * l2_time_per_byte, true)
        } else {
            self.install(key, bytes);
            (bytes as f64 * hbm_time_per_byte, false)
        }
    }

    pub fn hit_rate(&self) -> f64 {
        if self.read_bytes == 0 {
            0.0
        } else {
            self.read_hit_bytes as f64 / self.read_bytes as f64
        }
    }
}
