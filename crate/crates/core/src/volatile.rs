//! Level-2 volatile store: a hash-partitioned in-memory copy of part of each
//! table. Shard `i` holds exactly the keys with `key_hash(key) % num_shards == i`.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    key_hash, BatchGet, EmbeddingKey, EmbeddingVector, TableMeta, TableName, VersionedEntry,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OverflowPolicy {
    /// Drop the incoming entry when its shard is full.
    #[default]
    RejectNew,
    /// Make room by removing the lowest-version resident entry of the shard.
    EvictOldestVersion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VdbConfig {
    pub num_shards: usize,
    pub per_shard_capacity: usize,
    #[serde(default)]
    pub overflow_policy: OverflowPolicy,
}

impl VdbConfig {
    pub fn new(num_shards: usize, per_shard_capacity: usize) -> Self {
        VdbConfig {
            num_shards,
            per_shard_capacity,
            overflow_policy: OverflowPolicy::RejectNew,
        }
    }

    pub fn with_policy(mut self, policy: OverflowPolicy) -> Self {
        self.overflow_policy = policy;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.num_shards == 0 {
            return Err(Error::InvalidConfig("num_shards must be >= 1".into()));
        }
        Ok(())
    }
}

/// Index of the shard owning a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShardIndex(pub usize);

/// `key_hash(key) mod num_shards`.
pub fn partition_of(key: EmbeddingKey, num_shards: usize) -> ShardIndex {
    assert!(num_shards >= 1, "num_shards must be >= 1");
    ShardIndex((key_hash(key) % num_shards as u64) as usize)
}

#[derive(Default)]
struct Shard {
    map: HashMap<EmbeddingKey, (EmbeddingVector, u64)>,
    // (version, key) for EvictOldestVersion.
    by_version: BTreeSet<(u64, EmbeddingKey)>,
}

impl Shard {
    fn put(&mut self, e: &VersionedEntry, cap: usize, policy: OverflowPolicy) -> PutResult {
        if let Some((vector, version)) = self.map.get_mut(&e.key) {
            if e.version <= *version {
                return PutResult::Stale;
            }
            self.by_version.remove(&(*version, e.key));
            self.by_version.insert((e.version, e.key));
            *vector = e.vector.clone();
            *version = e.version;
            return PutResult::Stored;
        }
        let mut evicted = false;
        if self.map.len() >= cap {
            match policy {
                OverflowPolicy::RejectNew => return PutResult::Dropped,
                OverflowPolicy::EvictOldestVersion => match self.by_version.pop_first() {
                    Some((_, victim)) => {
                        self.map.remove(&victim);
                        evicted = true;
                    }
                    // Zero-capacity shard.
                    None => return PutResult::Dropped,
                },
            }
        }
        self.map.insert(e.key, (e.vector.clone(), e.version));
        self.by_version.insert((e.version, e.key));
        if evicted {
            PutResult::StoredWithEviction
        } else {
            PutResult::Stored
        }
    }
}

enum PutResult {
    Stored,
    StoredWithEviction,
    Stale,
    Dropped,
}

/// Counters for one table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VdbStats {
    pub stored: u64,
    pub stale: u64,
    pub overflow_drops: u64,
    pub overflow_evictions: u64,
}

#[derive(Default)]
struct Counters {
    stored: AtomicU64,
    stale: AtomicU64,
    overflow_drops: AtomicU64,
    overflow_evictions: AtomicU64,
}

struct VdbTable {
    meta: TableMeta,
    config: VdbConfig,
    shards: Vec<RwLock<Shard>>,
    stats: Counters,
}

#[derive(Default)]
pub struct VolatileStore {
    tables: RwLock<HashMap<TableName, Arc<VdbTable>>>,
}

impl VolatileStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, meta: TableMeta, config: VdbConfig) -> Result<()> {
        config.validate()?;
        let mut tables = self.tables.write().unwrap();
        if let Some(t) = tables.get(meta.table()) {
            if t.meta == meta && t.config == config {
                return Ok(());
            }
            return Err(Error::TableConflict(meta.table().clone()));
        }
        let shards = (0..config.num_shards).map(|_| RwLock::default()).collect();
        tables.insert(
            meta.table().clone(),
            Arc::new(VdbTable {
                meta,
                config,
                shards,
                stats: Counters::default(),
            }),
        );
        Ok(())
    }

    fn table(&self, table: &TableName) -> Result<Arc<VdbTable>> {
        self.tables
            .read()
            .unwrap()
            .get(table)
            .cloned()
            .ok_or_else(|| Error::UnknownTable(table.clone()))
    }

    pub fn config(&self, table: &TableName) -> Result<VdbConfig> {
        Ok(self.table(table)?.config)
    }

    /// Stores each entry whose version beats the resident one. Returns the
    /// number stored.
    pub fn put_batch(&self, table: &TableName, entries: &[VersionedEntry]) -> Result<usize> {
        let t = self.table(table)?;
        t.meta.check_entries(entries)?;
        let n = t.config.num_shards;
        let mut routed: Vec<Vec<&VersionedEntry>> = vec![Vec::new(); n];
        for e in entries {
            routed[partition_of(e.key, n).0].push(e);
        }
        let (mut stored, mut stale, mut dropped, mut evicted) = (0u64, 0u64, 0u64, 0u64);
        for (idx, batch) in routed.into_iter().enumerate() {
            if batch.is_empty() {
                continue;
            }
            let mut shard = t.shards[idx].write().unwrap();
            for e in batch {
                match shard.put(e, t.config.per_shard_capacity, t.config.overflow_policy) {
                    PutResult::Stored => stored += 1,
                    PutResult::StoredWithEviction => {
                        stored += 1;
                        evicted += 1;
                    }
                    PutResult::Stale => stale += 1,
                    PutResult::Dropped => dropped += 1,
                }
            }
        }
        t.stats.stored.fetch_add(stored, Ordering::Relaxed);
        t.stats.stale.fetch_add(stale, Ordering::Relaxed);
        t.stats.overflow_drops.fetch_add(dropped, Ordering::Relaxed);
        t.stats
            .overflow_evictions
            .fetch_add(evicted, Ordering::Relaxed);
        Ok(stored as usize)
    }

    pub fn get_batch(&self, table: &TableName, keys: &[EmbeddingKey]) -> Result<BatchGet> {
        let t = self.table(table)?;
        let n = t.config.num_shards;
        let mut out = BatchGet::default();
        for &key in keys {
            let shard = t.shards[partition_of(key, n).0].read().unwrap();
            match shard.map.get(&key) {
                Some((vector, version)) => {
                    out.found
                        .push(VersionedEntry::new(key, vector.clone(), *version))
                }
                None => out.missing.push(key),
            }
        }
        Ok(out)
    }

    /// Point-in-time listing of one shard, sorted by key.
    pub fn shard_snapshot(&self, table: &TableName, idx: usize) -> Result<Vec<VersionedEntry>> {
        let t = self.table(table)?;
        let shard = t.shards.get(idx).ok_or(Error::BadShard {
            idx,
            num_shards: t.shards.len(),
        })?;
        let shard = shard.read().unwrap();
        let mut out: Vec<_> = shard
            .map
            .iter()
            .map(|(k, (v, ver))| VersionedEntry::new(*k, v.clone(), *ver))
            .collect();
        out.sort_by_key(|e| e.key);
        Ok(out)
    }

    pub fn shard_len(&self, table: &TableName, idx: usize) -> Result<usize> {
        let t = self.table(table)?;
        let shard = t.shards.get(idx).ok_or(Error::BadShard {
            idx,
            num_shards: t.shards.len(),
        })?;
        let len = shard.read().unwrap().map.len();
        Ok(len)
    }

    pub fn len(&self, table: &TableName) -> Result<usize> {
        let t = self.table(table)?;
        Ok(t.shards.iter().map(|s| s.read().unwrap().map.len()).sum())
    }

    pub fn stats(&self, table: &TableName) -> Result<VdbStats> {
        let t = self.table(table)?;
        let s = &t.stats;
        Ok(VdbStats {
            stored: s.stored.load(Ordering::Relaxed),
            stale: s.stale.load(Ordering::Relaxed),
            overflow_drops: s.overflow_drops.load(Ordering::Relaxed),
            overflow_evictions: s.overflow_evictions.load(Ordering::Relaxed),
        })
    }
}
