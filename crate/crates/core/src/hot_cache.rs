//! Level-1 embedding cache.
//!
//! Each table is split into `capacity / ways` sets; a key lives in set
//! `key_hash(key) % num_sets`. When a set is full the victim is the entry
//! with the smallest `(freq, last_touch)`. Frequencies are 8-bit saturating
//! counters and are halved (never below 1) every `aging_interval` accesses
//! to the table. Halving is applied lazily the next time a set is touched.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{key_hash, BatchGet, EmbeddingKey, TableMeta, TableName, VersionedEntry};

pub const DEFAULT_WAYS: usize = 8;

fn default_ways() -> usize {
    DEFAULT_WAYS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    /// Maximum resident entries for the table.
    pub capacity: usize,
    /// Set associativity.
    #[serde(default = "default_ways")]
    pub ways: usize,
    /// Accesses between halvings of every counter. `None` means `10 * capacity`.
    #[serde(default)]
    pub aging_interval: Option<u64>,
}

impl CacheConfig {
    pub fn new(capacity: usize) -> Self {
        CacheConfig {
            capacity,
            ways: DEFAULT_WAYS,
            aging_interval: None,
        }
    }

    pub fn with_ways(mut self, ways: usize) -> Self {
        self.ways = ways;
        self
    }

    pub fn with_aging_interval(mut self, interval: u64) -> Self {
        self.aging_interval = Some(interval);
        self
    }

    pub fn num_sets(&self) -> usize {
        self.capacity / self.ways
    }

    pub fn effective_aging_interval(&self) -> u64 {
        self.aging_interval.unwrap_or(10 * self.capacity as u64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways == 0 || self.capacity < self.ways {
            return Err(Error::InvalidConfig(format!(
                "cache capacity {} must be >= ways {} >= 1",
                self.capacity, self.ways
            )));
        }
        if !self.capacity.is_multiple_of(self.ways) {
            return Err(Error::InvalidConfig(format!(
                "cache capacity {} not divisible by ways {}",
                self.capacity, self.ways
            )));
        }
        if self.effective_aging_interval() == 0 {
            return Err(Error::InvalidConfig("aging interval must be > 0".into()));
        }
        Ok(())
    }
}

/// Snapshot of the monotonic counters of one table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub queries: u64,
    pub hits: u64,
    pub misses: u64,
    pub insertions: u64,
    pub admissions_rejected: u64,
    pub refresh_replacements: u64,
    pub evictions: u64,
}

impl CacheStats {
    /// Field order used on the wire.
    pub fn to_array(&self) -> [u64; 7] {
        [
            self.queries,
            self.hits,
            self.misses,
            self.insertions,
            self.admissions_rejected,
            self.refresh_replacements,
            self.evictions,
        ]
    }

    pub fn from_array(a: [u64; 7]) -> Self {
        CacheStats {
            queries: a[0],
            hits: a[1],
            misses: a[2],
            insertions: a[3],
            admissions_rejected: a[4],
            refresh_replacements: a[5],
            evictions: a[6],
        }
    }

    pub fn hit_rate(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.hits as f64 / self.queries as f64
        }
    }
}

#[derive(Default)]
struct Counters {
    queries: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
    insertions: AtomicU64,
    admissions_rejected: AtomicU64,
    refresh_replacements: AtomicU64,
    evictions: AtomicU64,
}

impl Counters {
    fn all(&self) -> [&AtomicU64; 7] {
        [
            &self.queries,
            &self.hits,
            &self.misses,
            &self.insertions,
            &self.admissions_rejected,
            &self.refresh_replacements,
            &self.evictions,
        ]
    }

    fn snapshot(&self) -> CacheStats {
        CacheStats::from_array(self.all().map(|c| c.load(Ordering::Relaxed)))
    }

    fn reset(&self) {
        self.all()
            .iter()
            .for_each(|c| c.store(0, Ordering::Relaxed));
    }
}

fn bump(c: &AtomicU64, n: u64) {
    if n > 0 {
        c.fetch_add(n, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone)]
struct CacheEntry {
    entry: VersionedEntry,
    freq: u8,
    last_touch: u64,
}

#[derive(Debug, Default)]
struct CacheSet {
    slots: Vec<CacheEntry>,
    clock: u64,
    epoch: u64,
}

impl CacheSet {
    fn age_to(&mut self, epoch: u64) {
        if epoch > self.epoch {
            let shift = (epoch - self.epoch).min(8) as u32;
            for s in &mut self.slots {
                s.freq = (s.freq >> shift).max(1);
            }
            self.epoch = epoch;
        }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn position(&self, key: EmbeddingKey) -> Option<usize> {
        self.slots.iter().position(|s| s.entry.key == key)
    }

    fn victim(&self) -> usize {
        self.slots
            .iter()
            .enumerate()
            .min_by_key(|(_, s)| (s.freq, s.last_touch))
            .map(|(i, _)| i)
            .expect("victim requested from empty set")
    }
}

struct CacheTable {
    meta: TableMeta,
    config: CacheConfig,
    aging_interval: u64,
    sets: Vec<Mutex<CacheSet>>,
    accesses: AtomicU64,
    stats: Counters,
}

impl CacheTable {
    fn set_of(&self, key: EmbeddingKey) -> &Mutex<CacheSet> {
        &self.sets[(key_hash(key) % self.sets.len() as u64) as usize]
    }

    fn epoch(&self) -> u64 {
        self.accesses.load(Ordering::Relaxed) / self.aging_interval
    }
}

/// Outcome of an insert call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InsertOutcome {
    /// Entries now resident with the supplied version.
    pub admitted: usize,
    /// Resident entries evicted to make room.
    pub evicted: usize,
}

#[derive(Default)]
pub struct HotCache {
    tables: RwLock<HashMap<TableName, Arc<CacheTable>>>,
}

impl HotCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a table. Re-registering with identical meta and config is a no-op.
    pub fn register(&self, meta: TableMeta, config: CacheConfig) -> Result<()> {
        config.validate()?;
        let mut tables = self.tables.write().unwrap();
        if let Some(existing) = tables.get(meta.table()) {
            if existing.meta == meta && existing.config == config {
                return Ok(());
            }
            return Err(Error::TableConflict(meta.table().clone()));
        }
        let sets = (0..config.num_sets()).map(|_| Mutex::default()).collect();
        let table = CacheTable {
            aging_interval: config.effective_aging_interval(),
            meta: meta.clone(),
            config,
            sets,
            accesses: AtomicU64::new(0),
            stats: Counters::default(),
        };
        tables.insert(meta.table().clone(), Arc::new(table));
        Ok(())
    }

    fn table(&self, table: &TableName) -> Result<Arc<CacheTable>> {
        self.tables
            .read()
            .unwrap()
            .get(table)
            .cloned()
            .ok_or_else(|| Error::UnknownTable(table.clone()))
    }

    pub fn config(&self, table: &TableName) -> Result<CacheConfig> {
        Ok(self.table(table)?.config)
    }

    /// Looks up `keys`, bumping frequency and recency of every hit.
    pub fn query(&self, table: &TableName, keys: &[EmbeddingKey]) -> Result<BatchGet> {
        let t = self.table(table)?;
        let mut out = BatchGet::default();
        for &key in keys {
            t.accesses.fetch_add(1, Ordering::Relaxed);
            let mut set = t.set_of(key).lock().unwrap();
            set.age_to(t.epoch());
            match set.position(key) {
                Some(i) => {
                    let now = set.tick();
                    let slot = &mut set.slots[i];
                    slot.freq = slot.freq.saturating_add(1);
                    slot.last_touch = now;
                    out.found.push(slot.entry.clone());
                }
                None => out.missing.push(key),
            }
        }
        bump(&t.stats.queries, keys.len() as u64);
        bump(&t.stats.hits, out.found.len() as u64);
        bump(&t.stats.misses, out.missing.len() as u64);
        Ok(out)
    }

    /// Inserts entries, evicting the lowest `(freq, last_touch)` entry of a
    /// full set. A resident key is refreshed instead (newer version only).
    pub fn insert(&self, table: &TableName, entries: &[VersionedEntry]) -> Result<InsertOutcome> {
        let t = self.table(table)?;
        t.meta.check_entries(entries)?;
        let ways = t.config.ways;
        let mut outcome = InsertOutcome::default();
        let (mut inserted, mut rejected, mut refreshed) = (0, 0, 0);
        for e in entries {
            let mut set = t.set_of(e.key).lock().unwrap();
            set.age_to(t.epoch());
            if let Some(i) = set.position(e.key) {
                let slot = &mut set.slots[i];
                if e.version > slot.entry.version {
                    slot.entry = e.clone();
                    refreshed += 1;
                    outcome.admitted += 1;
                } else {
                    rejected += 1;
                }
                continue;
            }
            let now = set.tick();
            let fresh = CacheEntry {
                entry: e.clone(),
                freq: 1,
                last_touch: now,
            };
            if set.slots.len() < ways {
                set.slots.push(fresh);
            } else {
                let v = set.victim();
                set.slots[v] = fresh;
                outcome.evicted += 1;
            }
            inserted += 1;
            outcome.admitted += 1;
        }
        bump(&t.stats.insertions, inserted);
        bump(&t.stats.admissions_rejected, rejected);
        bump(&t.stats.refresh_replacements, refreshed);
        bump(&t.stats.evictions, outcome.evicted as u64);
        Ok(outcome)
    }

    /// Replaces resident entries that have an older version. Never inserts
    /// and never evicts. Returns the number of replacements.
    pub fn refresh(&self, table: &TableName, entries: &[VersionedEntry]) -> Result<usize> {
        let t = self.table(table)?;
        t.meta.check_entries(entries)?;
        let mut replaced = 0;
        for e in entries {
            let mut set = t.set_of(e.key).lock().unwrap();
            if let Some(i) = set.position(e.key) {
                let slot = &mut set.slots[i];
                if e.version > slot.entry.version {
                    slot.entry.vector = e.vector.clone();
                    slot.entry.version = e.version;
                    replaced += 1;
                }
            }
        }
        bump(&t.stats.refresh_replacements, replaced as u64);
        Ok(replaced)
    }

    /// Reads a resident entry without touching counters.
    pub fn peek(&self, table: &TableName, key: EmbeddingKey) -> Result<Option<VersionedEntry>> {
        let t = self.table(table)?;
        let set = t.set_of(key).lock().unwrap();
        Ok(set.position(key).map(|i| set.slots[i].entry.clone()))
    }

    /// Keys currently resident, in set order.
    pub fn resident_keys(&self, table: &TableName) -> Result<Vec<EmbeddingKey>> {
        let t = self.table(table)?;
        let mut keys = Vec::new();
        for set in &t.sets {
            keys.extend(set.lock().unwrap().slots.iter().map(|s| s.entry.key));
        }
        Ok(keys)
    }

    pub fn len(&self, table: &TableName) -> Result<usize> {
        let t = self.table(table)?;
        Ok(t.sets.iter().map(|s| s.lock().unwrap().slots.len()).sum())
    }

    pub fn stats(&self, table: &TableName) -> Result<CacheStats> {
        Ok(self.table(table)?.stats.snapshot())
    }

    pub fn reset_stats(&self, table: &TableName) -> Result<()> {
        self.table(table)?.stats.reset();
        Ok(())
    }
}
