//! Read-through lookup across the three tiers.
//!
//! A lookup probes L1, then L2 for the L1 misses, then L3 for the rest, and
//! falls back to the table's default vector. It returns as soon as the
//! values are assembled; promotion of lower-tier hits (L3 -> L2 -> L1 and
//! L2 -> L1) is queued on background workers and tracked by a
//! [`MigrationTicket`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hot_cache::{CacheConfig, HotCache};
use crate::model::{EmbeddingKey, EmbeddingVector, TableMeta, TableName, VersionedEntry};
use crate::persistent::PersistentStore;
use crate::placement::FrequencyTable;
use crate::volatile::{VdbConfig, VolatileStore};

/// Tier that served a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    L1,
    L2,
    L3,
    Default,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub l1: u64,
    pub l2: u64,
    pub l3: u64,
    pub default: u64,
}

impl SourceCounts {
    pub fn total(&self) -> u64 {
        self.l1 + self.l2 + self.l3 + self.default
    }

    pub fn to_array(&self) -> [u64; 4] {
        [self.l1, self.l2, self.l3, self.default]
    }

    pub fn from_array(a: [u64; 4]) -> Self {
        SourceCounts {
            l1: a[0],
            l2: a[1],
            l3: a[2],
            default: a[3],
        }
    }

    fn bump(&mut self, s: Source) {
        match s {
            Source::L1 => self.l1 += 1,
            Source::L2 => self.l2 += 1,
            Source::L3 => self.l3 += 1,
            Source::Default => self.default += 1,
        }
    }

    pub fn add(&mut self, other: &SourceCounts) {
        self.l1 += other.l1;
        self.l2 += other.l2;
        self.l3 += other.l3;
        self.default += other.default;
    }
}

/// Vectors aligned with the requested keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LookupResult {
    pub vectors: Vec<EmbeddingVector>,
    pub sources: Vec<Source>,
    pub source_counts: SourceCounts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MigrationOutcome {
    /// The lookup had nothing to promote.
    Nothing,
    Completed {
        to_l2: usize,
        to_l1: usize,
    },
    /// The migration queue was full; the work was discarded.
    Dropped,
    Failed(String),
}

#[derive(Default)]
struct TicketInner {
    state: Mutex<Option<MigrationOutcome>>,
    done: Condvar,
}

/// Completion handle for the background promotions of one lookup.
#[derive(Clone)]
pub struct MigrationTicket(Arc<TicketInner>);

impl MigrationTicket {
    fn pending() -> Self {
        MigrationTicket(Arc::default())
    }

    fn completed(outcome: MigrationOutcome) -> Self {
        let t = Self::pending();
        t.complete(outcome);
        t
    }

    fn complete(&self, outcome: MigrationOutcome) {
        let mut s = self.0.state.lock().unwrap();
        if s.is_none() {
            *s = Some(outcome);
            self.0.done.notify_all();
        }
    }

    pub fn is_complete(&self) -> bool {
        self.0.state.lock().unwrap().is_some()
    }

    /// Blocks until the migrations are visible. May be called repeatedly.
    pub fn wait(&self) -> MigrationOutcome {
        let mut s = self.0.state.lock().unwrap();
        while s.is_none() {
            s = self.0.done.wait(s).unwrap();
        }
        s.clone().unwrap()
    }

    pub fn wait_timeout(&self, timeout: Duration) -> Option<MigrationOutcome> {
        let s = self.0.state.lock().unwrap();
        let (s, _) = self
            .0
            .done
            .wait_timeout_while(s, timeout, |s| s.is_none())
            .unwrap();
        s.clone()
    }
}

impl std::fmt::Debug for MigrationTicket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("MigrationTicket")
            .field(&*self.0.state.lock().unwrap())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub migration_workers: usize,
    /// Pending migration jobs before new ones are dropped.
    pub migration_queue_depth: usize,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        // Sized for four concurrent callers.
        OrchestratorConfig {
            migration_workers: 1,
            migration_queue_depth: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationStats {
    pub enqueued: u64,
    pub dropped: u64,
    pub completed: u64,
    pub failed: u64,
}

#[derive(Default)]
struct MigrationCounters {
    enqueued: AtomicU64,
    dropped: AtomicU64,
    completed: AtomicU64,
    failed: AtomicU64,
}

struct Job {
    table: TableName,
    from_l2: Vec<VersionedEntry>,
    from_l3: Vec<VersionedEntry>,
    ticket: MigrationTicket,
}

struct Tiers {
    cache: Arc<HotCache>,
    vdb: Arc<VolatileStore>,
    pdb: Arc<PersistentStore>,
    counters: MigrationCounters,
}

impl Tiers {
    fn migrate(&self, job: &Job) -> Result<(usize, usize)> {
        // An update may have been applied since the lookup read L3. Reread
        // so an older version never lands in L2 above a newer one in L3.
        let from_l3 = if job.from_l3.is_empty() {
            Vec::new()
        } else {
            let keys: Vec<_> = job.from_l3.iter().map(|e| e.key).collect();
            self.pdb
                .get_batch(&job.table, &keys)
                .map_err(|e| e.in_tier("L3"))?
                .found
        };
        let to_l2 = if from_l3.is_empty() {
            0
        } else {
            self.vdb
                .put_batch(&job.table, &from_l3)
                .map_err(|e| e.in_tier("L2"))?
        };
        let mut promote = job.from_l2.clone();
        promote.extend(from_l3);
        let to_l1 = self
            .cache
            .insert(&job.table, &promote)
            .map_err(|e| e.in_tier("L1"))?
            .admitted;
        Ok((to_l2, to_l1))
    }
}

fn worker_loop(tiers: Arc<Tiers>, rx: Receiver<Job>) {
    for job in rx {
        let outcome = match tiers.migrate(&job) {
            Ok((to_l2, to_l1)) => {
                tiers.counters.completed.fetch_add(1, Ordering::Relaxed);
                MigrationOutcome::Completed { to_l2, to_l1 }
            }
            Err(e) => {
                log::warn!("migration for `{}` failed: {e}", job.table);
                tiers.counters.failed.fetch_add(1, Ordering::Relaxed);
                MigrationOutcome::Failed(e.to_string())
            }
        };
        job.ticket.complete(outcome);
    }
}

pub struct Orchestrator {
    tiers: Arc<Tiers>,
    metas: RwLock<HashMap<TableName, TableMeta>>,
    tx: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl Orchestrator {
    pub fn new(
        cache: Arc<HotCache>,
        vdb: Arc<VolatileStore>,
        pdb: Arc<PersistentStore>,
        config: OrchestratorConfig,
    ) -> Result<Self> {
        if config.migration_workers == 0 {
            return Err(Error::InvalidConfig(
                "migration_workers must be >= 1".into(),
            ));
        }
        let tiers = Arc::new(Tiers {
            cache,
            vdb,
            pdb,
            counters: MigrationCounters::default(),
        });
        let (tx, rx) = bounded(config.migration_queue_depth);
        let workers = (0..config.migration_workers)
            .map(|i| {
                let (tiers, rx) = (tiers.clone(), rx.clone());
                std::thread::Builder::new()
                    .name(format!("hps-migrate-{i}"))
                    .spawn(move || worker_loop(tiers, rx))
            })
            .collect::<std::io::Result<_>>()?;
        Ok(Orchestrator {
            tiers,
            metas: RwLock::default(),
            tx: Some(tx),
            workers,
        })
    }

    pub fn cache(&self) -> &Arc<HotCache> {
        &self.tiers.cache
    }

    pub fn vdb(&self) -> &Arc<VolatileStore> {
        &self.tiers.vdb
    }

    pub fn pdb(&self) -> &Arc<PersistentStore> {
        &self.tiers.pdb
    }

    /// Registers the table with all three tiers.
    pub fn register_table(
        &self,
        meta: TableMeta,
        cache: CacheConfig,
        vdb: VdbConfig,
    ) -> Result<()> {
        self.tiers.pdb.create_table(meta.clone())?;
        self.tiers.vdb.register(meta.clone(), vdb)?;
        self.tiers.cache.register(meta.clone(), cache)?;
        self.metas
            .write()
            .unwrap()
            .insert(meta.table().clone(), meta);
        Ok(())
    }

    pub fn meta(&self, table: &TableName) -> Result<TableMeta> {
        self.metas
            .read()
            .unwrap()
            .get(table)
            .cloned()
            .ok_or_else(|| Error::UnknownTable(table.clone()))
    }

    pub fn tables(&self) -> Vec<TableName> {
        let mut t: Vec<_> = self.metas.read().unwrap().keys().cloned().collect();
        t.sort();
        t
    }

    pub fn migration_stats(&self) -> MigrationStats {
        let c = &self.tiers.counters;
        MigrationStats {
            enqueued: c.enqueued.load(Ordering::Relaxed),
            dropped: c.dropped.load(Ordering::Relaxed),
            completed: c.completed.load(Ordering::Relaxed),
            failed: c.failed.load(Ordering::Relaxed),
        }
    }

    /// Serves `keys` from the shallowest tier holding each one. Returns
    /// before promotions finish.
    pub fn lookup(
        &self,
        table: &TableName,
        keys: &[EmbeddingKey],
    ) -> Result<(LookupResult, MigrationTicket)> {
        let meta = self.meta(table)?;

        let mut slot_of: HashMap<EmbeddingKey, usize> = HashMap::with_capacity(keys.len());
        let mut distinct = Vec::new();
        for &k in keys {
            slot_of.entry(k).or_insert_with(|| {
                distinct.push(k);
                distinct.len() - 1
            });
        }
        let mut values: Vec<Option<(EmbeddingVector, Source)>> = vec![None; distinct.len()];

        let l1 = self
            .tiers
            .cache
            .query(table, &distinct)
            .map_err(|e| e.in_tier("L1"))?;
        for e in l1.found {
            values[slot_of[&e.key]] = Some((e.vector, Source::L1));
        }

        let mut from_l2 = Vec::new();
        let mut from_l3 = Vec::new();
        if !l1.missing.is_empty() {
            let l2 = self
                .tiers
                .vdb
                .get_batch(table, &l1.missing)
                .map_err(|e| e.in_tier("L2"))?;
            for e in &l2.found {
                values[slot_of[&e.key]] = Some((e.vector.clone(), Source::L2));
            }
            from_l2 = l2.found;
            if !l2.missing.is_empty() {
                let l3 = self
                    .tiers
                    .pdb
                    .get_batch(table, &l2.missing)
                    .map_err(|e| e.in_tier("L3"))?;
                for e in &l3.found {
                    values[slot_of[&e.key]] = Some((e.vector.clone(), Source::L3));
                }
                from_l3 = l3.found;
            }
        }

        let mut result = LookupResult {
            vectors: Vec::with_capacity(keys.len()),
            sources: Vec::with_capacity(keys.len()),
            source_counts: SourceCounts::default(),
        };
        for k in keys {
            let (vector, source) = match &values[slot_of[k]] {
                Some((v, s)) => (v.clone(), *s),
                None => (meta.default_vector().clone(), Source::Default),
            };
            result.vectors.push(vector);
            result.sources.push(source);
            result.source_counts.bump(source);
        }

        let ticket = if from_l2.is_empty() && from_l3.is_empty() {
            MigrationTicket::completed(MigrationOutcome::Nothing)
        } else {
            self.enqueue(Job {
                table: table.clone(),
                from_l2,
                from_l3,
                ticket: MigrationTicket::pending(),
            })
        };
        Ok((result, ticket))
    }

    fn enqueue(&self, job: Job) -> MigrationTicket {
        let ticket = job.ticket.clone();
        let counters = &self.tiers.counters;
        match self
            .tx
            .as_ref()
            .expect("orchestrator shut down")
            .try_send(job)
        {
            Ok(()) => {
                counters.enqueued.fetch_add(1, Ordering::Relaxed);
            }
            Err(TrySendError::Full(job)) | Err(TrySendError::Disconnected(job)) => {
                counters.dropped.fetch_add(1, Ordering::Relaxed);
                job.ticket.complete(MigrationOutcome::Dropped);
            }
        }
        ticket
    }

    pub fn await_migrations(&self, ticket: &MigrationTicket) -> MigrationOutcome {
        ticket.wait()
    }

    /// Preloads up to `budget` entries from L3 into L1. With a frequency
    /// table the most frequent keys are chosen (ties by ascending key),
    /// otherwise keys are taken in scan order.
    pub fn warmup(
        &self,
        table: &TableName,
        budget: usize,
        freq: Option<&FrequencyTable>,
    ) -> Result<usize> {
        self.meta(table)?;
        if budget == 0 {
            return Ok(0);
        }
        let pdb = &self.tiers.pdb;
        let chosen: Vec<VersionedEntry> = match freq {
            None => pdb.scan(table)?.take(budget).collect::<Result<_>>()?,
            Some(freq) => {
                let counts = freq.count_map();
                let mut keys: Vec<(u64, EmbeddingKey)> = pdb
                    .scan(table)?
                    .map(|e| e.map(|e| (counts.get(&e.key).copied().unwrap_or(0), e.key)))
                    .collect::<Result<_>>()?;
                keys.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                keys.truncate(budget);
                let keys: Vec<_> = keys.into_iter().map(|(_, k)| k).collect();
                pdb.get_batch(table, &keys)?.found
            }
        };
        // Least important first, so that any set overflow evicts the
        // earlier (colder) insertions rather than the hottest keys.
        let mut loaded = 0;
        for chunk in chosen.rchunks(4096) {
            let rev: Vec<_> = chunk.iter().rev().cloned().collect();
            loaded += self.tiers.cache.insert(table, &rev)?.admitted;
        }
        Ok(loaded)
    }
}

impl Drop for Orchestrator {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
