//! Online update propagation.
//!
//! Producers append encoded [`UpdateBatch`] frames to one durable queue file
//! per table. Consumers subscribe with a cursor, apply batches to the PDB and
//! VDB, and a refresh pass pushes newer versions into the hot cache.
//!
//! Queue file layout: a sequence of frames, each `len u32 LE | UpdateBatch
//! bytes`, in strictly increasing `seq` order. The first publish on a table
//! gets `seq = 1`; every entry of a batch carries `version = seq`.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsname::{decode_component, encode_component};
use crate::hot_cache::HotCache;
use crate::model::{
    decode_update_batch, encode_update_batch, DType, EmbeddingKey, EmbeddingVector, TableMeta,
    TableName, UpdateBatch,
};
use crate::persistent::PersistentStore;
use crate::volatile::VolatileStore;

const QUEUE_EXT: &str = "q";

#[derive(Debug, Clone, Copy)]
struct FrameLoc {
    seq: u64,
    offset: u64,
    len: u32,
}

struct QueueWriter {
    file: Option<Arc<File>>,
    len: u64,
    next_seq: u64,
}

struct Queue {
    table: TableName,
    path: PathBuf,
    shape: RwLock<Option<(u16, DType)>>,
    writer: Mutex<QueueWriter>,
    frames: RwLock<Vec<FrameLoc>>,
    sync: bool,
}

impl Queue {
    fn read_frames(&self, after: u64, max: usize) -> Result<Vec<UpdateBatch>> {
        let (locs, file) = {
            let frames = self.frames.read().unwrap();
            let start = frames.partition_point(|f| f.seq <= after);
            let locs: Vec<FrameLoc> = frames[start..].iter().take(max).copied().collect();
            let file = self.writer.lock().unwrap().file.clone();
            (locs, file)
        };
        let Some(file) = file else {
            return Ok(Vec::new());
        };
        locs.into_iter()
            .map(|loc| {
                let mut buf = vec![0u8; loc.len as usize];
                file.read_exact_at(&mut buf, loc.offset)?;
                Ok(decode_update_batch(&buf)?)
            })
            .collect()
    }

    fn last_seq(&self) -> u64 {
        self.frames.read().unwrap().last().map_or(0, |f| f.seq)
    }
}

/// Scans an existing queue file, truncating a torn final frame.
fn load_queue(path: &Path, sync: bool) -> Result<Option<Queue>> {
    let data = fs::read(path)?;
    let mut frames = Vec::new();
    let mut table: Option<TableName> = None;
    let mut shape = None;
    let mut offset = 0usize;
    let mut valid = 0usize;
    let corrupt = |reason: String, at: usize| Error::Corruption {
        path: path.display().to_string(),
        reason: format!("{reason} at offset {at}"),
    };
    while offset < data.len() {
        if data.len() - offset < 4 {
            break;
        }
        let len = u32::from_le_bytes(data[offset..offset + 4].try_into().unwrap()) as usize;
        let start = offset + 4;
        if data.len() - start < len {
            break;
        }
        let batch = match decode_update_batch(&data[start..start + len]) {
            Ok(b) => b,
            Err(e) if start + len == data.len() => {
                log::warn!("{}: dropping undecodable final frame: {e}", path.display());
                break;
            }
            Err(e) => return Err(corrupt(e.to_string(), offset)),
        };
        match &table {
            None => {
                table = Some(batch.table().clone());
                shape = Some((batch.dim(), batch.dtype()));
            }
            Some(t) if t != batch.table() => {
                return Err(corrupt(
                    format!("frame for table `{}`", batch.table()),
                    offset,
                ))
            }
            Some(_) => {}
        }
        if Some((batch.dim(), batch.dtype())) != shape {
            return Err(corrupt(
                "frame shape differs from earlier frames".into(),
                offset,
            ));
        }
        let last = frames.last().map_or(0, |f: &FrameLoc| f.seq);
        if batch.seq() <= last {
            return Err(corrupt(format!("seq {} after {last}", batch.seq()), offset));
        }
        frames.push(FrameLoc {
            seq: batch.seq(),
            offset: start as u64,
            len: len as u32,
        });
        offset = start + len;
        valid = offset;
    }
    let file = OpenOptions::new().read(true).write(true).open(path)?;
    if valid < data.len() {
        log::warn!(
            "{}: truncating {} bytes of torn tail",
            path.display(),
            data.len() - valid
        );
        file.set_len(valid as u64)?;
        file.sync_all()?;
    }
    let table = match table {
        Some(t) => t,
        None => match path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(decode_component)
        {
            Some(t) => t,
            None => return Ok(None),
        },
    };
    let next_seq = frames.last().map_or(1, |f: &FrameLoc| f.seq + 1);
    Ok(Some(Queue {
        table,
        path: path.to_path_buf(),
        shape: RwLock::new(shape),
        writer: Mutex::new(QueueWriter {
            file: Some(Arc::new(file)),
            len: valid as u64,
            next_seq,
        }),
        frames: RwLock::new(frames),
        sync,
    }))
}

/// Directory of per-table update queues.
pub struct MessageBroker {
    root: PathBuf,
    sync: bool,
    queues: RwLock<HashMap<TableName, Arc<Queue>>>,
}

impl MessageBroker {
    /// Opens the queue directory, recovering every existing queue.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(root, false)
    }

    /// Like [`MessageBroker::open`]; with `sync` every publish is fsynced.
    pub fn open_with(root: impl AsRef<Path>, sync: bool) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut queues = HashMap::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&root)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.sort();
        for path in paths {
            if path.extension().and_then(|e| e.to_str()) != Some(QUEUE_EXT) {
                continue;
            }
            if let Some(q) = load_queue(&path, sync)? {
                queues.insert(q.table.clone(), Arc::new(q));
            }
        }
        Ok(MessageBroker {
            root,
            sync,
            queues: RwLock::new(queues),
        })
    }

    /// Declares the shape of a table's queue so it can be published to.
    pub fn register(&self, meta: &TableMeta) -> Result<()> {
        let mut queues = self.queues.write().unwrap();
        let shape = (meta.dim(), meta.dtype());
        if let Some(q) = queues.get(meta.table()) {
            let mut s = q.shape.write().unwrap();
            return match *s {
                Some(existing) if existing != shape => {
                    Err(Error::TableConflict(meta.table().clone()))
                }
                _ => {
                    *s = Some(shape);
                    Ok(())
                }
            };
        }
        let path = self
            .root
            .join(format!("{}.{QUEUE_EXT}", encode_component(meta.table())));
        queues.insert(
            meta.table().clone(),
            Arc::new(Queue {
                table: meta.table().clone(),
                path,
                shape: RwLock::new(Some(shape)),
                writer: Mutex::new(QueueWriter {
                    file: None,
                    len: 0,
                    next_seq: 1,
                }),
                frames: RwLock::default(),
                sync: self.sync,
            }),
        );
        Ok(())
    }

    fn queue(&self, table: &TableName) -> Result<Arc<Queue>> {
        self.queues
            .read()
            .unwrap()
            .get(table)
            .cloned()
            .ok_or_else(|| Error::UnknownTable(table.clone()))
    }

    /// Appends one batch, stamping it with the next sequence number.
    pub fn publish(
        &self,
        table: &TableName,
        entries: Vec<(EmbeddingKey, EmbeddingVector)>,
    ) -> Result<u64> {
        let q = self.queue(table)?;
        let (dim, dtype) = q
            .shape
            .read()
            .unwrap()
            .ok_or_else(|| Error::UnknownTable(table.clone()))?;
        let mut w = q.writer.lock().unwrap();
        let seq = w.next_seq;
        let batch = UpdateBatch::new(table.clone(), seq, dim, dtype, entries)?;
        let bytes = encode_update_batch(&batch);
        let len = u32::try_from(bytes.len())
            .map_err(|_| Error::InvalidConfig("update batch larger than 4 GiB".into()))?;
        if w.file.is_none() {
            let f = OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(false)
                .open(&q.path)?;
            w.len = f.metadata()?.len();
            w.file = Some(Arc::new(f));
        }
        let file = w.file.clone().unwrap();
        let mut frame = Vec::with_capacity(4 + bytes.len());
        frame.extend_from_slice(&len.to_le_bytes());
        frame.extend_from_slice(&bytes);
        file.write_all_at(&frame, w.len)?;
        if q.sync {
            file.sync_data()?;
        }
        q.frames.write().unwrap().push(FrameLoc {
            seq,
            offset: w.len + 4,
            len,
        });
        w.len += frame.len() as u64;
        w.next_seq += 1;
        Ok(seq)
    }

    /// Publishes the entries of an already-built batch; its `seq` is ignored
    /// and a fresh one assigned.
    pub fn publish_batch(&self, batch: UpdateBatch) -> Result<u64> {
        let q = self.queue(batch.table())?;
        if let Some((dim, dtype)) = *q.shape.read().unwrap() {
            if batch.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: batch.dim(),
                });
            }
            if batch.dtype() != dtype {
                return Err(Error::DTypeMismatch {
                    expected: dtype,
                    actual: batch.dtype(),
                });
            }
        }
        let (table, _, entries) = batch.into_parts();
        self.publish(&table, entries)
    }

    /// Tables with at least one published batch.
    pub fn list_queues(&self) -> Vec<TableName> {
        let mut out: Vec<TableName> = self
            .queues
            .read()
            .unwrap()
            .values()
            .filter(|q| !q.frames.read().unwrap().is_empty())
            .map(|q| q.table.clone())
            .collect();
        out.sort();
        out
    }

    pub fn last_seq(&self, table: &TableName) -> Result<u64> {
        Ok(self.queue(table)?.last_seq())
    }

    /// Cursor positioned after `from_seq`; the first poll returns batches
    /// with `seq > from_seq`.
    pub fn subscribe(&self, table: &TableName, from_seq: u64) -> Result<Subscription> {
        Ok(Subscription {
            queue: self.queue(table)?,
            cursor: from_seq,
        })
    }
}

/// A consumer position in one table's queue.
pub struct Subscription {
    queue: Arc<Queue>,
    cursor: u64,
}

impl Subscription {
    pub fn table(&self) -> &TableName {
        &self.queue.table
    }

    /// Last consumed sequence number.
    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Repositions the cursor, e.g. to replay from the start.
    pub fn seek(&mut self, seq: u64) {
        self.cursor = seq;
    }

    /// Up to `max_batches` unconsumed batches, without advancing.
    pub fn peek(&self, max_batches: usize) -> Result<Vec<UpdateBatch>> {
        self.queue.read_frames(self.cursor, max_batches)
    }

    /// Up to `max_batches` unconsumed batches in order; advances the cursor.
    pub fn poll(&mut self, max_batches: usize) -> Result<Vec<UpdateBatch>> {
        let batches = self.peek(max_batches)?;
        if let Some(last) = batches.last() {
            self.cursor = last.seq();
        }
        Ok(batches)
    }

    pub fn lag(&self) -> u64 {
        self.queue.last_seq().saturating_sub(self.cursor)
    }
}

/// Applies up to `max_batches` pending batches to the PDB, then the VDB.
/// The cursor only moves past batches that were fully applied. Returns the
/// number of entries applied.
pub fn apply_updates(
    sub: &mut Subscription,
    vdb: &VolatileStore,
    pdb: &PersistentStore,
    max_batches: usize,
) -> Result<usize> {
    let mut applied = 0;
    for batch in sub.peek(max_batches)? {
        let entries = batch.to_versioned();
        pdb.put_batch(batch.table(), &entries)?;
        vdb.put_batch(batch.table(), &entries)?;
        sub.cursor = batch.seq();
        applied += entries.len();
    }
    Ok(applied)
}

/// Replaces stale resident L1 entries with the latest versions from the VDB,
/// falling back to the PDB. Returns the number of replacements.
pub fn refresh_once(
    table: &TableName,
    cache: &HotCache,
    vdb: &VolatileStore,
    pdb: &PersistentStore,
) -> Result<usize> {
    let resident = cache.resident_keys(table)?;
    if resident.is_empty() {
        return Ok(0);
    }
    let from_vdb = vdb.get_batch(table, &resident)?;
    let mut latest = from_vdb.found;
    if !from_vdb.missing.is_empty() {
        latest.extend(pdb.get_batch(table, &from_vdb.missing)?.found);
    }
    cache.refresh(table, &latest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RefreshMode {
    Periodic,
    /// Only explicit triggers refresh the cache.
    #[default]
    ExplicitOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshConfig {
    #[serde(default)]
    pub mode: RefreshMode,
    #[serde(default = "default_period_ms")]
    pub period_ms: u64,
}

fn default_period_ms() -> u64 {
    1000
}

impl Default for RefreshConfig {
    fn default() -> Self {
        RefreshConfig {
            mode: RefreshMode::ExplicitOnly,
            period_ms: default_period_ms(),
        }
    }
}

impl RefreshConfig {
    pub fn periodic(period: Duration) -> Self {
        RefreshConfig {
            mode: RefreshMode::Periodic,
            period_ms: period.as_millis() as u64,
        }
    }

    pub fn explicit() -> Self {
        Self::default()
    }

    pub fn period(&self) -> Duration {
        Duration::from_millis(self.period_ms)
    }
}

type RefreshTask = Arc<dyn Fn() -> Result<usize> + Send + Sync>;

struct LoopCounters {
    cycles: AtomicU64,
    replaced: AtomicU64,
    errors: AtomicU64,
}

impl LoopCounters {
    fn run(&self, task: &RefreshTask) -> Result<usize> {
        let r = task();
        self.cycles.fetch_add(1, Ordering::Relaxed);
        match &r {
            Ok(n) => {
                self.replaced.fetch_add(*n as u64, Ordering::Relaxed);
            }
            Err(e) => {
                log::warn!("refresh cycle failed: {e}");
                self.errors.fetch_add(1, Ordering::Relaxed);
            }
        }
        r
    }
}

/// Drives a refresh task on a timer (`Periodic`) or only on demand.
pub struct RefreshLoop {
    task: RefreshTask,
    counters: Arc<LoopCounters>,
    stop: Option<Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl RefreshLoop {
    pub fn start<F>(config: RefreshConfig, task: F) -> Result<Self>
    where
        F: Fn() -> Result<usize> + Send + Sync + 'static,
    {
        let task: RefreshTask = Arc::new(task);
        let counters = Arc::new(LoopCounters {
            cycles: AtomicU64::new(0),
            replaced: AtomicU64::new(0),
            errors: AtomicU64::new(0),
        });
        let (stop, handle) = match config.mode {
            RefreshMode::ExplicitOnly => (None, None),
            RefreshMode::Periodic => {
                if config.period_ms == 0 {
                    return Err(Error::InvalidConfig("refresh period must be > 0".into()));
                }
                let (tx, rx) = bounded::<()>(1);
                let (task, counters) = (task.clone(), counters.clone());
                let period = config.period();
                let handle = std::thread::Builder::new()
                    .name("hps-refresh".into())
                    .spawn(move || {
                        while let Err(RecvTimeoutError::Timeout) = rx.recv_timeout(period) {
                            let _ = counters.run(&task);
                        }
                    })?;
                (Some(tx), Some(handle))
            }
        };
        Ok(RefreshLoop {
            task,
            counters,
            stop,
            handle,
        })
    }

    /// Runs one refresh now, on the caller's thread.
    pub fn trigger(&self) -> Result<usize> {
        self.counters.run(&self.task)
    }

    pub fn cycles(&self) -> u64 {
        self.counters.cycles.load(Ordering::Relaxed)
    }

    pub fn replaced(&self) -> u64 {
        self.counters.replaced.load(Ordering::Relaxed)
    }

    pub fn errors(&self) -> u64 {
        self.counters.errors.load(Ordering::Relaxed)
    }

    /// Stops the timer; no refresh starts after this returns.
    pub fn stop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RefreshLoop {
    fn drop(&mut self) {
        self.stop();
    }
}
