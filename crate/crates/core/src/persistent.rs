//! Level-3 persistent store: every table lives in its own directory holding a
//! `MANIFEST` and numbered append-only segment files.
//!
//! ```text
//! MANIFEST:  "HPSM" | version u8 = 1 | name_len u16 | name | dim u16 | dtype u8
//!            | default vector scalars | crc32 u32
//! NNNNNNNN.seg: records back to back, each
//!            key u64 | version u64 | dim u16 | dtype u8 | scalars | crc32 u32
//! ```
//!
//! All integers are little-endian; checksums are CRC-32 (IEEE) over the
//! preceding bytes of the record. The in-memory index is rebuilt on open by
//! scanning segments in order and keeping the highest version of every key.
//! A torn record at the end of the newest segment is dropped; damage anywhere
//! else is reported as corruption.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsname::encode_component;
use crate::model::codec::Cursor;
use crate::model::{
    BatchGet, DType, EmbeddingKey, EmbeddingVector, TableMeta, TableName, VersionedEntry,
};

const MANIFEST: &str = "MANIFEST";
const MANIFEST_MAGIC: [u8; 4] = *b"HPSM";
const MANIFEST_VERSION: u8 = 1;
const SEGMENT_EXT: &str = "seg";
const RECORD_HEADER: usize = 8 + 8 + 2 + 1;

pub const DEFAULT_SEGMENT_SIZE: u64 = 64 << 20;

fn default_segment_size() -> u64 {
    DEFAULT_SEGMENT_SIZE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PdbConfig {
    /// Segment rotation threshold in bytes.
    #[serde(default = "default_segment_size")]
    pub segment_size: u64,
    /// fsync after every `put_batch` instead of only at rotation and close.
    #[serde(default)]
    pub sync_every_batch: bool,
}

impl Default for PdbConfig {
    fn default() -> Self {
        PdbConfig {
            segment_size: DEFAULT_SEGMENT_SIZE,
            sync_every_batch: false,
        }
    }
}

fn record_len(meta: &TableMeta) -> usize {
    RECORD_HEADER + meta.dim() as usize * meta.dtype().width() + 4
}

fn encode_record(e: &VersionedEntry, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&e.key.0.to_le_bytes());
    out.extend_from_slice(&e.version.to_le_bytes());
    out.extend_from_slice(&e.vector.dim().to_le_bytes());
    out.push(e.vector.dtype().tag());
    e.vector.write_le(out);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

enum RecordCheck {
    Ok(VersionedEntry),
    Bad(String),
}

fn decode_record(buf: &[u8], meta: &TableMeta) -> RecordCheck {
    let (body, crc) = buf.split_at(buf.len() - 4);
    let crc = u32::from_le_bytes(crc.try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return RecordCheck::Bad("checksum mismatch".into());
    }
    let key = u64::from_le_bytes(body[0..8].try_into().unwrap());
    let version = u64::from_le_bytes(body[8..16].try_into().unwrap());
    let dim = u16::from_le_bytes(body[16..18].try_into().unwrap());
    let dtype = DType::from_tag(body[18]);
    if dim != meta.dim() || dtype != Some(meta.dtype()) {
        return RecordCheck::Bad(format!(
            "record shape {dim}/{:?} disagrees with manifest",
            body[18]
        ));
    }
    match EmbeddingVector::read_le(&body[RECORD_HEADER..], dim, meta.dtype()) {
        Ok(vector) => RecordCheck::Ok(VersionedEntry::new(key, vector, version)),
        Err(e) => RecordCheck::Bad(e.to_string()),
    }
}

fn encode_manifest(meta: &TableMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MANIFEST_MAGIC);
    out.push(MANIFEST_VERSION);
    let name = meta.table().as_str().as_bytes();
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&meta.dim().to_le_bytes());
    out.push(meta.dtype().tag());
    meta.default_vector().write_le(&mut out);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn decode_manifest(buf: &[u8], path: &Path) -> Result<TableMeta> {
    let bad = |reason: String| Error::Corruption {
        path: path.display().to_string(),
        reason,
    };
    if buf.len() < 4 {
        return Err(bad("manifest too short".into()));
    }
    let (body, crc) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(bad("manifest checksum mismatch".into()));
    }
    let mut cur = Cursor::new(body);
    let parse = |cur: &mut Cursor| -> std::result::Result<TableMeta, String> {
        let magic = cur.take(4).map_err(|e| e.to_string())?;
        if magic != MANIFEST_MAGIC {
            return Err("bad manifest magic".into());
        }
        let version = cur.u8().map_err(|e| e.to_string())?;
        if version != MANIFEST_VERSION {
            return Err(format!("unsupported manifest version {version}"));
        }
        let table = cur.table_name().map_err(|e| e.to_string())?;
        let dim = cur.u16().map_err(|e| e.to_string())?;
        let tag = cur.u8().map_err(|e| e.to_string())?;
        let dtype = DType::from_tag(tag).ok_or_else(|| format!("unknown dtype {tag}"))?;
        let payload = cur
            .take(dim as usize * dtype.width())
            .map_err(|e| e.to_string())?;
        let default = EmbeddingVector::read_le(payload, dim, dtype).map_err(|e| e.to_string())?;
        if cur.remaining() != 0 {
            return Err("trailing bytes in manifest".into());
        }
        Ok(TableMeta::with_default(table, default))
    };
    parse(&mut cur).map_err(bad)
}

fn segment_name(n: u32) -> String {
    format!("{n:08}.{SEGMENT_EXT}")
}

fn list_segments(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(SEGMENT_EXT) {
            continue;
        }
        if let Some(n) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u32>().ok())
        {
            out.push((n, path));
        }
    }
    out.sort();
    Ok(out)
}

fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)?.sync_all()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Loc {
    segment: u32,
    offset: u64,
    version: u64,
}

struct Segment {
    path: PathBuf,
    file: Arc<File>,
}

#[derive(Default)]
struct TableState {
    index: HashMap<EmbeddingKey, Loc>,
    segments: BTreeMap<u32, Segment>,
}

struct ActiveSegment {
    number: u32,
    file: File,
    len: u64,
}

struct Writer {
    active: Option<ActiveSegment>,
    next_segment: u32,
}

struct PdbTable {
    meta: TableMeta,
    dir: PathBuf,
    record_len: usize,
    writer: Mutex<Writer>,
    state: RwLock<TableState>,
}

impl PdbTable {
    fn read_record(&self, state: &TableState, loc: Loc) -> Result<VersionedEntry> {
        let seg = &state.segments[&loc.segment];
        read_record_at(
            &seg.file,
            &seg.path,
            loc.offset,
            self.record_len,
            &self.meta,
        )
    }
}

fn read_record_at(
    file: &File,
    path: &Path,
    offset: u64,
    len: usize,
    meta: &TableMeta,
) -> Result<VersionedEntry> {
    let mut buf = vec![0u8; len];
    file.read_exact_at(&mut buf, offset)?;
    match decode_record(&buf, meta) {
        RecordCheck::Ok(e) => Ok(e),
        RecordCheck::Bad(reason) => Err(Error::Corruption {
            path: path.display().to_string(),
            reason: format!("{reason} at offset {offset}"),
        }),
    }
}

/// Handle on a directory of persistent tables.
pub struct PersistentStore {
    root: PathBuf,
    config: PdbConfig,
    tables: RwLock<HashMap<TableName, Arc<PdbTable>>>,
    dropped_tail_records: AtomicU64,
}

impl PersistentStore {
    /// Opens (creating if needed) the store under `root` and rebuilds every
    /// table's index.
    pub fn open(root: impl AsRef<Path>, config: PdbConfig) -> Result<Self> {
        if config.segment_size == 0 {
            return Err(Error::InvalidConfig("segment_size must be > 0".into()));
        }
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let store = PersistentStore {
            root: root.clone(),
            config,
            tables: RwLock::default(),
            dropped_tail_records: AtomicU64::new(0),
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        dirs.sort();
        let mut tables = HashMap::new();
        for dir in dirs {
            let manifest = dir.join(MANIFEST);
            if !dir.is_dir() || !manifest.exists() {
                continue;
            }
            let meta = decode_manifest(&fs::read(&manifest)?, &manifest)?;
            let table = store.load_table(meta, dir)?;
            tables.insert(table.meta.table().clone(), Arc::new(table));
        }
        *store.tables.write().unwrap() = tables;
        Ok(store)
    }

    fn load_table(&self, meta: TableMeta, dir: PathBuf) -> Result<PdbTable> {
        let rlen = record_len(&meta);
        let segments = list_segments(&dir)?;
        let mut state = TableState::default();
        let mut writer = Writer {
            active: None,
            next_segment: 1,
        };
        let last = segments.last().map(|(n, _)| *n);
        for (number, path) in segments {
            let is_last = Some(number) == last;
            let mut data = Vec::new();
            File::open(&path)?.read_to_end(&mut data)?;
            let mut offset = 0usize;
            let mut valid_len = data.len();
            while offset < data.len() {
                let corrupt = |reason: String| Error::Corruption {
                    path: path.display().to_string(),
                    reason: format!("{reason} at offset {offset}"),
                };
                if data.len() - offset < rlen {
                    if !is_last {
                        return Err(corrupt("truncated record".into()));
                    }
                    valid_len = offset;
                    break;
                }
                match decode_record(&data[offset..offset + rlen], &meta) {
                    RecordCheck::Ok(e) => {
                        let newer = state
                            .index
                            .get(&e.key)
                            .is_none_or(|l| e.version > l.version);
                        if newer {
                            state.index.insert(
                                e.key,
                                Loc {
                                    segment: number,
                                    offset: offset as u64,
                                    version: e.version,
                                },
                            );
                        }
                    }
                    RecordCheck::Bad(reason) => {
                        if is_last && offset + rlen == data.len() {
                            valid_len = offset;
                            break;
                        }
                        return Err(corrupt(reason));
                    }
                }
                offset += rlen;
            }
            let file = OpenOptions::new().read(true).write(true).open(&path)?;
            if valid_len < data.len() {
                log::warn!(
                    "{}: dropping {} bytes of torn tail",
                    path.display(),
                    data.len() - valid_len
                );
                self.dropped_tail_records.fetch_add(1, Ordering::Relaxed);
                file.set_len(valid_len as u64)?;
                file.sync_all()?;
            }
            if is_last {
                writer.active = Some(ActiveSegment {
                    number,
                    file: file.try_clone()?,
                    len: valid_len as u64,
                });
            }
            writer.next_segment = number + 1;
            state.segments.insert(
                number,
                Segment {
                    path,
                    file: Arc::new(file),
                },
            );
        }
        Ok(PdbTable {
            meta,
            dir,
            record_len: rlen,
            writer: Mutex::new(writer),
            state: RwLock::new(state),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Torn tail records discarded while opening.
    pub fn dropped_tail_records(&self) -> u64 {
        self.dropped_tail_records.load(Ordering::Relaxed)
    }

    pub fn tables(&self) -> Vec<TableName> {
        let mut names: Vec<_> = self.tables.read().unwrap().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn meta(&self, table: &TableName) -> Result<TableMeta> {
        Ok(self.table(table)?.meta.clone())
    }

    /// Creates the table's namespace and manifest. Idempotent for identical
    /// metadata.
    pub fn create_table(&self, meta: TableMeta) -> Result<()> {
        let mut tables = self.tables.write().unwrap();
        if let Some(t) = tables.get(meta.table()) {
            if t.meta == meta {
                return Ok(());
            }
            return Err(Error::TableConflict(meta.table().clone()));
        }
        let dir = self.root.join(encode_component(meta.table()));
        fs::create_dir_all(&dir)?;
        let tmp = dir.join("MANIFEST.tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(&encode_manifest(&meta))?;
        f.sync_all()?;
        fs::rename(&tmp, dir.join(MANIFEST))?;
        sync_dir(&dir)?;
        let table = PdbTable {
            record_len: record_len(&meta),
            meta: meta.clone(),
            dir,
            writer: Mutex::new(Writer {
                active: None,
                next_segment: 1,
            }),
            state: RwLock::default(),
        };
        tables.insert(meta.table().clone(), Arc::new(table));
        Ok(())
    }

    fn table(&self, table: &TableName) -> Result<Arc<PdbTable>> {
        self.tables
            .read()
            .unwrap()
            .get(table)
            .cloned()
            .ok_or_else(|| Error::UnknownTable(table.clone()))
    }

    fn new_segment(&self, t: &PdbTable, w: &mut Writer) -> Result<()> {
        if let Some(old) = w.active.take() {
            old.file.sync_all()?;
        }
        let number = w.next_segment;
        w.next_segment += 1;
        let path = t.dir.join(segment_name(number));
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(&path)?;
        sync_dir(&t.dir)?;
        t.state.write().unwrap().segments.insert(
            number,
            Segment {
                path,
                file: Arc::new(file.try_clone()?),
            },
        );
        w.active = Some(ActiveSegment {
            number,
            file,
            len: 0,
        });
        Ok(())
    }

    /// Appends every entry whose version is newer than the indexed one.
    /// Returns the number of records written.
    pub fn put_batch(&self, table: &TableName, entries: &[VersionedEntry]) -> Result<usize> {
        let t = self.table(table)?;
        t.meta.check_entries(entries)?;
        let mut w = t.writer.lock().unwrap();
        let mut pending: HashMap<EmbeddingKey, u64> = HashMap::new();
        let accepted: Vec<&VersionedEntry> = {
            let state = t.state.read().unwrap();
            entries
                .iter()
                .filter(|e| {
                    let current = pending
                        .get(&e.key)
                        .copied()
                        .or_else(|| state.index.get(&e.key).map(|l| l.version));
                    let newer = current.is_none_or(|v| e.version > v);
                    if newer {
                        pending.insert(e.key, e.version);
                    }
                    newer
                })
                .collect()
        };
        if accepted.is_empty() {
            return Ok(0);
        }
        let rlen = t.record_len as u64;
        let mut locs = Vec::with_capacity(accepted.len());
        let mut buf = Vec::new();
        let mut i = 0;
        while i < accepted.len() {
            let need_new = match &w.active {
                None => true,
                Some(a) => a.len > 0 && a.len + rlen > self.config.segment_size,
            };
            if need_new {
                self.new_segment(&t, &mut w)?;
            }
            let active = w.active.as_mut().unwrap();
            let room = self.config.segment_size.saturating_sub(active.len) / rlen;
            let take = (room.max(1) as usize).min(accepted.len() - i);
            buf.clear();
            for e in &accepted[i..i + take] {
                locs.push((
                    e.key,
                    Loc {
                        segment: active.number,
                        offset: active.len + buf.len() as u64,
                        version: e.version,
                    },
                ));
                encode_record(e, &mut buf);
            }
            active.file.write_all_at(&buf, active.len)?;
            active.len += buf.len() as u64;
            if self.config.sync_every_batch {
                active.file.sync_data()?;
            }
            i += take;
        }
        let mut state = t.state.write().unwrap();
        for (key, loc) in locs {
            state.index.insert(key, loc);
        }
        Ok(accepted.len())
    }

    pub fn get_batch(&self, table: &TableName, keys: &[EmbeddingKey]) -> Result<BatchGet> {
        let t = self.table(table)?;
        let state = t.state.read().unwrap();
        let mut out = BatchGet::default();
        for &key in keys {
            match state.index.get(&key) {
                Some(&loc) => out.found.push(t.read_record(&state, loc)?),
                None => out.missing.push(key),
            }
        }
        Ok(out)
    }

    /// Latest version of every key, ordered by key, read from a snapshot of
    /// the index taken now.
    pub fn scan(&self, table: &TableName) -> Result<Scan> {
        let t = self.table(table)?;
        let state = t.state.read().unwrap();
        let mut locs: Vec<(EmbeddingKey, Loc)> =
            state.index.iter().map(|(k, l)| (*k, *l)).collect();
        locs.sort_by_key(|(k, _)| *k);
        let files = state
            .segments
            .iter()
            .map(|(n, s)| (*n, (s.path.clone(), s.file.clone())))
            .collect();
        Ok(Scan {
            meta: t.meta.clone(),
            record_len: t.record_len,
            files,
            locs: locs.into_iter(),
        })
    }

    /// Distinct keys in the table.
    pub fn key_count(&self, table: &TableName) -> Result<usize> {
        Ok(self.table(table)?.state.read().unwrap().index.len())
    }

    /// Records physically present in segment files, live or superseded.
    pub fn record_count(&self, table: &TableName) -> Result<u64> {
        let t = self.table(table)?;
        Ok(self.disk_bytes(&t)? / t.record_len as u64)
    }

    pub fn disk_size(&self, table: &TableName) -> Result<u64> {
        let t = self.table(table)?;
        self.disk_bytes(&t)
    }

    fn disk_bytes(&self, t: &PdbTable) -> Result<u64> {
        let _w = t.writer.lock().unwrap();
        let state = t.state.read().unwrap();
        let mut total = 0;
        for s in state.segments.values() {
            total += s.file.metadata()?.len();
        }
        Ok(total)
    }

    /// Rewrites the latest version of every key into fresh segments and
    /// deletes the old ones. Returns the number of bytes reclaimed.
    pub fn compact(&self, table: &TableName) -> Result<u64> {
        let t = self.table(table)?;
        let mut w = t.writer.lock().unwrap();
        let (old_segments, mut locs, old_bytes) = {
            let state = t.state.read().unwrap();
            let mut bytes = 0;
            for s in state.segments.values() {
                bytes += s.file.metadata()?.len();
            }
            let locs: Vec<_> = state.index.iter().map(|(k, l)| (*k, *l)).collect();
            (
                state.segments.keys().copied().collect::<Vec<_>>(),
                locs,
                bytes,
            )
        };
        locs.sort_by_key(|(k, _)| *k);

        let rlen = t.record_len as u64;
        let per_segment = (self.config.segment_size / rlen).max(1) as usize;
        let mut new_index = HashMap::with_capacity(locs.len());
        let mut new_segments = BTreeMap::new();
        let mut last_active = None;
        for chunk in locs.chunks(per_segment) {
            let number = w.next_segment;
            w.next_segment += 1;
            let path = t.dir.join(segment_name(number));
            let file = OpenOptions::new()
                .read(true)
                .write(true)
                .create_new(true)
                .open(&path)?;
            let mut buf = Vec::with_capacity(chunk.len() * t.record_len);
            {
                let state = t.state.read().unwrap();
                for (key, loc) in chunk {
                    let e = t.read_record(&state, *loc)?;
                    new_index.insert(
                        *key,
                        Loc {
                            segment: number,
                            offset: buf.len() as u64,
                            version: e.version,
                        },
                    );
                    encode_record(&e, &mut buf);
                }
            }
            file.write_all_at(&buf, 0)?;
            file.sync_all()?;
            last_active = Some(ActiveSegment {
                number,
                file: file.try_clone()?,
                len: buf.len() as u64,
            });
            new_segments.insert(
                number,
                Segment {
                    path,
                    file: Arc::new(file),
                },
            );
        }
        sync_dir(&t.dir)?;
        let new_bytes: u64 = new_segments
            .values()
            .map(|s: &Segment| s.file.metadata().map(|m| m.len()))
            .sum::<std::io::Result<u64>>()?;
        let removed = {
            let mut state = t.state.write().unwrap();
            state.index = new_index;
            let old: Vec<Segment> = old_segments
                .iter()
                .filter_map(|n| state.segments.remove(n))
                .collect();
            state.segments.extend(new_segments);
            old
        };
        w.active = last_active;
        for seg in removed {
            fs::remove_file(&seg.path)?;
        }
        sync_dir(&t.dir)?;
        Ok(old_bytes.saturating_sub(new_bytes))
    }

    /// Flushes every active segment to stable storage.
    pub fn sync(&self) -> Result<()> {
        for t in self.tables.read().unwrap().values() {
            if let Some(a) = &t.writer.lock().unwrap().active {
                a.file.sync_all()?;
            }
        }
        Ok(())
    }

    pub fn close(self) -> Result<()> {
        self.sync()
    }
}

impl Drop for PersistentStore {
    fn drop(&mut self) {
        if let Err(e) = self.sync() {
            log::warn!("persistent store sync on drop failed: {e}");
        }
    }
}

/// Iterator returned by [`PersistentStore::scan`].
pub struct Scan {
    meta: TableMeta,
    record_len: usize,
    files: HashMap<u32, (PathBuf, Arc<File>)>,
    locs: std::vec::IntoIter<(EmbeddingKey, Loc)>,
}

impl Iterator for Scan {
    type Item = Result<VersionedEntry>;

    fn next(&mut self) -> Option<Self::Item> {
        let (_, loc) = self.locs.next()?;
        let (path, file) = &self.files[&loc.segment];
        Some(read_record_at(
            file,
            path,
            loc.offset,
            self.record_len,
            &self.meta,
        ))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.locs.size_hint()
    }
}

impl ExactSizeIterator for Scan {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn name(s: &str) -> TableName {
        TableName::new(s).unwrap()
    }

    fn meta(s: &str) -> TableMeta {
        TableMeta::new(name(s), 2, DType::F32).unwrap()
    }

    fn entry(k: u64, x: f32, version: u64) -> VersionedEntry {
        VersionedEntry::new(k, EmbeddingVector::f32(vec![x, -x]).unwrap(), version)
    }

    fn keys(ks: &[u64]) -> Vec<EmbeddingKey> {
        ks.iter().copied().map(EmbeddingKey).collect()
    }

    #[test]
    fn empty_root() {
        let dir = tempfile::tempdir().unwrap();
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        assert!(s.tables().is_empty());
    }

    #[test]
    fn put_get_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
            s.create_table(meta("t")).unwrap();
            assert_eq!(
                s.put_batch(&name("t"), &[entry(1, 1.0, 1), entry(2, 2.0, 1)])
                    .unwrap(),
                2
            );
            assert_eq!(s.put_batch(&name("t"), &[entry(1, 3.0, 2)]).unwrap(), 1);
            assert_eq!(s.put_batch(&name("t"), &[entry(2, 9.0, 0)]).unwrap(), 0);
            s.close().unwrap();
        }
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        assert_eq!(s.tables(), vec![name("t")]);
        assert_eq!(s.meta(&name("t")).unwrap(), meta("t"));
        let got = s.get_batch(&name("t"), &keys(&[1, 2, 3])).unwrap();
        assert_eq!(got.found, vec![entry(1, 3.0, 2), entry(2, 2.0, 1)]);
        assert_eq!(got.missing, keys(&[3]));
    }

    #[test]
    fn duplicate_key_in_one_batch_keeps_highest() {
        let dir = tempfile::tempdir().unwrap();
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        s.create_table(meta("t")).unwrap();
        let n = s
            .put_batch(
                &name("t"),
                &[entry(1, 1.0, 2), entry(1, 2.0, 1), entry(1, 3.0, 3)],
            )
            .unwrap();
        assert_eq!(n, 2);
        let got = s.get_batch(&name("t"), &keys(&[1])).unwrap();
        assert_eq!(got.found, vec![entry(1, 3.0, 3)]);
    }

    #[test]
    fn namespaces_are_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        s.create_table(meta("a")).unwrap();
        s.create_table(meta("b/../a")).unwrap();
        s.put_batch(&name("a"), &[entry(7, 1.0, 1)]).unwrap();
        s.put_batch(&name("b/../a"), &[entry(7, 2.0, 1)]).unwrap();
        assert_eq!(
            s.get_batch(&name("a"), &keys(&[7])).unwrap().found,
            vec![entry(7, 1.0, 1)]
        );
        assert_eq!(
            s.get_batch(&name("b/../a"), &keys(&[7])).unwrap().found,
            vec![entry(7, 2.0, 1)]
        );
    }

    #[test]
    fn table_conflict_and_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        s.create_table(meta("t")).unwrap();
        s.create_table(meta("t")).unwrap();
        let other = TableMeta::new(name("t"), 3, DType::F32).unwrap();
        assert!(matches!(
            s.create_table(other),
            Err(Error::TableConflict(_))
        ));
        assert!(matches!(
            s.get_batch(&name("x"), &keys(&[1])),
            Err(Error::UnknownTable(_))
        ));
    }

    #[test]
    fn segments_rotate() {
        let dir = tempfile::tempdir().unwrap();
        let rlen = record_len(&meta("t")) as u64;
        let config = PdbConfig {
            segment_size: rlen * 3,
            sync_every_batch: true,
        };
        {
            let s = PersistentStore::open(dir.path(), config).unwrap();
            s.create_table(meta("t")).unwrap();
            let es: Vec<_> = (0..10).map(|k| entry(k, k as f32, 1)).collect();
            s.put_batch(&name("t"), &es).unwrap();
            s.put_batch(&name("t"), &[entry(3, 30.0, 2)]).unwrap();
        }
        let tdir = dir.path().join("t");
        assert_eq!(list_segments(&tdir).unwrap().len(), 4);
        let s = PersistentStore::open(dir.path(), config).unwrap();
        let all: Vec<_> = s.scan(&name("t")).unwrap().map(|e| e.unwrap()).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(all[3], entry(3, 30.0, 2));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
            s.create_table(meta("t")).unwrap();
            s.put_batch(&name("t"), &[entry(1, 1.0, 1), entry(2, 2.0, 1)])
                .unwrap();
        }
        let seg = dir.path().join("t").join(segment_name(1));
        let len = fs::metadata(&seg).unwrap().len();
        OpenOptions::new()
            .write(true)
            .open(&seg)
            .unwrap()
            .set_len(len - 3)
            .unwrap();
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        assert_eq!(s.dropped_tail_records(), 1);
        let got = s.get_batch(&name("t"), &keys(&[1, 2])).unwrap();
        assert_eq!(got.found, vec![entry(1, 1.0, 1)]);
        // Appends continue cleanly after the truncated tail.
        s.put_batch(&name("t"), &[entry(2, 5.0, 2)]).unwrap();
        drop(s);
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        assert_eq!(s.dropped_tail_records(), 0);
        assert_eq!(
            s.get_batch(&name("t"), &keys(&[2])).unwrap().found,
            vec![entry(2, 5.0, 2)]
        );
    }

    #[test]
    fn corrupt_last_record_is_tail_but_interior_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
            s.create_table(meta("t")).unwrap();
            s.put_batch(&name("t"), &[entry(1, 1.0, 1), entry(2, 2.0, 1)])
                .unwrap();
        }
        let seg = dir.path().join("t").join(segment_name(1));
        let mut bytes = fs::read(&seg).unwrap();
        let rlen = record_len(&meta("t"));
        bytes[rlen + 20] ^= 0x40;
        fs::write(&seg, &bytes).unwrap();
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        assert_eq!(s.dropped_tail_records(), 1);
        drop(s);

        let mut bytes = fs::read(&seg).unwrap();
        assert_eq!(bytes.len(), rlen);
        bytes.extend_from_slice(&bytes.clone());
        bytes[20] ^= 0x40;
        fs::write(&seg, &bytes).unwrap();
        assert!(matches!(
            PersistentStore::open(dir.path(), PdbConfig::default()),
            Err(Error::Corruption { .. })
        ));
    }

    #[test]
    fn unreadable_manifest_fails_open() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
            s.create_table(meta("t")).unwrap();
        }
        let m = dir.path().join("t").join(MANIFEST);
        let mut bytes = fs::read(&m).unwrap();
        bytes[6] ^= 1;
        fs::write(&m, bytes).unwrap();
        assert!(PersistentStore::open(dir.path(), PdbConfig::default()).is_err());
    }

    #[test]
    fn compaction() {
        let dir = tempfile::tempdir().unwrap();
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        s.create_table(meta("t")).unwrap();
        let es: Vec<_> = (0..50).map(|k| entry(k, k as f32, 1)).collect();
        s.put_batch(&name("t"), &es).unwrap();
        assert_eq!(s.compact(&name("t")).unwrap(), 0);

        let es: Vec<_> = (0..50).map(|k| entry(k, -(k as f32), 2)).collect();
        s.put_batch(&name("t"), &es).unwrap();
        assert_eq!(s.record_count(&name("t")).unwrap(), 100);
        let before: Vec<_> = s.scan(&name("t")).unwrap().map(|e| e.unwrap()).collect();
        let reclaimed = s.compact(&name("t")).unwrap();
        assert_eq!(reclaimed, 50 * record_len(&meta("t")) as u64);
        assert_eq!(s.record_count(&name("t")).unwrap(), 50);
        let after: Vec<_> = s.scan(&name("t")).unwrap().map(|e| e.unwrap()).collect();
        assert_eq!(before, after);
        // Writes after compaction land in the new active segment.
        s.put_batch(&name("t"), &[entry(0, 7.0, 3)]).unwrap();
        drop(s);
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        assert_eq!(s.key_count(&name("t")).unwrap(), 50);
        assert_eq!(
            s.get_batch(&name("t"), &keys(&[0])).unwrap().found,
            vec![entry(0, 7.0, 3)]
        );
    }

    #[test]
    fn scan_snapshot_survives_compaction() {
        let dir = tempfile::tempdir().unwrap();
        let s = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        s.create_table(meta("t")).unwrap();
        s.put_batch(&name("t"), &[entry(1, 1.0, 1), entry(2, 2.0, 1)])
            .unwrap();
        let scan = s.scan(&name("t")).unwrap();
        s.put_batch(&name("t"), &[entry(1, 5.0, 2)]).unwrap();
        s.compact(&name("t")).unwrap();
        let got: Vec<_> = scan.map(|e| e.unwrap()).collect();
        assert_eq!(got, vec![entry(1, 1.0, 1), entry(2, 2.0, 1)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn matches_max_version_reference(
            ops in prop::collection::vec(
                prop::collection::vec((0u64..30, 0u64..8, -10.0f32..10.0), 0..10), 0..20),
            compact_at in 0usize..20,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let config = PdbConfig { segment_size: 400, sync_every_batch: false };
            let s = PersistentStore::open(dir.path(), config).unwrap();
            s.create_table(meta("t")).unwrap();
            let mut reference: HashMap<u64, (u64, f32)> = HashMap::new();
            for (i, batch) in ops.iter().enumerate() {
                let es: Vec<_> = batch.iter().map(|&(k, v, x)| entry(k, x, v)).collect();
                s.put_batch(&name("t"), &es).unwrap();
                for &(k, v, x) in batch {
                    if reference.get(&k).is_none_or(|&(rv, _)| v > rv) {
                        reference.insert(k, (v, x));
                    }
                }
                if i == compact_at {
                    s.compact(&name("t")).unwrap();
                }
            }
            drop(s);
            let s = PersistentStore::open(dir.path(), config).unwrap();
            let got: Vec<_> = s.scan(&name("t")).unwrap().map(|e| e.unwrap()).collect();
            let mut want: Vec<_> = reference.iter().map(|(&k, &(v, x))| entry(k, x, v)).collect();
            want.sort_by_key(|e| e.key);
            prop_assert_eq!(got, want);
        }
    }
}
