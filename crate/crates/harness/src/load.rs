//! Synthetic tables written straight into the PDB.

use rand::Rng;
use serde::{Deserialize, Serialize};

use hps_core::model::BULK_LOAD_VERSION;
use hps_core::persistent::PersistentStore;
use hps_core::{DType, EmbeddingVector, TableMeta, TableName, VersionedEntry};

use crate::error::Result;
use crate::workload::{rng, STREAM_VALUES};

const CHUNK: u64 = 8192;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: TableName,
    pub dim: u16,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    /// Keys `0..n_keys` are loaded.
    pub n_keys: u64,
    pub seed: u64,
}

fn default_dtype() -> DType {
    DType::F32
}

impl TableSpec {
    pub fn meta(&self) -> Result<TableMeta> {
        Ok(TableMeta::new(self.name.clone(), self.dim, self.dtype)?)
    }
}

/// Deterministic vectors with components uniform in `[-1, 1]`, one per key
/// in ascending key order.
pub fn synthetic_vectors(spec: &TableSpec) -> impl Iterator<Item = (u64, EmbeddingVector)> + '_ {
    let mut r = rng(spec.seed, STREAM_VALUES);
    (0..spec.n_keys).map(move |k| {
        let v: Vec<f32> = (0..spec.dim).map(|_| r.gen_range(-1.0f32..=1.0)).collect();
        let v = EmbeddingVector::f32(v).expect("finite by construction");
        let v = v.to_dtype(spec.dtype).expect("within f16 range");
        (k, v)
    })
}

/// Creates the table if needed and writes every key at version 0.
pub fn bulk_load(spec: &TableSpec, pdb: &PersistentStore) -> Result<u64> {
    pdb.create_table(spec.meta()?)?;
    let mut written = 0;
    let mut chunk = Vec::with_capacity(CHUNK as usize);
    for (k, v) in synthetic_vectors(spec) {
        chunk.push(VersionedEntry::new(k, v, BULK_LOAD_VERSION));
        if chunk.len() as u64 == CHUNK {
            pdb.put_batch(&spec.name, &chunk)?;
            written += chunk.len() as u64;
            chunk.clear();
        }
    }
    if !chunk.is_empty() {
        pdb.put_batch(&spec.name, &chunk)?;
        written += chunk.len() as u64;
    }
    pdb.sync()?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hps_core::persistent::PdbConfig;

    fn spec(n: u64, dtype: DType) -> TableSpec {
        TableSpec {
            name: TableName::new("emb").unwrap(),
            dim: 4,
            dtype,
            n_keys: n,
            seed: 9,
        }
    }

    #[test]
    fn empty_table_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let pdb = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        assert_eq!(bulk_load(&spec(0, DType::F32), &pdb).unwrap(), 0);
        assert_eq!(pdb.key_count(&spec(0, DType::F32).name).unwrap(), 0);
    }

    #[test]
    fn scan_matches_generator() {
        let dir = tempfile::tempdir().unwrap();
        let pdb = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
        let s = spec(20_000, DType::F16);
        assert_eq!(bulk_load(&s, &pdb).unwrap(), 20_000);
        let expected: Vec<_> = synthetic_vectors(&s).collect();
        let scanned: Vec<_> = pdb
            .scan(&s.name)
            .unwrap()
            .map(|e| e.map(|e| (e.key.0, e.vector, e.version)))
            .collect::<hps_core::Result<_>>()
            .unwrap();
        assert_eq!(scanned.len(), expected.len());
        for ((k, v, ver), (ek, ev)) in scanned.into_iter().zip(expected) {
            assert_eq!((k, &v, ver), (ek, &ev, 0));
            assert!(v.to_f32_vec().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn reload_is_bit_identical() {
        let a: Vec<_> = synthetic_vectors(&spec(100, DType::F32)).collect();
        let b: Vec<_> = synthetic_vectors(&spec(100, DType::F32)).collect();
        assert_eq!(a, b);
    }
}
