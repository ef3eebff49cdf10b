use std::sync::Arc;

use hps_core::hot_cache::{CacheConfig, HotCache};
use hps_core::orchestrator::{
    MigrationOutcome, Orchestrator, OrchestratorConfig, Source, SourceCounts,
};
use hps_core::persistent::{PdbConfig, PersistentStore};
use hps_core::placement::FrequencyTable;
use hps_core::volatile::{VdbConfig, VolatileStore};
use hps_core::{EmbeddingKey, EmbeddingVector, TableMeta, TableName, VersionedEntry};

fn name(s: &str) -> TableName {
    TableName::new(s).unwrap()
}

fn vec_for(k: u64) -> EmbeddingVector {
    EmbeddingVector::f32(vec![k as f32, -(k as f32)]).unwrap()
}

fn keys(ks: &[u64]) -> Vec<EmbeddingKey> {
    ks.iter().copied().map(EmbeddingKey).collect()
}

struct Fixture {
    _dir: tempfile::TempDir,
    orch: Orchestrator,
    table: TableName,
}

fn fixture(n_keys: u64, cache_cap: usize, cfg: OrchestratorConfig) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let pdb = PersistentStore::open(dir.path(), PdbConfig::default()).unwrap();
    let orch = Orchestrator::new(
        Arc::new(HotCache::new()),
        Arc::new(VolatileStore::new()),
        Arc::new(pdb),
        cfg,
    )
    .unwrap();
    let table = name("emb");
    let default = EmbeddingVector::f32(vec![0.5, 0.5]).unwrap();
    orch.register_table(
        TableMeta::with_default(table.clone(), default),
        CacheConfig::new(cache_cap),
        VdbConfig::new(4, 1 << 16),
    )
    .unwrap();
    let entries: Vec<_> = (0..n_keys)
        .map(|k| VersionedEntry::new(k, vec_for(k), 0))
        .collect();
    orch.pdb().put_batch(&table, &entries).unwrap();
    Fixture {
        _dir: dir,
        orch,
        table,
    }
}

#[test]
fn cold_lookup_comes_from_l3_then_l1() {
    let f = fixture(100, 1024, OrchestratorConfig::default());
    let ks = keys(&[3, 7, 11]);
    let (r, ticket) = f.orch.lookup(&f.table, &ks).unwrap();
    assert_eq!(r.sources, [Source::L3; 3]);
    assert_eq!(r.vectors, vec![vec_for(3), vec_for(7), vec_for(11)]);
    assert_eq!(
        f.orch.await_migrations(&ticket),
        MigrationOutcome::Completed { to_l2: 3, to_l1: 3 }
    );
    // Awaiting twice is harmless.
    assert!(matches!(
        f.orch.await_migrations(&ticket),
        MigrationOutcome::Completed { .. }
    ));
    let (r, ticket) = f.orch.lookup(&f.table, &ks).unwrap();
    assert_eq!(r.sources, [Source::L1; 3]);
    assert_eq!(r.source_counts, SourceCounts::from_array([3, 0, 0, 0]));
    assert_eq!(ticket.wait(), MigrationOutcome::Nothing);
    assert_eq!(f.orch.vdb().len(&f.table).unwrap(), 3);
}

#[test]
fn absent_keys_get_default_and_are_not_promoted() {
    let f = fixture(10, 64, OrchestratorConfig::default());
    let (r, ticket) = f.orch.lookup(&f.table, &keys(&[1000, 2000])).unwrap();
    assert_eq!(r.sources, [Source::Default; 2]);
    assert_eq!(r.vectors[0], EmbeddingVector::f32(vec![0.5, 0.5]).unwrap());
    assert_eq!(ticket.wait(), MigrationOutcome::Nothing);
    assert_eq!(f.orch.cache().len(&f.table).unwrap(), 0);
    assert_eq!(f.orch.vdb().len(&f.table).unwrap(), 0);
    assert_eq!(f.orch.pdb().key_count(&f.table).unwrap(), 10);
}

#[test]
fn order_and_duplicates_are_preserved() {
    let f = fixture(50, 64, OrchestratorConfig::default());
    let ks = keys(&[9, 1, 9, 999, 1, 4]);
    let (r, ticket) = f.orch.lookup(&f.table, &ks).unwrap();
    assert_eq!(r.vectors.len(), 6);
    for (k, v) in ks.iter().zip(&r.vectors) {
        if k.0 < 50 {
            assert_eq!(*v, vec_for(k.0));
        }
    }
    assert_eq!(r.sources[3], Source::Default);
    assert_eq!(r.source_counts.total(), 6);
    assert_eq!(r.source_counts.l3, 5);
    // Duplicates are fetched once.
    assert_eq!(
        ticket.wait(),
        MigrationOutcome::Completed { to_l2: 3, to_l1: 3 }
    );
}

#[test]
fn unknown_table_is_an_error() {
    let f = fixture(1, 8, OrchestratorConfig::default());
    assert!(matches!(
        f.orch.lookup(&name("other"), &keys(&[0])),
        Err(hps_core::Error::UnknownTable(_))
    ));
}

#[test]
fn warmup_without_frequencies_uses_scan_order() {
    let f = fixture(100, 1024, OrchestratorConfig::default());
    assert_eq!(f.orch.warmup(&f.table, 0, None).unwrap(), 0);
    assert_eq!(f.orch.cache().len(&f.table).unwrap(), 0);
    assert_eq!(f.orch.warmup(&f.table, 10, None).unwrap(), 10);
    let (r, _) = f
        .orch
        .lookup(&f.table, &keys(&(0..10).collect::<Vec<_>>()))
        .unwrap();
    assert_eq!(r.source_counts.l1, 10);
}

#[test]
fn warmup_with_frequencies_loads_top_k() {
    let f = fixture(200, 1024, OrchestratorConfig::default());
    let counts: Vec<(u64, u64)> = (0..200).map(|k| (k, (k * 37) % 101)).collect();
    let freq = FrequencyTable::new(
        counts.iter().map(|&(k, c)| (EmbeddingKey(k), c)).collect(),
        0,
    )
    .unwrap();
    let k = 40;
    f.orch.warmup(&f.table, k, Some(&freq)).unwrap();
    let mut oracle = counts;
    oracle.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut expected: Vec<u64> = oracle[..k].iter().map(|p| p.0).collect();
    expected.sort();
    let mut resident: Vec<u64> = f
        .orch
        .cache()
        .resident_keys(&f.table)
        .unwrap()
        .into_iter()
        .map(|k| k.0)
        .collect();
    resident.sort();
    assert_eq!(resident, expected);
}

#[test]
fn full_migration_queue_drops_instead_of_blocking() {
    let f = fixture(
        5000,
        1 << 14,
        OrchestratorConfig {
            migration_workers: 1,
            migration_queue_depth: 1,
        },
    );
    let mut tickets = Vec::new();
    for k in 0..2000u64 {
        tickets.push(f.orch.lookup(&f.table, &keys(&[k])).unwrap().1);
    }
    let outcomes: Vec<_> = tickets.iter().map(|t| t.wait()).collect();
    let dropped = outcomes
        .iter()
        .filter(|o| **o == MigrationOutcome::Dropped)
        .count();
    let stats = f.orch.migration_stats();
    assert_eq!(stats.dropped as usize, dropped);
    assert_eq!(stats.enqueued + stats.dropped, 2000);
    assert_eq!(stats.completed, stats.enqueued);
    // Every lookup was still answered from L3.
    let (r, _) = f.orch.lookup(&f.table, &keys(&[4999])).unwrap();
    assert_eq!(r.sources, [Source::L3]);
}

#[test]
fn concurrent_lookups_are_consistent() {
    let f = Arc::new(fixture(2000, 256, OrchestratorConfig::default()));
    let handles: Vec<_> = (0..4u64)
        .map(|t| {
            let f = f.clone();
            std::thread::spawn(move || {
                for i in 0..500u64 {
                    let k = (i * 7 + t * 13) % 2000;
                    let (r, _) = f.orch.lookup(&f.table, &keys(&[k])).unwrap();
                    assert_eq!(r.vectors[0], vec_for(k));
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
}
