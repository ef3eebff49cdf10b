//! Replays a key trace against a deployment while publishing updates.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use hps_core::orchestrator::{MigrationTicket, SourceCounts};
use hps_core::pipeline::{RefreshConfig, RefreshLoop, RefreshMode};
use hps_core::{DType, EmbeddingKey, EmbeddingVector, Stack, TableName};
use hps_service::Client;

use crate::error::{HarnessError, Result};
use crate::report::MetricsReport;
use crate::workload::{rng, KeySpace, Trace, WorkloadSpec, STREAM_UPDATES};

/// Where lookups and updates go.
pub trait Backend: Send + Sync {
    fn shape(&self, table: &TableName) -> Result<(u16, DType)>;
    fn lookup(
        &self,
        table: &TableName,
        keys: &[EmbeddingKey],
    ) -> Result<(SourceCounts, Option<MigrationTicket>)>;
    fn publish(
        &self,
        table: &TableName,
        entries: Vec<(EmbeddingKey, EmbeddingVector)>,
    ) -> Result<u64>;
    /// Applies pending updates and refreshes L1; returns replacements.
    fn refresh(&self, table: &TableName) -> Result<u64>;
    fn refresh_replacements(&self, table: &TableName) -> Result<u64>;
    fn migration_drops(&self) -> u64;
}

impl Backend for Stack {
    fn shape(&self, table: &TableName) -> Result<(u16, DType)> {
        let m = self.meta(table)?;
        Ok((m.dim(), m.dtype()))
    }

    fn lookup(
        &self,
        table: &TableName,
        keys: &[EmbeddingKey],
    ) -> Result<(SourceCounts, Option<MigrationTicket>)> {
        let (r, t) = Stack::lookup(self, table, keys)?;
        Ok((r.source_counts, Some(t)))
    }

    fn publish(
        &self,
        table: &TableName,
        entries: Vec<(EmbeddingKey, EmbeddingVector)>,
    ) -> Result<u64> {
        Ok(Stack::publish(self, table, entries)?)
    }

    fn refresh(&self, table: &TableName) -> Result<u64> {
        Ok(Stack::refresh(self, table)? as u64)
    }

    fn refresh_replacements(&self, table: &TableName) -> Result<u64> {
        Ok(self.cache_stats(table)?.refresh_replacements)
    }

    fn migration_drops(&self) -> u64 {
        self.orchestrator().migration_stats().dropped
    }
}

impl Backend for Client {
    fn shape(&self, table: &TableName) -> Result<(u16, DType)> {
        let r = Client::lookup(self, table, &[])?;
        Ok((r.dim, r.dtype))
    }

    fn lookup(
        &self,
        table: &TableName,
        keys: &[EmbeddingKey],
    ) -> Result<(SourceCounts, Option<MigrationTicket>)> {
        Ok((Client::lookup(self, table, keys)?.source_counts, None))
    }

    fn publish(
        &self,
        table: &TableName,
        entries: Vec<(EmbeddingKey, EmbeddingVector)>,
    ) -> Result<u64> {
        let (dim, dtype) = self.shape(table)?;
        let batch = hps_core::UpdateBatch::new(table.clone(), 0, dim, dtype, entries)?;
        Ok(Client::publish(self, &batch)?)
    }

    fn refresh(&self, table: &TableName) -> Result<u64> {
        Ok(Client::refresh(self, table)?)
    }

    fn refresh_replacements(&self, table: &TableName) -> Result<u64> {
        Ok(self.stats(table)?.refresh_replacements)
    }

    /// Not visible over the wire.
    fn migration_drops(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    pub table: TableName,
    #[serde(default = "one")]
    pub workers: usize,
    /// Leading batches replayed without being measured.
    #[serde(default)]
    pub warmup_batches: usize,
    /// Wait for each lookup's promotions before the next batch.
    #[serde(default)]
    pub await_migrations: bool,
    #[serde(default)]
    pub refresh: RefreshConfig,
}

fn one() -> usize {
    1
}

impl ReplayOptions {
    pub fn new(table: TableName) -> Self {
        ReplayOptions {
            table,
            workers: 1,
            warmup_batches: 0,
            await_migrations: false,
            refresh: RefreshConfig::default(),
        }
    }
}

/// Generates the trace for `spec` and replays it.
pub fn replay(
    spec: &WorkloadSpec,
    backend: Arc<dyn Backend>,
    opts: &ReplayOptions,
) -> Result<MetricsReport> {
    replay_trace(&Trace::generate(spec)?, spec, backend, opts)
}

fn update_entries(
    space: &KeySpace,
    spec: &WorkloadSpec,
    batch_idx: usize,
    dim: u16,
    dtype: DType,
) -> Vec<(EmbeddingKey, EmbeddingVector)> {
    let mut r = rng(
        spec.seed ^ (batch_idx as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        STREAM_UPDATES,
    );
    let keys = space.sample_distinct(spec.update_rate, &mut r);
    keys.into_iter()
        .map(|k| {
            let v: Vec<f32> = (0..dim).map(|_| r.gen_range(-1.0f32..=1.0)).collect();
            let v = EmbeddingVector::f32(v)
                .and_then(|v| v.to_dtype(dtype))
                .expect("in range");
            (EmbeddingKey(k), v)
        })
        .collect()
}

struct WorkerOut {
    counts: SourceCounts,
    latencies: Vec<f64>,
    published: u64,
}

/// Replays `trace` in batches. `spec` supplies the update stream
/// (`update_rate`, `zipf_s`, `seed`); its `n_keys` must match the trace.
pub fn replay_trace(
    trace: &Trace,
    spec: &WorkloadSpec,
    backend: Arc<dyn Backend>,
    opts: &ReplayOptions,
) -> Result<MetricsReport> {
    if opts.workers == 0 {
        return Err(HarnessError::InvalidSpec("workers must be >= 1".into()));
    }
    if spec.n_keys != trace.n_keys {
        return Err(HarnessError::InvalidSpec(format!(
            "workload n_keys {} differs from trace n_keys {}",
            spec.n_keys, trace.n_keys
        )));
    }
    let table = &opts.table;
    let (dim, dtype) = backend.shape(table)?;
    let space = (spec.update_rate > 0)
        .then(|| KeySpace::new(spec))
        .transpose()?;
    let batches: Vec<&[u64]> = trace.batches().collect();
    let warm = opts.warmup_batches.min(batches.len());
    let to_keys = |b: &[u64]| b.iter().copied().map(EmbeddingKey).collect::<Vec<_>>();

    for b in &batches[..warm] {
        let (_, ticket) = backend.lookup(table, &to_keys(b))?;
        if let (true, Some(t)) = (opts.await_migrations, ticket) {
            t.wait();
        }
    }

    let base_replaced = backend.refresh_replacements(table)?;
    let base_drops = backend.migration_drops();
    let mut refresher = match opts.refresh.mode {
        RefreshMode::Periodic => {
            let (b, t) = (backend.clone(), table.clone());
            Some(RefreshLoop::start(opts.refresh, move || {
                b.refresh(&t).map(|n| n as usize).map_err(|e| match e {
                    HarnessError::Core(e) => e,
                    other => hps_core::Error::InvalidConfig(other.to_string()),
                })
            })?)
        }
        RefreshMode::ExplicitOnly => None,
    };

    let measured = &batches[warm..];
    let started = Instant::now();
    let outs: Vec<Result<WorkerOut>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..opts.workers)
            .map(|w| {
                let backend = backend.clone();
                let space = space.as_ref();
                scope.spawn(move || -> Result<WorkerOut> {
                    let mut out = WorkerOut {
                        counts: SourceCounts::default(),
                        latencies: Vec::new(),
                        published: 0,
                    };
                    for i in (w..measured.len()).step_by(opts.workers) {
                        let keys = to_keys(measured[i]);
                        let t0 = Instant::now();
                        let (counts, ticket) = backend.lookup(table, &keys)?;
                        if let (true, Some(t)) = (opts.await_migrations, ticket) {
                            t.wait();
                        }
                        let us = t0.elapsed().as_secs_f64() * 1e6;
                        out.latencies.push(us / keys.len().max(1) as f64);
                        out.counts.add(&counts);
                        if let Some(space) = space {
                            let entries = update_entries(space, spec, warm + i, dim, dtype);
                            out.published += entries.len() as u64;
                            backend.publish(table, entries)?;
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("replay worker panicked"))
            .collect()
    });
    let wall = started.elapsed().as_secs_f64();
    if let Some(r) = refresher.as_mut() {
        r.stop();
    }

    let mut counts = SourceCounts::default();
    let mut latencies = Vec::new();
    let mut published = 0;
    for o in outs {
        let o = o?;
        counts.add(&o.counts);
        latencies.extend(o.latencies);
        published += o.published;
    }
    if published > 0 {
        backend.refresh(table)?;
    }
    let mut report = MetricsReport::build(counts, measured.len() as u64, latencies, wall);
    report.updates_published = published;
    report.refresh_replacements = backend.refresh_replacements(table)? - base_replaced;
    report.migration_drops = backend.migration_drops() - base_drops;
    Ok(report)
}
