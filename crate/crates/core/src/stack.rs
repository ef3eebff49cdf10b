//! One deployment: the three tiers, the orchestrator and the update queues.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, Weak};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hot_cache::{CacheConfig, CacheStats, HotCache};
use crate::model::{EmbeddingKey, EmbeddingVector, TableMeta, TableName, UpdateBatch};
use crate::orchestrator::{LookupResult, MigrationTicket, Orchestrator, OrchestratorConfig};
use crate::persistent::{PdbConfig, PersistentStore};
use crate::pipeline::{
    apply_updates, refresh_once, MessageBroker, RefreshConfig, RefreshLoop, Subscription,
};
use crate::volatile::{VdbConfig, VolatileStore};

pub const PDB_DIR: &str = "pdb";
pub const QUEUE_DIR: &str = "queues";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    #[serde(default)]
    pub pdb: PdbConfig,
    #[serde(default)]
    pub orchestrator: OrchestratorConfig,
    #[serde(default)]
    pub sync_queues: bool,
}

pub struct Stack {
    root: PathBuf,
    orch: Orchestrator,
    broker: MessageBroker,
    subs: Mutex<HashMap<TableName, Subscription>>,
}

impl Stack {
    /// Opens (or creates) a deployment under `root`: the PDB lives in
    /// `root/pdb`, update queues in `root/queues`.
    pub fn open(root: impl AsRef<Path>, config: StackConfig) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let pdb = PersistentStore::open(root.join(PDB_DIR), config.pdb)?;
        let broker = MessageBroker::open_with(root.join(QUEUE_DIR), config.sync_queues)?;
        let orch = Orchestrator::new(
            Arc::new(HotCache::new()),
            Arc::new(VolatileStore::new()),
            Arc::new(pdb),
            config.orchestrator,
        )?;
        Ok(Stack {
            root,
            orch,
            broker,
            subs: Mutex::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orch
    }

    pub fn broker(&self) -> &MessageBroker {
        &self.broker
    }

    /// Registers a table everywhere. Queued updates not yet in the PDB are
    /// picked up by the next [`Stack::apply_pending`].
    pub fn register_table(
        &self,
        meta: TableMeta,
        cache: CacheConfig,
        vdb: VdbConfig,
    ) -> Result<()> {
        self.orch.register_table(meta.clone(), cache, vdb)?;
        self.broker.register(&meta)?;
        let mut subs = self.subs.lock().unwrap();
        if !subs.contains_key(meta.table()) {
            subs.insert(
                meta.table().clone(),
                self.broker.subscribe(meta.table(), 0)?,
            );
        }
        Ok(())
    }

    /// Registers every table already present in the PDB.
    pub fn register_existing(&self, cache: CacheConfig, vdb: VdbConfig) -> Result<Vec<TableName>> {
        let pdb = self.orch.pdb();
        let tables = pdb.tables();
        for t in &tables {
            self.register_table(pdb.meta(t)?, cache, vdb)?;
        }
        Ok(tables)
    }

    pub fn tables(&self) -> Vec<TableName> {
        self.orch.tables()
    }

    pub fn meta(&self, table: &TableName) -> Result<TableMeta> {
        self.orch.meta(table)
    }

    pub fn lookup(
        &self,
        table: &TableName,
        keys: &[EmbeddingKey],
    ) -> Result<(LookupResult, MigrationTicket)> {
        self.orch.lookup(table, keys)
    }

    pub fn publish(
        &self,
        table: &TableName,
        entries: Vec<(EmbeddingKey, EmbeddingVector)>,
    ) -> Result<u64> {
        self.orch.meta(table)?;
        self.broker.publish(table, entries)
    }

    pub fn publish_batch(&self, batch: UpdateBatch) -> Result<u64> {
        self.orch.meta(batch.table())?;
        self.broker.publish_batch(batch)
    }

    /// Drains the table's queue into the PDB and VDB.
    pub fn apply_pending(&self, table: &TableName) -> Result<usize> {
        let mut subs = self.subs.lock().unwrap();
        let sub = subs
            .get_mut(table)
            .ok_or_else(|| Error::UnknownTable(table.clone()))?;
        apply_updates(sub, self.orch.vdb(), self.orch.pdb(), usize::MAX)
    }

    /// Applies pending updates, then refreshes stale L1 entries. Returns
    /// the number of L1 replacements.
    pub fn refresh(&self, table: &TableName) -> Result<usize> {
        self.apply_pending(table)?;
        refresh_once(table, self.orch.cache(), self.orch.vdb(), self.orch.pdb())
    }

    pub fn refresh_all(&self) -> Result<usize> {
        let mut total = 0;
        for t in self.tables() {
            total += self.refresh(&t)?;
        }
        Ok(total)
    }

    pub fn cache_stats(&self, table: &TableName) -> Result<CacheStats> {
        self.orch.cache().stats(table)
    }

    /// Starts a refresh loop over all tables. The loop holds only a weak
    /// reference, so dropping the last `Arc<Stack>` ends its work.
    pub fn start_refresh(self: &Arc<Self>, config: RefreshConfig) -> Result<RefreshLoop> {
        let weak: Weak<Stack> = Arc::downgrade(self);
        RefreshLoop::start(config, move || match weak.upgrade() {
            Some(stack) => stack.refresh_all(),
            None => Ok(0),
        })
    }
}
