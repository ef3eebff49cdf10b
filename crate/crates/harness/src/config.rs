//! The experiment config file (TOML). Every section except `table` and
//! `workload` may be omitted.
//!
//! ```toml
//! data_dir = "hps-data"
//!
//! [table]
//! name = "emb"
//! dim = 16
//! dtype = "F32"
//! n_keys = 100000
//! seed = 1
//!
//! [workload]
//! n_keys = 100000
//! zipf_s = 1.2
//! batch_size = 100
//! n_batches = 4000
//! seed = 7
//! update_rate = 0
//!
//! [cache]
//! capacity = 10000
//!
//! [vdb]
//! num_shards = 8
//! per_shard_capacity = 16384
//!
//! [replay]
//! workers = 1
//! warmup_batches = 2000
//!
//! [server]
//! bind = "127.0.0.1:7878"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hps_core::hot_cache::CacheConfig;
use hps_core::pipeline::RefreshConfig;
use hps_core::volatile::VdbConfig;
use hps_core::StackConfig;

use crate::error::{HarnessError, Result};
use crate::load::TableSpec;
use crate::replay::ReplayOptions;
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySection {
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub warmup_batches: usize,
    #[serde(default)]
    pub await_migrations: bool,
    #[serde(default)]
    pub refresh: RefreshConfig,
}

fn one() -> usize {
    1
}

impl Default for ReplaySection {
    fn default() -> Self {
        ReplaySection {
            workers: 1,
            warmup_batches: 0,
            await_migrations: false,
            refresh: RefreshConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerSection {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_server_workers")]
    pub workers: usize,
}

fn default_bind() -> String {
    "127.0.0.1:7878".into()
}

fn default_server_workers() -> usize {
    4
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            bind: default_bind(),
            workers: default_server_workers(),
        }
    }
}

fn default_cache() -> CacheConfig {
    CacheConfig::new(10_000)
}

fn default_vdb() -> VdbConfig {
    VdbConfig::new(8, 1 << 16)
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("hps-data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    pub table: TableSpec,
    pub workload: WorkloadSpec,
    #[serde(default = "default_cache")]
    pub cache: CacheConfig,
    #[serde(default = "default_vdb")]
    pub vdb: VdbConfig,
    #[serde(default)]
    pub stack: StackConfig,
    #[serde(default)]
    pub replay: ReplaySection,
    #[serde(default)]
    pub server: ServerSection,
}

impl HarnessConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn replay_options(&self) -> ReplayOptions {
        ReplayOptions {
            table: self.table.name.clone(),
            workers: self.replay.workers,
            warmup_batches: self.replay.warmup_batches,
            await_migrations: self.replay.await_migrations,
            refresh: self.replay.refresh,
        }
    }
}
