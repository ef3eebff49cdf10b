//! A three-level parameter server for embedding tables.
//!
//! * [`hot_cache`]: bounded set-associative LFU cache (level 1)
//! * [`volatile`]: sharded in-memory partial copy (level 2)
//! * [`persistent`]: append-only on-disk full copy (level 3)
//! * [`orchestrator`]: read-through lookup with asynchronous promotion
//! * [`pipeline`]: per-table update queues, subscription and refresh
//! * [`placement`]: embedding placement planners and a traffic model
//! * [`stack`]: everything above wired together for one deployment

pub mod error;
mod fsname;
pub mod hot_cache;
pub mod model;
pub mod orchestrator;
pub mod persistent;
pub mod pipeline;
pub mod placement;
pub mod stack;
pub mod volatile;

pub use error::{DecodeError, Error, Result};
pub use model::{
    BatchGet, DType, EmbeddingKey, EmbeddingVector, TableMeta, TableName, UpdateBatch,
    VersionedEntry,
};
pub use stack::{Stack, StackConfig};
