//! Embedding placement planners over abstract devices and a per-iteration
//! all-to-all traffic model.
//!
//! * `LocalizedSlot`: every slot lives whole on one device (greedy
//!   longest-first onto the device with the most remaining budget).
//! * `DistributedSlot`: every key goes to device `key_hash(key) % G`.
//! * `HybridSparse`: the most frequent keys are replicated on every device,
//!   the rest are sharded as in `DistributedSlot`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{key_hash, EmbeddingKey, TableName};

/// Scalars are modelled as 4-byte floats.
const SCALAR_BYTES: u64 = 4;
/// Allowed overshoot of the per-device share before sharding is infeasible.
pub const IMBALANCE_ALLOWANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub slot_id: u32,
    pub table: TableName,
    /// Keys of the slot are `0..vocab_size`.
    pub vocab_size: u64,
    pub dim: u16,
    /// Maximum keys looked up per sample.
    pub hotness: u32,
}

impl SlotSpec {
    pub fn row_bytes(&self) -> u64 {
        self.dim as u64 * SCALAR_BYTES
    }

    pub fn table_bytes(&self) -> u64 {
        self.vocab_size * self.row_bytes()
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hotness == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "slot {}: vocab_size, hotness and dim must be >= 1",
                self.slot_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: u32,
    pub memory_budget: u64,
}

/// Access counts for the keys of one table, plus the mass of keys not listed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: Vec<(EmbeddingKey, u64)>,
    residual: u64,
}

impl FrequencyTable {
    pub fn new(counts: Vec<(EmbeddingKey, u64)>, residual: u64) -> Result<Self> {
        let mut seen = HashSet::with_capacity(counts.len());
        for (k, _) in &counts {
            if !seen.insert(*k) {
                return Err(Error::DuplicateKey(*k));
            }
        }
        Ok(FrequencyTable { counts, residual })
    }

    /// Counts every occurrence in a key stream.
    pub fn from_stream(keys: impl IntoIterator<Item = EmbeddingKey>) -> Self {
        let mut m: HashMap<EmbeddingKey, u64> = HashMap::new();
        for k in keys {
            *m.entry(k).or_default() += 1;
        }
        let mut counts: Vec<_> = m.into_iter().collect();
        counts.sort();
        FrequencyTable {
            counts,
            residual: 0,
        }
    }

    /// Parses `key count` lines. Blank lines and `#` comments are ignored;
    /// a line `residual N` sets the unlisted mass.
    pub fn parse(reader: impl BufRead) -> Result<Self> {
        let mut counts = Vec::new();
        let mut residual = 0;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::InvalidConfig(format!("frequency file line {}: `{line}`", n + 1));
            let mut parts = line.split_whitespace();
            let (a, b) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
            if parts.next().is_some() {
                return Err(bad());
            }
            let count: u64 = b.parse().map_err(|_| bad())?;
            if a == "residual" {
                residual = count;
            } else {
                counts.push((EmbeddingKey(a.parse().map_err(|_| bad())?), count));
            }
        }
        FrequencyTable::new(counts, residual)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, c) in &self.counts {
            let _ = writeln!(s, "{k} {c}");
        }
        if self.residual > 0 {
            let _ = writeln!(s, "residual {}", self.residual);
        }
        s
    }

    pub fn counts(&self) -> &[(EmbeddingKey, u64)] {
        &self.counts
    }

    pub fn residual(&self) -> u64 {
        self.residual
    }

    pub fn total_mass(&self) -> u64 {
        self.counts.iter().map(|(_, c)| c).sum::<u64>() + self.residual
    }

    pub fn count_map(&self) -> HashMap<EmbeddingKey, u64> {
        self.counts.iter().copied().collect()
    }
}

/// Frequency tables keyed by slot id.
pub type SlotFrequencies = BTreeMap<u32, FrequencyTable>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    LocalizedSlot,
    DistributedSlot,
    HybridSparse,
}

/// Where one key of one slot lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    Device(u32),
    Replicated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub strategy: Strategy,
    /// Device ids in index order; shard rules produce an index into this list.
    pub devices: Vec<u32>,
    /// Localized: slot id -> device id.
    #[serde(default)]
    pub slot_devices: BTreeMap<u32, u32>,
    /// Hybrid: replicated keys per slot, sorted ascending.
    #[serde(default)]
    pub hot_keys: BTreeMap<u32, Vec<u64>>,
    /// Bytes of one copy of the hot set.
    #[serde(default)]
    pub hot_bytes: u64,
    /// Bytes resident on each device, in `devices` order.
    pub device_memory: Vec<u64>,
}

impl PlacementPlan {
    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    fn shard(&self, key: EmbeddingKey) -> u32 {
        self.devices[(key_hash(key) % self.devices.len() as u64) as usize]
    }

    pub fn is_hot(&self, slot_id: u32, key: EmbeddingKey) -> bool {
        self.hot_keys
            .get(&slot_id)
            .is_some_and(|ks| ks.binary_search(&key.0).is_ok())
    }

    pub fn hot_count(&self) -> usize {
        self.hot_keys.values().map(Vec::len).sum()
    }

    pub fn device_of(&self, slot_id: u32, key: EmbeddingKey) -> Result<Assignment> {
        match self.strategy {
            Strategy::LocalizedSlot => self
                .slot_devices
                .get(&slot_id)
                .map(|d| Assignment::Device(*d))
                .ok_or_else(|| Error::InvalidConfig(format!("slot {slot_id} not in plan"))),
            Strategy::DistributedSlot => Ok(Assignment::Device(self.shard(key))),
            Strategy::HybridSparse => Ok(if self.is_hot(slot_id, key) {
                Assignment::Replicated
            } else {
                Assignment::Device(self.shard(key))
            }),
        }
    }

    /// Extra bytes spent on hot-set copies beyond the first.
    pub fn replication_overhead(&self) -> u64 {
        self.hot_bytes * self.devices.len().saturating_sub(1) as u64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidConfig(format!("plan file: {e}")))
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "strategy: {:?}", self.strategy);
        let _ = writeln!(s, "devices:  {}", self.devices.len());
        for (id, mem) in self.devices.iter().zip(&self.device_memory) {
            let _ = writeln!(s, "  device {id:>4}: {mem:>16} bytes");
        }
        if !self.slot_devices.is_empty() {
            let _ = writeln!(s, "slots:");
            for (slot, dev) in &self.slot_devices {
                let _ = writeln!(s, "  slot {slot:>4} -> device {dev}");
            }
        }
        if self.strategy == Strategy::HybridSparse {
            let _ = writeln!(
                s,
                "hot set: {} keys, {} bytes per copy, {} bytes replication overhead",
                self.hot_count(),
                self.hot_bytes,
                self.replication_overhead()
            );
        }
        s
    }
}

fn check_inputs(slots: &[SlotSpec], devices: &[DeviceSpec]) -> Result<()> {
    if devices.is_empty() {
        return Err(Error::InvalidConfig("at least one device required".into()));
    }
    if let Some(d) = devices.iter().find(|d| d.memory_budget == 0) {
        return Err(Error::InvalidConfig(format!(
            "device {} has zero budget",
            d.id
        )));
    }
    let mut ids = HashSet::new();
    for s in slots {
        s.validate()?;
        if !ids.insert(s.slot_id) {
            return Err(Error::InvalidConfig(format!(
                "duplicate slot id {}",
                s.slot_id
            )));
        }
    }
    Ok(())
}

/// Splits `total` into `parts` near-equal shares that sum exactly to `total`.
fn split_even(total: u64, parts: usize) -> Vec<u64> {
    let (q, r) = (total / parts as u64, total % parts as u64);
    (0..parts as u64).map(|i| q + u64::from(i < r)).collect()
}

pub fn plan_localized(slots: &[SlotSpec], devices: &[DeviceSpec]) -> Result<PlacementPlan> {
    check_inputs(slots, devices)?;
    let mut order: Vec<&SlotSpec> = slots.iter().collect();
    order.sort_by(|a, b| {
        b.table_bytes()
            .cmp(&a.table_bytes())
            .then(a.slot_id.cmp(&b.slot_id))
    });
    let mut remaining: Vec<u64> = devices.iter().map(|d| d.memory_budget).collect();
    let mut used = vec![0u64; devices.len()];
    let mut slot_devices = BTreeMap::new();
    for slot in order {
        // Most remaining budget, lowest index on ties.
        let (idx, _) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        let bytes = slot.table_bytes();
        if bytes > remaining[idx] {
            return Err(Error::Infeasible(format!(
                "slot {} ({} bytes) does not fit on any device",
                slot.slot_id, bytes
            )));
        }
        remaining[idx] -= bytes;
        used[idx] += bytes;
        slot_devices.insert(slot.slot_id, devices[idx].id);
    }
    Ok(PlacementPlan {
        strategy: Strategy::LocalizedSlot,
        devices: devices.iter().map(|d| d.id).collect(),
        slot_devices,
        hot_keys: BTreeMap::new(),
        hot_bytes: 0,
        device_memory: used,
    })
}

fn check_shard_capacity(bytes: u64, devices: &[DeviceSpec], reserved: u64) -> Result<()> {
    let min_budget = devices.iter().map(|d| d.memory_budget).min().unwrap();
    let available = min_budget.saturating_sub(reserved) as f64 * (1.0 + IMBALANCE_ALLOWANCE);
    let share = bytes as f64 / devices.len() as f64;
    if share > available {
        return Err(Error::Infeasible(format!(
            "per-device share {share:.0} bytes exceeds {available:.0} available"
        )));
    }
    Ok(())
}

pub fn plan_distributed(slots: &[SlotSpec], devices: &[DeviceSpec]) -> Result<PlacementPlan> {
    check_inputs(slots, devices)?;
    let total: u64 = slots.iter().map(SlotSpec::table_bytes).sum();
    check_shard_capacity(total, devices, 0)?;
    Ok(PlacementPlan {
        strategy: Strategy::DistributedSlot,
        devices: devices.iter().map(|d| d.id).collect(),
        slot_devices: BTreeMap::new(),
        hot_keys: BTreeMap::new(),
        hot_bytes: 0,
        device_memory: split_even(total, devices.len()),
    })
}

/// Replicates the most frequent keys, ranked by `(count desc, key asc, slot
/// asc)`, while they fit in `hot_budget_per_device`; shards the rest.
/// Keys absent from the frequency tables rank after every counted key.
pub fn plan_hybrid(
    slots: &[SlotSpec],
    devices: &[DeviceSpec],
    freq: &SlotFrequencies,
    hot_budget_per_device: u64,
) -> Result<PlacementPlan> {
    check_inputs(slots, devices)?;
    let by_id: BTreeMap<u32, &SlotSpec> = slots.iter().map(|s| (s.slot_id, s)).collect();

    let mut counted: Vec<(u64, u64, u32)> = Vec::new();
    let mut listed: HashMap<u32, HashSet<u64>> = HashMap::new();
    for (&slot_id, table) in freq {
        let slot = by_id.get(&slot_id).ok_or_else(|| {
            Error::InvalidConfig(format!("frequencies for unknown slot {slot_id}"))
        })?;
        for &(key, count) in table.counts() {
            if key.0 >= slot.vocab_size {
                return Err(Error::InvalidConfig(format!(
                    "slot {slot_id}: key {key} outside vocabulary"
                )));
            }
            if count > 0 {
                counted.push((count, key.0, slot_id));
                listed.entry(slot_id).or_default().insert(key.0);
            }
        }
    }
    counted.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut hot_keys: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    let mut hot_bytes = 0u64;
    let mut full = false;
    for &(_, key, slot_id) in &counted {
        let row = by_id[&slot_id].row_bytes();
        if hot_bytes + row > hot_budget_per_device {
            full = true;
            break;
        }
        hot_bytes += row;
        hot_keys.entry(slot_id).or_default().push(key);
    }
    if !full {
        // Uncounted keys, ascending key then slot.
        let max_vocab = slots.iter().map(|s| s.vocab_size).max().unwrap_or(0);
        let empty = HashSet::new();
        'outer: for key in 0..max_vocab {
            for (&slot_id, slot) in &by_id {
                if key >= slot.vocab_size || listed.get(&slot_id).unwrap_or(&empty).contains(&key) {
                    continue;
                }
                if hot_bytes + slot.row_bytes() > hot_budget_per_device {
                    break 'outer;
                }
                hot_bytes += slot.row_bytes();
                hot_keys.entry(slot_id).or_default().push(key);
            }
        }
    }
    for ks in hot_keys.values_mut() {
        ks.sort_unstable();
    }

    let total: u64 = slots.iter().map(SlotSpec::table_bytes).sum();
    let cold = total - hot_bytes;
    let min_budget = devices.iter().map(|d| d.memory_budget).min().unwrap();
    if hot_bytes > min_budget {
        return Err(Error::Infeasible(format!(
            "hot set of {hot_bytes} bytes exceeds the smallest device budget"
        )));
    }
    check_shard_capacity(cold, devices, hot_bytes)?;
    let device_memory = split_even(cold, devices.len())
        .into_iter()
        .map(|c| c + hot_bytes)
        .collect();
    Ok(PlacementPlan {
        strategy: Strategy::HybridSparse,
        devices: devices.iter().map(|d| d.id).collect(),
        slot_devices: BTreeMap::new(),
        hot_keys,
        hot_bytes,
        device_memory,
    })
}

/// Modelled all-to-all bytes per training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommEstimate {
    pub bytes_all_to_all_fwd: f64,
    pub bytes_all_to_all_bwd: f64,
    pub device_memory: Vec<u64>,
}

/// Fraction of a slot's access mass that falls on non-replicated keys. The
/// residual mass is spread uniformly over the keys absent from `freq`.
fn cold_fraction(plan: &PlacementPlan, slot: &SlotSpec, freq: Option<&FrequencyTable>) -> f64 {
    let empty = Vec::new();
    let hot = plan.hot_keys.get(&slot.slot_id).unwrap_or(&empty);
    let total = freq.map_or(0, FrequencyTable::total_mass);
    let Some(freq) = freq.filter(|_| total > 0) else {
        return (slot.vocab_size - hot.len() as u64) as f64 / slot.vocab_size as f64;
    };
    let counts = freq.count_map();
    let hot_counted: f64 = hot
        .iter()
        .filter_map(|k| counts.get(&EmbeddingKey(*k)))
        .map(|&c| c as f64)
        .sum();
    let hot_unlisted = hot
        .iter()
        .filter(|k| !counts.contains_key(&EmbeddingKey(**k)))
        .count() as f64;
    let unlisted = slot.vocab_size.saturating_sub(counts.len() as u64) as f64;
    let hot_residual = if unlisted > 0.0 {
        freq.residual() as f64 * hot_unlisted / unlisted
    } else {
        0.0
    };
    let cold = (total as f64 - hot_counted - hot_residual).max(0.0);
    cold / total as f64
}

/// Localized and distributed plans: every device ends up with the pooled
/// outputs of the full batch, so `B * sum(dim) * 4 * (G-1)/G` bytes move.
/// Hybrid plans only move cold lookups:
/// `B * sum(hotness * p_cold * dim) * 4 * (G-1)/G`.
pub fn estimate_comm(
    plan: &PlacementPlan,
    batch_size: u64,
    slots: &[SlotSpec],
    freq: Option<&SlotFrequencies>,
) -> Result<CommEstimate> {
    let g = plan.num_devices() as u64;
    if g == 0 {
        return Err(Error::InvalidConfig("plan has no devices".into()));
    }
    let fwd = match plan.strategy {
        Strategy::LocalizedSlot | Strategy::DistributedSlot => {
            let dims: u64 = slots.iter().map(|s| s.dim as u64).sum();
            (batch_size as u128 * dims as u128 * SCALAR_BYTES as u128 * (g - 1) as u128) as f64
                / g as f64
        }
        Strategy::HybridSparse => {
            let freq = freq.ok_or_else(|| {
                Error::InvalidConfig("hybrid estimate needs frequency data".into())
            })?;
            let per_sample: f64 = slots
                .iter()
                .map(|s| {
                    s.hotness as f64
                        * cold_fraction(plan, s, freq.get(&s.slot_id))
                        * s.row_bytes() as f64
                })
                .sum();
            batch_size as f64 * per_sample * (g - 1) as f64 / g as f64
        }
    };
    Ok(CommEstimate {
        bytes_all_to_all_fwd: fwd,
        bytes_all_to_all_bwd: fwd,
        device_memory: plan.device_memory.clone(),
    })
}
