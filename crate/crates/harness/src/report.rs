//! Replay metrics and their text and JSON renderings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use hps_core::orchestrator::SourceCounts;

use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelHits {
    pub l1: u64,
    pub l2: u64,
    pub l3: u64,
    pub default: u64,
}

impl From<SourceCounts> for LevelHits {
    fn from(c: SourceCounts) -> Self {
        LevelHits {
            l1: c.l1,
            l2: c.l2,
            l3: c.l3,
            default: c.default,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelRates {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub default: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub keys_served: u64,
    pub batches: u64,
    pub hits: LevelHits,
    pub rates: LevelRates,
    pub latency_p50_us: f64,
    pub latency_p95_us: f64,
    pub latency_p99_us: f64,
    pub throughput_keys_per_s: f64,
    pub wall_seconds: f64,
    pub updates_published: u64,
    pub refresh_replacements: u64,
    pub migration_drops: u64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl MetricsReport {
    /// Fills rates and latency figures from raw measurements.
    /// `per_key_latency_us` holds one entry per batch.
    pub fn build(
        counts: SourceCounts,
        batches: u64,
        mut per_key_latency_us: Vec<f64>,
        wall_seconds: f64,
    ) -> Self {
        let keys = counts.total();
        let rate = |n: u64| {
            if keys == 0 {
                0.0
            } else {
                n as f64 / keys as f64
            }
        };
        per_key_latency_us.sort_by(f64::total_cmp);
        MetricsReport {
            keys_served: keys,
            batches,
            rates: LevelRates {
                l1: rate(counts.l1),
                l2: rate(counts.l2),
                l3: rate(counts.l3),
                default: rate(counts.default),
            },
            hits: counts.into(),
            latency_p50_us: percentile(&per_key_latency_us, 50.0),
            latency_p95_us: percentile(&per_key_latency_us, 95.0),
            latency_p99_us: percentile(&per_key_latency_us, 99.0),
            throughput_keys_per_s: if wall_seconds > 0.0 {
                keys as f64 / wall_seconds
            } else {
                0.0
            },
            wall_seconds,
            ..Default::default()
        }
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24}{:>14}{:>10}", "level", "hits", "rate");
        for (name, hits, rate) in [
            ("L1 (hot cache)", self.hits.l1, self.rates.l1),
            ("L2 (volatile)", self.hits.l2, self.rates.l2),
            ("L3 (persistent)", self.hits.l3, self.rates.l3),
            ("default", self.hits.default, self.rates.default),
        ] {
            let _ = writeln!(s, "{name:<24}{hits:>14}{rate:>10.4}");
        }
        let _ = writeln!(s, "{:<24}{:>14}", "keys served", self.keys_served);
        let _ = writeln!(s, "{:<24}{:>14}", "batches", self.batches);
        let _ = writeln!(
            s,
            "{:<24}{:>14.3}{:>10.3}{:>10.3}",
            "latency us p50/95/99", self.latency_p50_us, self.latency_p95_us, self.latency_p99_us
        );
        let _ = writeln!(
            s,
            "{:<24}{:>14.1}",
            "throughput keys/s", self.throughput_keys_per_s
        );
        let _ = writeln!(s, "{:<24}{:>14.3}", "wall seconds", self.wall_seconds);
        let _ = writeln!(
            s,
            "{:<24}{:>14}",
            "updates published", self.updates_published
        );
        let _ = writeln!(
            s,
            "{:<24}{:>14}",
            "refresh replacements", self.refresh_replacements
        );
        let _ = writeln!(s, "{:<24}{:>14}", "migration drops", self.migration_drops);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_run_is_all_zero() {
        let r = MetricsReport::build(SourceCounts::default(), 0, vec![], 0.0);
        assert_eq!(r, MetricsReport::default());
        let text = r.render_text();
        assert!(text.contains("0.0000"));
        assert!(!text.contains("NaN"));
    }

    #[test]
    fn rates_use_four_decimals() {
        let r = MetricsReport::build(SourceCounts::from_array([1, 2, 0, 0]), 1, vec![1.0], 1.0);
        let text = r.render_text();
        assert!(text.contains("0.3333"), "{text}");
        assert!(text.contains("0.6667"), "{text}");
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
    }

    proptest! {
        #[test]
        fn json_round_trip(
            counts in proptest::array::uniform4(0u64..1_000_000),
            lat in proptest::collection::vec(0.0f64..1e6, 0..50),
            wall in 0.0f64..100.0,
            upd in any::<u64>(),
        ) {
            let mut r = MetricsReport::build(SourceCounts::from_array(counts), lat.len() as u64, lat, wall);
            r.updates_published = upd;
            let back = MetricsReport::from_json(&r.to_json()).unwrap();
            prop_assert_eq!(&back, &r);
            prop_assert_eq!(r.hits.l1 + r.hits.l2 + r.hits.l3 + r.hits.default, r.keys_served);
            prop_assert!(r.latency_p50_us <= r.latency_p95_us && r.latency_p95_us <= r.latency_p99_us);
            for x in [r.rates.l1, r.rates.l2, r.rates.l3, r.rates.default] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}
