//! Zipf-distributed key streams and the trace file format.
//!
//! Trace file: a 32-byte header of four u64 LE values (`n_keys`,
//! `batch_size`, `n_batches`, `seed`) followed by `batch_size * n_batches`
//! u64 LE keys.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// ChaCha stream ids, so each use of the seed draws independent numbers.
pub(crate) const STREAM_PERMUTATION: u64 = 0;
pub(crate) const STREAM_LOOKUPS: u64 = 1;
pub(crate) const STREAM_UPDATES: u64 = 2;
pub(crate) const STREAM_VALUES: u64 = 3;

pub(crate) fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub n_keys: u64,
    pub zipf_s: f64,
    pub batch_size: usize,
    pub n_batches: usize,
    pub seed: u64,
    /// Entries published per replayed batch.
    #[serde(default)]
    pub update_rate: usize,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_keys == 0 {
            return Err(HarnessError::InvalidSpec("n_keys must be >= 1".into()));
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return Err(HarnessError::InvalidSpec(format!(
                "zipf_s must be finite and >= 0, got {}",
                self.zipf_s
            )));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::InvalidSpec("batch_size must be >= 1".into()));
        }
        if self.update_rate as u64 > self.n_keys {
            return Err(HarnessError::InvalidSpec(
                "update_rate cannot exceed n_keys (keys in a batch are distinct)".into(),
            ));
        }
        Ok(())
    }

    pub fn total_keys(&self) -> usize {
        self.batch_size * self.n_batches
    }
}

/// Inverse-CDF sampler over ranks `1..=n` with `P(k) = k^-s / H`.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: u64, s: f64) -> Result<Self> {
        if n == 0 || !(s.is_finite() && s >= 0.0) {
            return Err(HarnessError::InvalidSpec(format!("zipf(n={n}, s={s})")));
        }
        let mut cdf = Vec::with_capacity(n as usize);
        let mut acc = 0.0f64;
        for k in 1..=n {
            acc += (k as f64).powf(-s);
            cdf.push(acc);
        }
        let h = acc;
        for c in &mut cdf {
            *c /= h;
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(ZipfSampler { cdf })
    }

    pub fn n(&self) -> u64 {
        self.cdf.len() as u64
    }

    /// Probability of `rank` (1-based).
    pub fn probability(&self, rank: u64) -> f64 {
        let i = rank as usize - 1;
        self.cdf[i] - if i == 0 { 0.0 } else { self.cdf[i - 1] }
    }

    /// Total probability of ranks `1..=k`.
    pub fn head_mass(&self, k: u64) -> f64 {
        match k {
            0 => 0.0,
            k => self.cdf[(k.min(self.n()) - 1) as usize],
        }
    }

    /// Draws a 1-based rank.
    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        let u: f64 = rng.gen();
        let i = self.cdf.partition_point(|&c| c <= u);
        i.min(self.cdf.len() - 1) as u64 + 1
    }
}

/// Zipf sampler plus the seeded rank-to-key permutation.
#[derive(Debug, Clone)]
pub struct KeySpace {
    sampler: ZipfSampler,
    keys_by_rank: Vec<u64>,
}

impl KeySpace {
    pub fn new(spec: &WorkloadSpec) -> Result<Self> {
        spec.validate()?;
        let sampler = ZipfSampler::new(spec.n_keys, spec.zipf_s)?;
        let mut keys_by_rank: Vec<u64> = (0..spec.n_keys).collect();
        keys_by_rank.shuffle(&mut rng(spec.seed, STREAM_PERMUTATION));
        Ok(KeySpace {
            sampler,
            keys_by_rank,
        })
    }

    pub fn sampler(&self) -> &ZipfSampler {
        &self.sampler
    }

    pub fn key_of_rank(&self, rank: u64) -> u64 {
        self.keys_by_rank[rank as usize - 1]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        self.key_of_rank(self.sampler.sample(rng))
    }

    /// `n` distinct keys, each drawn from the Zipf distribution.
    pub fn sample_distinct(&self, n: usize, rng: &mut impl Rng) -> Vec<u64> {
        let mut seen = std::collections::HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let k = self.sample(rng);
            if seen.insert(k) {
                out.push(k);
            }
        }
        out
    }
}

/// The lookup key stream for `spec`: `n_batches * batch_size` i.i.d. draws.
pub fn gen_zipf(spec: &WorkloadSpec) -> Result<Vec<u64>> {
    let space = KeySpace::new(spec)?;
    let mut r = rng(spec.seed, STREAM_LOOKUPS);
    Ok((0..spec.total_keys())
        .map(|_| space.sample(&mut r))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub n_keys: u64,
    pub batch_size: u64,
    pub n_batches: u64,
    pub seed: u64,
    pub keys: Vec<u64>,
}

impl Trace {
    pub const HEADER_LEN: usize = 32;

    pub fn generate(spec: &WorkloadSpec) -> Result<Self> {
        Ok(Trace {
            n_keys: spec.n_keys,
            batch_size: spec.batch_size as u64,
            n_batches: spec.n_batches as u64,
            seed: spec.seed,
            keys: gen_zipf(spec)?,
        })
    }

    pub fn batches(&self) -> impl Iterator<Item = &[u64]> {
        self.keys.chunks(self.batch_size.max(1) as usize)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(Self::HEADER_LEN + 8 * self.keys.len());
        for v in [self.n_keys, self.batch_size, self.n_batches, self.seed] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for k in &self.keys {
            buf.extend_from_slice(&k.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < Self::HEADER_LEN || (buf.len() - Self::HEADER_LEN) % 8 != 0 {
            return Err(HarnessError::BadTrace(format!(
                "length {} is not 32 + 8k",
                buf.len()
            )));
        }
        let words: Vec<u64> = buf
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (n_keys, batch_size, n_batches, seed) = (words[0], words[1], words[2], words[3]);
        let keys = words[4..].to_vec();
        if batch_size.checked_mul(n_batches) != Some(keys.len() as u64) {
            return Err(HarnessError::BadTrace(format!(
                "header says {batch_size} x {n_batches} keys, file has {}",
                keys.len()
            )));
        }
        if let Some(k) = keys.iter().find(|&&k| k >= n_keys) {
            return Err(HarnessError::BadTrace(format!(
                "key {k} outside 0..{n_keys}"
            )));
        }
        Ok(Trace {
            n_keys,
            batch_size,
            n_batches,
            seed,
            keys,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: u64, s: f64) -> WorkloadSpec {
        WorkloadSpec {
            n_keys: n,
            zipf_s: s,
            batch_size: 10,
            n_batches: 10,
            seed: 42,
            update_rate: 0,
        }
    }

    #[test]
    fn closed_form_probabilities() {
        let z = ZipfSampler::new(4, 0.0).unwrap();
        for k in 1..=4 {
            assert!((z.probability(k) - 0.25).abs() < 1e-15);
        }
        let z = ZipfSampler::new(2, 1.0).unwrap();
        assert!((z.probability(1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((z.probability(2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_frequencies_within_three_sigma() {
        let z = ZipfSampler::new(1000, 1.1).unwrap();
        let draws = 1_000_000u64;
        let mut counts = vec![0u64; 1001];
        let mut r = rng(7, STREAM_LOOKUPS);
        for _ in 0..draws {
            counts[z.sample(&mut r) as usize] += 1;
        }
        for rank in 1..=100u64 {
            let p = z.probability(rank);
            let expected = p * draws as f64;
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            let diff = (counts[rank as usize] as f64 - expected).abs();
            assert!(
                diff <= 3.0 * sigma + 1.0,
                "rank {rank}: {diff} > 3 * {sigma}"
            );
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = gen_zipf(&spec(50, 1.2)).unwrap();
        assert_eq!(a, gen_zipf(&spec(50, 1.2)).unwrap());
        assert_eq!(a.len(), 100);
        assert!(a.iter().all(|&k| k < 50));
        let mut other = spec(50, 1.2);
        other.seed = 43;
        assert_ne!(a, gen_zipf(&other).unwrap());
    }

    #[test]
    fn validation() {
        assert!(gen_zipf(&spec(0, 1.0)).is_err());
        assert!(gen_zipf(&spec(5, -1.0)).is_err());
        assert!(gen_zipf(&spec(5, f64::NAN)).is_err());
        let mut s = spec(5, 1.0);
        s.batch_size = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn trace_round_trip_and_layout() {
        let t = Trace::generate(&spec(20, 1.0)).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 800);
        assert_eq!(&buf[..8], &20u64.to_le_bytes());
        assert_eq!(&buf[24..32], &42u64.to_le_bytes());
        assert_eq!(&buf[32..40], &t.keys[0].to_le_bytes());
        assert_eq!(Trace::read_from(&mut buf.as_slice()).unwrap(), t);
        assert!(Trace::read_from(&mut &buf[..buf.len() - 8]).is_err());
        assert!(Trace::read_from(&mut &buf[..31]).is_err());
    }

    #[test]
    fn distinct_update_keys() {
        let space = KeySpace::new(&spec(10, 2.0)).unwrap();
        let mut r = rng(1, STREAM_UPDATES);
        let mut ks = space.sample_distinct(10, &mut r);
        ks.sort();
        assert_eq!(ks, (0..10).collect::<Vec<_>>());
    }
}
