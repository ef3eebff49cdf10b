use half::f16;

use super::EmbeddingVector;
use crate::error::{Error, Result};

/// Largest finite binary16 magnitude.
pub const F16_MAX: f32 = 65504.0;

/// Rounds every value to binary16 (nearest, ties to even).
///
/// Values with magnitude above [`F16_MAX`] are rejected instead of clamped.
/// An already-compressed vector is returned unchanged.
pub fn compress_f16(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    match v {
        EmbeddingVector::F16(_) => Ok(v.clone()),
        EmbeddingVector::F32(values) => {
            let mut out = Vec::with_capacity(values.len());
            for &x in values {
                if !x.is_finite() {
                    return Err(Error::NonFinite {
                        index: out.len(),
                        value: x,
                    });
                }
                if x.abs() > F16_MAX {
                    return Err(Error::F16Saturation(x));
                }
                out.push(f16::from_f32(x));
            }
            Ok(EmbeddingVector::F16(out))
        }
    }
}

/// Widens back to f32. Exact.
pub fn decompress_f16(v: &EmbeddingVector) -> EmbeddingVector {
    match v {
        EmbeddingVector::F32(_) => v.clone(),
        EmbeddingVector::F16(values) => {
            EmbeddingVector::F32(values.iter().map(|x| x.to_f32()).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Decodes binary16 bits by hand, independent of `half`.
    fn decode_bits(bits: u16) -> f64 {
        let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
        let exp = ((bits >> 10) & 0x1f) as i32;
        let man = (bits & 0x3ff) as f64;
        let mag = if exp == 0 {
            man * 2f64.powi(-24)
        } else {
            (1.0 + man / 1024.0) * 2f64.powi(exp - 15)
        };
        sign * mag
    }

    /// Nearest binary16 (ties to even mantissa) by searching the table of
    /// all non-negative finite binary16 values.
    fn reference_round(x: f32, table: &[(f64, u16)]) -> f64 {
        let ax = (x as f64).abs();
        let i = table.partition_point(|&(v, _)| v < ax);
        let pick = if i == 0 {
            table[0]
        } else if i == table.len() {
            table[i - 1]
        } else {
            let (lo, hi) = (table[i - 1], table[i]);
            let (dl, dh) = (ax - lo.0, hi.0 - ax);
            if dl < dh || (dl == dh && lo.1 % 2 == 0) {
                lo
            } else {
                hi
            }
        };
        pick.0.copysign(x as f64)
    }

    fn table() -> Vec<(f64, u16)> {
        (0u16..0x7c00).map(|b| (decode_bits(b), b)).collect()
    }

    #[test]
    fn exact_values_survive() {
        let v = EmbeddingVector::f32(vec![0.0, 1.0, -1.0, 0.5, -0.5]).unwrap();
        assert_eq!(decompress_f16(&compress_f16(&v).unwrap()), v);
    }

    #[test]
    fn one_third_within_bound() {
        let x = 1.0f32 / 3.0;
        let v = EmbeddingVector::f32(vec![x]).unwrap();
        let back = decompress_f16(&compress_f16(&v).unwrap()).to_f32_vec()[0];
        assert!((x - back).abs() <= 2f32.powi(-11));
        assert_eq!(back as f64, reference_round(x, &table()));
    }

    #[test]
    fn saturation_rejected() {
        let v = EmbeddingVector::f32(vec![1e6]).unwrap();
        assert!(matches!(compress_f16(&v), Err(Error::F16Saturation(_))));
        let v = EmbeddingVector::f32(vec![-65505.0]).unwrap();
        assert!(compress_f16(&v).is_err());
        let v = EmbeddingVector::f32(vec![65504.0]).unwrap();
        assert!(compress_f16(&v).is_ok());
    }

    #[test]
    fn matches_reference_rounding() {
        let table = table();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut xs: Vec<f32> = (0..20_000).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        xs.extend((0..5_000).map(|_| rng.gen_range(-60000.0f32..60000.0)));
        // Midpoints between neighbours exercise ties-to-even.
        xs.extend([
            1.0 + 2f32.powi(-11),
            1.0 + 3.0 * 2f32.powi(-11),
            2f32.powi(-25),
            6e-8,
        ]);
        for x in xs {
            let got = compress_f16(&EmbeddingVector::f32(vec![x]).unwrap()).unwrap();
            let got = decompress_f16(&got).to_f32_vec()[0] as f64;
            assert_eq!(got, reference_round(x, &table), "x = {x:e}");
        }
    }
}
