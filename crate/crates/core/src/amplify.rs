//! Privacy amplification with a Toeplitz hash over GF(2).
//!
//! The matrix is `T[i][j] = seed[i - j + n - 1]` for an `n`-bit input and
//! `m`-bit output, so the seed has `n + m - 1` bits. The seed is public; only
//! its integrity matters.

use crate::bits::BitString;
use crate::seed;
use crate::{Error, Result};

pub const DEFAULT_SECURITY_MARGIN: usize = 64;

/// Binary entropy in bits, with `h2(0) = h2(1) = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// Final key length after removing disclosed parity bits, the entropy an
/// eavesdropper may hold at the observed error rate, and a safety margin.
pub fn output_length(reconciled_len: usize, leaked_bits: usize, qber: f64, margin: usize) -> Result<usize> {
    let overhead = leaked_bits + margin;
    if reconciled_len <= overhead {
        return Err(Error::InsufficientMaterial {
            shortfall: overhead + 1 - reconciled_len,
        });
    }
    let entropy = (reconciled_len as f64 * binary_entropy(qber)).ceil() as usize;
    let removed = overhead + entropy;
    if removed >= reconciled_len {
        return Err(Error::InsufficientMaterial {
            shortfall: removed + 1 - reconciled_len,
        });
    }
    Ok(reconciled_len - removed)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AmplificationParams {
    pub seed: BitString,
    pub output_len: usize,
    pub security_margin: usize,
}

impl AmplificationParams {
    /// Draws a fresh seed for hashing `input_len` bits down to `output_len`.
    pub fn random(input_len: usize, output_len: usize, security_margin: usize, rng_seed: u64) -> Result<Self> {
        if output_len == 0 || input_len == 0 {
            return Err(Error::DegenerateInput("toeplitz dimensions must be positive".into()));
        }
        let mut rng = seed::rng(rng_seed);
        Ok(Self {
            seed: BitString::random(input_len + output_len - 1, &mut rng),
            output_len,
            security_margin,
        })
    }

    /// pa-seed payload: 4-byte big-endian output length, then packed seed bits.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = (self.output_len as u32).to_be_bytes().to_vec();
        out.extend_from_slice(&self.seed.to_packed());
        out
    }

    pub fn decode(payload: &[u8], input_len: usize, security_margin: usize) -> Result<Self> {
        if payload.len() < 4 {
            return Err(Error::Protocol("pa-seed payload too short".into()));
        }
        let output_len = u32::from_be_bytes(payload[..4].try_into().unwrap()) as usize;
        if output_len == 0 {
            return Err(Error::Protocol("pa-seed announces an empty output".into()));
        }
        let seed_len = input_len + output_len - 1;
        let seed = BitString::from_packed(&payload[4..], seed_len)
            .ok_or_else(|| Error::Protocol("pa-seed length does not match key length".into()))?;
        Ok(Self {
            seed,
            output_len,
            security_margin,
        })
    }
}

pub fn toeplitz_hash(key: &BitString, params: &AmplificationParams) -> Result<BitString> {
    let n = key.len();
    let m = params.output_len;
    if n == 0 || m == 0 || params.seed.len() != n + m - 1 {
        return Err(Error::ContractViolation(format!(
            "toeplitz seed of {} bits does not fit a {n}-bit input and {m}-bit output",
            params.seed.len()
        )));
    }
    // Row i is seed[i..i+n] read backwards, so pair it with the reversed key.
    let rev = key.reversed();
    Ok((0..m).map(|i| params.seed.window_and_parity(i, &rev)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn naive_toeplitz(key: &BitString, seed_bits: &BitString, m: usize) -> BitString {
        let n = key.len();
        (0..m)
            .map(|i| {
                let mut acc = false;
                for j in 0..n {
                    acc ^= seed_bits.get(i + n - 1 - j) & key.get(j);
                }
                acc
            })
            .collect()
    }

    #[test]
    fn output_length_examples() {
        assert_eq!(output_length(1000, 100, 0.0, 64).unwrap(), 836);
        assert!(matches!(
            output_length(1000, 950, 0.0, 64),
            Err(Error::InsufficientMaterial { shortfall: 15 })
        ));
        assert!(output_length(100, 0, 0.4, 64).is_err());
    }

    #[test]
    fn entropy_term_matches_high_precision_value() {
        // h2(0.03) from a 40-digit arbitrary precision computation
        let reference = 0.194_391_857_831_576_2_f64;
        assert!((binary_entropy(0.03) - reference).abs() < 1e-15);
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(0.5), 1.0);
        // ceil(10000 * h2(0.03)) = ceil(1943.9186) = 1944
        assert_eq!(output_length(10_000, 2000, 0.03, 64).unwrap(), 10_000 - 2000 - 1944 - 64);
    }

    #[test]
    fn zero_key_hashes_to_zero() {
        let params = AmplificationParams::random(100, 40, 64, 1).unwrap();
        let out = toeplitz_hash(&BitString::zeros(100), &params).unwrap();
        assert_eq!(out, BitString::zeros(40));
    }

    #[test]
    fn wrong_seed_length_rejected() {
        let mut params = AmplificationParams::random(100, 40, 64, 1).unwrap();
        params.output_len = 41;
        assert!(matches!(
            toeplitz_hash(&BitString::zeros(100), &params),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn matches_matrix_oracle_32_to_8() {
        let mut rng = seed::rng(5);
        for trial in 0..20 {
            let key = BitString::random(32, &mut rng);
            let params = AmplificationParams::random(32, 8, 0, trial).unwrap();
            let out = toeplitz_hash(&key, &params).unwrap();
            assert_eq!(out, naive_toeplitz(&key, &params.seed, 8));
            assert_eq!(out, toeplitz_hash(&key, &params).unwrap());
        }
    }

    #[test]
    fn matches_oracle_across_word_boundaries() {
        let mut rng = seed::rng(6);
        for _ in 0..10 {
            let n = rng.random_range(60..300);
            let m = rng.random_range(1..n);
            let key = BitString::random(n, &mut rng);
            let params = AmplificationParams::random(n, m, 0, rng.random()).unwrap();
            assert_eq!(toeplitz_hash(&key, &params).unwrap(), naive_toeplitz(&key, &params.seed, m));
        }
    }

    #[test]
    fn seed_payload_round_trip() {
        let params = AmplificationParams::random(77, 20, 64, 3).unwrap();
        let decoded = AmplificationParams::decode(&params.encode(), 77, 64).unwrap();
        assert_eq!(decoded, params);
        assert!(AmplificationParams::decode(&params.encode(), 78, 64).is_err());
    }

    proptest! {
        #[test]
        fn linear_over_gf2(seed_v in any::<u64>(), n in 2usize..200, frac in 0.01f64..1.0) {
            let m = ((n as f64 * frac) as usize).clamp(1, n);
            let mut rng = seed::rng(seed_v);
            let a = BitString::random(n, &mut rng);
            let b = BitString::random(n, &mut rng);
            let params = AmplificationParams::random(n, m, 0, seed_v ^ 1).unwrap();
            let lhs = toeplitz_hash(&a.xor(&b), &params).unwrap();
            let rhs = toeplitz_hash(&a, &params).unwrap().xor(&toeplitz_hash(&b, &params).unwrap());
            prop_assert_eq!(lhs, rhs);
        }
    }
}
