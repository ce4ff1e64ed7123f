//! Sifting and error-rate estimation.

use crate::bits::BitString;
use crate::qchannel::{Basis, DetectionRecord, PhotonRecord};
use crate::seed;
use crate::{Error, Result};

/// Keys shorter than this are too short for a meaningful error estimate.
pub const MIN_SAMPLE_KEY_LEN: usize = 64;

/// Bob's list of detected photons and the bases he used; no values.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SiftAnnouncement {
    pub entries: Vec<(u32, Basis)>,
}

impl SiftAnnouncement {
    pub fn from_detections(det: &[DetectionRecord]) -> Self {
        Self {
            entries: det.iter().map(|d| (d.index, d.basis)).collect(),
        }
    }

    /// 4-byte count, then a 4-byte index and 1-byte basis per entry.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.entries.len() * 5);
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for &(i, b) in &self.entries {
            out.extend_from_slice(&i.to_be_bytes());
            out.push(b.as_u8());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Protocol("malformed sift announcement".into());
        if bytes.len() < 4 {
            return Err(bad());
        }
        let n = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() != 4 + n * 5 {
            return Err(bad());
        }
        let entries = bytes[4..]
            .chunks_exact(5)
            .map(|c| {
                let idx = u32::from_be_bytes(c[..4].try_into().unwrap());
                Basis::from_u8(c[4]).map(|b| (idx, b)).ok_or_else(bad)
            })
            .collect::<Result<Vec<_>>>()?;
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Protocol("sift announcement indices not increasing".into()));
        }
        Ok(Self { entries })
    }
}

/// Alice's list of announced indices whose bases matched.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SiftRetainList {
    pub indices: Vec<u32>,
}

impl SiftRetainList {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.indices.len() * 4);
        out.extend_from_slice(&(self.indices.len() as u32).to_be_bytes());
        for i in &self.indices {
            out.extend_from_slice(&i.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Protocol("malformed retain list".into()));
        }
        let n = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() != 4 + n * 4 {
            return Err(Error::Protocol("malformed retain list".into()));
        }
        Ok(Self {
            indices: bytes[4..]
                .chunks_exact(4)
                .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SiftedKey {
    pub bits: BitString,
    pub source_indices: Vec<u32>,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Removes the given positions (sorted, unique).
    fn without_positions(&self, drop: &[usize]) -> SiftedKey {
        let mut out = SiftedKey::default();
        let mut d = drop.iter().peekable();
        for (i, &src) in self.source_indices.iter().enumerate() {
            if d.peek() == Some(&&i) {
                d.next();
                continue;
            }
            out.bits.push(self.bits.get(i));
            out.source_indices.push(src);
        }
        out
    }
}

fn lookup<T, F: Fn(&T) -> u32>(records: &[T], index: u32, key: F) -> Option<&T> {
    // dense batches index directly; fall back to binary search
    match records.get(index as usize) {
        Some(r) if key(r) == index => Some(r),
        _ => records
            .binary_search_by_key(&index, key)
            .ok()
            .map(|pos| &records[pos]),
    }
}

/// Alice's side: keeps announced positions whose basis matches hers.
pub fn sift(alice_db: &[PhotonRecord], announcement: &SiftAnnouncement) -> Result<(SiftedKey, SiftRetainList)> {
    let mut key = SiftedKey::default();
    let mut retain = SiftRetainList::default();
    for &(index, basis) in &announcement.entries {
        let p = lookup(alice_db, index, |p| p.index).ok_or_else(|| {
            Error::Protocol(format!("announced photon {index} was never sent; peers desynchronized"))
        })?;
        if p.basis == basis {
            key.bits.push(p.bit);
            key.source_indices.push(index);
            retain.indices.push(index);
        }
    }
    Ok((key, retain))
}

/// Bob's side: keeps exactly the positions Alice retained.
pub fn apply_retain(bob_detections: &[DetectionRecord], retain: &SiftRetainList) -> Result<SiftedKey> {
    let mut key = SiftedKey::default();
    for &index in &retain.indices {
        let d = lookup(bob_detections, index, |d| d.index).ok_or_else(|| {
            Error::Protocol(format!("retained photon {index} was never detected; peers desynchronized"))
        })?;
        key.bits.push(d.bit);
        key.source_indices.push(index);
    }
    Ok(key)
}

/// Sorted sample of positions disclosed for error estimation.
pub fn sample_positions(len: usize, sample_fraction: f64, rng_seed: u64) -> Vec<usize> {
    let size = ((len as f64 * sample_fraction).round() as usize).clamp(1, len);
    let mut rng = seed::rng(rng_seed);
    let mut v = rand::seq::index::sample(&mut rng, len, size).into_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct QberEstimate {
    pub qber: f64,
    pub sample_size: usize,
    pub mismatches: usize,
    pub alice_key: SiftedKey,
    pub bob_key: SiftedKey,
}

pub(crate) fn check_estimable(alice: &SiftedKey, bob: &SiftedKey, sample_fraction: f64) -> Result<()> {
    if !(sample_fraction > 0.0 && sample_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sample fraction {sample_fraction} not in (0,1)"
        )));
    }
    if alice.source_indices != bob.source_indices {
        return Err(Error::Protocol("sifted keys do not cover the same photons".into()));
    }
    if alice.len() < MIN_SAMPLE_KEY_LEN {
        return Err(Error::InsufficientMaterial {
            shortfall: MIN_SAMPLE_KEY_LEN - alice.len(),
        });
    }
    Ok(())
}

/// Discloses a seeded random sample, compares it, and removes it from both
/// keys. Disclosed bits are never used as key.
pub fn estimate_qber(
    alice_key: &SiftedKey,
    bob_key: &SiftedKey,
    sample_fraction: f64,
    rng_seed: u64,
) -> Result<QberEstimate> {
    check_estimable(alice_key, bob_key, sample_fraction)?;
    let positions = sample_positions(alice_key.len(), sample_fraction, rng_seed);
    let a = alice_key.bits.gather(&positions);
    let b = bob_key.bits.gather(&positions);
    Ok(finish_estimate(alice_key, bob_key, &positions, &a, &b))
}

pub(crate) fn finish_estimate(
    alice_key: &SiftedKey,
    bob_key: &SiftedKey,
    positions: &[usize],
    alice_sample: &BitString,
    bob_sample: &BitString,
) -> QberEstimate {
    let mismatches = alice_sample.hamming(bob_sample);
    QberEstimate {
        qber: mismatches as f64 / positions.len() as f64,
        sample_size: positions.len(),
        mismatches,
        alice_key: alice_key.without_positions(positions),
        bob_key: bob_key.without_positions(positions),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qchannel::{encode_batch, transmit, ChannelParams};
    use rand::Rng;

    fn photon(index: u32, basis: Basis, bit: bool) -> PhotonRecord {
        PhotonRecord { index, basis, bit }
    }

    #[test]
    fn full_match_retains_everything() {
        let db = vec![
            photon(0, Basis::Rectilinear, true),
            photon(1, Basis::Diagonal, false),
            photon(2, Basis::Diagonal, true),
        ];
        let ann = SiftAnnouncement {
            entries: vec![(0, Basis::Rectilinear), (2, Basis::Diagonal)],
        };
        let (key, retain) = sift(&db, &ann).unwrap();
        assert_eq!(retain.indices, vec![0, 2]);
        assert_eq!(key.bits, BitString::from_bit_str("11"));
    }

    #[test]
    fn full_mismatch_gives_empty_key() {
        let db = vec![photon(0, Basis::Rectilinear, true), photon(1, Basis::Diagonal, false)];
        let ann = SiftAnnouncement {
            entries: vec![(0, Basis::Diagonal), (1, Basis::Rectilinear)],
        };
        let (key, retain) = sift(&db, &ann).unwrap();
        assert!(key.is_empty());
        assert!(retain.indices.is_empty());
    }

    #[test]
    fn unknown_index_is_protocol_error() {
        let db = vec![photon(0, Basis::Rectilinear, true)];
        let ann = SiftAnnouncement {
            entries: vec![(5, Basis::Rectilinear)],
        };
        assert!(matches!(sift(&db, &ann), Err(Error::Protocol(_))));
        let retain = SiftRetainList { indices: vec![3] };
        assert!(matches!(apply_retain(&[], &retain), Err(Error::Protocol(_))));
    }

    #[test]
    fn empty_retain_gives_empty_key() {
        let det = vec![DetectionRecord {
            index: 0,
            basis: Basis::Diagonal,
            bit: true,
        }];
        assert!(apply_retain(&det, &SiftRetainList::default()).unwrap().is_empty());
    }

    #[test]
    fn noiseless_sift_agrees_and_halves() {
        let n = 100_000;
        let photons = encode_batch(n, 1).unwrap();
        let det = transmit(&photons, &ChannelParams::noiseless(), 2).unwrap();
        let (alice, retain) = sift(&photons, &SiftAnnouncement::from_detections(&det)).unwrap();
        let bob = apply_retain(&det, &retain).unwrap();
        assert_eq!(alice.source_indices, bob.source_indices);
        assert_eq!(alice.bits, bob.bits);
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((alice.len() as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma);
    }

    #[test]
    fn all_bases_matched_keeps_all_detections() {
        let det: Vec<DetectionRecord> = (0..10)
            .map(|i| DetectionRecord {
                index: i,
                basis: Basis::Rectilinear,
                bit: i % 2 == 0,
            })
            .collect();
        let db: Vec<PhotonRecord> = (0..10).map(|i| photon(i, Basis::Rectilinear, i % 2 == 0)).collect();
        let (_, retain) = sift(&db, &SiftAnnouncement::from_detections(&det)).unwrap();
        assert_eq!(apply_retain(&det, &retain).unwrap().len(), 10);
    }

    fn keyed(bits: BitString) -> SiftedKey {
        SiftedKey {
            source_indices: (0..bits.len() as u32).collect(),
            bits,
        }
    }

    #[test]
    fn qber_extremes() {
        let mut rng = seed::rng(3);
        let a = keyed(BitString::random(1000, &mut rng));
        let same = estimate_qber(&a, &a, 0.1, 4).unwrap();
        assert_eq!(same.qber, 0.0);
        assert_eq!(same.sample_size, 100);
        assert_eq!(same.alice_key.len(), 900);
        let inv = keyed(a.bits.complement());
        assert_eq!(estimate_qber(&a, &inv, 0.1, 4).unwrap().qber, 1.0);
    }

    #[test]
    fn sampled_positions_leave_the_key() {
        let mut rng = seed::rng(5);
        let a = keyed(BitString::random(500, &mut rng));
        let est = estimate_qber(&a, &a, 0.2, 6).unwrap();
        let sampled = sample_positions(500, 0.2, 6);
        for p in sampled {
            assert!(!est.alice_key.source_indices.contains(&(p as u32)));
        }
        assert_eq!(est.alice_key.source_indices, est.bob_key.source_indices);
    }

    #[test]
    fn short_key_is_insufficient() {
        let a = keyed(BitString::zeros(63));
        assert!(matches!(
            estimate_qber(&a, &a, 0.1, 1),
            Err(Error::InsufficientMaterial { shortfall: 1 })
        ));
    }

    #[test]
    fn five_percent_within_hypergeometric_bound() {
        let n = 20_000;
        let errors = 1000;
        let mut rng = seed::rng(7);
        let a = keyed(BitString::random(n, &mut rng));
        let mut b = a.clone();
        for p in rand::seq::index::sample(&mut rng, n, errors) {
            b.bits.flip(p);
        }
        let sample = 2000.0;
        let p = 0.05;
        // hypergeometric variance with finite-population correction
        let sigma = (sample * p * (1.0 - p) * (n as f64 - sample) / (n as f64 - 1.0)).sqrt() / sample;
        for trial in 0..5 {
            let est = estimate_qber(&a, &b, 0.1, rng.random::<u64>() ^ trial).unwrap();
            assert!((est.qber - p).abs() <= 3.0 * sigma, "estimate {}", est.qber);
        }
    }

    #[test]
    fn codecs() {
        let ann = SiftAnnouncement {
            entries: vec![(1, Basis::Diagonal), (7, Basis::Rectilinear)],
        };
        assert_eq!(SiftAnnouncement::decode(&ann.encode()).unwrap(), ann);
        let mut bytes = ann.encode();
        bytes[8] = 2;
        assert!(SiftAnnouncement::decode(&bytes).is_err());
        let r = SiftRetainList { indices: vec![1, 9] };
        assert_eq!(SiftRetainList::decode(&r.encode()).unwrap(), r);
    }
}
