//! Cascade reconciliation.
//!
//! Bob holds a noisy copy of Alice's sifted key and asks Alice, over an
//! authenticated channel, for parities of blocks of her key. Pass 1 uses the
//! key in order; later passes use a permutation derived from the shuffle seed
//! and the pass number, so both sides know it without extra messages. Each
//! error found in one pass flips the parity of the blocks containing it in
//! every other pass, and those blocks are searched in turn (the cascade).
//!
//! Every parity Alice discloses is counted in `leaked_bits`, as is the final
//! 128-bit verification digest.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use crate::bits::BitString;
use crate::crypto::{self, Tag, TAG_LEN};
use crate::seed;
use crate::{Error, Result};

/// Bits disclosed by the final whole-key digest comparison.
pub const DIGEST_BITS: usize = TAG_LEN * 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub passes: usize,
    pub initial_block_factor: f64,
    pub max_block: usize,
    /// Source of the per-pass shuffle permutations; both sides derive it
    /// from the session identifier.
    pub shuffle_seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            passes: 4,
            initial_block_factor: 0.73,
            max_block: 8192,
            shuffle_seed: 0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::InvalidParameter("cascade needs at least one pass".into()));
        }
        if self.initial_block_factor.is_nan() || self.initial_block_factor <= 0.0 {
            return Err(Error::InvalidParameter("initial_block_factor must be positive".into()));
        }
        if self.max_block == 0 {
            return Err(Error::InvalidParameter("max_block must be positive".into()));
        }
        Ok(())
    }

    /// Block size per pass for a key of `n` bits at the estimated error rate.
    ///
    /// A zero estimate runs a single pass at `max_block`.
    pub fn block_schedule(&self, qber: f64, n: usize) -> Vec<usize> {
        let (first, passes) = if qber == 0.0 {
            (self.max_block, 1)
        } else {
            let k = (self.initial_block_factor / qber.max(0.01)).ceil() as usize;
            (k.max(4).min(self.max_block), self.passes)
        };
        let mut sizes = Vec::with_capacity(passes);
        let mut k = first;
        for _ in 0..passes {
            sizes.push(k.min(n).max(1));
            k = (k * 2).min(self.max_block);
        }
        sizes
    }
}

/// A contiguous run of positions within one pass's arrangement of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: u32,
    pub len: u32,
}

impl Interval {
    fn range(self) -> std::ops::Range<usize> {
        self.start as usize..self.start as usize + self.len as usize
    }
}

/// Encodes a parity request: 1-byte pass index, then (start, len) pairs as
/// 4-byte big-endian integers.
pub fn encode_request(pass: usize, intervals: &[Interval]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + intervals.len() * 8);
    out.push(pass as u8);
    for iv in intervals {
        out.extend_from_slice(&iv.start.to_be_bytes());
        out.extend_from_slice(&iv.len.to_be_bytes());
    }
    out
}

pub fn decode_request(payload: &[u8]) -> Result<(usize, Vec<Interval>)> {
    let (&pass, rest) = payload
        .split_first()
        .ok_or_else(|| Error::Protocol("empty parity request".into()))?;
    if rest.len() % 8 != 0 {
        return Err(Error::Protocol("parity request is not a whole number of intervals".into()));
    }
    let intervals = rest
        .chunks_exact(8)
        .map(|c| Interval {
            start: u32::from_be_bytes(c[..4].try_into().unwrap()),
            len: u32::from_be_bytes(c[4..].try_into().unwrap()),
        })
        .collect();
    Ok((pass as usize, intervals))
}

pub fn encode_reply(parities: &[bool]) -> Vec<u8> {
    BitString::from_bools(parities).to_packed()
}

pub fn decode_reply(payload: &[u8], count: usize) -> Result<Vec<bool>> {
    BitString::from_packed(payload, count)
        .map(|b| b.iter().collect())
        .ok_or_else(|| Error::Protocol("parity reply length does not match request".into()))
}

/// The parity channel from Bob to Alice.
pub trait ParityChannel {
    /// Alice's parities of `intervals` in pass `pass`'s arrangement.
    fn parities(&mut self, pass: usize, intervals: &[Interval]) -> Result<Vec<bool>>;

    /// Sends Bob's verification digest and returns Alice's.
    fn exchange_digest(&mut self, local: Tag) -> Result<Tag>;
}

/// XOR of `key` over `range`.
pub fn block_parity(key: &BitString, range: std::ops::Range<usize>) -> Result<bool> {
    if range.start > range.end || range.end > key.len() {
        return Err(Error::ContractViolation(format!(
            "parity range {range:?} outside key of length {}",
            key.len()
        )));
    }
    Ok(key.parity(range))
}

/// Permutation for `pass`: slot `k` holds original position `perm[k]`.
pub fn pass_permutation(shuffle_seed: u64, pass: usize, n: usize) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    if pass > 0 {
        let mut rng = seed::rng(seed::derive_indexed(shuffle_seed, "cascade-pass", pass as u64));
        perm.shuffle(&mut rng);
    }
    perm
}

/// Keyed digest of a whole key, used for the final verification.
pub fn key_digest(key: &BitString, shuffle_seed: u64) -> Tag {
    let mac_key = [b"cascade-verify".as_slice(), &shuffle_seed.to_be_bytes()].concat();
    crypto::tag128(&mac_key, &[&(key.len() as u64).to_be_bytes(), &key.to_packed()])
}

/// Alice's side: answers parity queries against her key.
pub struct CascadeResponder {
    key: BitString,
    shuffle_seed: u64,
    arranged: Vec<Option<BitString>>,
}

impl CascadeResponder {
    pub fn new(key: BitString, shuffle_seed: u64) -> Self {
        Self {
            key,
            shuffle_seed,
            arranged: Vec::new(),
        }
    }

    pub fn key(&self) -> &BitString {
        &self.key
    }

    fn arrangement(&mut self, pass: usize) -> &BitString {
        if self.arranged.len() <= pass {
            self.arranged.resize(pass + 1, None);
        }
        let (key, seed) = (&self.key, self.shuffle_seed);
        self.arranged[pass].get_or_insert_with(|| {
            let perm = pass_permutation(seed, pass, key.len());
            perm.iter().map(|&p| key.get(p as usize)).collect()
        })
    }

    pub fn answer(&mut self, pass: usize, intervals: &[Interval]) -> Result<Vec<bool>> {
        let arranged = self.arrangement(pass);
        intervals
            .iter()
            .map(|iv| block_parity(arranged, iv.range()))
            .collect()
    }

    pub fn digest(&self) -> Tag {
        key_digest(&self.key, self.shuffle_seed)
    }
}

/// Direct in-memory channel to a responder, recording every request.
pub struct LocalParityChannel {
    pub responder: CascadeResponder,
    pub requests: Vec<(usize, Vec<Interval>)>,
}

impl LocalParityChannel {
    pub fn new(alice_key: BitString, shuffle_seed: u64) -> Self {
        Self {
            responder: CascadeResponder::new(alice_key, shuffle_seed),
            requests: Vec::new(),
        }
    }

    pub fn disclosed_parities(&self) -> usize {
        self.requests.iter().map(|(_, ivs)| ivs.len()).sum()
    }
}

impl ParityChannel for LocalParityChannel {
    fn parities(&mut self, pass: usize, intervals: &[Interval]) -> Result<Vec<bool>> {
        self.requests.push((pass, intervals.to_vec()));
        self.responder.answer(pass, intervals)
    }

    fn exchange_digest(&mut self, _local: Tag) -> Result<Tag> {
        Ok(self.responder.digest())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconciliationResult {
    pub corrected_key: BitString,
    pub leaked_bits: usize,
    /// Classical messages exchanged, counting request and reply separately.
    pub rounds: usize,
    pub corrections: usize,
    pub block_sizes: Vec<usize>,
}

struct PassState {
    block: usize,
    /// Slot -> original position.
    perm: Vec<u32>,
    /// Original position -> slot in this pass's arrangement.
    slot_of: Vec<u32>,
    arranged: BitString,
    alice_parity: Vec<bool>,
}

impl PassState {
    fn block_of(&self, pos: usize) -> usize {
        self.slot_of[pos] as usize / self.block
    }

    fn block_interval(&self, j: usize) -> Interval {
        let n = self.arranged.len();
        let start = j * self.block;
        Interval {
            start: start as u32,
            len: (self.block.min(n - start)) as u32,
        }
    }
}

/// Bob's side of Cascade.
pub fn cascade(
    bob_key: &BitString,
    qber_estimate: f64,
    channel: &mut dyn ParityChannel,
    config: &CascadeConfig,
) -> Result<ReconciliationResult> {
    config.validate()?;
    if bob_key.is_empty() {
        return Err(Error::DegenerateInput("cannot reconcile an empty key".into()));
    }
    if !(0.0..0.5).contains(&qber_estimate) {
        return Err(Error::InvalidParameter(format!(
            "qber estimate {qber_estimate} not in [0, 0.5)"
        )));
    }
    let n = bob_key.len();
    if n > u32::MAX as usize {
        return Err(Error::InvalidParameter("key too long for 32-bit intervals".into()));
    }

    let schedule = config.block_schedule(qber_estimate, n);
    let mut key = bob_key.clone();
    let mut passes: Vec<PassState> = Vec::with_capacity(schedule.len());
    // (pass, block) pairs whose parity disagrees with Alice's
    let mut odd: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut leaked = 0usize;
    let mut rounds = 0usize;
    let mut corrections = 0usize;

    for (p, &block) in schedule.iter().enumerate() {
        let perm = pass_permutation(config.shuffle_seed, p, n);
        let mut slot_of = vec![0u32; n];
        for (slot, &pos) in perm.iter().enumerate() {
            slot_of[pos as usize] = slot as u32;
        }
        let arranged: BitString = perm.iter().map(|&pos| key.get(pos as usize)).collect();
        let mut state = PassState {
            block,
            perm,
            slot_of,
            arranged,
            alice_parity: Vec::new(),
        };

        let blocks = n.div_ceil(block);
        let intervals: Vec<Interval> = (0..blocks).map(|j| state.block_interval(j)).collect();
        state.alice_parity = channel.parities(p, &intervals)?;
        check_reply_len(&state.alice_parity, intervals.len())?;
        leaked += intervals.len();
        rounds += 2;
        for (j, iv) in intervals.iter().enumerate() {
            if state.arranged.parity(iv.range()) != state.alice_parity[j] {
                odd.insert((p, j));
            }
        }
        passes.push(state);

        // Resolve odd blocks, earliest pass first. Blocks of one pass are
        // disjoint, so all of a pass's odd blocks are searched together.
        while let Some(&(q, _)) = odd.first() {
            let targets: Vec<Interval> = odd
                .iter()
                .filter(|(pass, _)| *pass == q)
                .map(|&(_, j)| passes[q].block_interval(j))
                .collect();
            let (slots, queries, msgs) = binary_search_batch(channel, q, &passes[q].arranged, targets)?;
            leaked += queries;
            rounds += msgs;
            let positions: Vec<usize> = slots.iter().map(|&s| passes[q].perm[s] as usize).collect();
            for pos in positions {
                key.flip(pos);
                corrections += 1;
                for (r, st) in passes.iter_mut().enumerate() {
                    st.arranged.flip(st.slot_of[pos] as usize);
                    let j = st.block_of(pos);
                    if !odd.remove(&(r, j)) {
                        odd.insert((r, j));
                    }
                }
            }
        }
    }

    let alice_digest = channel.exchange_digest(key_digest(&key, config.shuffle_seed))?;
    rounds += 2;
    leaked += DIGEST_BITS;
    if !crypto::tags_equal(&alice_digest, &key_digest(&key, config.shuffle_seed)) {
        return Err(Error::ReconciliationFailed {
            leaked_bits: leaked,
            rounds,
        });
    }
    Ok(ReconciliationResult {
        corrected_key: key,
        leaked_bits: leaked,
        rounds,
        corrections,
        block_sizes: schedule,
    })
}

fn check_reply_len(reply: &[bool], expected: usize) -> Result<()> {
    if reply.len() != expected {
        return Err(Error::Protocol(format!(
            "expected {expected} parities, received {}",
            reply.len()
        )));
    }
    Ok(())
}

/// Runs binary searches on disjoint odd-parity blocks in lockstep. Returns
/// the erroneous slot of each block, the number of parities disclosed and
/// the number of messages exchanged.
fn binary_search_batch(
    channel: &mut dyn ParityChannel,
    pass: usize,
    arranged: &BitString,
    mut active: Vec<Interval>,
) -> Result<(Vec<usize>, usize, usize)> {
    let mut found = Vec::with_capacity(active.len());
    let mut queries = 0;
    let mut msgs = 0;
    loop {
        active.retain(|iv| {
            if iv.len == 1 {
                found.push(iv.start as usize);
                false
            } else {
                true
            }
        });
        if active.is_empty() {
            break;
        }
        let halves: Vec<Interval> = active
            .iter()
            .map(|iv| Interval {
                start: iv.start,
                len: iv.len.div_ceil(2),
            })
            .collect();
        let replies = channel.parities(pass, &halves)?;
        check_reply_len(&replies, halves.len())?;
        queries += halves.len();
        msgs += 2;
        for ((iv, half), alice) in active.iter_mut().zip(&halves).zip(replies) {
            if arranged.parity(half.range()) != alice {
                *iv = *half;
            } else {
                *iv = Interval {
                    start: half.start + half.len,
                    len: iv.len - half.len,
                };
            }
        }
    }
    Ok((found, queries, msgs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noisy_pair(n: usize, errors: usize, seed_v: u64) -> (BitString, BitString) {
        let mut rng = seed::rng(seed_v);
        let alice = BitString::random(n, &mut rng);
        let mut bob = alice.clone();
        let positions = rand::seq::index::sample(&mut rng, n, errors);
        for p in positions {
            bob.flip(p);
        }
        (alice, bob)
    }

    #[test]
    fn block_parity_bounds() {
        let key = BitString::from_bit_str("0010");
        assert!(!block_parity(&key, 0..2).unwrap());
        assert!(block_parity(&key, 0..4).unwrap());
        assert!(matches!(block_parity(&key, 2..5), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn block_parity_matches_fold_xor() {
        let mut rng = seed::rng(77);
        for _ in 0..50 {
            let key = BitString::random(200, &mut rng);
            let start = rng.random_range(0..136);
            let range = start..start + 64;
            let naive = range.clone().fold(0u8, |acc, i| acc ^ key.get(i) as u8) == 1;
            assert_eq!(block_parity(&key, range).unwrap(), naive);
        }
    }

    #[test]
    fn schedule_follows_heuristic() {
        let cfg = CascadeConfig::default();
        assert_eq!(cfg.block_schedule(0.03, 10_000), vec![25, 50, 100, 200]);
        assert_eq!(cfg.block_schedule(0.001, 100_000), vec![73, 146, 292, 584]);
        assert_eq!(cfg.block_schedule(0.3, 100), vec![4, 8, 16, 32]);
        assert_eq!(cfg.block_schedule(0.0, 10_000), vec![8192]);
        assert_eq!(cfg.block_schedule(0.0, 100), vec![100]);
    }

    #[test]
    fn identical_keys_leak_only_top_level_parities() {
        let (alice, _) = noisy_pair(10_000, 0, 1);
        let cfg = CascadeConfig::default();
        let mut ch = LocalParityChannel::new(alice.clone(), cfg.shuffle_seed);
        let res = cascade(&alice, 0.03, &mut ch, &cfg).unwrap();
        // blocks of 25, 50, 100, 200 over 10000 bits
        let expected = 400 + 200 + 100 + 50 + DIGEST_BITS;
        assert_eq!(res.leaked_bits, expected);
        assert_eq!(res.corrected_key, alice);
        assert_eq!(res.corrections, 0);
    }

    #[test]
    fn single_error_found_by_binary_search() {
        let n = 1024;
        let (alice, mut bob) = noisy_pair(n, 0, 2);
        bob.flip(613);
        let cfg = CascadeConfig {
            passes: 1,
            max_block: n,
            ..CascadeConfig::default()
        };
        let mut ch = LocalParityChannel::new(alice.clone(), 0);
        let res = cascade(&bob, 0.0, &mut ch, &cfg).unwrap();
        assert_eq!(res.corrected_key, alice);
        // 1 top-level parity + log2(1024) search parities + digest
        assert_eq!(res.leaked_bits, 1 + 10 + DIGEST_BITS);
    }

    #[test]
    fn binary_search_within_log_bound() {
        for n in [3usize, 5, 17, 100, 257] {
            for pos in [0, n / 2, n - 1] {
                let (alice, mut bob) = noisy_pair(n, 0, n as u64);
                bob.flip(pos);
                let cfg = CascadeConfig {
                    passes: 1,
                    max_block: n,
                    ..CascadeConfig::default()
                };
                let mut ch = LocalParityChannel::new(alice.clone(), 0);
                let res = cascade(&bob, 0.0, &mut ch, &cfg).unwrap();
                assert_eq!(res.corrected_key, alice);
                let search = res.leaked_bits - 1 - DIGEST_BITS;
                assert!(search <= (n as f64).log2().ceil() as usize, "n={n} pos={pos}");
            }
        }
    }

    #[test]
    fn corrects_three_percent() {
        let n = 10_000;
        let (alice, bob) = noisy_pair(n, 300, 3);
        let cfg = CascadeConfig {
            shuffle_seed: 42,
            ..CascadeConfig::default()
        };
        let mut ch = LocalParityChannel::new(alice.clone(), cfg.shuffle_seed);
        let res = cascade(&bob, 0.03, &mut ch, &cfg).unwrap();
        assert_eq!(res.corrected_key, alice);
        assert_eq!(res.corrected_key.len(), n);
        assert_eq!(res.leaked_bits, ch.disclosed_parities() + DIGEST_BITS);
        assert_eq!(res.corrections, 300);
    }

    #[test]
    fn undetected_residual_fails_verification() {
        // two errors inside one block of a single pass cancel in parity
        let n = 64;
        let (alice, mut bob) = noisy_pair(n, 0, 4);
        bob.flip(3);
        bob.flip(9);
        let cfg = CascadeConfig {
            passes: 1,
            max_block: n,
            ..CascadeConfig::default()
        };
        let mut ch = LocalParityChannel::new(alice, 0);
        let err = cascade(&bob, 0.0, &mut ch, &cfg).unwrap_err();
        assert!(matches!(err, Error::ReconciliationFailed { leaked_bits, .. } if leaked_bits == 1 + DIGEST_BITS));
    }

    #[test]
    fn rejects_bad_inputs() {
        let key = BitString::zeros(10);
        let cfg = CascadeConfig::default();
        let mut ch = LocalParityChannel::new(key.clone(), 0);
        assert!(cascade(&key, 0.5, &mut ch, &cfg).is_err());
        assert!(cascade(&BitString::new(), 0.1, &mut ch, &cfg).is_err());
        let bad = CascadeConfig {
            passes: 0,
            ..cfg
        };
        assert!(cascade(&key, 0.1, &mut ch, &bad).is_err());
    }

    #[test]
    fn request_codec() {
        let ivs = vec![Interval { start: 0, len: 25 }, Interval { start: 25, len: 7 }];
        let payload = encode_request(3, &ivs);
        assert_eq!(payload.len(), 17);
        assert_eq!(decode_request(&payload).unwrap(), (3, ivs));
        assert!(decode_request(&payload[..5]).is_err());
        let reply = encode_reply(&[true, false, true]);
        assert_eq!(decode_reply(&reply, 3).unwrap(), vec![true, false, true]);
    }
}
