//! Packed bit strings.
//!
//! Bits are stored LSB-first inside 64-bit words. The byte encoding used on
//! the wire and on disk is MSB-first: bit 0 of the string is the high bit of
//! byte 0, and the final byte is zero-padded.

use std::fmt;
use std::ops::Range;

use rand::Rng;

const WORD: usize = 64;

#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct BitString {
    words: Vec<u64>,
    len: usize,
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(WORD)],
            len,
        }
    }

    pub fn with_capacity(bits: usize) -> Self {
        Self {
            words: Vec::with_capacity(bits.div_ceil(WORD)),
            len: 0,
        }
    }

    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut words: Vec<u64> = (0..len.div_ceil(WORD)).map(|_| rng.random()).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(len);
        }
        Self { words, len }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        bits.iter().copied().collect()
    }

    /// Parses a string of `0`/`1` characters; other characters are ignored.
    pub fn from_bit_str(s: &str) -> Self {
        s.chars()
            .filter_map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect()
    }

    /// Decodes `len` bits from MSB-first packed bytes.
    pub fn from_packed(bytes: &[u8], len: usize) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let mut out = Self::zeros(len);
        for i in 0..len {
            if bytes[i / 8] & (0x80 >> (i % 8)) != 0 {
                out.set(i, true);
            }
        }
        Some(out)
    }

    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for i in self.ones() {
            out[i / 8] |= 0x80 >> (i % 8);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        self.words[i / WORD] >> (i % WORD) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        let mask = 1u64 << (i % WORD);
        if value {
            self.words[i / WORD] |= mask;
        } else {
            self.words[i / WORD] &= !mask;
        }
    }

    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        self.words[i / WORD] ^= 1u64 << (i % WORD);
    }

    pub fn push(&mut self, value: bool) {
        if self.len.is_multiple_of(WORD) {
            self.words.push(0);
        }
        self.len += 1;
        if value {
            self.set(self.len - 1, true);
        }
    }

    pub fn extend_from(&mut self, other: &BitString) {
        self.words.reserve(other.words.len());
        for b in other.iter() {
            self.push(b);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// Indices of set bits in increasing order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let tz = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * WORD + tz)
            })
        })
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn slice(&self, range: Range<usize>) -> BitString {
        assert!(range.start <= range.end && range.end <= self.len, "slice out of range");
        let mut out = BitString::zeros(range.len());
        for (k, wi) in (0..out.words.len()).enumerate() {
            out.words[wi] = self.window_word(range.start + k * WORD, range.end);
        }
        out
    }

    /// 64 bits starting at `start`, with positions at or beyond `end` zeroed.
    fn window_word(&self, start: usize, end: usize) -> u64 {
        let wi = start / WORD;
        let sh = start % WORD;
        let mut w = self.words[wi] >> sh;
        if sh != 0 && wi + 1 < self.words.len() {
            w |= self.words[wi + 1] << (WORD - sh);
        }
        let avail = end - start;
        if avail < WORD {
            w &= (1u64 << avail) - 1;
        }
        w
    }

    /// XOR of the bits in `range`.
    pub fn parity(&self, range: Range<usize>) -> bool {
        assert!(range.start <= range.end && range.end <= self.len, "parity range out of bounds");
        let mut acc = 0u64;
        let mut pos = range.start;
        while pos < range.end {
            acc ^= self.window_word(pos, range.end);
            pos += WORD;
        }
        acc.count_ones() % 2 == 1
    }

    /// Parity of `self AND other`, both of the same length.
    pub fn and_parity(&self, other: &BitString) -> bool {
        assert_eq!(self.len, other.len, "and_parity length mismatch");
        let acc = self
            .words
            .iter()
            .zip(&other.words)
            .fold(0u64, |acc, (a, b)| acc ^ (a & b));
        acc.count_ones() % 2 == 1
    }

    /// Parity of `self[offset..offset + other.len()] AND other`.
    pub(crate) fn window_and_parity(&self, offset: usize, other: &BitString) -> bool {
        let end = offset + other.len;
        assert!(end <= self.len, "window out of range");
        let mut acc = 0u64;
        for (k, w) in other.words.iter().enumerate() {
            acc ^= self.window_word(offset + k * WORD, end) & w;
        }
        acc.count_ones() % 2 == 1
    }

    pub fn xor(&self, other: &BitString) -> BitString {
        assert_eq!(self.len, other.len, "xor length mismatch");
        BitString {
            words: self.words.iter().zip(&other.words).map(|(a, b)| a ^ b).collect(),
            len: self.len,
        }
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming(&self, other: &BitString) -> usize {
        assert_eq!(self.len, other.len, "hamming length mismatch");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    pub fn reversed(&self) -> BitString {
        (0..self.len).rev().map(|i| self.get(i)).collect()
    }

    /// Bits taken at the given positions, in the given order.
    pub fn gather(&self, positions: &[usize]) -> BitString {
        positions.iter().map(|&p| self.get(p)).collect()
    }

    pub fn complement(&self) -> BitString {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(self.len);
        }
        BitString { words, len: self.len }
    }
}

fn tail_mask(len: usize) -> u64 {
    match len % WORD {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl FromIterator<bool> for BitString {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        let iter = iter.into_iter();
        let mut out = BitString::with_capacity(iter.size_hint().0);
        for b in iter {
            out.push(b);
        }
        out
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len <= 128 {
            write!(f, "BitString({self})")
        } else {
            write!(f, "BitString(len={}, ones={})", self.len, self.count_ones())
        }
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}
