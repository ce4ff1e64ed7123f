//! Keyed-hash primitives shared by the classical channel, the key store and
//! the handshake: HMAC-SHA256 as prf, truncated to 128 bits for tags.

use hmac::{Hmac, KeyInit, Mac};
use sha2::{Sha256, Sha512};

pub const TAG_LEN: usize = 16;
pub const PRF_LEN: usize = 32;

pub type Tag = [u8; TAG_LEN];

type HmacSha256 = Hmac<Sha256>;

pub fn hmac_sha256(key: &[u8], parts: &[&[u8]]) -> [u8; PRF_LEN] {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

pub fn hmac_sha512(key: &[u8], parts: &[&[u8]]) -> [u8; 64] {
    let mut mac = Hmac::<Sha512>::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// 128-bit tag: HMAC-SHA256 truncated.
pub fn tag128(key: &[u8], parts: &[&[u8]]) -> Tag {
    let full = hmac_sha256(key, parts);
    full[..TAG_LEN].try_into().expect("truncation")
}

/// Constant-time tag comparison.
pub fn tags_equal(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Incremental 128-bit keyed digest.
#[derive(Clone)]
pub struct RunningDigest {
    mac: HmacSha256,
}

impl RunningDigest {
    pub fn new(key: &[u8]) -> Self {
        Self {
            mac: HmacSha256::new_from_slice(key).expect("hmac accepts any key length"),
        }
    }

    pub fn update(&mut self, data: &[u8]) {
        self.mac.update(data);
    }

    pub fn snapshot(&self, trailer: &[u8]) -> Tag {
        let mut m = self.mac.clone();
        m.update(trailer);
        let full: [u8; PRF_LEN] = m.finalize().into_bytes().into();
        full[..TAG_LEN].try_into().expect("truncation")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hmac_sha256_rfc4231_case2() {
        let out = hmac_sha256(b"Jefe", &[b"what do ya want ", b"for nothing?"]);
        let hex: String = out.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(
            hex,
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
    }

    #[test]
    fn running_digest_is_split_invariant() {
        let mut a = RunningDigest::new(b"k");
        a.update(b"hello ");
        a.update(b"world");
        let mut b = RunningDigest::new(b"k");
        b.update(b"hello world");
        assert_eq!(a.snapshot(b"t"), b.snapshot(b"t"));
        assert!(tags_equal(&a.snapshot(b""), &b.snapshot(b"")));
        assert!(!tags_equal(&a.snapshot(b"x"), &b.snapshot(b"y")));
    }
}
