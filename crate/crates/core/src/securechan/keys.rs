//! prf, key expansion, the toy key exchange, and peer authentication.

use rand::Rng;

use super::{CipherAlg, Ciphersuite, Direction, Flavor, Kex, MacAlg, PrfAlg};
use crate::crypto::{self, Tag, TAG_LEN};
use crate::{Error, Result};

/// Quantum bits that stand in for the Diffie-Hellman secret under option A.
pub const OPTION_A_SECRET_BITS: usize = 256;

/// Mersenne prime 2^61 − 1. Far too small to be secure; it only makes the
/// classical fallback executable.
pub const TOY_DH_PRIME: u64 = (1 << 61) - 1;
pub const TOY_DH_GENERATOR: u64 = 3;

const STUB_ENC_KEY_LEN: usize = 32;

pub fn prf(alg: PrfAlg, key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    match alg {
        PrfAlg::HmacSha256 => crypto::hmac_sha256(key, parts),
    }
}

/// Counter-mode expansion: `prf(key, label ‖ i ‖ context)` for i = 1, 2, …
/// with `i` as a 4-byte big-endian counter, concatenated and truncated.
pub fn expand(alg: PrfAlg, key: &[u8], label: &[u8], context: &[u8], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + 32);
    let mut i: u32 = 1;
    while out.len() < len {
        out.extend_from_slice(&prf(alg, key, &[label, &i.to_be_bytes(), context]));
        i += 1;
    }
    out.truncate(len);
    out
}

pub(crate) fn mac_tag(alg: MacAlg, key: &[u8], parts: &[&[u8]]) -> Tag {
    let mut tag = [0u8; TAG_LEN];
    match alg {
        MacAlg::HmacSha256 => tag.copy_from_slice(&crypto::hmac_sha256(key, parts)[..TAG_LEN]),
        MacAlg::HmacSha512 => tag.copy_from_slice(&crypto::hmac_sha512(key, parts)[..TAG_LEN]),
    }
    tag
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyLengths {
    /// Bytes per direction; 0 when the suite has no encryption key.
    pub enc: usize,
    pub mac: usize,
}

impl KeyLengths {
    pub fn for_suite(suite: &Ciphersuite) -> Self {
        Self {
            enc: match suite.cipher {
                CipherAlg::BlockCipherStub => STUB_ENC_KEY_LEN,
                CipherAlg::OneTimePad => 0,
            },
            mac: match suite.mac {
                MacAlg::HmacSha256 => 32,
                MacAlg::HmacSha512 => 64,
            },
        }
    }

    pub fn total(&self) -> usize {
        2 * self.enc + 2 * self.mac
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub skeyseed: Vec<u8>,
    pub enc_i2r: Option<Vec<u8>>,
    pub enc_r2i: Option<Vec<u8>>,
    pub mac_i2r: Vec<u8>,
    pub mac_r2i: Vec<u8>,
}

impl std::fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SessionKeys(..)")
    }
}

impl SessionKeys {
    pub fn enc_key(&self, dir: Direction) -> Option<&[u8]> {
        match dir {
            Direction::InitiatorToResponder => self.enc_i2r.as_deref(),
            Direction::ResponderToInitiator => self.enc_r2i.as_deref(),
        }
    }

    pub fn mac_key(&self, dir: Direction) -> &[u8] {
        match dir {
            Direction::InitiatorToResponder => &self.mac_i2r,
            Direction::ResponderToInitiator => &self.mac_r2i,
        }
    }
}

/// Where the secret input of the chain comes from.
#[derive(Debug, Clone, Copy)]
pub enum Keying<'a> {
    /// A shared secret fed through the prf chain (classical and option A).
    Secret(&'a [u8]),
    /// Keys taken verbatim, in the order enc i2r, enc r2i, mac i2r, mac r2i
    /// (options B and C).
    Direct(&'a [u8]),
}

fn skeyseed(suite: &Ciphersuite, secret: &[u8], randoms: &[u8], nonces: &[u8]) -> Vec<u8> {
    let public = [randoms, nonces].concat();
    match suite.flavor {
        Flavor::Ike => prf(suite.prf, &public, &[secret]).to_vec(),
        Flavor::Tls => prf(suite.prf, secret, &[b"master secret", &public]).to_vec(),
    }
}

fn split(mut bytes: &[u8], lens: KeyLengths) -> SessionKeys {
    let mut take = |n: usize| {
        let (head, rest) = bytes.split_at(n);
        bytes = rest;
        head.to_vec()
    };
    let enc_i2r = take(lens.enc);
    let enc_r2i = take(lens.enc);
    let mac_i2r = take(lens.mac);
    let mac_r2i = take(lens.mac);
    let some = |k: Vec<u8>| (lens.enc > 0).then_some(k);
    SessionKeys {
        skeyseed: Vec::new(),
        enc_i2r: some(enc_i2r),
        enc_r2i: some(enc_r2i),
        mac_i2r,
        mac_r2i,
    }
}

pub fn derive_keys(
    suite: &Ciphersuite,
    keying: Keying<'_>,
    randoms: &[u8],
    nonces: &[u8],
    lens: KeyLengths,
) -> Result<SessionKeys> {
    match (suite.kex, keying) {
        (Kex::ClassicalStub | Kex::QuantumSharedSecret, Keying::Secret(secret)) => {
            if secret.is_empty() {
                return Err(Error::InvalidParameter("empty shared secret".into()));
            }
            let seed = skeyseed(suite, secret, randoms, nonces);
            let context = [randoms, nonces].concat();
            let material = expand(suite.prf, &seed, b"key expansion", &context, lens.total());
            Ok(SessionKeys {
                skeyseed: seed,
                ..split(&material, lens)
            })
        }
        (Kex::QuantumDirectKeys | Kex::QuantumOtp, Keying::Direct(material)) => {
            if material.len() != lens.total() {
                return Err(Error::ContractViolation(format!(
                    "direct keying needs {} bytes, got {}",
                    lens.total(),
                    material.len()
                )));
            }
            // only authentication uses the chain here
            Ok(SessionKeys {
                skeyseed: skeyseed(suite, &[], randoms, nonces),
                ..split(material, lens)
            })
        }
        (kex, _) => Err(Error::ContractViolation(format!("wrong keying input for {kex:?}"))),
    }
}

fn modpow(base: u64, mut exp: u64, m: u64) -> u64 {
    let m = m as u128;
    let mut acc: u128 = 1;
    let mut b = base as u128 % m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % m;
        }
        b = b * b % m;
        exp >>= 1;
    }
    acc as u64
}

/// Insecure toy Diffie-Hellman over the integers mod [`TOY_DH_PRIME`].
#[derive(Clone)]
pub struct ToyDh {
    private: u64,
    pub public: u64,
}

impl ToyDh {
    pub fn generate<R: Rng>(rng: &mut R) -> Self {
        let private = rng.random_range(2..TOY_DH_PRIME - 1);
        Self {
            private,
            public: modpow(TOY_DH_GENERATOR, private, TOY_DH_PRIME),
        }
    }

    pub fn shared(&self, peer_public: u64) -> Result<[u8; 8]> {
        if !(2..TOY_DH_PRIME - 1).contains(&peer_public) {
            return Err(Error::NegotiationFailure(format!(
                "invalid key-exchange value {peer_public}"
            )));
        }
        Ok(modpow(peer_public, self.private, TOY_DH_PRIME).to_be_bytes())
    }
}

/// What the signer sends: a prf over the transcript it saw, the peer's nonce
/// and its own identity, keyed from the psk and skeyseed.
pub fn auth_value(
    alg: PrfAlg,
    psk: &[u8],
    skeyseed: &[u8],
    transcript: &[u8],
    peer_nonce: &[u8],
    signer_id: &str,
) -> [u8; 32] {
    let key = prf(alg, psk, &[b"auth pad", skeyseed]);
    prf(alg, &key, &[transcript, peer_nonce, signer_id.as_bytes()])
}

/// Verifies a peer's auth value. `nonce` is the verifier's own nonce, which
/// the signer MAC'd as its peer nonce.
pub fn authenticate(
    alg: PrfAlg,
    psk: &[u8],
    skeyseed: &[u8],
    transcript: &[u8],
    nonce: &[u8],
    signer_id: &str,
    received: &[u8],
) -> Result<()> {
    let expected = auth_value(alg, psk, skeyseed, transcript, nonce, signer_id);
    if crypto::tags_equal(&expected, received) {
        Ok(())
    } else {
        Err(Error::AuthFailure)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use hmac::{Hmac, KeyInit, Mac};
    use sha2::Sha256;

    fn one_shot(key: &[u8], label: &[u8], context: &[u8], len: usize) -> Vec<u8> {
        // independent re-derivation straight from the hmac crate
        let blocks = len.div_ceil(32);
        let mut out = Vec::new();
        for i in 1..=blocks as u32 {
            let mut m = <Hmac<Sha256> as KeyInit>::new_from_slice(key).unwrap();
            let mut msg = label.to_vec();
            msg.extend_from_slice(&i.to_be_bytes());
            msg.extend_from_slice(context);
            m.update(&msg);
            out.extend_from_slice(&m.finalize().into_bytes());
        }
        out[..len].to_vec()
    }

    #[test]
    fn expansion_matches_one_shot() {
        for len in [1, 31, 32, 33, 64, 100, 256] {
            assert_eq!(
                expand(PrfAlg::HmacSha256, b"seed", b"lbl", b"ctx", len),
                one_shot(b"seed", b"lbl", b"ctx", len)
            );
        }
        // a 2-block output is not the first block repeated
        let two = expand(PrfAlg::HmacSha256, b"k", b"l", b"c", 64);
        assert_ne!(two[..32], two[32..]);
    }

    #[test]
    fn derivation_is_deterministic_and_sized() {
        let suite = Ciphersuite::classical().with_mac(MacAlg::HmacSha512);
        let lens = KeyLengths::for_suite(&suite);
        let a = derive_keys(&suite, Keying::Secret(b"secret"), b"randoms", b"nonces", lens).unwrap();
        let b = derive_keys(&suite, Keying::Secret(b"secret"), b"randoms", b"nonces", lens).unwrap();
        assert!(a == b);
        assert_eq!(a.mac_i2r.len(), 64);
        assert_eq!(a.enc_i2r.as_ref().unwrap().len(), 32);
        assert_ne!(a.mac_i2r, a.mac_r2i);
        let c = derive_keys(&suite, Keying::Secret(b"secreT"), b"randoms", b"nonces", lens).unwrap();
        assert_ne!(a.skeyseed, c.skeyseed);
        // the 192-byte expansion spans several prf rounds
        let seed = a.skeyseed.clone();
        let all = one_shot(&seed, b"key expansion", b"randomsnonces", lens.total());
        assert_eq!(a.mac_r2i, all[128..192]);
    }

    #[test]
    fn flavors_place_secret_differently() {
        let ike = Ciphersuite::classical();
        let tls = ike.with_flavor(Flavor::Tls);
        let lens = KeyLengths::for_suite(&ike);
        let a = derive_keys(&ike, Keying::Secret(b"s"), b"r", b"n", lens).unwrap();
        let b = derive_keys(&tls, Keying::Secret(b"s"), b"r", b"n", lens).unwrap();
        assert_eq!(a.skeyseed, crypto::hmac_sha256(b"rn", &[b"s"]).to_vec());
        assert_eq!(b.skeyseed, crypto::hmac_sha256(b"s", &[b"master secret", b"rn"]).to_vec());
    }

    #[test]
    fn direct_keying_splits_in_order() {
        let suite = Ciphersuite::for_kex(Kex::QuantumDirectKeys);
        let lens = KeyLengths::for_suite(&suite);
        let material: Vec<u8> = (0..lens.total() as u8).collect();
        let k = derive_keys(&suite, Keying::Direct(&material), b"r", b"n", lens).unwrap();
        assert_eq!(k.enc_i2r.as_deref(), Some(&material[..32]));
        assert_eq!(k.mac_r2i, material[96..128]);
        assert!(derive_keys(&suite, Keying::Direct(&material[1..]), b"r", b"n", lens).is_err());
        assert!(derive_keys(&suite, Keying::Secret(b"x"), b"r", b"n", lens).is_err());

        let otp = Ciphersuite::for_kex(Kex::QuantumOtp);
        let lens = KeyLengths::for_suite(&otp);
        assert_eq!(lens.total(), 64);
        let k = derive_keys(&otp, Keying::Direct(&material[..64]), b"r", b"n", lens).unwrap();
        assert!(k.enc_i2r.is_none() && k.enc_r2i.is_none());
    }

    #[test]
    fn empty_secret_rejected() {
        let s = Ciphersuite::classical();
        assert!(derive_keys(&s, Keying::Secret(&[]), b"r", b"n", KeyLengths::for_suite(&s)).is_err());
    }

    #[test]
    fn toy_dh_agrees() {
        let mut rng = seed::rng(4);
        for _ in 0..20 {
            let a = ToyDh::generate(&mut rng);
            let b = ToyDh::generate(&mut rng);
            assert_eq!(a.shared(b.public).unwrap(), b.shared(a.public).unwrap());
        }
        assert_eq!(modpow(3, 4, 7), 81 % 7);
        assert_eq!(modpow(TOY_DH_GENERATOR, TOY_DH_PRIME - 1, TOY_DH_PRIME), 1);
        let a = ToyDh::generate(&mut rng);
        assert!(a.shared(1).is_err());
    }

    #[test]
    fn auth_binds_everything() {
        let v = auth_value(PrfAlg::HmacSha256, b"psk", b"seed", b"transcript", b"nonce", "alice");
        assert!(authenticate(PrfAlg::HmacSha256, b"psk", b"seed", b"transcript", b"nonce", "alice", &v).is_ok());
        for (psk, t, n, id) in [
            (&b"psK"[..], &b"transcript"[..], &b"nonce"[..], "alice"),
            (b"psk", b"transcripT", b"nonce", "alice"),
            (b"psk", b"transcript", b"noncE", "alice"),
            (b"psk", b"transcript", b"nonce", "bob"),
        ] {
            assert!(matches!(
                authenticate(PrfAlg::HmacSha256, psk, b"seed", t, n, id, &v),
                Err(Error::AuthFailure)
            ));
        }
    }
}
