//! A small IKE/TLS-shaped secure channel that can draw its keys from QKD.
//!
//! Two rounds, as in IKE: a negotiation round (suite proposal and selection,
//! nonces, randoms, a key-exchange value) and an authentication round in
//! which each side MACs the transcript plus the peer's nonce. Keys follow the
//! prf chain `skeyseed = prf(randoms ‖ nonces, secret)` followed by labeled
//! counter-mode expansion.
//!
//! Quantum key material plugs in three ways:
//!
//! * option A ([`Kex::QuantumSharedSecret`]): 256 QKD bits replace the
//!   Diffie-Hellman secret;
//! * option B ([`Kex::QuantumDirectKeys`]): encryption and MAC keys are QKD
//!   bits, the prf chain only feeds authentication;
//! * option C ([`Kex::QuantumOtp`]): records are one-time padded with fresh
//!   QKD bits and MAC'd with QKD-sourced keys.
//!
//! Nothing here is secure in the real sense: the classical key exchange is a
//! toy group and the block cipher is a prf keystream stub.

mod bootstrap;
mod keys;
mod session;
mod source;
mod wire;

pub use bootstrap::{bootstrap_bb84_protection, MacKeyProvider, MacSource, DEFAULT_BOOTSTRAP_THRESHOLD, MAINTENANCE_STREAM};
pub use keys::{
    auth_value, authenticate, derive_keys, expand, prf, KeyLengths, Keying, SessionKeys, ToyDh,
    OPTION_A_SECRET_BITS, TOY_DH_GENERATOR, TOY_DH_PRIME,
};
pub use session::{
    negotiate, ExhaustionMode, ExhaustionPolicy, HandshakeConfig, Negotiated, PeerConfig, RekeyPolicy,
    SecureSession, SessionStats, SideView, POLL_INTERVAL_MS,
};
pub use source::{PairKeySource, RelayKeySource, StreamKeySource};
pub use wire::{decode_frames, write_frames, Frame, FrameKind, Wire, WireFault};

use std::fmt;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kex {
    ClassicalStub = 0,
    QuantumSharedSecret = 1,
    QuantumDirectKeys = 2,
    QuantumOtp = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CipherAlg {
    BlockCipherStub = 0,
    OneTimePad = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MacAlg {
    HmacSha256 = 0,
    HmacSha512 = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrfAlg {
    HmacSha256 = 0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AuthMethod {
    PreSharedKey = 0,
}

/// Which of the two derivation chains to follow. IKE keys the prf with the
/// public values and feeds it the secret; TLS does the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flavor {
    Ike = 0,
    Tls = 1,
}

/// Which end of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Initiator,
    Responder,
}

impl Side {
    pub fn peer(self) -> Side {
        match self {
            Side::Initiator => Side::Responder,
            Side::Responder => Side::Initiator,
        }
    }
}

/// Direction of record traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    InitiatorToResponder,
    ResponderToInitiator,
}

impl Direction {
    pub fn sender(self) -> Side {
        match self {
            Direction::InitiatorToResponder => Side::Initiator,
            Direction::ResponderToInitiator => Side::Responder,
        }
    }

    pub fn receiver(self) -> Side {
        self.sender().peer()
    }

    fn code(self) -> u8 {
        match self {
            Direction::InitiatorToResponder => 0,
            Direction::ResponderToInitiator => 1,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::InitiatorToResponder => "i2r",
            Direction::ResponderToInitiator => "r2i",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ciphersuite {
    pub kex: Kex,
    pub cipher: CipherAlg,
    pub mac: MacAlg,
    pub prf: PrfAlg,
    pub auth: AuthMethod,
    pub flavor: Flavor,
}

pub const SUITE_ENCODED_LEN: usize = 6;

impl Ciphersuite {
    /// Checks the pairing between one-time pad and the OTP key exchange.
    pub fn new(kex: Kex, cipher: CipherAlg, mac: MacAlg, flavor: Flavor) -> Result<Self> {
        if (kex == Kex::QuantumOtp) != (cipher == CipherAlg::OneTimePad) {
            return Err(Error::InvalidParameter(format!(
                "{} key exchange cannot be paired with {} cipher",
                kex_name(kex),
                cipher_name(cipher)
            )));
        }
        Ok(Self {
            kex,
            cipher,
            mac,
            prf: PrfAlg::HmacSha256,
            auth: AuthMethod::PreSharedKey,
            flavor,
        })
    }

    /// The default suite for a key-exchange method.
    pub fn for_kex(kex: Kex) -> Self {
        let cipher = if kex == Kex::QuantumOtp {
            CipherAlg::OneTimePad
        } else {
            CipherAlg::BlockCipherStub
        };
        Self::new(kex, cipher, MacAlg::HmacSha256, Flavor::Ike).expect("valid pairing")
    }

    pub fn classical() -> Self {
        Self::for_kex(Kex::ClassicalStub)
    }

    pub fn with_mac(self, mac: MacAlg) -> Self {
        Self { mac, ..self }
    }

    pub fn with_flavor(self, flavor: Flavor) -> Self {
        Self { flavor, ..self }
    }

    pub fn is_quantum(&self) -> bool {
        self.kex != Kex::ClassicalStub
    }

    pub fn encode(&self) -> [u8; SUITE_ENCODED_LEN] {
        [
            self.kex as u8,
            self.cipher as u8,
            self.mac as u8,
            self.prf as u8,
            self.auth as u8,
            self.flavor as u8,
        ]
    }

    /// `None` for unknown codes or forbidden pairings.
    pub fn decode(b: &[u8]) -> Option<Self> {
        let [k, c, m, p, a, f] = *b else { return None };
        let kex = match k {
            0 => Kex::ClassicalStub,
            1 => Kex::QuantumSharedSecret,
            2 => Kex::QuantumDirectKeys,
            3 => Kex::QuantumOtp,
            _ => return None,
        };
        let cipher = match c {
            0 => CipherAlg::BlockCipherStub,
            1 => CipherAlg::OneTimePad,
            _ => return None,
        };
        let mac = match m {
            0 => MacAlg::HmacSha256,
            1 => MacAlg::HmacSha512,
            _ => return None,
        };
        let flavor = match f {
            0 => Flavor::Ike,
            1 => Flavor::Tls,
            _ => return None,
        };
        if p != 0 || a != 0 {
            return None;
        }
        Self::new(kex, cipher, mac, flavor).ok()
    }

    /// Parses `<kex>[/<mac>][/<flavor>]`, e.g. `quantum-otp/hmac-sha512/tls`.
    /// Short kex names `classical`, `A`, `B`, `C` are accepted.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split('/');
        let kex = match parts.next().unwrap_or("") {
            "classical" | "classical-stub" => Kex::ClassicalStub,
            "A" | "quantum-shared-secret" => Kex::QuantumSharedSecret,
            "B" | "quantum-direct-keys" => Kex::QuantumDirectKeys,
            "C" | "quantum-otp" => Kex::QuantumOtp,
            other => return Err(Error::InvalidParameter(format!("unknown key exchange {other}"))),
        };
        let mut suite = Self::for_kex(kex);
        for p in parts {
            suite = match p {
                "hmac-sha256" => suite.with_mac(MacAlg::HmacSha256),
                "hmac-sha512" => suite.with_mac(MacAlg::HmacSha512),
                "ike" => suite.with_flavor(Flavor::Ike),
                "tls" => suite.with_flavor(Flavor::Tls),
                other => return Err(Error::InvalidParameter(format!("unknown suite attribute {other}"))),
            };
        }
        Ok(suite)
    }
}

fn kex_name(k: Kex) -> &'static str {
    match k {
        Kex::ClassicalStub => "classical-stub",
        Kex::QuantumSharedSecret => "quantum-shared-secret",
        Kex::QuantumDirectKeys => "quantum-direct-keys",
        Kex::QuantumOtp => "quantum-otp",
    }
}

fn cipher_name(c: CipherAlg) -> &'static str {
    match c {
        CipherAlg::BlockCipherStub => "block-cipher-stub",
        CipherAlg::OneTimePad => "one-time-pad",
    }
}

impl fmt::Display for Ciphersuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mac = match self.mac {
            MacAlg::HmacSha256 => "hmac-sha256",
            MacAlg::HmacSha512 => "hmac-sha512",
        };
        let flavor = match self.flavor {
            Flavor::Ike => "ike",
            Flavor::Tls => "tls",
        };
        write!(f, "{}/{}/{mac}/{flavor}", kex_name(self.kex), cipher_name(self.cipher))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn otp_pairing_enforced() {
        assert!(Ciphersuite::new(Kex::QuantumOtp, CipherAlg::BlockCipherStub, MacAlg::HmacSha256, Flavor::Ike).is_err());
        assert!(Ciphersuite::new(Kex::QuantumSharedSecret, CipherAlg::OneTimePad, MacAlg::HmacSha256, Flavor::Ike).is_err());
        assert_eq!(Ciphersuite::for_kex(Kex::QuantumOtp).cipher, CipherAlg::OneTimePad);
    }

    #[test]
    fn suite_codec_round_trip() {
        for kex in [Kex::ClassicalStub, Kex::QuantumSharedSecret, Kex::QuantumDirectKeys, Kex::QuantumOtp] {
            for mac in [MacAlg::HmacSha256, MacAlg::HmacSha512] {
                for flavor in [Flavor::Ike, Flavor::Tls] {
                    let s = Ciphersuite::for_kex(kex).with_mac(mac).with_flavor(flavor);
                    assert_eq!(Ciphersuite::decode(&s.encode()), Some(s));
                    assert_eq!(Ciphersuite::parse(&s.to_string().replace("/block-cipher-stub", "").replace("/one-time-pad", "")).unwrap(), s);
                }
            }
        }
        assert_eq!(Ciphersuite::decode(&[3, 0, 0, 0, 0, 0]), None);
        assert_eq!(Ciphersuite::decode(&[9, 0, 0, 0, 0, 0]), None);
        assert_eq!(Ciphersuite::parse("C/tls").unwrap().flavor, Flavor::Tls);
        assert!(Ciphersuite::parse("D").is_err());
    }
}
