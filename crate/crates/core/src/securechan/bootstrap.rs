//! MAC keys for a link's own BB84 classical channel.
//!
//! Until the link has produced enough quantum key, sessions are keyed from a
//! prf chain over the pre-shared key. Past the threshold each session takes
//! 256 fresh bits from a dedicated maintenance stream instead, and drops back
//! to the psk chain whenever that stream runs dry. Keys change only between
//! sessions, so every switch lands on a message boundary.

use crate::bb84::message::MacKey;
use crate::bb84::session::SessionKeys;
use crate::crypto;
use crate::keystore::{KeyStore, KeyStream};
use crate::{Error, Result};

pub const DEFAULT_BOOTSTRAP_THRESHOLD: u64 = 4096;
pub const MAINTENANCE_STREAM: &str = "maintenance";
const QUANTUM_MAC_BITS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacSource {
    Psk,
    Quantum,
}

impl std::fmt::Display for MacSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MacSource::Psk => "psk",
            MacSource::Quantum => "quantum",
        })
    }
}

pub struct MacKeyProvider {
    link_id: String,
    psk: Vec<u8>,
    threshold: u64,
    psk_index: u64,
    source: Option<MacSource>,
    history: Vec<MacSource>,
}

/// Sets up MAC keying for `link_id` and opens the maintenance stream at both
/// ends so it takes its share of blocks from the start.
pub fn bootstrap_bb84_protection(
    alice: &KeyStore,
    bob: &KeyStore,
    link_id: &str,
    psk: &[u8],
) -> Result<MacKeyProvider> {
    if psk.is_empty() {
        return Err(Error::InvalidParameter(format!("no psk configured for link {link_id}")));
    }
    let h = KeyStream::new(link_id, MAINTENANCE_STREAM);
    for store in [alice, bob] {
        if !store.has_stream(&h) {
            store.open_stream(link_id, MAINTENANCE_STREAM)?;
        }
    }
    Ok(MacKeyProvider {
        link_id: link_id.to_string(),
        psk: psk.to_vec(),
        threshold: DEFAULT_BOOTSTRAP_THRESHOLD,
        psk_index: 0,
        source: None,
        history: Vec::new(),
    })
}

impl MacKeyProvider {
    pub fn with_threshold(mut self, bits: u64) -> Self {
        self.threshold = bits;
        self
    }

    /// Source of the most recently issued keys.
    pub fn source(&self) -> Option<MacSource> {
        self.source
    }

    /// Sources of every issued key pair, oldest first.
    pub fn history(&self) -> &[MacSource] {
        &self.history
    }

    fn psk_keys(&mut self) -> SessionKeys {
        let k = crypto::hmac_sha256(
            &self.psk,
            &[b"bb84 mac", self.link_id.as_bytes(), &self.psk_index.to_be_bytes()],
        );
        self.psk_index += 1;
        SessionKeys::shared(MacKey(k))
    }

    fn quantum_keys(&self, alice: &KeyStore, bob: &KeyStore) -> Option<SessionKeys> {
        let h = KeyStream::new(self.link_id.as_str(), MAINTENANCE_STREAM);
        let ready = [alice, bob]
            .iter()
            .all(|s| s.available(&h).is_ok_and(|n| n >= QUANTUM_MAC_BITS));
        if !ready {
            return None;
        }
        let a = alice.consume(&h, QUANTUM_MAC_BITS).ok()?;
        let b = bob.consume(&h, QUANTUM_MAC_BITS).ok()?;
        Some(SessionKeys {
            alice: MacKey::from_slice(&a.bits.to_packed()),
            bob: MacKey::from_slice(&b.bits.to_packed()),
        })
    }

    /// Keys for the next BB84 session on the link.
    pub fn next_keys(&mut self, alice: &KeyStore, bob: &KeyStore) -> (SessionKeys, MacSource) {
        let produced = alice.produced_bits(&self.link_id).unwrap_or(0);
        let (keys, source) = if produced >= self.threshold {
            match self.quantum_keys(alice, bob) {
                Some(k) => (k, MacSource::Quantum),
                None => {
                    if self.source == Some(MacSource::Quantum) {
                        log::warn!(
                            "link {}: maintenance stream exhausted, MAC keys fall back to psk",
                            self.link_id
                        );
                    }
                    (self.psk_keys(), MacSource::Psk)
                }
            }
        } else {
            (self.psk_keys(), MacSource::Psk)
        };
        if self.source != Some(source) {
            log::info!("link {}: classical-channel MAC keys now from {source}", self.link_id);
        }
        self.source = Some(source);
        self.history.push(source);
        (keys, source)
    }
}
