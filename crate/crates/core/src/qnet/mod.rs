//! QKD sub-network: topology, routing, and multi-hop key relay through
//! trusted nodes.
//!
//! Each node owns a [`KeyStore`] holding its end of every link it terminates.
//! Relays draw on a dedicated per-link stream, [`RELAY_STREAM`], opened at
//! both ends of a link together.
//!
//! Consumption accounting for one relay of an `n`-bit key over `h` hops: the
//! end-to-end key itself is served from the first link's relay stream (`n`
//! bits at each of its two ends), and every later hop spends an `n`-bit pad at
//! each of its two ends. [`Network::relay_key`] alone, given a key already
//! shared over the first hop, therefore consumes exactly `n·(h−1)` bits per
//! link end.

mod topology;

pub use topology::{ConnectionInfo, LinkInfo, LinkKind, NodeInfo, Path, PathKind, Topology};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::bb84::message::{ChannelEndpoint, ClassicalChannel, ClassicalMessage, Fault, MacKey, MsgType};
use crate::bb84::session::{self, LinkEnds, SessionConfig, SessionFailure, SessionKeys, SessionReport};
use crate::bits::BitString;
use crate::crypto;
use crate::keystore::{KeyStore, KeyStream};
use crate::{Error, Result};

pub const RELAY_STREAM: &str = "relay";

/// Result of a relay that delivered its key.
#[derive(Debug, Clone)]
pub struct RelayOutcome {
    pub relay_id: u64,
    pub path: Path,
    /// Key held by the source node.
    pub source_key: BitString,
    /// Key recovered at the destination node.
    pub delivered_key: BitString,
    /// One-time-pad ciphertext sent on each hop after the first.
    pub hop_ciphertexts: Vec<BitString>,
    /// Bits served from the first link for the end-to-end key (0 if the key
    /// was supplied by the caller).
    pub source_bits: usize,
    /// Pad bits spent per link end over hops 2..h.
    pub pad_bits: usize,
    pub transcript: Vec<ClassicalMessage>,
}

impl RelayOutcome {
    pub fn key_matches(&self) -> bool {
        self.source_key == self.delivered_key
    }
}

#[derive(Debug)]
pub struct RelayFailure {
    pub error: Error,
    /// Link key bits already destroyed when the relay aborted; they are not
    /// returned to any store.
    pub burned_bits: usize,
}

impl std::fmt::Display for RelayFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} bits burned)", self.error, self.burned_bits)
    }
}

impl From<Error> for RelayFailure {
    fn from(error: Error) -> Self {
        Self { error, burned_bits: 0 }
    }
}

pub struct Network {
    topology: Topology,
    stores: BTreeMap<String, KeyStore>,
    link_macs: BTreeMap<String, MacKey>,
    next_relay: AtomicU64,
}

fn encode_relay_payload(bits: &BitString) -> Vec<u8> {
    let mut out = (bits.len() as u32).to_be_bytes().to_vec();
    out.extend_from_slice(&bits.to_packed());
    out
}

fn decode_relay_payload(payload: &[u8]) -> Result<BitString> {
    if payload.len() < 4 {
        return Err(Error::Protocol("relay-key payload too short".into()));
    }
    let len = u32::from_be_bytes(payload[..4].try_into().unwrap()) as usize;
    BitString::from_packed(&payload[4..], len)
        .ok_or_else(|| Error::Protocol("relay-key payload length mismatch".into()))
}

impl Network {
    /// Builds a store per node. Per-link MAC keys for the classical channel
    /// are derived from `mac_seed`.
    pub fn new(topology: Topology, mac_seed: u64) -> Self {
        Self::with_sync_interval(topology, mac_seed, crate::keystore::DEFAULT_SYNC_INTERVAL)
    }

    pub fn with_sync_interval(topology: Topology, mac_seed: u64, sync_interval: u64) -> Self {
        let mut stores = BTreeMap::new();
        for node in topology.nodes() {
            stores.insert(node.id.clone(), KeyStore::with_sync_interval(&node.id, sync_interval));
        }
        let mut link_macs = BTreeMap::new();
        for link in topology.links() {
            stores[&link.a].add_link(&link.id);
            stores[&link.b].add_link(&link.id);
            let key = crypto::hmac_sha256(&mac_seed.to_be_bytes(), &[b"link-mac", link.id.as_bytes()]);
            link_macs.insert(link.id.clone(), MacKey(key));
        }
        Self {
            topology,
            stores,
            link_macs,
            next_relay: AtomicU64::new(0),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn set_link_operational(&mut self, link_id: &str, up: bool) -> Result<()> {
        self.topology.set_operational(link_id, up)
    }

    pub fn store(&self, node: &str) -> Result<&KeyStore> {
        self.stores.get(node).ok_or_else(|| Error::UnknownNode(node.to_string()))
    }

    pub fn link_mac(&self, link_id: &str) -> Result<&MacKey> {
        self.link_macs
            .get(link_id)
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))
    }

    pub fn set_link_mac(&mut self, link_id: &str, key: MacKey) -> Result<()> {
        let slot = self
            .link_macs
            .get_mut(link_id)
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))?;
        *slot = key;
        Ok(())
    }

    /// The stores at the link's `a` and `b` ends.
    pub fn ends(&self, link_id: &str) -> Result<(&KeyStore, &KeyStore)> {
        let l = self.topology.link(link_id)?;
        Ok((&self.stores[&l.a], &self.stores[&l.b]))
    }

    /// Opens a stream at both ends of a link.
    pub fn open_stream(&self, link_id: &str, stream_id: &str) -> Result<KeyStream> {
        let (a, b) = self.ends(link_id)?;
        let h = KeyStream::new(link_id, stream_id);
        if a.has_stream(&h) || b.has_stream(&h) {
            return Err(Error::DuplicateStream {
                link: link_id.to_string(),
                stream: stream_id.to_string(),
            });
        }
        a.open_stream(link_id, stream_id)?;
        b.open_stream(link_id, stream_id)
    }

    /// The link's relay stream, opened at both ends on first use.
    pub fn relay_stream(&self, link_id: &str) -> Result<KeyStream> {
        let (a, b) = self.ends(link_id)?;
        let h = KeyStream::new(link_id, RELAY_STREAM);
        match (a.has_stream(&h), b.has_stream(&h)) {
            (true, true) => Ok(h),
            // a concurrent relay may have opened it first
            (false, false) => match self.open_stream(link_id, RELAY_STREAM) {
                Err(Error::DuplicateStream { .. }) => Ok(h),
                r => r,
            },
            _ => Err(Error::ContractViolation(format!(
                "relay stream open at only one end of link {link_id}"
            ))),
        }
    }

    pub fn route(&self, src: &str, dst: &str) -> Result<Path> {
        self.topology.route(src, dst)
    }

    pub fn connection_info(&self, src: &str, dst: &str) -> ConnectionInfo {
        self.topology.connection_info(src, dst)
    }

    /// Runs a BB84 session on a link with the link's `a` end as Alice.
    #[allow(clippy::result_large_err)]
    pub fn run_session(
        &self,
        link_id: &str,
        config: &SessionConfig,
        keys: &SessionKeys,
        session_id: u64,
        run_seed: u64,
        faults: Vec<Fault>,
    ) -> std::result::Result<SessionReport, SessionFailure> {
        let (alice, bob) = self.ends(link_id).map_err(|error| SessionFailure {
            error,
            report: SessionReport::default(),
        })?;
        let link = LinkEnds { link_id, alice, bob };
        session::run_link_session(&link, config, keys, session_id, run_seed, faults)
    }

    fn check_trust(&self, path: &Path) -> Result<()> {
        for node in path.intermediates() {
            if !self.topology.node(node)?.trusted {
                return Err(Error::UntrustedIntermediate(node.clone()));
            }
        }
        Ok(())
    }

    /// Establishes an `n`-bit key between `src` and `dst`: draws it from the
    /// first link on the route, then relays it.
    pub fn end_to_end_key(
        &self,
        src: &str,
        dst: &str,
        n: usize,
        faults: &[(String, Fault)],
    ) -> std::result::Result<RelayOutcome, RelayFailure> {
        let path = self.route(src, dst)?;
        self.check_trust(&path)?;
        let first = &path.hops[0];
        let stream = self.relay_stream(first)?;
        let src_key = self.store(path.src())?.consume(&stream, n)?.bits;
        let peer_key = match self.store(&path.nodes[1])?.consume(&stream, n) {
            Ok(m) => m.bits,
            Err(error) => {
                log::warn!("relay source draw failed at {}: {n} bits burned at {src}", path.nodes[1]);
                return Err(RelayFailure { error, burned_bits: n });
            }
        };
        let mut out = self
            .relay_from(&src_key, peer_key, &path, faults)
            .map_err(|mut f| {
                f.burned_bits += 2 * n;
                f
            })?;
        out.source_bits = n;
        Ok(out)
    }

    /// Carries `key_a`, already shared by the path's first two nodes, to the
    /// destination. Refuses untrusted intermediates before consuming anything.
    pub fn relay_key(
        &self,
        key_a: &BitString,
        path: &Path,
        faults: &[(String, Fault)],
    ) -> std::result::Result<RelayOutcome, RelayFailure> {
        self.relay_from(key_a, key_a.clone(), path, faults)
    }

    fn relay_from(
        &self,
        source_key: &BitString,
        mut carried: BitString,
        path: &Path,
        faults: &[(String, Fault)],
    ) -> std::result::Result<RelayOutcome, RelayFailure> {
        self.check_trust(path)?;
        let relay_id = self.next_relay.fetch_add(1, Ordering::Relaxed);
        let n = source_key.len();
        let mut out = RelayOutcome {
            relay_id,
            path: path.clone(),
            source_key: source_key.clone(),
            delivered_key: BitString::new(),
            hop_ciphertexts: Vec::new(),
            source_bits: 0,
            pad_bits: 0,
            transcript: Vec::new(),
        };
        let mut burned = 0;
        for (i, link_id) in path.hops.iter().enumerate().skip(1) {
            let (up, down) = (&path.nodes[i], &path.nodes[i + 1]);
            let step = self.relay_hop(link_id, up, down, &carried, relay_id, faults);
            let hop = match step {
                Ok(hop) => hop,
                Err((error, spent)) => {
                    burned += spent;
                    log::warn!(
                        "relay {relay_id} aborted on {link_id} ({up}->{down}): {error}; {burned} link key bits burned"
                    );
                    return Err(RelayFailure { error, burned_bits: burned });
                }
            };
            burned += 2 * n;
            out.pad_bits += n;
            out.transcript.extend(hop.transcript);
            out.hop_ciphertexts.push(hop.ciphertext);
            carried = hop.decoded;
        }
        out.delivered_key = carried;
        Ok(out)
    }

    /// One hop: `up` pads and sends, `down` receives and unpads. On error,
    /// returns the bits already destroyed on this hop.
    fn relay_hop(
        &self,
        link_id: &str,
        up: &str,
        down: &str,
        carried: &BitString,
        relay_id: u64,
        faults: &[(String, Fault)],
    ) -> std::result::Result<Hop, (Error, usize)> {
        let n = carried.len();
        let stream = self.relay_stream(link_id).map_err(|e| (e, 0))?;
        let mac = self.link_mac(link_id).map_err(|e| (e, 0))?.clone();
        let up_store = self.store(up).map_err(|e| (e, 0))?;
        let down_store = self.store(down).map_err(|e| (e, 0))?;

        let pad = up_store.consume(&stream, n).map_err(|e| (e, 0))?.bits;
        let ciphertext = carried.xor(&pad);
        let mut tx = ChannelEndpoint::new(mac.clone(), relay_id);
        let mut rx = ChannelEndpoint::new(mac, relay_id);
        let hop_faults = faults
            .iter()
            .filter(|(l, _)| l == link_id)
            .map(|(_, f)| f.clone())
            .collect();
        let mut channel = ClassicalChannel::with_faults(hop_faults);
        channel.send(tx.seal(MsgType::RelayKey, encode_relay_payload(&ciphertext)));
        // the receiver spends its pad even if the message turns out bad, so
        // both ends of the relay stream stay aligned
        let down_pad = down_store.consume(&stream, n).map_err(|e| (e, n))?.bits;
        let received = channel
            .recv(MsgType::RelayKey)
            .and_then(|m| rx.open(m, MsgType::RelayKey))
            .and_then(|p| decode_relay_payload(&p))
            .map_err(|e| (e, 2 * n))?;
        if received.len() != n {
            return Err((Error::Protocol("relayed key has wrong length".into()), 2 * n));
        }
        Ok(Hop {
            decoded: received.xor(&down_pad),
            ciphertext,
            transcript: channel.into_transcript(),
        })
    }
}

struct Hop {
    ciphertext: BitString,
    decoded: BitString,
    transcript: Vec<ClassicalMessage>,
}
