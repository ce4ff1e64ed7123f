//! Authenticated classical-channel messages.
//!
//! Wire form: 1-byte type, 8-byte big-endian session id, 4-byte big-endian
//! payload length, payload, 16-byte MAC. The MAC covers the session id, the
//! type, a per-direction sequence number and the payload; the sequence number
//! is implicit (both ends count), so a replayed or reordered message fails.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::Write;

use crate::crypto::{self, Tag, TAG_LEN};
use crate::{Error, Result};

pub const HEADER_LEN: usize = 1 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    SiftAnnounce = 1,
    SiftRetain = 2,
    QberSample = 3,
    ParityRequest = 4,
    ParityReply = 5,
    PaSeed = 6,
    SyncDigest = 7,
    RelayKey = 8,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::SiftAnnounce,
        MsgType::SiftRetain,
        MsgType::QberSample,
        MsgType::ParityRequest,
        MsgType::ParityReply,
        MsgType::PaSeed,
        MsgType::SyncDigest,
        MsgType::RelayKey,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::SiftAnnounce => "sift-announce",
            MsgType::SiftRetain => "sift-retain",
            MsgType::QberSample => "qber-sample",
            MsgType::ParityRequest => "parity-request",
            MsgType::ParityReply => "parity-reply",
            MsgType::PaSeed => "pa-seed",
            MsgType::SyncDigest => "sync-digest",
            MsgType::RelayKey => "relay-key",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Key for the classical-channel MAC.
#[derive(Clone, PartialEq, Eq)]
pub struct MacKey(pub [u8; 32]);

impl MacKey {
    pub fn from_slice(bytes: &[u8]) -> Self {
        let mut k = [0u8; 32];
        let n = bytes.len().min(32);
        k[..n].copy_from_slice(&bytes[..n]);
        MacKey(k)
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacKey({:02x}{:02x}..)", self.0[0], self.0[1])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassicalMessage {
    pub msg_type: MsgType,
    pub session_id: u64,
    pub payload: Vec<u8>,
    pub mac: Tag,
}

impl ClassicalMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + TAG_LEN);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.session_id.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.mac);
        out
    }

    /// Decodes one message from the front of `bytes`, returning it and the
    /// number of bytes used.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Protocol("truncated message header".into()));
        }
        let msg_type = MsgType::from_u8(bytes[0])
            .ok_or_else(|| Error::Protocol(format!("unknown message type {}", bytes[0])))?;
        let session_id = u64::from_be_bytes(bytes[1..9].try_into().unwrap());
        let len = u32::from_be_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let total = HEADER_LEN + len + TAG_LEN;
        if bytes.len() < total {
            return Err(Error::Protocol("truncated message body".into()));
        }
        let payload = bytes[HEADER_LEN..HEADER_LEN + len].to_vec();
        let mac = bytes[HEADER_LEN + len..total].try_into().unwrap();
        Ok((
            Self {
                msg_type,
                session_id,
                payload,
                mac,
            },
            total,
        ))
    }
}

/// Decodes a concatenated transcript.
pub fn decode_transcript(mut bytes: &[u8]) -> Result<Vec<ClassicalMessage>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (m, used) = ClassicalMessage::decode(bytes)?;
        out.push(m);
        bytes = &bytes[used..];
    }
    Ok(out)
}

pub fn write_transcript<W: Write>(w: &mut W, messages: &[ClassicalMessage]) -> Result<()> {
    for m in messages {
        w.write_all(&m.encode())?;
    }
    Ok(())
}

fn compute_mac(key: &MacKey, session_id: u64, msg_type: MsgType, seq: u64, payload: &[u8]) -> Tag {
    crypto::tag128(
        &key.0,
        &[
            &session_id.to_be_bytes(),
            &[msg_type as u8],
            &seq.to_be_bytes(),
            &(payload.len() as u32).to_be_bytes(),
            payload,
        ],
    )
}

/// One side of an authenticated conversation.
#[derive(Debug, Clone)]
pub struct ChannelEndpoint {
    mac_key: MacKey,
    session_id: u64,
    send_seq: u64,
    recv_seq: u64,
}

impl ChannelEndpoint {
    pub fn new(mac_key: MacKey, session_id: u64) -> Self {
        Self {
            mac_key,
            session_id,
            send_seq: 0,
            recv_seq: 0,
        }
    }

    /// Switches the MAC key at a message boundary.
    pub fn rekey(&mut self, mac_key: MacKey) {
        self.mac_key = mac_key;
    }

    pub fn seal(&mut self, msg_type: MsgType, payload: Vec<u8>) -> ClassicalMessage {
        let mac = compute_mac(&self.mac_key, self.session_id, msg_type, self.send_seq, &payload);
        self.send_seq += 1;
        ClassicalMessage {
            msg_type,
            session_id: self.session_id,
            payload,
            mac,
        }
    }

    /// Verifies a received message and returns its payload.
    pub fn open(&mut self, msg: ClassicalMessage, expected: MsgType) -> Result<Vec<u8>> {
        let mac = compute_mac(&self.mac_key, self.session_id, msg.msg_type, self.recv_seq, &msg.payload);
        if msg.session_id != self.session_id || !crypto::tags_equal(&mac, &msg.mac) {
            return Err(Error::MacFailure {
                msg_type: msg.msg_type.name().to_string(),
            });
        }
        if msg.msg_type != expected {
            return Err(Error::Protocol(format!(
                "expected {expected} message, received {}",
                msg.msg_type
            )));
        }
        self.recv_seq += 1;
        Ok(msg.payload)
    }
}

/// A scripted fault applied to messages in transit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    /// Flips bit `bit` of the payload (or of the MAC if the payload is
    /// shorter) of the `occurrence`-th message of the given type.
    FlipBit {
        msg_type: MsgType,
        occurrence: usize,
        bit: usize,
    },
    /// Silently drops the `occurrence`-th message of the given type.
    Drop { msg_type: MsgType, occurrence: usize },
}

/// In-process, reliable, ordered message pipe with a wire transcript.
#[derive(Debug, Default)]
pub struct ClassicalChannel {
    queue: VecDeque<ClassicalMessage>,
    transcript: Vec<ClassicalMessage>,
    faults: Vec<Fault>,
    seen: HashMap<MsgType, usize>,
    applied: Vec<Fault>,
    timeout_ms: u64,
}

/// Time a receiver waits for a stalled peer.
pub const DEFAULT_TIMEOUT_MS: u64 = 5_000;

impl ClassicalChannel {
    pub fn new() -> Self {
        Self::with_faults(Vec::new())
    }

    pub fn with_faults(faults: Vec<Fault>) -> Self {
        Self {
            faults,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            ..Self::default()
        }
    }

    pub fn set_timeout_ms(&mut self, ms: u64) {
        self.timeout_ms = ms;
    }

    pub fn send(&mut self, mut msg: ClassicalMessage) {
        let n = self.seen.entry(msg.msg_type).or_insert(0);
        let occurrence = *n;
        *n += 1;
        let mut dropped = false;
        for f in &self.faults {
            match *f {
                Fault::FlipBit {
                    msg_type,
                    occurrence: o,
                    bit,
                } if msg_type == msg.msg_type && o == occurrence => {
                    let total = msg.payload.len() * 8;
                    if bit < total {
                        msg.payload[bit / 8] ^= 0x80 >> (bit % 8);
                    } else {
                        let b = (bit - total) % (TAG_LEN * 8);
                        msg.mac[b / 8] ^= 0x80 >> (b % 8);
                    }
                    self.applied.push(f.clone());
                }
                Fault::Drop {
                    msg_type,
                    occurrence: o,
                } if msg_type == msg.msg_type && o == occurrence => {
                    dropped = true;
                    self.applied.push(f.clone());
                }
                _ => {}
            }
        }
        if !dropped {
            self.transcript.push(msg.clone());
            self.queue.push_back(msg);
        }
    }

    pub fn recv(&mut self, waiting_for: MsgType) -> Result<ClassicalMessage> {
        self.queue.pop_front().ok_or_else(|| Error::Timeout {
            what: waiting_for.name().to_string(),
            after_ms: self.timeout_ms,
        })
    }

    pub fn transcript(&self) -> &[ClassicalMessage] {
        &self.transcript
    }

    pub fn into_transcript(self) -> Vec<ClassicalMessage> {
        self.transcript
    }

    /// Faults that actually fired.
    pub fn applied_faults(&self) -> &[Fault] {
        &self.applied
    }
}

/// Payload of a key-stream sync-digest message: 1-byte stream id length,
/// stream id, 8-byte served-bit count, 8-byte cursor block, 16-byte digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncDigestPayload {
    pub stream_id: String,
    pub served_bits: u64,
    pub cursor_block: u64,
    pub digest: Tag,
}

impl SyncDigestPayload {
    pub fn encode(&self) -> Vec<u8> {
        let id = self.stream_id.as_bytes();
        let mut out = Vec::with_capacity(1 + id.len() + 32);
        out.push(id.len() as u8);
        out.extend_from_slice(id);
        out.extend_from_slice(&self.served_bits.to_be_bytes());
        out.extend_from_slice(&self.cursor_block.to_be_bytes());
        out.extend_from_slice(&self.digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Protocol("malformed sync-digest payload".into());
        let (&n, rest) = bytes.split_first().ok_or_else(bad)?;
        let n = n as usize;
        if rest.len() != n + 16 + TAG_LEN {
            return Err(bad());
        }
        let stream_id = String::from_utf8(rest[..n].to_vec()).map_err(|_| bad())?;
        Ok(Self {
            stream_id,
            served_bits: u64::from_be_bytes(rest[n..n + 8].try_into().unwrap()),
            cursor_block: u64::from_be_bytes(rest[n + 8..n + 16].try_into().unwrap()),
            digest: rest[n + 16..].try_into().unwrap(),
        })
    }
}
