//! Secure-channel frames. The layout is the classical-channel one: 1-byte
//! kind, 8-byte big-endian session id, 4-byte big-endian payload length,
//! payload, 16-byte MAC. Kind codes start at 0x21 so the two never collide
//! in a shared log.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::Write;

use crate::bb84::message::HEADER_LEN;
use crate::crypto::{Tag, TAG_LEN};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Propose = 0x21,
    Select = 0x22,
    AuthInit = 0x23,
    AuthResp = 0x24,
    RekeyInit = 0x25,
    RekeyResp = 0x26,
    Record = 0x27,
}

impl FrameKind {
    pub const ALL: [FrameKind; 7] = [
        FrameKind::Propose,
        FrameKind::Select,
        FrameKind::AuthInit,
        FrameKind::AuthResp,
        FrameKind::RekeyInit,
        FrameKind::RekeyResp,
        FrameKind::Record,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Propose => "propose",
            FrameKind::Select => "select",
            FrameKind::AuthInit => "auth-init",
            FrameKind::AuthResp => "auth-resp",
            FrameKind::RekeyInit => "rekey-init",
            FrameKind::RekeyResp => "rekey-resp",
            FrameKind::Record => "record",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub session_id: u64,
    pub payload: Vec<u8>,
    pub mac: Tag,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + TAG_LEN);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.session_id.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.mac);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Protocol("truncated frame header".into()));
        }
        let kind = FrameKind::from_u8(bytes[0])
            .ok_or_else(|| Error::Protocol(format!("unknown frame kind {:#x}", bytes[0])))?;
        let session_id = u64::from_be_bytes(bytes[1..9].try_into().unwrap());
        let len = u32::from_be_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let total = HEADER_LEN + len + TAG_LEN;
        if bytes.len() < total {
            return Err(Error::Protocol("truncated frame body".into()));
        }
        Ok((
            Self {
                kind,
                session_id,
                payload: bytes[HEADER_LEN..HEADER_LEN + len].to_vec(),
                mac: bytes[HEADER_LEN + len..total].try_into().unwrap(),
            },
            total,
        ))
    }
}

pub fn decode_frames(mut bytes: &[u8]) -> Result<Vec<Frame>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (f, used) = Frame::decode(bytes)?;
        out.push(f);
        bytes = &bytes[used..];
    }
    Ok(out)
}

pub fn write_frames<W: Write>(w: &mut W, frames: &[Frame]) -> Result<()> {
    for f in frames {
        w.write_all(&f.encode())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireFault {
    /// Flips bit `bit` of the payload, or of the MAC past the payload's end.
    FlipBit {
        kind: FrameKind,
        occurrence: usize,
        bit: usize,
    },
    Drop { kind: FrameKind, occurrence: usize },
}

/// Reliable ordered in-process transport with scripted faults.
#[derive(Debug, Default)]
pub struct Wire {
    queue: VecDeque<Frame>,
    transcript: Vec<Frame>,
    faults: Vec<WireFault>,
    seen: HashMap<FrameKind, usize>,
    applied: Vec<WireFault>,
}

impl Wire {
    pub fn new(faults: Vec<WireFault>) -> Self {
        Self {
            faults,
            ..Self::default()
        }
    }

    pub fn send(&mut self, mut frame: Frame) {
        let n = self.seen.entry(frame.kind).or_insert(0);
        let occurrence = *n;
        *n += 1;
        let mut dropped = false;
        for f in &self.faults {
            match *f {
                WireFault::FlipBit { kind, occurrence: o, bit } if kind == frame.kind && o == occurrence => {
                    let total = frame.payload.len() * 8;
                    if bit < total {
                        frame.payload[bit / 8] ^= 0x80 >> (bit % 8);
                    } else {
                        let b = (bit - total) % (TAG_LEN * 8);
                        frame.mac[b / 8] ^= 0x80 >> (b % 8);
                    }
                    self.applied.push(f.clone());
                }
                WireFault::Drop { kind, occurrence: o } if kind == frame.kind && o == occurrence => {
                    dropped = true;
                    self.applied.push(f.clone());
                }
                _ => {}
            }
        }
        if !dropped {
            self.transcript.push(frame.clone());
            self.queue.push_back(frame);
        }
    }

    /// `None` models a peer that never answered.
    pub fn recv(&mut self) -> Option<Frame> {
        self.queue.pop_front()
    }

    pub fn transcript(&self) -> &[Frame] {
        &self.transcript
    }

    pub fn applied_faults(&self) -> &[WireFault] {
        &self.applied
    }
}
