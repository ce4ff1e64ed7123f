//! Synchronized key store for one node.
//!
//! Each QKD link the node terminates has an append-only sequence of
//! [`KeyBlock`]s. Blocks are handed to per-application streams round-robin
//! in stream-id order, so two endpoints that append the same blocks and open
//! the same streams in the same order allocate identically, regardless of
//! how consumption on different streams interleaves. Bits are destroyed on
//! read: once served they are never served again, to any stream.
//!
//! Concurrency: a `KeyStore` is `Sync`. All state sits behind one mutex, so
//! consumers on distinct streams and the producer appending blocks may run
//! from different threads; operations on a single stream are serialized.

mod persist;

pub use persist::{read_block_file, write_block_record, BlockFileWriter};

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use crate::bits::BitString;
use crate::bb84::message::SyncDigestPayload;
use crate::crypto::{self, RunningDigest, Tag};
use crate::{Error, Result};

/// Bits served between digest exchanges unless configured otherwise.
pub const DEFAULT_SYNC_INTERVAL: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStatus {
    Available,
    PartiallyConsumed,
    Exhausted,
    Quarantined,
}

/// A block of final key. Its bits never change once stored.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyBlock {
    pub block_id: u64,
    pub link_id: String,
    pub bits: BitString,
    pub status: BlockStatus,
    /// Stream the block is allocated to, if any.
    pub owner: Option<String>,
    pub consumed: usize,
}

impl KeyBlock {
    fn remaining(&self) -> usize {
        self.bits.len() - self.consumed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cursor {
    pub block_id: u64,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncStatus {
    Ok,
    Desynchronized,
}

/// Provenance of served bits: `len` bits from `offset` of block `block_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub block_id: u64,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyMaterial {
    pub bits: BitString,
    pub spans: Vec<Span>,
}

/// Handle naming one demultiplexed stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyStream {
    pub link_id: String,
    pub stream_id: String,
}

impl KeyStream {
    pub fn new(link_id: impl Into<String>, stream_id: impl Into<String>) -> Self {
        Self {
            link_id: link_id.into(),
            stream_id: stream_id.into(),
        }
    }
}

/// Snapshot of a stream's position and digest.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamInfo {
    pub cursor: Cursor,
    pub consumed_digest: Tag,
    /// Bits served since the last digest reset.
    pub served_bits: u64,
    /// Bits served over the lifetime of the stream.
    pub total_served: u64,
    pub available_bits: usize,
    pub status: SyncStatus,
}

struct StreamState {
    /// Allocated blocks not yet finished; the front is the current block.
    assigned: VecDeque<u64>,
    digest_key: Vec<u8>,
    digest: RunningDigest,
    pending: Vec<bool>,
    served: u64,
    total_served: u64,
    since_check: u64,
    status: SyncStatus,
    remote_block: Option<u64>,
    /// Last block this stream read from, for cursor reporting.
    last_block: Option<u64>,
}

impl StreamState {
    fn new(link_id: &str, stream_id: &str) -> Self {
        let digest_key = [b"stream-digest/".as_slice(), link_id.as_bytes(), b"/", stream_id.as_bytes()].concat();
        Self {
            digest: RunningDigest::new(&digest_key),
            digest_key,
            assigned: VecDeque::new(),
            pending: Vec::new(),
            served: 0,
            total_served: 0,
            since_check: 0,
            status: SyncStatus::Ok,
            remote_block: None,
            last_block: None,
        }
    }

    fn absorb(&mut self, bits: &BitString) {
        self.pending.extend(bits.iter());
        let whole = self.pending.len() / 8 * 8;
        if whole > 0 {
            let bytes = BitString::from_bools(&self.pending[..whole]).to_packed();
            self.digest.update(&bytes);
            self.pending.drain(..whole);
        }
        self.served += bits.len() as u64;
        self.total_served += bits.len() as u64;
        self.since_check += bits.len() as u64;
    }

    fn digest_value(&self) -> Tag {
        let tail = BitString::from_bools(&self.pending).to_packed();
        self.digest
            .snapshot(&[tail.as_slice(), &self.served.to_be_bytes()].concat())
    }

    fn reset_digest(&mut self) {
        self.digest = RunningDigest::new(&self.digest_key);
        self.pending.clear();
        self.served = 0;
        self.since_check = 0;
    }
}

#[derive(Default)]
struct LinkState {
    blocks: Vec<KeyBlock>,
    streams: BTreeMap<String, StreamState>,
    /// Blocks appended while no stream was open.
    pool: VecDeque<u64>,
    rr_next: usize,
    produced_bits: u64,
    writer: Option<BlockFileWriter>,
}

impl LinkState {
    fn allocate(&mut self, block_id: u64) {
        let ids: Vec<String> = self.streams.keys().cloned().collect();
        let owner = &ids[self.rr_next % ids.len()];
        self.rr_next += 1;
        self.blocks[block_id as usize].owner = Some(owner.clone());
        self.streams
            .get_mut(owner)
            .expect("owner is an open stream")
            .assigned
            .push_back(block_id);
    }

    fn cursor_of(&self, st: &StreamState) -> Cursor {
        let id = match (st.assigned.front(), st.last_block) {
            (Some(&id), _) | (None, Some(id)) => id,
            (None, None) => {
                return Cursor {
                    block_id: self.pool.front().copied().unwrap_or(self.blocks.len() as u64),
                    offset: 0,
                }
            }
        };
        Cursor {
            block_id: id,
            offset: self.blocks[id as usize].consumed,
        }
    }

    /// Bits the stream can serve before running out or reaching a
    /// quarantined block, and whether a quarantined block bounds it.
    fn servable(&self, st: &StreamState) -> (usize, bool) {
        let mut total = 0;
        for &id in &st.assigned {
            let b = &self.blocks[id as usize];
            if b.status == BlockStatus::Quarantined {
                return (total, true);
            }
            total += b.remaining();
        }
        (total, false)
    }
}

pub struct KeyStore {
    node: String,
    sync_interval: u64,
    links: Mutex<BTreeMap<String, LinkState>>,
}

impl KeyStore {
    pub fn new(node: impl Into<String>) -> Self {
        Self::with_sync_interval(node, DEFAULT_SYNC_INTERVAL)
    }

    pub fn with_sync_interval(node: impl Into<String>, sync_interval: u64) -> Self {
        Self {
            node: node.into(),
            sync_interval: sync_interval.max(1),
            links: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn sync_interval(&self) -> u64 {
        self.sync_interval
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, LinkState>> {
        // a panic while holding the lock leaves no partial update behind
        self.links.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn add_link(&self, link_id: impl Into<String>) {
        self.lock().entry(link_id.into()).or_default();
    }

    pub fn has_link(&self, link_id: &str) -> bool {
        self.lock().contains_key(link_id)
    }

    /// Appends a block of final key and returns its id.
    pub fn append_block(&self, link_id: &str, bits: BitString) -> Result<u64> {
        let mut links = self.lock();
        let link = links
            .get_mut(link_id)
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))?;
        let block_id = link.blocks.len() as u64;
        if let Some(w) = link.writer.as_mut() {
            w.append(block_id, &bits)?;
        }
        link.produced_bits += bits.len() as u64;
        link.blocks.push(KeyBlock {
            block_id,
            link_id: link_id.to_string(),
            bits,
            status: BlockStatus::Available,
            owner: None,
            consumed: 0,
        });
        if link.streams.is_empty() {
            link.pool.push_back(block_id);
        } else {
            link.allocate(block_id);
        }
        log::debug!("{}: link {link_id} stored block {block_id}", self.node);
        Ok(block_id)
    }

    /// Opens a stream. Blocks appended while no stream existed are allocated
    /// at this point, round-robin over the open streams.
    pub fn open_stream(&self, link_id: &str, stream_id: &str) -> Result<KeyStream> {
        let mut links = self.lock();
        let link = links
            .get_mut(link_id)
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))?;
        if link.streams.contains_key(stream_id) {
            return Err(Error::DuplicateStream {
                link: link_id.to_string(),
                stream: stream_id.to_string(),
            });
        }
        link.streams
            .insert(stream_id.to_string(), StreamState::new(link_id, stream_id));
        while let Some(id) = link.pool.pop_front() {
            link.allocate(id);
        }
        Ok(KeyStream::new(link_id, stream_id))
    }

    pub fn has_stream(&self, stream: &KeyStream) -> bool {
        self.lock()
            .get(&stream.link_id)
            .is_some_and(|l| l.streams.contains_key(&stream.stream_id))
    }

    fn with_stream<T>(
        &self,
        stream: &KeyStream,
        f: impl FnOnce(&mut LinkState, &str) -> Result<T>,
    ) -> Result<T> {
        let mut links = self.lock();
        let link = links
            .get_mut(&stream.link_id)
            .ok_or_else(|| Error::UnknownLink(stream.link_id.clone()))?;
        if !link.streams.contains_key(&stream.stream_id) {
            return Err(Error::ContractViolation(format!(
                "stream {} is not open on link {}",
                stream.stream_id, stream.link_id
            )));
        }
        f(link, &stream.stream_id)
    }

    /// Serves the next `n` bits of the stream. On error nothing is consumed.
    pub fn consume(&self, stream: &KeyStream, n: usize) -> Result<KeyMaterial> {
        self.with_stream(stream, |link, sid| {
            let st = &link.streams[sid];
            if st.status == SyncStatus::Desynchronized {
                return Err(Error::Desynchronized {
                    link: stream.link_id.clone(),
                    stream: sid.to_string(),
                });
            }
            if n == 0 {
                return Ok(KeyMaterial {
                    bits: BitString::new(),
                    spans: Vec::new(),
                });
            }
            let (avail, fenced) = link.servable(st);
            if avail < n {
                if fenced {
                    return Err(Error::Desynchronized {
                        link: stream.link_id.clone(),
                        stream: sid.to_string(),
                    });
                }
                return Err(Error::InsufficientMaterial { shortfall: n - avail });
            }

            let st = link.streams.get_mut(sid).expect("checked above");
            let mut bits = BitString::with_capacity(n);
            let mut spans = Vec::new();
            let mut need = n;
            while need > 0 {
                let id = *st.assigned.front().expect("servable bits remain");
                let block = &mut link.blocks[id as usize];
                let take = need.min(block.remaining());
                if take > 0 {
                    let part = block.bits.slice(block.consumed..block.consumed + take);
                    bits.extend_from(&part);
                    spans.push(Span {
                        block_id: id,
                        offset: block.consumed,
                        len: take,
                    });
                    block.consumed += take;
                    need -= take;
                    st.last_block = Some(id);
                }
                if block.remaining() == 0 {
                    block.status = BlockStatus::Exhausted;
                    st.assigned.pop_front();
                } else {
                    block.status = BlockStatus::PartiallyConsumed;
                }
            }
            st.absorb(&bits);
            Ok(KeyMaterial { bits, spans })
        })
    }

    pub fn available(&self, stream: &KeyStream) -> Result<usize> {
        self.with_stream(stream, |link, sid| Ok(link.servable(&link.streams[sid]).0))
    }

    pub fn stream_info(&self, stream: &KeyStream) -> Result<StreamInfo> {
        self.with_stream(stream, |link, sid| {
            let st = &link.streams[sid];
            Ok(StreamInfo {
                cursor: link.cursor_of(st),
                consumed_digest: st.digest_value(),
                served_bits: st.served,
                total_served: st.total_served,
                available_bits: link.servable(st).0,
                status: st.status,
            })
        })
    }

    /// Whether a digest exchange is due on this stream.
    pub fn sync_due(&self, stream: &KeyStream) -> Result<bool> {
        let interval = self.sync_interval;
        self.with_stream(stream, |link, sid| Ok(link.streams[sid].since_check >= interval))
    }

    /// The local digest announcement for a sync-digest message.
    pub fn sync_message(&self, stream: &KeyStream) -> Result<SyncDigestPayload> {
        self.with_stream(stream, |link, sid| {
            let st = &link.streams[sid];
            Ok(SyncDigestPayload {
                stream_id: sid.to_string(),
                served_bits: st.served,
                cursor_block: link.cursor_of(st).block_id,
                digest: st.digest_value(),
            })
        })
    }

    /// Compares the local digest with the peer's; on mismatch the stream is
    /// marked desynchronized.
    pub fn sync_check(&self, stream: &KeyStream, remote: &SyncDigestPayload) -> Result<SyncStatus> {
        self.with_stream(stream, |link, sid| {
            let cursor_block = link.cursor_of(&link.streams[sid]).block_id;
            let st = link.streams.get_mut(sid).expect("checked");
            if remote.stream_id != sid {
                return Err(Error::Protocol(format!(
                    "sync digest for stream {} checked against {sid}",
                    remote.stream_id
                )));
            }
            let agree = remote.served_bits == st.served
                && crypto::tags_equal(&remote.digest, &st.digest_value());
            if agree && st.status == SyncStatus::Ok {
                st.since_check = 0;
                return Ok(SyncStatus::Ok);
            }
            st.status = SyncStatus::Desynchronized;
            st.remote_block = Some(remote.cursor_block.max(st.remote_block.unwrap_or(0)));
            log::warn!(
                "stream {sid} on link {} desynchronized (local block {cursor_block}, remote block {})",
                stream.link_id,
                remote.cursor_block
            );
            Ok(SyncStatus::Desynchronized)
        })
    }

    /// Resynchronizes a desynchronized stream at the next block boundary past
    /// both endpoints' current blocks. Skipped bits are quarantined.
    pub fn recover(&self, stream: &KeyStream) -> Result<Cursor> {
        self.with_stream(stream, |link, sid| {
            let st = &link.streams[sid];
            if st.status != SyncStatus::Desynchronized {
                return Err(Error::ContractViolation(format!(
                    "recover called on synchronized stream {sid}"
                )));
            }
            let local_block = link.cursor_of(st).block_id;
            let boundary = local_block.max(st.remote_block.unwrap_or(0));
            let Some(&next) = st.assigned.iter().find(|&&id| id > boundary) else {
                return Err(Error::InsufficientMaterial { shortfall: 1 });
            };
            let st = link.streams.get_mut(sid).expect("checked");
            while let Some(&id) = st.assigned.front() {
                if id == next {
                    break;
                }
                st.assigned.pop_front();
                let block = &mut link.blocks[id as usize];
                block.status = BlockStatus::Quarantined;
            }
            st.status = SyncStatus::Ok;
            st.remote_block = None;
            st.reset_digest();
            log::info!("stream {sid} on link {} recovered at block {next}", stream.link_id);
            Ok(Cursor {
                block_id: next,
                offset: link.blocks[next as usize].consumed,
            })
        })
    }

    /// Fault injection: drops the next `bits` bits of the stream without
    /// serving them or folding them into the digest.
    pub fn skew_cursor(&self, stream: &KeyStream, bits: usize) -> Result<()> {
        self.with_stream(stream, |link, sid| {
            let (avail, _) = link.servable(&link.streams[sid]);
            if avail < bits {
                return Err(Error::InsufficientMaterial { shortfall: bits - avail });
            }
            let st = link.streams.get_mut(sid).expect("checked");
            let mut need = bits;
            while need > 0 {
                let id = *st.assigned.front().expect("servable bits remain");
                let block = &mut link.blocks[id as usize];
                let take = need.min(block.remaining());
                block.consumed += take;
                need -= take;
                if block.remaining() == 0 {
                    block.status = BlockStatus::Exhausted;
                    st.assigned.pop_front();
                } else {
                    block.status = BlockStatus::PartiallyConsumed;
                }
            }
            Ok(())
        })
    }

    /// Fault injection: quarantines a block so it is never served.
    pub fn quarantine_block(&self, link_id: &str, block_id: u64) -> Result<()> {
        let mut links = self.lock();
        let link = links
            .get_mut(link_id)
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))?;
        let block = link
            .blocks
            .get_mut(block_id as usize)
            .ok_or_else(|| Error::ContractViolation(format!("no block {block_id} on link {link_id}")))?;
        block.status = BlockStatus::Quarantined;
        Ok(())
    }

    pub fn blocks(&self, link_id: &str) -> Result<Vec<KeyBlock>> {
        let links = self.lock();
        let link = links
            .get(link_id)
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))?;
        Ok(link.blocks.clone())
    }

    /// Total bits ever appended to the link.
    pub fn produced_bits(&self, link_id: &str) -> Result<u64> {
        let links = self.lock();
        links
            .get(link_id)
            .map(|l| l.produced_bits)
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))
    }

    /// Streams open on the link, in allocation order.
    pub fn streams(&self, link_id: &str) -> Result<Vec<String>> {
        let links = self.lock();
        links
            .get(link_id)
            .map(|l| l.streams.keys().cloned().collect())
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))
    }

    /// Persists every subsequent block of the link to an append-only file.
    /// Blocks already stored are written first if the file is new.
    pub fn persist_link(&self, link_id: &str, path: &Path, integrity_key: &[u8]) -> Result<()> {
        let mut links = self.lock();
        let link = links
            .get_mut(link_id)
            .ok_or_else(|| Error::UnknownLink(link_id.to_string()))?;
        let existing = if path.exists() {
            read_block_file(path, integrity_key)?.len()
        } else {
            0
        };
        let mut writer = BlockFileWriter::open(path, integrity_key)?;
        for b in link.blocks.iter().skip(existing) {
            writer.append(b.block_id, &b.bits)?;
        }
        link.writer = Some(writer);
        Ok(())
    }

    /// Loads blocks from a block file into an empty link.
    pub fn restore_link(&self, link_id: &str, path: &Path, integrity_key: &[u8]) -> Result<usize> {
        let records = read_block_file(path, integrity_key)?;
        {
            let links = self.lock();
            let link = links
                .get(link_id)
                .ok_or_else(|| Error::UnknownLink(link_id.to_string()))?;
            if !link.blocks.is_empty() {
                return Err(Error::ContractViolation(format!(
                    "link {link_id} already holds blocks"
                )));
            }
        }
        for (expected, (id, bits)) in records.iter().enumerate() {
            if *id != expected as u64 {
                return Err(Error::Protocol(format!(
                    "block file has id {id} where {expected} was expected"
                )));
            }
            self.append_block(link_id, bits.clone())?;
        }
        Ok(records.len())
    }
}
