//! Where a secure-channel session gets quantum key bits.

use std::collections::VecDeque;

use super::Side;
use crate::bits::BitString;
use crate::keystore::{KeyStore, KeyStream};
use crate::qnet::{Network, RELAY_STREAM};
use crate::{Error, Result};

/// Key material shared by the two peers of a session. Each side draws its
/// own copy; as long as both sides make the same sequence of draws the
/// copies agree.
pub trait PairKeySource {
    /// Serves `n` bits to one side, or fails with
    /// [`Error::InsufficientMaterial`] without consuming anything.
    fn draw(&mut self, side: Side, n: usize) -> Result<BitString>;

    fn available(&self, side: Side) -> usize;

    /// Moves the source's view of simulated time forward; scheduled refills
    /// up to `now_ms` land.
    fn advance_to(&mut self, _now_ms: u64) {}

    fn describe(&self) -> String;
}

/// Draws from one stream opened at both ends of a direct link.
pub struct StreamKeySource<'a> {
    initiator: &'a KeyStore,
    responder: &'a KeyStore,
    stream: KeyStream,
    refills: VecDeque<(u64, BitString)>,
}

impl<'a> StreamKeySource<'a> {
    pub fn new(initiator: &'a KeyStore, responder: &'a KeyStore, stream: KeyStream) -> Self {
        Self {
            initiator,
            responder,
            stream,
            refills: VecDeque::new(),
        }
    }

    /// Scripted producer: at each simulated time the block is appended to
    /// the link at both ends (and allocated to streams as the store decides).
    pub fn with_refills(mut self, mut refills: Vec<(u64, BitString)>) -> Self {
        refills.sort_by_key(|(t, _)| *t);
        self.refills = refills.into();
        self
    }

    fn store(&self, side: Side) -> &'a KeyStore {
        match side {
            Side::Initiator => self.initiator,
            Side::Responder => self.responder,
        }
    }
}

impl PairKeySource for StreamKeySource<'_> {
    fn draw(&mut self, side: Side, n: usize) -> Result<BitString> {
        Ok(self.store(side).consume(&self.stream, n)?.bits)
    }

    fn available(&self, side: Side) -> usize {
        self.store(side).available(&self.stream).unwrap_or(0)
    }

    fn advance_to(&mut self, now_ms: u64) {
        while self.refills.front().is_some_and(|(t, _)| *t <= now_ms) {
            let (t, bits) = self.refills.pop_front().expect("checked");
            let link = &self.stream.link_id;
            log::debug!("refill of {} bits on {link} at {t} ms", bits.len());
            for store in [self.initiator, self.responder] {
                if let Err(e) = store.append_block(link, bits.clone()) {
                    log::warn!("refill on {link} failed: {e}");
                }
            }
        }
    }

    fn describe(&self) -> String {
        format!("stream {}/{}", self.stream.link_id, self.stream.stream_id)
    }
}

/// Draws end-to-end keys relayed across the network between two nodes.
/// Each shortfall on one side triggers a relay; the other side's copy is
/// buffered until it asks.
pub struct RelayKeySource<'a> {
    net: &'a Network,
    src: String,
    dst: String,
    initiator_buf: BitString,
    responder_buf: BitString,
    pub relays: usize,
}

impl<'a> RelayKeySource<'a> {
    /// Opens the relay stream on every link of the current route.
    pub fn new(net: &'a Network, src: &str, dst: &str) -> Result<Self> {
        for link in net.route(src, dst)?.hops {
            net.relay_stream(&link)?;
        }
        Ok(Self {
            net,
            src: src.to_string(),
            dst: dst.to_string(),
            initiator_buf: BitString::new(),
            responder_buf: BitString::new(),
            relays: 0,
        })
    }

    fn buf(&mut self, side: Side) -> &mut BitString {
        match side {
            Side::Initiator => &mut self.initiator_buf,
            Side::Responder => &mut self.responder_buf,
        }
    }

    fn relay_capacity(&self) -> usize {
        let Ok(path) = self.net.route(&self.src, &self.dst) else {
            return 0;
        };
        path.hops
            .iter()
            .map(|link| {
                let h = KeyStream::new(link.as_str(), RELAY_STREAM);
                let Ok((a, b)) = self.net.ends(link) else { return 0 };
                [a, b]
                    .iter()
                    .map(|s| if s.has_stream(&h) { s.available(&h).unwrap_or(0) } else { 0 })
                    .min()
                    .unwrap_or(0)
            })
            .min()
            .unwrap_or(0)
    }
}

impl PairKeySource for RelayKeySource<'_> {
    fn draw(&mut self, side: Side, n: usize) -> Result<BitString> {
        let have = self.buf(side).len();
        if have < n {
            let need = n - have;
            let capacity = self.relay_capacity();
            if capacity < need {
                return Err(Error::InsufficientMaterial { shortfall: need - capacity });
            }
            let out = self
                .net
                .end_to_end_key(&self.src, &self.dst, need, &[])
                .map_err(|f| f.error)?;
            self.relays += 1;
            self.initiator_buf.extend_from(&out.source_key);
            self.responder_buf.extend_from(&out.delivered_key);
        }
        let buf = self.buf(side);
        let taken = buf.slice(0..n);
        *buf = buf.slice(n..buf.len());
        Ok(taken)
    }

    fn available(&self, side: Side) -> usize {
        let buf = match side {
            Side::Initiator => &self.initiator_buf,
            Side::Responder => &self.responder_buf,
        };
        buf.len() + self.relay_capacity()
    }

    fn describe(&self) -> String {
        format!("relay {}->{}", self.src, self.dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::Topology;
    use crate::seed;

    #[test]
    fn stream_source_sides_agree() {
        let (a, b) = (KeyStore::new("a"), KeyStore::new("b"));
        for s in [&a, &b] {
            s.add_link("L");
            s.append_block("L", BitString::random(100, &mut seed::rng(1))).unwrap();
        }
        a.open_stream("L", "app").unwrap();
        let h = b.open_stream("L", "app").unwrap();
        let mut src = StreamKeySource::new(&a, &b, h)
            .with_refills(vec![(500, BitString::zeros(50))]);
        assert_eq!(src.draw(Side::Initiator, 60).unwrap(), src.draw(Side::Responder, 60).unwrap());
        assert!(matches!(
            src.draw(Side::Initiator, 60),
            Err(Error::InsufficientMaterial { shortfall: 20 })
        ));
        src.advance_to(499);
        assert_eq!(src.available(Side::Initiator), 40);
        src.advance_to(500);
        assert_eq!(src.available(Side::Responder), 90);
    }

    #[test]
    fn relay_source_buffers_peer_copy() {
        let net = Network::new(
            Topology::parse(
                "node 1 trusted\nnode 2 trusted\nnode 3 trusted\n\
                 link p 1 2 up static 0\nlink q 2 3 up static 0\n",
            )
            .unwrap(),
            3,
        );
        for l in ["p", "q"] {
            let (a, b) = net.ends(l).unwrap();
            let bits = BitString::random(300, &mut seed::rng(l.len() as u64 + 40));
            a.append_block(l, bits.clone()).unwrap();
            b.append_block(l, bits).unwrap();
        }
        let mut src = RelayKeySource::new(&net, "1", "3").unwrap();
        assert_eq!(src.available(Side::Initiator), 300);
        let x = src.draw(Side::Initiator, 100).unwrap();
        assert_eq!(src.available(Side::Responder), 100 + 200);
        let y = src.draw(Side::Responder, 100).unwrap();
        assert_eq!(x, y);
        assert_eq!(src.relays, 1);
        assert!(matches!(
            src.draw(Side::Initiator, 201),
            Err(Error::InsufficientMaterial { shortfall: 1 })
        ));
    }
}
