//! Negotiation, authentication, record protection and rekeying.
//!
//! Both peers run in-process: a [`SecureSession`] holds the initiator's and
//! the responder's state side by side and moves every exchange through a
//! [`Wire`], so each side derives its keys only from what it sent and what
//! it received.

use rand::RngCore;

use super::keys::{self, mac_tag, KeyLengths, Keying, SessionKeys, ToyDh, OPTION_A_SECRET_BITS};
use super::source::PairKeySource;
use super::wire::{Frame, FrameKind, Wire, WireFault};
use super::{CipherAlg, Ciphersuite, Direction, Kex, Side, SUITE_ENCODED_LEN};
use crate::bits::BitString;
use crate::crypto::{self, TAG_LEN};
use crate::qnet::ConnectionInfo;
use crate::seed::{self, SimRng};
use crate::{Error, Result};

const NONCE_LEN: usize = 32;
const RANDOM_LEN: usize = 32;
const AUTH_LEN: usize = 32;
const HELLO_LEN: usize = NONCE_LEN + RANDOM_LEN + 8;

/// Simulated time between retries while blocked on key material.
pub const POLL_INTERVAL_MS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExhaustionMode {
    Fail,
    BlockWithTimeout,
    FallbackClassical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExhaustionPolicy {
    pub mode: ExhaustionMode,
    /// Simulated milliseconds; only used when blocking.
    pub timeout_ms: u64,
}

impl ExhaustionPolicy {
    pub fn fail() -> Self {
        Self {
            mode: ExhaustionMode::Fail,
            timeout_ms: 0,
        }
    }

    pub fn block(timeout_ms: u64) -> Result<Self> {
        if timeout_ms == 0 {
            return Err(Error::InvalidParameter("blocking needs a positive timeout".into()));
        }
        Ok(Self {
            mode: ExhaustionMode::BlockWithTimeout,
            timeout_ms,
        })
    }

    pub fn fallback() -> Self {
        Self {
            mode: ExhaustionMode::FallbackClassical,
            timeout_ms: 0,
        }
    }
}

impl Default for ExhaustionPolicy {
    fn default() -> Self {
        Self::fail()
    }
}

/// Rekey once either count since the last rekey reaches its limit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RekeyPolicy {
    pub max_records: Option<u64>,
    pub max_bytes: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PeerConfig {
    pub id: String,
    pub psk: Vec<u8>,
    /// Proposal order for the initiator, preference order for the responder.
    pub suites: Vec<Ciphersuite>,
}

#[derive(Debug, Clone)]
pub struct HandshakeConfig {
    pub initiator: PeerConfig,
    pub responder: PeerConfig,
    pub policy: ExhaustionPolicy,
    pub rekey: RekeyPolicy,
    pub timeout_ms: u64,
    /// Simulated clock at session start.
    pub start_ms: u64,
}

impl HandshakeConfig {
    pub fn new(initiator: PeerConfig, responder: PeerConfig) -> Self {
        Self {
            initiator,
            responder,
            policy: ExhaustionPolicy::default(),
            rekey: RekeyPolicy::default(),
            timeout_ms: crate::bb84::message::DEFAULT_TIMEOUT_MS,
            start_ms: 0,
        }
    }

    fn peer(&self, side: Side) -> &PeerConfig {
        match side {
            Side::Initiator => &self.initiator,
            Side::Responder => &self.responder,
        }
    }
}

/// One side's record of a negotiation.
#[derive(Clone)]
pub struct SideView {
    pub side: Side,
    pub suite: Ciphersuite,
    pub nonce_i: Vec<u8>,
    pub nonce_r: Vec<u8>,
    pub random_i: Vec<u8>,
    pub random_r: Vec<u8>,
    dh: ToyDh,
    peer_dh_public: u64,
    /// Encoded negotiation frames as this side sent or received them.
    pub transcript: Vec<u8>,
}

impl SideView {
    /// Initiator random ‖ responder random ‖ suite encoding.
    pub fn randoms(&self) -> Vec<u8> {
        [&self.random_i[..], &self.random_r, &self.suite.encode()].concat()
    }

    pub fn nonces(&self) -> Vec<u8> {
        [&self.nonce_i[..], &self.nonce_r].concat()
    }

    fn own_nonce(&self) -> &[u8] {
        match self.side {
            Side::Initiator => &self.nonce_i,
            Side::Responder => &self.nonce_r,
        }
    }

    fn peer_nonce(&self) -> &[u8] {
        match self.side {
            Side::Initiator => &self.nonce_r,
            Side::Responder => &self.nonce_i,
        }
    }
}

pub struct Negotiated {
    pub initiator: SideView,
    pub responder: SideView,
}

impl Negotiated {
    pub fn suite(&self) -> Ciphersuite {
        self.initiator.suite
    }

    fn view(&self, side: Side) -> &SideView {
        match side {
            Side::Initiator => &self.initiator,
            Side::Responder => &self.responder,
        }
    }
}

fn random_bytes(rng: &mut SimRng, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    rng.fill_bytes(&mut v);
    v
}

fn hello(nonce: &[u8], random: &[u8], dh_public: u64) -> Vec<u8> {
    [nonce, random, &dh_public.to_be_bytes()].concat()
}

fn parse_hello(p: &[u8]) -> (Vec<u8>, Vec<u8>, u64) {
    (
        p[..NONCE_LEN].to_vec(),
        p[NONCE_LEN..NONCE_LEN + RANDOM_LEN].to_vec(),
        u64::from_be_bytes(p[NONCE_LEN + RANDOM_LEN..HELLO_LEN].try_into().unwrap()),
    )
}

fn unauthenticated(kind: FrameKind, session_id: u64, payload: Vec<u8>) -> Frame {
    Frame {
        kind,
        session_id,
        payload,
        mac: [0; TAG_LEN],
    }
}

fn timed_out(kind: FrameKind, timeout_ms: u64) -> Error {
    Error::NegotiationFailure(format!("timed out after {timeout_ms} ms waiting for {kind}"))
}

/// The negotiation round. Quantum suites are dropped from the proposal (and
/// from the responder's preferences) unless a QKD route exists. Nonces,
/// randoms and key-exchange values are sent whatever the suite.
#[allow(clippy::too_many_arguments)]
pub fn negotiate(
    wire: &mut Wire,
    session_id: u64,
    proposal: &[Ciphersuite],
    preferences: &[Ciphersuite],
    conn: &ConnectionInfo,
    rng: &mut SimRng,
    timeout_ms: u64,
) -> Result<Negotiated> {
    if proposal.is_empty() {
        return Err(Error::InvalidParameter("empty suite proposal".into()));
    }
    let usable = |s: &&Ciphersuite| conn.possible || !s.is_quantum();
    let offered: Vec<Ciphersuite> = proposal.iter().filter(usable).copied().collect();
    if offered.is_empty() {
        return Err(Error::NegotiationFailure(
            "no suite left to propose without a QKD route".into(),
        ));
    }

    // initiator
    let nonce_i = random_bytes(rng, NONCE_LEN);
    let random_i = random_bytes(rng, RANDOM_LEN);
    let dh_i = ToyDh::generate(rng);
    let mut payload = hello(&nonce_i, &random_i, dh_i.public);
    for s in &offered {
        payload.extend_from_slice(&s.encode());
    }
    let propose = unauthenticated(FrameKind::Propose, session_id, payload);
    let init_sent = propose.encode();
    wire.send(propose);

    // responder
    let got = wire.recv().ok_or_else(|| timed_out(FrameKind::Propose, timeout_ms))?;
    if got.kind != FrameKind::Propose || got.payload.len() < HELLO_LEN {
        return Err(Error::NegotiationFailure("malformed proposal".into()));
    }
    let (peer_nonce_i, peer_random_i, peer_dh_i) = parse_hello(&got.payload);
    // unknown or ill-formed entries are skipped, not fatal
    let received: Vec<Ciphersuite> = got.payload[HELLO_LEN..]
        .chunks(SUITE_ENCODED_LEN)
        .filter_map(Ciphersuite::decode)
        .collect();
    let chosen = preferences
        .iter()
        .filter(usable)
        .find(|s| received.contains(s))
        .copied()
        .ok_or_else(|| Error::NegotiationFailure("no common suite".into()))?;
    let nonce_r = random_bytes(rng, NONCE_LEN);
    let random_r = random_bytes(rng, RANDOM_LEN);
    let dh_r = ToyDh::generate(rng);
    let mut payload = hello(&nonce_r, &random_r, dh_r.public);
    payload.extend_from_slice(&chosen.encode());
    let select = unauthenticated(FrameKind::Select, session_id, payload);
    let resp_transcript = [got.encode(), select.encode()].concat();
    wire.send(select);

    // initiator
    let back = wire.recv().ok_or_else(|| timed_out(FrameKind::Select, timeout_ms))?;
    if back.kind != FrameKind::Select || back.payload.len() != HELLO_LEN + SUITE_ENCODED_LEN {
        return Err(Error::NegotiationFailure("malformed selection".into()));
    }
    let (peer_nonce_r, peer_random_r, peer_dh_r) = parse_hello(&back.payload);
    let selected = Ciphersuite::decode(&back.payload[HELLO_LEN..])
        .ok_or_else(|| Error::NegotiationFailure("responder selected an unknown suite".into()))?;
    if !offered.contains(&selected) {
        return Err(Error::NegotiationFailure(format!(
            "responder selected {selected}, which was not proposed"
        )));
    }
    let init_transcript = [init_sent, back.encode()].concat();

    Ok(Negotiated {
        initiator: SideView {
            side: Side::Initiator,
            suite: selected,
            nonce_i: nonce_i.clone(),
            nonce_r: peer_nonce_r,
            random_i: random_i.clone(),
            random_r: peer_random_r,
            dh: dh_i,
            peer_dh_public: peer_dh_r,
            transcript: init_transcript,
        },
        responder: SideView {
            side: Side::Responder,
            suite: chosen,
            nonce_i: peer_nonce_i,
            nonce_r,
            random_i: peer_random_i,
            random_r,
            dh: dh_r,
            peer_dh_public: peer_dh_i,
            transcript: resp_transcript,
        },
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub records: u64,
    pub plaintext_bytes: u64,
    /// One-time-pad bits consumed by the initiator and the responder.
    pub pad_bits: [u64; 2],
    /// All quantum bits drawn by the initiator and the responder.
    pub quantum_bits: [u64; 2],
    pub rekeys: u64,
    pub waits: u64,
    pub waited_ms: u64,
    pub downgraded: bool,
    pub rejected_records: u64,
    /// Notable events in order: establishment, rekeys, downgrades.
    pub events: Vec<String>,
}

struct SideState {
    keys: SessionKeys,
    view: SideView,
    send_seq: u64,
    recv_seq: u64,
}

fn idx(side: Side) -> usize {
    match side {
        Side::Initiator => 0,
        Side::Responder => 1,
    }
}

/// An established session between two in-process peers.
pub struct SecureSession<'a> {
    session_id: u64,
    cfg: HandshakeConfig,
    conn: ConnectionInfo,
    source: Option<Box<dyn PairKeySource + 'a>>,
    rng: SimRng,
    wire: Wire,
    suite: Ciphersuite,
    sides: Vec<SideState>,
    clock_ms: u64,
    stats: SessionStats,
    since_rekey: (u64, u64),
    in_flight: [u64; 2],
}

impl<'a> SecureSession<'a> {
    /// Negotiates, keys and authenticates a session. `source` supplies QKD
    /// bits for quantum suites.
    pub fn handshake(
        cfg: HandshakeConfig,
        conn: ConnectionInfo,
        source: Option<Box<dyn PairKeySource + 'a>>,
        session_id: u64,
        run_seed: u64,
        faults: Vec<WireFault>,
    ) -> Result<Self> {
        let mut s = Self {
            session_id,
            clock_ms: cfg.start_ms,
            conn,
            source,
            rng: seed::rng(seed::derive_indexed(run_seed, "securechan", session_id)),
            wire: Wire::new(faults),
            suite: Ciphersuite::classical(),
            sides: Vec::new(),
            stats: SessionStats::default(),
            since_rekey: (0, 0),
            in_flight: [0; 2],
            cfg,
        };
        let proposal = s.cfg.initiator.suites.clone();
        let prefs = s.cfg.responder.suites.clone();
        s.establish(&proposal, &prefs)?;
        Ok(s)
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn suite(&self) -> Ciphersuite {
        self.suite
    }

    pub fn keys(&self, side: Side) -> &SessionKeys {
        &self.sides[idx(side)].keys
    }

    pub fn nonces(&self, side: Side) -> Vec<u8> {
        self.sides[idx(side)].view.nonces()
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn transcript(&self) -> &[Frame] {
        self.wire.transcript()
    }

    pub fn applied_faults(&self) -> &[WireFault] {
        self.wire.applied_faults()
    }

    fn fallback_suite(&self) -> Ciphersuite {
        Ciphersuite::classical()
            .with_mac(self.suite.mac)
            .with_flavor(self.suite.flavor)
    }

    fn can_fall_back(&self, suite: &Ciphersuite, e: &Error) -> bool {
        self.cfg.policy.mode == ExhaustionMode::FallbackClassical
            && suite.is_quantum()
            && matches!(e, Error::SuiteExhausted { .. })
    }

    fn establish(&mut self, proposal: &[Ciphersuite], prefs: &[Ciphersuite]) -> Result<()> {
        let mut proposal = proposal.to_vec();
        let mut prefs = prefs.to_vec();
        loop {
            let neg = negotiate(
                &mut self.wire,
                self.session_id,
                &proposal,
                &prefs,
                &self.conn,
                &mut self.rng,
                self.cfg.timeout_ms,
            )?;
            let keys = match self.key_both(&neg, None) {
                Ok(k) => k,
                Err(e) if self.can_fall_back(&neg.suite(), &e) => {
                    self.suite = neg.suite();
                    let fb = self.fallback_suite();
                    self.note_downgrade(&e, fb);
                    proposal = vec![fb];
                    prefs = vec![fb];
                    continue;
                }
                Err(e) => return Err(e),
            };
            self.exchange_auth(&neg, &keys)?;
            let [ki, kr] = keys;
            self.suite = neg.suite();
            self.sides = vec![
                SideState {
                    keys: ki,
                    view: neg.initiator,
                    send_seq: 0,
                    recv_seq: 0,
                },
                SideState {
                    keys: kr,
                    view: neg.responder,
                    send_seq: 0,
                    recv_seq: 0,
                },
            ];
            self.since_rekey = (0, 0);
            self.in_flight = [0; 2];
            self.stats.events.push(format!("established {}", self.suite));
            log::info!("session {} established with {}", self.session_id, self.suite);
            return Ok(());
        }
    }

    fn note_downgrade(&mut self, cause: &Error, to: Ciphersuite) {
        log::warn!(
            "session {}: {cause}; falling back from {} to {to}",
            self.session_id,
            self.suite
        );
        self.stats.downgraded = true;
        self.stats
            .events
            .push(format!("downgrade {} -> {to} ({cause})", self.suite));
    }

    /// Draws `n` bits for one side, applying the exhaustion policy.
    fn acquire(&mut self, suite: &Ciphersuite, side: Side, n: usize) -> Result<BitString> {
        let policy = self.cfg.policy;
        let mut waited = 0;
        loop {
            let source = self.source.as_mut().ok_or_else(|| {
                Error::ContractViolation(format!("{suite} needs a quantum key source"))
            })?;
            match source.draw(side, n) {
                Ok(bits) => {
                    self.stats.quantum_bits[idx(side)] += n as u64;
                    return Ok(bits);
                }
                Err(Error::InsufficientMaterial { shortfall }) => match policy.mode {
                    ExhaustionMode::Fail | ExhaustionMode::FallbackClassical => {
                        return Err(Error::SuiteExhausted {
                            suite: suite.to_string(),
                            shortfall,
                        })
                    }
                    ExhaustionMode::BlockWithTimeout => {
                        if waited >= policy.timeout_ms {
                            return Err(Error::Timeout {
                                what: format!("{shortfall} bits of quantum key material"),
                                after_ms: waited,
                            });
                        }
                        let step = POLL_INTERVAL_MS.min(policy.timeout_ms - waited);
                        waited += step;
                        self.clock_ms += step;
                        self.stats.waits += 1;
                        self.stats.waited_ms += step;
                        source.advance_to(self.clock_ms);
                    }
                },
                Err(e) => return Err(e),
            }
        }
    }

    /// Derives both sides' keys, each from its own view. With `fresh_nonces`
    /// set (rekey), those replace the negotiated nonces.
    fn key_both(&mut self, neg: &Negotiated, fresh: Option<&RekeyViews>) -> Result<[SessionKeys; 2]> {
        let mut out = Vec::with_capacity(2);
        for side in [Side::Initiator, Side::Responder] {
            let view = neg.view(side);
            let suite = view.suite;
            let lens = KeyLengths::for_suite(&suite);
            let (nonces, dh, peer_pub) = match fresh {
                Some(r) => {
                    let v = &r.views[idx(side)];
                    (v.nonces.clone(), &v.dh, v.peer_dh_public)
                }
                None => (view.nonces(), &view.dh, view.peer_dh_public),
            };
            let keys = match suite.kex {
                Kex::ClassicalStub => {
                    let secret = dh.shared(peer_pub)?;
                    keys::derive_keys(&suite, Keying::Secret(&secret), &view.randoms(), &nonces, lens)?
                }
                Kex::QuantumSharedSecret => {
                    let secret = self.acquire(&suite, side, OPTION_A_SECRET_BITS)?.to_packed();
                    keys::derive_keys(&suite, Keying::Secret(&secret), &view.randoms(), &nonces, lens)?
                }
                // option C has no encryption keys, so this draws MAC keys only
                Kex::QuantumDirectKeys | Kex::QuantumOtp => {
                    let material = self.acquire(&suite, side, 8 * lens.total())?.to_packed();
                    keys::derive_keys(&suite, Keying::Direct(&material), &view.randoms(), &nonces, lens)?
                }
            };
            out.push(keys);
        }
        Ok(out.try_into().unwrap_or_else(|_| unreachable!()))
    }

    fn exchange_auth(&mut self, neg: &Negotiated, keys: &[SessionKeys; 2]) -> Result<()> {
        for (signer, kind) in [(Side::Initiator, FrameKind::AuthInit), (Side::Responder, FrameKind::AuthResp)] {
            let view = neg.view(signer);
            let me = self.cfg.peer(signer);
            let value = keys::auth_value(
                view.suite.prf,
                &me.psk,
                &keys[idx(signer)].skeyseed,
                &view.transcript,
                view.peer_nonce(),
                &me.id,
            );
            let mut payload = vec![me.id.len() as u8];
            payload.extend_from_slice(me.id.as_bytes());
            payload.extend_from_slice(&value);
            let dir = toward(signer);
            let mac = frame_tag(&view.suite, keys[idx(signer)].mac_key(dir), self.session_id, kind, dir, &payload);
            self.wire.send(Frame {
                kind,
                session_id: self.session_id,
                payload,
                mac,
            });

            let verifier = signer.peer();
            let got = self.wire.recv().ok_or_else(|| Error::Timeout {
                what: kind.name().to_string(),
                after_ms: self.cfg.timeout_ms,
            })?;
            let vview = neg.view(verifier);
            let p = &got.payload;
            let id_len = *p.first().ok_or(Error::AuthFailure)? as usize;
            if got.kind != kind || p.len() != 1 + id_len + AUTH_LEN {
                return Err(Error::AuthFailure);
            }
            let claimed = std::str::from_utf8(&p[1..1 + id_len]).map_err(|_| Error::AuthFailure)?;
            if claimed != self.cfg.peer(signer).id {
                return Err(Error::AuthFailure);
            }
            keys::authenticate(
                vview.suite.prf,
                &self.cfg.peer(verifier).psk,
                &keys[idx(verifier)].skeyseed,
                &vview.transcript,
                vview.own_nonce(),
                claimed,
                &p[1 + id_len..],
            )
            .inspect_err(|_| log::warn!("session {}: {kind} did not verify", self.session_id))?;
            let expect = frame_tag(&vview.suite, keys[idx(verifier)].mac_key(dir), self.session_id, kind, dir, p);
            if !crypto::tags_equal(&expect, &got.mac) {
                return Err(Error::MacFailure {
                    msg_type: kind.name().to_string(),
                });
            }
        }
        Ok(())
    }

    fn rekey_due(&self) -> bool {
        let r = self.cfg.rekey;
        r.max_records.is_some_and(|m| self.since_rekey.0 >= m)
            || r.max_bytes.is_some_and(|m| self.since_rekey.1 >= m)
    }

    /// Fresh keys: new nonces and key-exchange values go over MAC'd rekey
    /// frames, then options A/B draw fresh QKD bits and option C refreshes
    /// its MAC keys (pads are drawn per record regardless).
    pub fn rekey(&mut self) -> Result<()> {
        match self.rekey_inner() {
            Err(e) if self.can_fall_back(&self.suite.clone(), &e) => {
                let fb = self.fallback_suite();
                self.note_downgrade(&e, fb);
                self.establish(&[fb], &[fb])
            }
            r => r,
        }
    }

    fn rekey_inner(&mut self) -> Result<()> {
        let mut views = Vec::with_capacity(2);
        let mut sent = Vec::new();
        for (side, kind) in [(Side::Initiator, FrameKind::RekeyInit), (Side::Responder, FrameKind::RekeyResp)] {
            let nonce = random_bytes(&mut self.rng, NONCE_LEN);
            let dh = ToyDh::generate(&mut self.rng);
            let payload = [&nonce[..], &dh.public.to_be_bytes()].concat();
            let dir = toward(side);
            let mac = self.frame_mac(side, dir, kind, &payload);
            self.wire.send(Frame {
                kind,
                session_id: self.session_id,
                payload,
                mac,
            });
            let got = self.wire.recv().ok_or_else(|| Error::Timeout {
                what: kind.name().to_string(),
                after_ms: self.cfg.timeout_ms,
            })?;
            let expect = self.frame_mac(side.peer(), dir, kind, &got.payload);
            if got.kind != kind || !crypto::tags_equal(&expect, &got.mac) || got.payload.len() != NONCE_LEN + 8 {
                return Err(Error::MacFailure {
                    msg_type: kind.name().to_string(),
                });
            }
            let peer_pub = u64::from_be_bytes(got.payload[NONCE_LEN..].try_into().unwrap());
            sent.push((nonce, dh, got.payload[..NONCE_LEN].to_vec(), peer_pub));
        }
        // sent[0] = initiator's own nonce/dh and the responder's view of it
        let (ni, dh_i, ni_at_r, pub_i_at_r) = sent.remove(0);
        let (nr, dh_r, nr_at_i, pub_r_at_i) = sent.remove(0);
        views.push(FreshView {
            nonces: [ni, nr_at_i].concat(),
            dh: dh_i,
            peer_dh_public: pub_r_at_i,
        });
        views.push(FreshView {
            nonces: [ni_at_r, nr].concat(),
            dh: dh_r,
            peer_dh_public: pub_i_at_r,
        });
        let fresh = RekeyViews { views };
        let neg = Negotiated {
            initiator: self.sides[0].view.clone(),
            responder: self.sides[1].view.clone(),
        };
        let [ki, kr] = self.key_both(&neg, Some(&fresh))?;
        let [vi, vr]: [FreshView; 2] = fresh.views.try_into().unwrap_or_else(|_| unreachable!());
        for (state, keys, v) in [(0, ki, vi), (1, kr, vr)] {
            let st = &mut self.sides[state];
            st.keys = keys;
            let half = v.nonces.len() / 2;
            st.view.nonce_i = v.nonces[..half].to_vec();
            st.view.nonce_r = v.nonces[half..].to_vec();
            st.send_seq = 0;
            st.recv_seq = 0;
        }
        self.since_rekey = (0, 0);
        self.stats.rekeys += 1;
        self.stats.events.push(format!("rekey {}", self.stats.rekeys));
        log::info!("session {} rekeyed ({})", self.session_id, self.suite);
        Ok(())
    }

    fn frame_mac(&self, side: Side, dir: Direction, kind: FrameKind, payload: &[u8]) -> [u8; TAG_LEN] {
        let key = self.sides[idx(side)].keys.mac_key(dir);
        frame_tag(&self.suite, key, self.session_id, kind, dir, payload)
    }

    fn stub_keystream(key: &[u8], seq: u64, len: usize) -> Vec<u8> {
        keys::expand(super::PrfAlg::HmacSha256, key, b"stub keystream", &seq.to_be_bytes(), len)
    }

    /// Encrypts and MACs one record. Rekeys first if a threshold was crossed
    /// and nothing is in flight; under option C a shortfall goes through the
    /// exhaustion policy.
    pub fn protect_record(&mut self, dir: Direction, plaintext: &[u8]) -> Result<Frame> {
        if self.rekey_due() && self.in_flight == [0, 0] {
            self.rekey()?;
        }
        let sender = dir.sender();
        let body: Vec<u8> = match self.suite.cipher {
            CipherAlg::BlockCipherStub => {
                let st = &self.sides[idx(sender)];
                let key = st.keys.enc_key(dir).expect("stub cipher has keys");
                let ks = Self::stub_keystream(key, st.send_seq, plaintext.len());
                plaintext.iter().zip(ks).map(|(p, k)| p ^ k).collect()
            }
            CipherAlg::OneTimePad => {
                let suite = self.suite;
                let pad = match self.acquire(&suite, sender, 8 * plaintext.len()) {
                    Ok(p) => p,
                    Err(e) if self.can_fall_back(&suite, &e) => {
                        let fb = self.fallback_suite();
                        self.note_downgrade(&e, fb);
                        self.establish(&[fb], &[fb])?;
                        return self.protect_record(dir, plaintext);
                    }
                    Err(e) => return Err(e),
                };
                self.stats.pad_bits[idx(sender)] += pad.len() as u64;
                plaintext.iter().zip(pad.to_packed()).map(|(p, k)| p ^ k).collect()
            }
        };
        let st = &mut self.sides[idx(sender)];
        let seq = st.send_seq;
        st.send_seq += 1;
        let payload = [&seq.to_be_bytes()[..], &body].concat();
        let mac = self.frame_mac(sender, dir, FrameKind::Record, &payload);
        self.stats.records += 1;
        self.stats.plaintext_bytes += plaintext.len() as u64;
        self.since_rekey.0 += 1;
        self.since_rekey.1 += plaintext.len() as u64;
        self.in_flight[dir.code() as usize] += 1;
        Ok(Frame {
            kind: FrameKind::Record,
            session_id: self.session_id,
            payload,
            mac,
        })
    }

    /// Verifies and decrypts a record at the receiving side.
    pub fn unprotect_record(&mut self, dir: Direction, frame: &Frame) -> Result<Vec<u8>> {
        let receiver = dir.receiver();
        let slot = dir.code() as usize;
        let expect = self.frame_mac(receiver, dir, FrameKind::Record, &frame.payload);
        if frame.kind != FrameKind::Record
            || frame.session_id != self.session_id
            || frame.payload.len() < 8
            || !crypto::tags_equal(&expect, &frame.mac)
        {
            self.stats.rejected_records += 1;
            self.in_flight[slot] = self.in_flight[slot].saturating_sub(1);
            if self.suite.cipher == CipherAlg::OneTimePad && frame.payload.len() >= 8 {
                // burn the pad the sender used so both sides stay aligned
                let n = 8 * (frame.payload.len() - 8);
                if let Some(src) = self.source.as_mut() {
                    if src.draw(receiver, n).is_ok() {
                        self.stats.pad_bits[idx(receiver)] += n as u64;
                    }
                }
            }
            return Err(Error::MacFailure {
                msg_type: FrameKind::Record.name().to_string(),
            });
        }
        let seq = u64::from_be_bytes(frame.payload[..8].try_into().unwrap());
        let expected = self.sides[idx(receiver)].recv_seq;
        // a gap means earlier records were lost or rejected; going backwards is a replay
        if seq < expected {
            self.stats.rejected_records += 1;
            return Err(Error::Replay { expected, got: seq });
        }
        let body = &frame.payload[8..];
        let plain: Vec<u8> = match self.suite.cipher {
            CipherAlg::BlockCipherStub => {
                let key = self.sides[idx(receiver)].keys.enc_key(dir).expect("stub cipher has keys");
                let ks = Self::stub_keystream(key, seq, body.len());
                body.iter().zip(ks).map(|(c, k)| c ^ k).collect()
            }
            CipherAlg::OneTimePad => {
                let suite = self.suite;
                let pad = self.acquire(&suite, receiver, 8 * body.len())?;
                self.stats.pad_bits[idx(receiver)] += pad.len() as u64;
                body.iter().zip(pad.to_packed()).map(|(c, k)| c ^ k).collect()
            }
        };
        self.sides[idx(receiver)].recv_seq = seq + 1;
        self.in_flight[slot] = self.in_flight[slot].saturating_sub(1);
        Ok(plain)
    }

    /// Protects, transmits and unprotects one record.
    pub fn send(&mut self, dir: Direction, plaintext: &[u8]) -> Result<Vec<u8>> {
        let frame = self.protect_record(dir, plaintext)?;
        let pad_bits = 8 * plaintext.len();
        self.wire.send(frame);
        let Some(got) = self.wire.recv() else {
            let slot = dir.code() as usize;
            self.stats.rejected_records += 1;
            self.in_flight[slot] = self.in_flight[slot].saturating_sub(1);
            if self.suite.cipher == CipherAlg::OneTimePad {
                if let Some(src) = self.source.as_mut() {
                    if src.draw(dir.receiver(), pad_bits).is_ok() {
                        self.stats.pad_bits[idx(dir.receiver())] += pad_bits as u64;
                    }
                }
            }
            return Err(Error::Timeout {
                what: FrameKind::Record.name().to_string(),
                after_ms: self.cfg.timeout_ms,
            });
        };
        self.unprotect_record(dir, &got)
    }

    /// Moves the session's clock forward (scripted waits between records).
    pub fn advance_to(&mut self, now_ms: u64) {
        if now_ms > self.clock_ms {
            self.clock_ms = now_ms;
            if let Some(s) = self.source.as_mut() {
                s.advance_to(now_ms);
            }
        }
    }
}

/// The direction in which `side` sends.
fn toward(side: Side) -> Direction {
    match side {
        Side::Initiator => Direction::InitiatorToResponder,
        Side::Responder => Direction::ResponderToInitiator,
    }
}

fn frame_tag(
    suite: &Ciphersuite,
    key: &[u8],
    session_id: u64,
    kind: FrameKind,
    dir: Direction,
    payload: &[u8],
) -> [u8; TAG_LEN] {
    mac_tag(
        suite.mac,
        key,
        &[
            &session_id.to_be_bytes(),
            &[kind as u8, dir.code()],
            &(payload.len() as u32).to_be_bytes(),
            payload,
        ],
    )
}

struct FreshView {
    nonces: Vec<u8>,
    dh: ToyDh,
    peer_dh_public: u64,
}

struct RekeyViews {
    views: Vec<FreshView>,
}

#[cfg(test)]
mod tests;
