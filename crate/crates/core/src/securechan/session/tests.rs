use super::*;
use crate::keystore::{KeyStore, KeyStream};
use crate::qnet::PathKind;
use crate::securechan::{MacAlg, StreamKeySource};
use proptest::prelude::*;

fn conn(possible: bool) -> ConnectionInfo {
    ConnectionInfo {
        possible,
        kind: possible.then_some(PathKind::Direct),
        intermediates: Vec::new(),
        trust_required: false,
        setup_delay_ms: 0,
    }
}

fn peers(i: &[Ciphersuite], r: &[Ciphersuite]) -> HandshakeConfig {
    HandshakeConfig::new(
        PeerConfig {
            id: "alice".into(),
            psk: b"shared psk".to_vec(),
            suites: i.to_vec(),
        },
        PeerConfig {
            id: "bob".into(),
            psk: b"shared psk".to_vec(),
            suites: r.to_vec(),
        },
    )
}

fn stores(bits: BitString) -> (KeyStore, KeyStore) {
    let (a, b) = (KeyStore::new("a"), KeyStore::new("b"));
    for s in [&a, &b] {
        s.add_link("L");
        s.append_block("L", bits.clone()).unwrap();
        s.open_stream("L", "app").unwrap();
    }
    (a, b)
}

fn random_stores(n: usize, s: u64) -> (KeyStore, KeyStore) {
    stores(BitString::random(n, &mut seed::rng(s)))
}

fn source<'a>(a: &'a KeyStore, b: &'a KeyStore) -> Option<Box<dyn PairKeySource + 'a>> {
    Some(Box::new(StreamKeySource::new(a, b, KeyStream::new("L", "app"))))
}

fn suite(kex: Kex) -> Ciphersuite {
    Ciphersuite::for_kex(kex)
}

const ALL_KEX: [Kex; 4] = [Kex::ClassicalStub, Kex::QuantumSharedSecret, Kex::QuantumDirectKeys, Kex::QuantumOtp];

#[test]
fn classical_suite_round_trips() {
    let c = suite(Kex::ClassicalStub);
    let mut s = SecureSession::handshake(peers(&[c], &[c]), conn(false), None, 1, 9, vec![]).unwrap();
    assert_eq!(s.suite(), c);
    assert!(s.keys(Side::Initiator) == s.keys(Side::Responder));
    for i in 0..10u8 {
        let msg = vec![i; 1 + i as usize * 7];
        assert_eq!(s.send(Direction::InitiatorToResponder, &msg).unwrap(), msg);
        assert_eq!(s.send(Direction::ResponderToInitiator, &msg).unwrap(), msg);
    }
    // ciphertext differs from plaintext under the stub cipher
    let f = s.protect_record(Direction::InitiatorToResponder, b"hello world").unwrap();
    assert_ne!(&f.payload[8..], b"hello world");
}

#[test]
fn quantum_never_proposed_without_route() {
    let c = suite(Kex::ClassicalStub);
    let q = [suite(Kex::QuantumOtp), suite(Kex::QuantumSharedSecret), c];
    let s = SecureSession::handshake(peers(&q, &q), conn(false), None, 1, 9, vec![]).unwrap();
    assert_eq!(s.suite(), c);
    let propose = &s.transcript()[0];
    assert_eq!(propose.kind, FrameKind::Propose);
    let entries: Vec<_> = propose.payload[HELLO_LEN..].chunks(SUITE_ENCODED_LEN).collect();
    assert_eq!(entries, vec![&c.encode()[..]]);
    let only_q = [suite(Kex::QuantumOtp)];
    assert!(matches!(
        SecureSession::handshake(peers(&only_q, &only_q), conn(false), None, 1, 9, vec![]),
        Err(Error::NegotiationFailure(_))
    ));
}

#[test]
fn responder_preference_wins() {
    let (a, b) = random_stores(4096, 1);
    let i = [suite(Kex::ClassicalStub), suite(Kex::QuantumSharedSecret)];
    let r = [suite(Kex::QuantumSharedSecret), suite(Kex::ClassicalStub)];
    let s = SecureSession::handshake(peers(&i, &r), conn(true), source(&a, &b), 1, 9, vec![]).unwrap();
    assert_eq!(s.suite().kex, Kex::QuantumSharedSecret);
}

#[test]
fn disjoint_sets_fail() {
    let i = [suite(Kex::ClassicalStub)];
    let r = [suite(Kex::ClassicalStub).with_mac(MacAlg::HmacSha512)];
    assert!(matches!(
        SecureSession::handshake(peers(&i, &r), conn(false), None, 1, 9, vec![]),
        Err(Error::NegotiationFailure(_))
    ));
}

#[test]
fn every_option_agrees_and_round_trips() {
    for kex in ALL_KEX {
        let (a, b) = random_stores(20_000, kex as u64);
        let st = suite(kex);
        let mut s = SecureSession::handshake(peers(&[st], &[st]), conn(true), source(&a, &b), 3, 4, vec![]).unwrap();
        assert_eq!(s.suite(), st);
        assert!(s.keys(Side::Initiator) == s.keys(Side::Responder), "{kex:?}");
        for i in 0..10 {
            let msg: Vec<u8> = (0..i * 11).map(|x| x as u8).collect();
            assert_eq!(s.send(Direction::InitiatorToResponder, &msg).unwrap(), msg);
        }
        let drawn = s.stats().quantum_bits;
        assert_eq!(drawn[0], drawn[1]);
        let expected_handshake = match kex {
            Kex::ClassicalStub => 0,
            Kex::QuantumSharedSecret => 256,
            Kex::QuantumDirectKeys => 8 * (2 * 32 + 2 * 32),
            Kex::QuantumOtp => 8 * 2 * 32,
        };
        let pads = if kex == Kex::QuantumOtp { 8 * s.stats().plaintext_bytes } else { 0 };
        assert_eq!(drawn[0], expected_handshake + pads, "{kex:?}");
    }
}

#[test]
fn option_a_skeyseed_comes_from_quantum_bits() {
    let (a, b) = random_stores(1024, 7);
    let st = suite(Kex::QuantumSharedSecret);
    let s = SecureSession::handshake(peers(&[st], &[st]), conn(true), source(&a, &b), 3, 4, vec![]).unwrap();
    let h = KeyStream::new("L", "app");
    let block = a.blocks("L").unwrap()[0].bits.slice(0..256).to_packed();
    let view = &s.sides[0].view;
    let expected = crypto::hmac_sha256(&[view.randoms(), view.nonces()].concat(), &[&block]);
    assert_eq!(s.keys(Side::Initiator).skeyseed, expected.to_vec());
    assert_eq!(a.available(&h).unwrap(), 1024 - 256);
}

#[test]
fn mismatched_psk_fails_auth() {
    let c = suite(Kex::ClassicalStub);
    let mut cfg = peers(&[c], &[c]);
    cfg.responder.psk = b"other".to_vec();
    assert!(matches!(
        SecureSession::handshake(cfg, conn(false), None, 1, 9, vec![]),
        Err(Error::AuthFailure)
    ));
}

#[test]
fn tampered_nonce_fails_auth() {
    let c = suite(Kex::ClassicalStub);
    for kind in [FrameKind::Propose, FrameKind::Select] {
        let fault = WireFault::FlipBit { kind, occurrence: 0, bit: 5 };
        assert!(matches!(
            SecureSession::handshake(peers(&[c], &[c]), conn(false), None, 1, 9, vec![fault]),
            Err(Error::AuthFailure)
        ));
    }
}

#[test]
fn dropped_selection_times_out() {
    let c = suite(Kex::ClassicalStub);
    let fault = WireFault::Drop { kind: FrameKind::Select, occurrence: 0 };
    match SecureSession::handshake(peers(&[c], &[c]), conn(false), None, 1, 9, vec![fault]) {
        Err(Error::NegotiationFailure(m)) => assert!(m.contains("timed out")),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("handshake survived a dropped selection"),
    }
}

#[test]
fn nonces_exchanged_in_every_suite() {
    for kex in ALL_KEX {
        let (a, b) = random_stores(4096, 2);
        let st = suite(kex);
        let s = SecureSession::handshake(peers(&[st], &[st]), conn(true), source(&a, &b), 3, 4, vec![]).unwrap();
        let t = s.transcript();
        let nonces = s.nonces(Side::Initiator);
        assert_eq!(&t[0].payload[..NONCE_LEN], &nonces[..NONCE_LEN]);
        assert_eq!(&t[1].payload[..NONCE_LEN], &nonces[NONCE_LEN..]);
        assert_eq!(nonces, s.nonces(Side::Responder));
        assert_eq!(t[2].kind, FrameKind::AuthInit);
        assert_eq!(t[3].kind, FrameKind::AuthResp);
    }
}

#[test]
fn record_tamper_and_replay_rejected() {
    let c = suite(Kex::ClassicalStub);
    let mut s = SecureSession::handshake(peers(&[c], &[c]), conn(false), None, 1, 9, vec![]).unwrap();
    let d = Direction::InitiatorToResponder;
    let f0 = s.protect_record(d, b"first").unwrap();
    let f1 = s.protect_record(d, b"second").unwrap();
    assert_eq!(s.unprotect_record(d, &f0).unwrap(), b"first");
    assert!(matches!(s.unprotect_record(d, &f0), Err(Error::Replay { expected: 1, got: 0 })));
    let mut bad = f1.clone();
    bad.payload[9] ^= 1;
    assert!(matches!(s.unprotect_record(d, &bad), Err(Error::MacFailure { .. })));
    assert_eq!(s.unprotect_record(d, &f1).unwrap(), b"second");
    // wrong direction key
    let f2 = s.protect_record(d, b"third").unwrap();
    assert!(s.unprotect_record(Direction::ResponderToInitiator, &f2).is_err());
}

#[test]
fn otp_zero_pad_is_identity() {
    let (a, b) = stores(BitString::zeros(4096));
    let st = suite(Kex::QuantumOtp);
    let mut s = SecureSession::handshake(peers(&[st], &[st]), conn(true), source(&a, &b), 1, 1, vec![]).unwrap();
    let d = Direction::InitiatorToResponder;
    let f = s.protect_record(d, b"plaintext").unwrap();
    assert_eq!(&f.payload[8..], b"plaintext");
    assert_eq!(s.unprotect_record(d, &f).unwrap(), b"plaintext");
}

#[test]
fn otp_accounting_is_exact() {
    let (a, b) = random_stores(50_000, 8);
    let st = suite(Kex::QuantumOtp);
    let mut s = SecureSession::handshake(peers(&[st], &[st]), conn(true), source(&a, &b), 1, 1, vec![]).unwrap();
    let before = s.stats().pad_bits;
    assert_eq!(before, [0, 0]);
    let mut total = 0u64;
    for i in 0..25 {
        let msg = vec![0xa5; i * 3 + 1];
        let dir = if i % 2 == 0 { Direction::InitiatorToResponder } else { Direction::ResponderToInitiator };
        let f = s.protect_record(dir, &msg).unwrap();
        assert_eq!(f.payload.len() - 8, msg.len());
        assert_eq!(s.unprotect_record(dir, &f).unwrap(), msg);
        total += 8 * msg.len() as u64;
    }
    assert_eq!(s.stats().pad_bits, [total, total]);
    let h = KeyStream::new("L", "app");
    assert_eq!(a.available(&h).unwrap() as u64, 50_000 - 512 - total);
}

/// Store left with exactly `left` bits after an option C handshake.
fn otp_session<'a>(
    a: &'a KeyStore,
    b: &'a KeyStore,
    policy: ExhaustionPolicy,
    refills: Vec<(u64, BitString)>,
) -> SecureSession<'a> {
    let st = suite(Kex::QuantumOtp);
    let mut cfg = peers(&[st], &[st]);
    cfg.policy = policy;
    let src = StreamKeySource::new(a, b, KeyStream::new("L", "app")).with_refills(refills);
    SecureSession::handshake(cfg, conn(true), Some(Box::new(src)), 1, 1, vec![]).unwrap()
}

#[test]
fn fail_policy_reports_exact_shortfall() {
    let k = 8 * 10 - 1;
    let (a, b) = random_stores(512 + k, 3);
    let mut s = otp_session(&a, &b, ExhaustionPolicy::fail(), vec![]);
    match s.send(Direction::InitiatorToResponder, &[7u8; 10]) {
        Err(Error::SuiteExhausted { shortfall, .. }) => assert_eq!(shortfall, 1),
        other => panic!("{other:?}"),
    }
    // nothing was consumed; a shorter record still fits
    assert_eq!(s.send(Direction::InitiatorToResponder, &[7u8; 9]).unwrap(), [7u8; 9]);
}

#[test]
fn block_policy_waits_for_producer() {
    let (a, b) = random_stores(512 + 79, 3);
    let refill = vec![(350, BitString::random(800, &mut seed::rng(5)))];
    let mut s = otp_session(&a, &b, ExhaustionPolicy::block(1000).unwrap(), refill);
    assert_eq!(s.send(Direction::InitiatorToResponder, &[1u8; 10]).unwrap(), [1u8; 10]);
    assert_eq!(s.stats().waits, 4);
    assert_eq!(s.clock_ms(), 400);

    let (a, b) = random_stores(512 + 79, 3);
    let late = vec![(5000, BitString::zeros(800))];
    let mut s = otp_session(&a, &b, ExhaustionPolicy::block(1000).unwrap(), late);
    assert!(matches!(
        s.send(Direction::InitiatorToResponder, &[1u8; 10]),
        Err(Error::Timeout { after_ms: 1000, .. })
    ));
}

#[test]
fn fallback_policy_downgrades() {
    let (a, b) = random_stores(512 + 79, 3);
    let mut s = otp_session(&a, &b, ExhaustionPolicy::fallback(), vec![]);
    for i in 0..5u8 {
        assert_eq!(s.send(Direction::InitiatorToResponder, &[i; 10]).unwrap(), [i; 10]);
    }
    assert_eq!(s.suite().kex, Kex::ClassicalStub);
    assert!(s.stats().downgraded);
    assert!(s.stats().events.iter().any(|e| e.starts_with("downgrade")));
    assert!(s.keys(Side::Initiator) == s.keys(Side::Responder));
}

#[test]
fn rekey_refreshes_option_a() {
    let (a, b) = random_stores(4096, 4);
    let st = suite(Kex::QuantumSharedSecret);
    let mut cfg = peers(&[st], &[st]);
    cfg.rekey.max_records = Some(3);
    let mut s = SecureSession::handshake(cfg, conn(true), source(&a, &b), 1, 1, vec![]).unwrap();
    let mut seeds = vec![s.keys(Side::Initiator).skeyseed.clone()];
    for i in 0..10u8 {
        assert_eq!(s.send(Direction::InitiatorToResponder, &[i; 33]).unwrap(), [i; 33]);
        let cur = s.keys(Side::Initiator).skeyseed.clone();
        if seeds.last() != Some(&cur) {
            seeds.push(cur);
        }
        assert!(s.keys(Side::Initiator) == s.keys(Side::Responder));
    }
    assert_eq!(s.stats().rekeys, 3);
    seeds.dedup();
    assert_eq!(seeds.len(), 4);
    assert_eq!(s.stats().quantum_bits, [4 * 256, 4 * 256]);
}

#[test]
fn rekey_by_bytes_for_every_suite() {
    for kex in ALL_KEX {
        let (a, b) = random_stores(40_000, 6);
        let st = suite(kex);
        let mut cfg = peers(&[st], &[st]);
        cfg.rekey.max_bytes = Some(100);
        let mut s = SecureSession::handshake(cfg, conn(true), source(&a, &b), 1, 1, vec![]).unwrap();
        let old = s.keys(Side::Initiator).clone();
        for i in 0..6u8 {
            assert_eq!(s.send(Direction::ResponderToInitiator, &[i; 40]).unwrap(), [i; 40]);
        }
        assert_eq!(s.stats().rekeys, 1, "{kex:?}");
        assert!(s.keys(Side::Initiator) != &old);
    }
}

#[test]
fn rekey_on_empty_store_falls_back() {
    let (a, b) = random_stores(256, 4);
    let st = suite(Kex::QuantumSharedSecret);
    let mut cfg = peers(&[st], &[st]);
    cfg.rekey.max_records = Some(2);
    cfg.policy = ExhaustionPolicy::fallback();
    let mut s = SecureSession::handshake(cfg, conn(true), source(&a, &b), 1, 1, vec![]).unwrap();
    for i in 0..5u8 {
        assert_eq!(s.send(Direction::InitiatorToResponder, &[i; 4]).unwrap(), [i; 4]);
    }
    assert_eq!(s.suite().kex, Kex::ClassicalStub);
    assert!(s.stats().downgraded);
}

#[test]
fn tampered_rekey_frame_detected() {
    let c = suite(Kex::ClassicalStub);
    let mut cfg = peers(&[c], &[c]);
    cfg.rekey.max_records = Some(1);
    let fault = WireFault::FlipBit { kind: FrameKind::RekeyResp, occurrence: 0, bit: 2 };
    let mut s = SecureSession::handshake(cfg, conn(false), None, 1, 9, vec![fault]).unwrap();
    s.send(Direction::InitiatorToResponder, b"x").unwrap();
    assert!(matches!(
        s.send(Direction::InitiatorToResponder, b"y"),
        Err(Error::MacFailure { .. })
    ));
}

fn any_suite() -> impl Strategy<Value = Ciphersuite> {
    (0usize..4, any::<bool>(), any::<bool>()).prop_map(|(k, m, f)| {
        let s = suite(ALL_KEX[k]);
        let s = if m { s.with_mac(MacAlg::HmacSha512) } else { s };
        if f { s.with_flavor(crate::securechan::Flavor::Tls) } else { s }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn peers_always_agree(st in any_suite(), run_seed in any::<u64>(), sid in any::<u64>()) {
        let (a, b) = random_stores(8192, run_seed);
        let mut s = SecureSession::handshake(peers(&[st], &[st]), conn(true), source(&a, &b), sid, run_seed, vec![]).unwrap();
        prop_assert!(s.keys(Side::Initiator) == s.keys(Side::Responder));
        prop_assert_eq!(s.send(Direction::InitiatorToResponder, b"ping").unwrap(), b"ping".to_vec());
    }

    #[test]
    fn handshake_tamper_always_detected(
        kind_i in 0usize..4,
        bit in 0usize..1200,
        st in any_suite(),
    ) {
        let kind = [FrameKind::Propose, FrameKind::Select, FrameKind::AuthInit, FrameKind::AuthResp][kind_i];
        let (a, b) = random_stores(8192, 1);
        let fault = WireFault::FlipBit { kind, occurrence: 0, bit };
        let r = SecureSession::handshake(peers(&[st], &[st]), conn(true), source(&a, &b), 1, 2, vec![fault]);
        prop_assert!(matches!(
            r,
            Err(Error::AuthFailure | Error::MacFailure { .. } | Error::NegotiationFailure(_))
        ), "{:?}", r.err());
    }

    #[test]
    fn record_tamper_always_detected(bit in 0usize..400, st in any_suite()) {
        let (a, b) = random_stores(8192, 1);
        let mut s = SecureSession::handshake(peers(&[st], &[st]), conn(true), source(&a, &b), 1, 2, vec![]).unwrap();
        let d = Direction::InitiatorToResponder;
        let mut f = s.protect_record(d, &[0x42; 20]).unwrap();
        let total = f.payload.len() * 8;
        if bit < total {
            f.payload[bit / 8] ^= 0x80 >> (bit % 8);
        } else {
            let b = (bit - total) % 128;
            f.mac[b / 8] ^= 0x80 >> (b % 8);
        }
        let r = s.unprotect_record(d, &f);
        prop_assert!(matches!(r, Err(Error::MacFailure { .. })), "{:?}", r);
    }
}

#[test]
fn session_survives_lost_records() {
    for kex in [Kex::ClassicalStub, Kex::QuantumOtp] {
        let (a, b) = random_stores(8192, 2);
        let st = suite(kex);
        let faults = vec![
            WireFault::FlipBit { kind: FrameKind::Record, occurrence: 1, bit: 70 },
            WireFault::Drop { kind: FrameKind::Record, occurrence: 3 },
        ];
        let mut s = SecureSession::handshake(peers(&[st], &[st]), conn(true), source(&a, &b), 1, 2, faults).unwrap();
        let d = Direction::InitiatorToResponder;
        let mut outcomes = Vec::new();
        for i in 0..6u8 {
            outcomes.push(s.send(d, &[i; 12]).map_err(|e| e.kind()));
        }
        assert_eq!(outcomes[1], Err("mac-failure"));
        assert_eq!(outcomes[3], Err("timeout"));
        for i in [0, 2, 4, 5] {
            assert_eq!(outcomes[i], Ok(vec![i as u8; 12]), "{kex:?} record {i}");
        }
        assert_eq!(s.stats().pad_bits[0], s.stats().pad_bits[1]);
    }
}
