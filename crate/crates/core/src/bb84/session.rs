//! One BB84 session on one link, end to end: transmission, sifting, error
//! estimation, Cascade, privacy amplification, and storage of the final key
//! at both endpoints. Every classical message is MAC'd and checked.

use crate::amplify::{self, AmplificationParams, DEFAULT_SECURITY_MARGIN};
use crate::bb84::message::{
    ChannelEndpoint, ClassicalChannel, ClassicalMessage, Fault, MacKey, MsgType, DEFAULT_TIMEOUT_MS,
};
use crate::bb84::sift::{self, SiftAnnouncement, SiftRetainList};
use crate::bits::BitString;
use crate::crypto::{self, Tag};
use crate::keystore::KeyStore;
use crate::qchannel::{self, ChannelParams};
use crate::reconcile::{self, CascadeConfig, CascadeResponder, Interval, ParityChannel};
use crate::seed;
use crate::{Error, Result};

pub const DEFAULT_ABORT_THRESHOLD: f64 = 0.11;
pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub photons: usize,
    pub channel: ChannelParams,
    pub sample_fraction: f64,
    pub abort_threshold: f64,
    pub min_sifted: usize,
    pub cascade: CascadeConfig,
    pub security_margin: usize,
    pub timeout_ms: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            photons: 100_000,
            channel: ChannelParams::noiseless(),
            sample_fraction: DEFAULT_SAMPLE_FRACTION,
            abort_threshold: DEFAULT_ABORT_THRESHOLD,
            min_sifted: sift::MIN_SAMPLE_KEY_LEN,
            cascade: CascadeConfig::default(),
            security_margin: DEFAULT_SECURITY_MARGIN,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

/// Alice and Bob's key stores for the link a session runs on.
pub struct LinkEnds<'a> {
    pub link_id: &'a str,
    pub alice: &'a KeyStore,
    pub bob: &'a KeyStore,
}

/// MAC keys each endpoint uses on the classical channel.
#[derive(Debug, Clone)]
pub struct SessionKeys {
    pub alice: MacKey,
    pub bob: MacKey,
}

impl SessionKeys {
    pub fn shared(key: MacKey) -> Self {
        Self {
            alice: key.clone(),
            bob: key,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionReport {
    pub session_id: u64,
    pub link_id: String,
    pub photons_sent: usize,
    pub detected: usize,
    pub sifted_len: usize,
    pub sample_size: usize,
    pub qber: Option<f64>,
    pub reconciled_len: usize,
    pub leaked_bits: usize,
    pub cascade_messages: usize,
    pub corrections: usize,
    pub final_len: usize,
    pub block_id: Option<u64>,
    pub transcript: Vec<ClassicalMessage>,
    /// Scripted faults that actually hit a message.
    pub applied_faults: Vec<Fault>,
}

#[derive(Debug, thiserror::Error)]
#[error("session {} on link {} aborted: {error}", report.session_id, report.link_id)]
pub struct SessionFailure {
    pub error: Error,
    pub report: SessionReport,
}

struct Wire<'a> {
    channel: &'a mut ClassicalChannel,
    alice: &'a mut ChannelEndpoint,
    bob: &'a mut ChannelEndpoint,
}

impl Wire<'_> {
    fn alice_to_bob(&mut self, t: MsgType, payload: Vec<u8>) -> Result<Vec<u8>> {
        self.channel.send(self.alice.seal(t, payload));
        let m = self.channel.recv(t)?;
        self.bob.open(m, t)
    }

    fn bob_to_alice(&mut self, t: MsgType, payload: Vec<u8>) -> Result<Vec<u8>> {
        self.channel.send(self.bob.seal(t, payload));
        let m = self.channel.recv(t)?;
        self.alice.open(m, t)
    }
}

struct WireParity<'a, 'w> {
    wire: &'a mut Wire<'w>,
    responder: CascadeResponder,
}

impl ParityChannel for WireParity<'_, '_> {
    fn parities(&mut self, pass: usize, intervals: &[Interval]) -> Result<Vec<bool>> {
        let request = self
            .wire
            .bob_to_alice(MsgType::ParityRequest, reconcile::encode_request(pass, intervals))?;
        let (pass, asked) = reconcile::decode_request(&request)?;
        let answers = self.responder.answer(pass, &asked)?;
        let reply = self
            .wire
            .alice_to_bob(MsgType::ParityReply, reconcile::encode_reply(&answers))?;
        reconcile::decode_reply(&reply, intervals.len())
    }

    fn exchange_digest(&mut self, local: Tag) -> Result<Tag> {
        let bob_digest = self.wire.bob_to_alice(MsgType::SyncDigest, local.to_vec())?;
        let alice_digest = self.responder.digest();
        if !crypto::tags_equal(&bob_digest, &alice_digest) {
            log::debug!("alice: verification digest mismatch");
        }
        let reply = self.wire.alice_to_bob(MsgType::SyncDigest, alice_digest.to_vec())?;
        reply
            .try_into()
            .map_err(|_| Error::Protocol("verification digest has wrong length".into()))
    }
}

/// Runs one session. On success both stores hold the same new block.
#[allow(clippy::result_large_err)]
pub fn run_link_session(
    link: &LinkEnds<'_>,
    config: &SessionConfig,
    keys: &SessionKeys,
    session_id: u64,
    run_seed: u64,
    faults: Vec<Fault>,
) -> std::result::Result<SessionReport, SessionFailure> {
    let mut report = SessionReport {
        session_id,
        link_id: link.link_id.to_string(),
        photons_sent: config.photons,
        ..SessionReport::default()
    };
    let mut channel = ClassicalChannel::with_faults(faults);
    channel.set_timeout_ms(config.timeout_ms);
    let result = drive(link, config, keys, session_id, run_seed, &mut channel, &mut report);
    report.applied_faults = channel.applied_faults().to_vec();
    report.transcript = channel.into_transcript();
    match result {
        Ok(()) => Ok(report),
        Err(error) => {
            log::info!("session {session_id} on {} aborted: {error}", link.link_id);
            Err(SessionFailure { error, report })
        }
    }
}

fn drive(
    link: &LinkEnds<'_>,
    config: &SessionConfig,
    keys: &SessionKeys,
    session_id: u64,
    run_seed: u64,
    channel: &mut ClassicalChannel,
    report: &mut SessionReport,
) -> Result<()> {
    for store in [link.alice, link.bob] {
        if !store.has_link(link.link_id) {
            return Err(Error::UnknownLink(link.link_id.to_string()));
        }
    }
    let seed_of = |tag: &str| seed::derive_indexed(run_seed, tag, session_id);
    let mut alice_ep = ChannelEndpoint::new(keys.alice.clone(), session_id);
    let mut bob_ep = ChannelEndpoint::new(keys.bob.clone(), session_id);
    let mut wire = Wire {
        channel,
        alice: &mut alice_ep,
        bob: &mut bob_ep,
    };

    // transmission
    let photons = qchannel::encode_batch(config.photons, seed_of("encode"))?;
    let detections = qchannel::transmit(&photons, &config.channel, seed_of("transmit"))?;
    report.detected = detections.len();

    // sifting
    let announce = wire.bob_to_alice(
        MsgType::SiftAnnounce,
        SiftAnnouncement::from_detections(&detections).encode(),
    )?;
    let (alice_sifted, retain) = sift::sift(&photons, &SiftAnnouncement::decode(&announce)?)?;
    let retain_payload = wire.alice_to_bob(MsgType::SiftRetain, retain.encode())?;
    let bob_sifted = sift::apply_retain(&detections, &SiftRetainList::decode(&retain_payload)?)?;
    report.sifted_len = alice_sifted.len();
    let min_len = config.min_sifted.max(sift::MIN_SAMPLE_KEY_LEN);
    if alice_sifted.len() < min_len {
        return Err(Error::InsufficientMaterial {
            shortfall: min_len - alice_sifted.len(),
        });
    }
    sift::check_estimable(&alice_sifted, &bob_sifted, config.sample_fraction)?;

    // error estimation: Alice picks the sample and discloses her bits, Bob
    // answers with his
    let sample_seed = seed_of("qber-sample");
    let positions = sift::sample_positions(alice_sifted.len(), config.sample_fraction, sample_seed);
    let alice_sample = alice_sifted.bits.gather(&positions);
    let mut payload = sample_seed.to_be_bytes().to_vec();
    payload.extend_from_slice(&alice_sample.to_packed());
    let got = wire.alice_to_bob(MsgType::QberSample, payload)?;
    if got.len() < 8 {
        return Err(Error::Protocol("qber sample too short".into()));
    }
    let bob_seed = u64::from_be_bytes(got[..8].try_into().unwrap());
    let bob_positions = sift::sample_positions(bob_sifted.len(), config.sample_fraction, bob_seed);
    let alice_sample_at_bob = BitString::from_packed(&got[8..], bob_positions.len())
        .ok_or_else(|| Error::Protocol("qber sample length mismatch".into()))?;
    let bob_sample = bob_sifted.bits.gather(&bob_positions);
    let back = wire.bob_to_alice(MsgType::QberSample, bob_sample.to_packed())?;
    let bob_sample_at_alice = BitString::from_packed(&back, positions.len())
        .ok_or_else(|| Error::Protocol("qber sample length mismatch".into()))?;
    let estimate = sift::finish_estimate(
        &alice_sifted,
        &bob_sifted,
        &positions,
        &alice_sample,
        &bob_sample_at_alice,
    );
    debug_assert_eq!(alice_sample_at_bob.hamming(&bob_sample), estimate.mismatches);
    report.sample_size = estimate.sample_size;
    report.qber = Some(estimate.qber);
    if estimate.qber > config.abort_threshold {
        return Err(Error::EavesdropSuspected {
            qber: estimate.qber,
            threshold: config.abort_threshold,
        });
    }

    // reconciliation
    let cascade_cfg = CascadeConfig {
        shuffle_seed: seed::derive_indexed(0, "cascade-shuffle", session_id),
        ..config.cascade.clone()
    };
    let alice_key = estimate.alice_key.bits;
    let bob_key = estimate.bob_key.bits;
    report.reconciled_len = alice_key.len();
    let mut parity = WireParity {
        wire: &mut wire,
        responder: CascadeResponder::new(alice_key.clone(), cascade_cfg.shuffle_seed),
    };
    let reconciled = reconcile::cascade(&bob_key, estimate.qber, &mut parity, &cascade_cfg);
    let reconciled = match reconciled {
        Ok(r) => r,
        Err(e) => {
            if let Error::ReconciliationFailed { leaked_bits, rounds } = e {
                report.leaked_bits = leaked_bits;
                report.cascade_messages = rounds;
            }
            return Err(e);
        }
    };
    report.leaked_bits = reconciled.leaked_bits;
    report.cascade_messages = reconciled.rounds;
    report.corrections = reconciled.corrections;

    // privacy amplification
    let out_len = amplify::output_length(
        alice_key.len(),
        reconciled.leaked_bits,
        estimate.qber,
        config.security_margin,
    )?;
    let params = AmplificationParams::random(alice_key.len(), out_len, config.security_margin, seed_of("pa-seed"))?;
    let alice_final = amplify::toeplitz_hash(&alice_key, &params)?;
    let seed_payload = wire.alice_to_bob(MsgType::PaSeed, params.encode())?;
    let bob_params = AmplificationParams::decode(&seed_payload, reconciled.corrected_key.len(), config.security_margin)?;
    let bob_final = amplify::toeplitz_hash(&reconciled.corrected_key, &bob_params)?;
    debug_assert_eq!(alice_final, bob_final);
    report.final_len = alice_final.len();

    let a_id = link.alice.append_block(link.link_id, alice_final)?;
    let b_id = link.bob.append_block(link.link_id, bob_final)?;
    if a_id != b_id {
        return Err(Error::Protocol(format!(
            "endpoint block ids diverged ({a_id} vs {b_id})"
        )));
    }
    report.block_id = Some(a_id);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stores() -> (KeyStore, KeyStore) {
        let a = KeyStore::new("alice");
        let b = KeyStore::new("bob");
        a.add_link("L");
        b.add_link("L");
        (a, b)
    }

    #[allow(clippy::result_large_err)]
    fn run(config: &SessionConfig, faults: Vec<Fault>, a: &KeyStore, b: &KeyStore) -> std::result::Result<SessionReport, SessionFailure> {
        let link = LinkEnds {
            link_id: "L",
            alice: a,
            bob: b,
        };
        run_link_session(&link, config, &SessionKeys::shared(MacKey([3; 32])), 1, 99, faults)
    }

    #[test]
    fn noiseless_session_stores_identical_blocks() {
        let (a, b) = stores();
        let cfg = SessionConfig {
            photons: 20_000,
            ..SessionConfig::default()
        };
        let rep = run(&cfg, vec![], &a, &b).unwrap();
        assert_eq!(rep.qber, Some(0.0));
        assert_eq!(rep.block_id, Some(0));
        let (ba, bb) = (a.blocks("L").unwrap(), b.blocks("L").unwrap());
        assert_eq!(ba[0].bits, bb[0].bits);
        assert_eq!(ba[0].bits.len(), rep.final_len);
        assert!(rep.final_len > 0);
    }

    #[test]
    fn eavesdropper_aborts_without_key() {
        let (a, b) = stores();
        let cfg = SessionConfig {
            photons: 20_000,
            channel: ChannelParams::new(0.0, 0.0, 1.0).unwrap(),
            ..SessionConfig::default()
        };
        let err = run(&cfg, vec![], &a, &b).unwrap_err();
        assert!(matches!(err.error, Error::EavesdropSuspected { .. }));
        assert!(a.blocks("L").unwrap().is_empty());
        assert!(b.blocks("L").unwrap().is_empty());
    }

    #[test]
    fn tampered_sift_message_aborts() {
        let (a, b) = stores();
        let cfg = SessionConfig {
            photons: 5_000,
            ..SessionConfig::default()
        };
        let fault = Fault::FlipBit {
            msg_type: MsgType::SiftAnnounce,
            occurrence: 0,
            bit: 100,
        };
        let err = run(&cfg, vec![fault], &a, &b).unwrap_err();
        assert!(matches!(err.error, Error::MacFailure { .. }));
        assert!(a.blocks("L").unwrap().is_empty());
    }

    #[test]
    fn stalled_peer_times_out() {
        let (a, b) = stores();
        let cfg = SessionConfig {
            photons: 5_000,
            ..SessionConfig::default()
        };
        let fault = Fault::Drop {
            msg_type: MsgType::ParityReply,
            occurrence: 0,
        };
        let err = run(&cfg, vec![fault], &a, &b).unwrap_err();
        assert!(matches!(err.error, Error::Timeout { after_ms: 5000, .. }));
    }

    #[test]
    fn too_few_photons_is_insufficient() {
        let (a, b) = stores();
        let cfg = SessionConfig {
            photons: 50,
            ..SessionConfig::default()
        };
        let err = run(&cfg, vec![], &a, &b).unwrap_err();
        assert!(matches!(err.error, Error::InsufficientMaterial { .. }));
    }

    #[test]
    fn mismatched_mac_keys_abort() {
        let (a, b) = stores();
        let link = LinkEnds {
            link_id: "L",
            alice: &a,
            bob: &b,
        };
        let keys = SessionKeys {
            alice: MacKey([1; 32]),
            bob: MacKey([2; 32]),
        };
        let cfg = SessionConfig {
            photons: 2_000,
            ..SessionConfig::default()
        };
        let err = run_link_session(&link, &cfg, &keys, 1, 1, vec![]).unwrap_err();
        assert!(matches!(err.error, Error::MacFailure { .. }));
    }
}
