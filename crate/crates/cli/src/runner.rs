//! Executes a parsed scenario against an in-process network.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use qkdsim_core::bb84::message::write_transcript;
use qkdsim_core::bb84::{Fault, MsgType, SessionConfig, SessionKeys, SessionReport};
use qkdsim_core::keystore::KeyStream;
use qkdsim_core::qchannel::ChannelParams;
use qkdsim_core::qnet::Network;
use qkdsim_core::securechan::{
    bootstrap_bb84_protection, write_frames, FrameKind, HandshakeConfig, MacKeyProvider, PairKeySource, PeerConfig,
    RelayKeySource, RekeyPolicy, SecureSession, StreamKeySource, WireFault,
};
use qkdsim_core::{seed, BitString, Error, Result};

use crate::report::{Report, Section};
use crate::scenario::{ChannelSpec, Command, FaultAction, FaultSpec, FaultTarget, HandshakeSpec, Scenario};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: u64,
    /// Write per-session wire transcripts into this directory.
    pub transcripts: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    /// Indices of steps whose outcome did not match their expectation.
    pub failed_steps: Vec<usize>,
}

impl RunOutput {
    pub fn success(&self) -> bool {
        self.failed_steps.is_empty()
    }
}

/// A step failure: the error kind used by `expect=` plus its message.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Failure {
    kind: String,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            msg: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn outcome_str(o: &Outcome) -> &str {
    match o {
        Ok(()) => "ok",
        Err(f) => &f.kind,
    }
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        "-".into()
    } else {
        items.join(",")
    }
}

struct FaultRecord {
    step: usize,
    spec: FaultSpec,
    applied_step: Option<usize>,
    applied: bool,
    outcome: Option<String>,
}

struct QkdRecord {
    step: usize,
    mac_source: String,
    outcome: Outcome,
    report: SessionReport,
}

struct RelayRecord {
    step: usize,
    src: String,
    dst: String,
    bits: usize,
    outcome: Outcome,
    path: Option<(String, Vec<String>, Vec<String>, u64)>,
    source_bits: usize,
    pad_bits: usize,
    burned_bits: usize,
    key_match: Option<bool>,
}

struct Handshake<'a> {
    step: usize,
    spec: HandshakeSpec,
    source: String,
    session: Option<SecureSession<'a>>,
    outcome: Outcome,
    records_sent: u64,
    records_delivered: u64,
    records_failed: u64,
    /// Faults queued for this handshake, by index into the fault table.
    faults: Vec<usize>,
    faults_seen: usize,
}

struct Runtime<'a> {
    net: &'a Network,
    seed: u64,
    transcripts: Option<PathBuf>,
    clock_ms: u64,
    channels: BTreeMap<String, ChannelSpec>,
    providers: BTreeMap<String, MacKeyProvider>,
    next_qkd: u64,
    faults: Vec<FaultRecord>,
    pending: Vec<usize>,
    qkd: Vec<QkdRecord>,
    relays: Vec<RelayRecord>,
    handshakes: Vec<Handshake<'a>>,
}

fn core_fault(spec: &FaultSpec, msg_type: MsgType) -> Fault {
    match spec.action {
        FaultAction::Flip { bit } => Fault::FlipBit { msg_type, occurrence: spec.occurrence, bit },
        FaultAction::Drop => Fault::Drop { msg_type, occurrence: spec.occurrence },
    }
}

fn wire_fault(spec: &FaultSpec, kind: FrameKind) -> WireFault {
    match spec.action {
        FaultAction::Flip { bit } => WireFault::FlipBit { kind, occurrence: spec.occurrence, bit },
        FaultAction::Drop => WireFault::Drop { kind, occurrence: spec.occurrence },
    }
}

impl<'a> Runtime<'a> {
    fn take_pending(&mut self, step: usize, matches: impl Fn(&FaultTarget) -> bool) -> Vec<usize> {
        let (hit, keep): (Vec<usize>, Vec<usize>) =
            self.pending.iter().partition(|&&i| matches(&self.faults[i].spec.target));
        self.pending = keep;
        for &i in &hit {
            self.faults[i].applied_step = Some(step);
        }
        hit
    }

    fn save(&self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        if let Some(dir) = &self.transcripts {
            let mut buf = Vec::new();
            write(&mut buf)?;
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), buf)?;
        }
        Ok(())
    }

    fn session_config(&self, link: &str) -> Result<SessionConfig> {
        let spec = self.channels.get(link).cloned().unwrap_or_default();
        let d = SessionConfig::default();
        Ok(SessionConfig {
            photons: spec.photons,
            channel: ChannelParams::new(spec.loss, spec.flip, spec.eve)?,
            sample_fraction: spec.sample_fraction.unwrap_or(d.sample_fraction),
            abort_threshold: spec.abort_threshold.unwrap_or(d.abort_threshold),
            ..d
        })
    }

    fn exec(&mut self, step: usize, command: &Command) -> Outcome {
        match command {
            Command::Channel { link, spec } => {
                ChannelParams::new(spec.loss, spec.flip, spec.eve)?;
                self.channels.insert(link.clone(), spec.clone());
                Ok(())
            }
            Command::Bootstrap { link, psk, threshold } => {
                let (a, b) = self.net.ends(link)?;
                let mut p = bootstrap_bb84_protection(a, b, link, psk.as_bytes())?;
                if let Some(t) = threshold {
                    p = p.with_threshold(*t);
                }
                self.providers.insert(link.clone(), p);
                Ok(())
            }
            Command::QkdSession { link, count } => self.qkd_sessions(step, link, *count),
            Command::OpenStream { link, stream } => {
                self.net.open_stream(link, stream)?;
                Ok(())
            }
            Command::Consume { link, stream, bits } => {
                let (a, b) = self.net.ends(link)?;
                let h = KeyStream::new(link.as_str(), stream.as_str());
                let ka = a.consume(&h, *bits)?;
                let kb = b.consume(&h, *bits)?;
                if ka.bits != kb.bits {
                    return Err(Error::Desynchronized { link: link.clone(), stream: stream.clone() }.into());
                }
                Ok(())
            }
            Command::Relay { src, dst, bits } => self.relay(step, src, dst, *bits),
            Command::Handshake(spec) => self.handshake(step, spec),
            Command::SendRecord { name, dir, body, count } => {
                let clock = self.clock_ms;
                let h = self
                    .handshakes
                    .iter_mut()
                    .find(|h| &h.spec.name == name)
                    .expect("checked at parse time");
                let Some(s) = h.session.as_mut() else {
                    return Err(Error::InvalidParameter(format!("handshake {name} was not established")).into());
                };
                let mut result = Ok(());
                for _ in 0..*count {
                    s.advance_to(clock);
                    h.records_sent += 1;
                    let r = s.send(*dir, body).and_then(|got| {
                        if &got == body {
                            Ok(())
                        } else {
                            Err(Error::ContractViolation("record decrypted to different plaintext".into()))
                        }
                    });
                    let applied = s.applied_faults().len();
                    for &i in &h.faults[h.faults_seen.min(h.faults.len())..] {
                        let fr = &mut self.faults[i];
                        if fr.outcome.is_none() && applied > h.faults_seen {
                            fr.applied = true;
                            fr.applied_step = Some(step);
                            fr.outcome = Some(r.as_ref().map_or_else(|e| e.kind().to_string(), |_| "undetected".into()));
                        }
                    }
                    h.faults_seen = applied;
                    match r {
                        Ok(()) => h.records_delivered += 1,
                        Err(e) => {
                            h.records_failed += 1;
                            result = Err(e.into());
                            break;
                        }
                    }
                }
                self.clock_ms = self.clock_ms.max(s.clock_ms());
                result
            }
            Command::InjectFault(spec) => {
                let i = self.faults.len();
                self.faults.push(FaultRecord {
                    step,
                    spec: spec.clone(),
                    applied_step: None,
                    applied: false,
                    outcome: None,
                });
                self.pending.push(i);
                Ok(())
            }
            Command::Wait { ms } => {
                self.clock_ms += ms;
                for h in &mut self.handshakes {
                    if let Some(s) = h.session.as_mut() {
                        s.advance_to(self.clock_ms);
                    }
                }
                Ok(())
            }
        }
    }

    fn qkd_sessions(&mut self, step: usize, link: &str, count: usize) -> Outcome {
        let cfg = self.session_config(link)?;
        let (alice, bob) = self.net.ends(link)?;
        let qkd_seed = seed::derive(self.seed, "qkd");
        for k in 0..count {
            let queued = if k == 0 {
                self.take_pending(step, |t| matches!(t, FaultTarget::Qkd { link: l, .. } if l == link))
            } else {
                Vec::new()
            };
            let faults: Vec<Fault> = queued
                .iter()
                .map(|&i| {
                    let spec = &self.faults[i].spec;
                    let FaultTarget::Qkd { msg, .. } = spec.target else { unreachable!() };
                    core_fault(spec, msg)
                })
                .collect();
            let (keys, mac_source) = match self.providers.get_mut(link) {
                Some(p) => {
                    let (k, s) = p.next_keys(alice, bob);
                    (k, s.to_string())
                }
                None => (SessionKeys::shared(self.net.link_mac(link)?.clone()), "static".to_string()),
            };
            let sid = self.next_qkd;
            self.next_qkd += 1;
            let (report, outcome) = match self.net.run_session(link, &cfg, &keys, sid, qkd_seed, faults.clone()) {
                Ok(r) => (r, Ok(())),
                Err(f) => (f.report, Err(Failure::from(f.error))),
            };
            for (&i, f) in queued.iter().zip(&faults) {
                self.faults[i].applied = report.applied_faults.contains(f);
                self.faults[i].outcome = Some(match &outcome {
                    Err(e) => e.kind.clone(),
                    Ok(()) => "undetected".into(),
                });
            }
            self.save(&format!("qkd-{sid}.bin"), |w| write_transcript(w, &report.transcript))?;
            self.qkd.push(QkdRecord {
                step,
                mac_source,
                outcome: outcome.clone(),
                report,
            });
            outcome?;
        }
        Ok(())
    }

    fn relay(&mut self, step: usize, src: &str, dst: &str, bits: usize) -> Outcome {
        let queued = self.take_pending(step, |t| matches!(t, FaultTarget::Relay { .. }));
        let faults: Vec<(String, Fault)> = queued
            .iter()
            .map(|&i| {
                let spec = &self.faults[i].spec;
                let FaultTarget::Relay { link } = &spec.target else { unreachable!() };
                (link.clone(), core_fault(spec, MsgType::RelayKey))
            })
            .collect();
        let mut rec = RelayRecord {
            step,
            src: src.into(),
            dst: dst.into(),
            bits,
            outcome: Ok(()),
            path: None,
            source_bits: 0,
            pad_bits: 0,
            burned_bits: 0,
            key_match: None,
        };
        let info = self.net.connection_info(src, dst);
        let hops = match self.net.route(src, dst) {
            Ok(p) => {
                rec.path = Some((
                    p.kind.to_string(),
                    p.intermediates().to_vec(),
                    p.hops.clone(),
                    info.setup_delay_ms,
                ));
                self.clock_ms += info.setup_delay_ms;
                p.hops
            }
            Err(_) => Vec::new(),
        };
        let result = self.net.end_to_end_key(src, dst, bits, &faults);
        // a relay-key message crosses each hop after the first exactly once
        let position = |link: &str| hops.iter().position(|h| h == link).filter(|&p| p >= 1);
        let first_hit = faults
            .iter()
            .filter(|(_, f)| matches!(f, Fault::FlipBit { occurrence: 0, .. } | Fault::Drop { occurrence: 0, .. }))
            .filter_map(|(l, _)| position(l))
            .min();
        match result {
            Ok(out) => {
                rec.source_bits = out.source_bits;
                rec.pad_bits = out.pad_bits;
                rec.key_match = Some(out.key_matches());
                self.save(&format!("relay-{}.bin", out.relay_id), |w| write_transcript(w, &out.transcript))?;
                for (&i, (link, f)) in queued.iter().zip(&faults) {
                    let hit = position(link).is_some() && matches!(f, Fault::FlipBit { occurrence: 0, .. } | Fault::Drop { occurrence: 0, .. });
                    self.faults[i].applied = hit;
                    self.faults[i].outcome = Some(if hit { "undetected" } else { "not-applied" }.into());
                }
                if !out.key_matches() {
                    rec.outcome = Err(Error::ContractViolation("delivered key differs from source key".into()).into());
                }
            }
            Err(f) => {
                rec.burned_bits = f.burned_bits;
                let failure = Failure::from(f.error);
                // the relay stops at the first tampered hop
                for (&i, (link, _)) in queued.iter().zip(&faults) {
                    let hit = first_hit.is_some() && position(link) == first_hit;
                    self.faults[i].applied = hit;
                    self.faults[i].outcome = Some(if hit { failure.kind.clone() } else { "not-applied".into() });
                }
                rec.outcome = Err(failure);
            }
        }
        let outcome = rec.outcome.clone();
        self.relays.push(rec);
        outcome
    }

    fn handshake(&mut self, step: usize, spec: &HandshakeSpec) -> Outcome {
        let name = spec.name.clone();
        let queued = self.take_pending(step, |t| matches!(t, FaultTarget::Handshake { name: n, .. } if *n == name));
        let faults: Vec<WireFault> = queued
            .iter()
            .map(|&i| {
                let s = &self.faults[i].spec;
                let FaultTarget::Handshake { kind, .. } = s.target else { unreachable!() };
                wire_fault(s, kind)
            })
            .collect();
        let idx = self.handshakes.len();
        let conn = self.net.connection_info(&spec.src, &spec.dst);
        let mut h = Handshake {
            step,
            spec: spec.clone(),
            source: "none".into(),
            session: None,
            outcome: Ok(()),
            records_sent: 0,
            records_delivered: 0,
            records_failed: 0,
            faults: queued.clone(),
            faults_seen: 0,
        };
        let source = match self.key_source(spec, conn.possible, idx) {
            Ok(s) => s,
            Err(e) => {
                h.outcome = Err(e.into());
                let o = h.outcome.clone();
                self.handshakes.push(h);
                return o;
            }
        };
        h.source = source.as_ref().map_or("none".into(), |s| s.describe());
        let psk_i = spec.psk.as_bytes().to_vec();
        let psk_r = spec.responder_psk.as_deref().unwrap_or(&spec.psk).as_bytes().to_vec();
        let mut cfg = HandshakeConfig::new(
            PeerConfig { id: spec.src.clone(), psk: psk_i, suites: spec.suites.clone() },
            PeerConfig { id: spec.dst.clone(), psk: psk_r, suites: spec.responder_suites.clone() },
        );
        cfg.policy = spec.policy;
        cfg.rekey = RekeyPolicy { max_records: spec.rekey_records, max_bytes: spec.rekey_bytes };
        cfg.start_ms = self.clock_ms;
        let run_seed = seed::derive_indexed(self.seed, "handshake", idx as u64);
        let sid = idx as u64 + 1;
        match SecureSession::handshake(cfg, conn, source, sid, run_seed, faults.clone()) {
            Ok(s) => {
                let applied = s.applied_faults().to_vec();
                for (&i, f) in queued.iter().zip(&faults) {
                    if applied.contains(f) {
                        self.faults[i].applied = true;
                        self.faults[i].outcome = Some("undetected".into());
                    }
                }
                h.faults_seen = applied.len();
                self.clock_ms = self.clock_ms.max(s.clock_ms());
                h.session = Some(s);
            }
            Err(e) => {
                let failure = Failure::from(e);
                for (&i, f) in queued.iter().zip(&faults) {
                    let kind = match f {
                        WireFault::FlipBit { kind, .. } | WireFault::Drop { kind, .. } => *kind,
                    };
                    let early = matches!(
                        kind,
                        FrameKind::Propose | FrameKind::Select | FrameKind::AuthInit | FrameKind::AuthResp
                    );
                    if early && f_occurrence(f) == 0 {
                        self.faults[i].applied = true;
                        self.faults[i].outcome = Some(failure.kind.clone());
                    }
                }
                h.outcome = Err(failure);
            }
        }
        let o = h.outcome.clone();
        self.handshakes.push(h);
        o
    }

    fn key_source(
        &self,
        spec: &HandshakeSpec,
        possible: bool,
        idx: usize,
    ) -> Result<Option<Box<dyn PairKeySource + 'a>>> {
        let net: &'a Network = self.net;
        if let Some((link, stream)) = &spec.stream {
            let info = net.topology().link(link)?;
            let ends = [info.a.as_str(), info.b.as_str()];
            if !(ends.contains(&spec.src.as_str()) && ends.contains(&spec.dst.as_str())) {
                return Err(Error::InvalidParameter(format!(
                    "stream {link}/{stream} does not join {} and {}",
                    spec.src, spec.dst
                )));
            }
            let h = KeyStream::new(link.as_str(), stream.as_str());
            if !net.store(&spec.src)?.has_stream(&h) {
                net.open_stream(link, stream)?;
            }
            let refills = spec
                .refills
                .iter()
                .enumerate()
                .map(|(k, &(at, n))| {
                    let s = seed::derive_indexed(seed::derive(self.seed, "refill"), &spec.name, k as u64);
                    (at, BitString::random(n, &mut seed::rng(s)))
                })
                .collect();
            let src = StreamKeySource::new(net.store(&spec.src)?, net.store(&spec.dst)?, h).with_refills(refills);
            log::debug!("handshake {} ({idx}) keyed from {}", spec.name, src.describe());
            return Ok(Some(Box::new(src)));
        }
        if !possible {
            return Ok(None);
        }
        Ok(Some(Box::new(RelayKeySource::new(net, &spec.src, &spec.dst)?)))
    }

    fn report(&self, scenario: &Scenario, steps: &[(usize, Outcome, bool)]) -> Report {
        let mut r = Report::default();
        let failed = steps.iter().filter(|(_, _, ok)| !ok).count();
        let mut run = Section::new("run", None);
        run.set("scenario", &scenario.name)
            .set("seed", self.seed)
            .set("steps", steps.len())
            .set("failed_steps", failed)
            .set("clock_ms", self.clock_ms)
            .set("status", if failed == 0 { "ok" } else { "failed" });
        r.push(run);

        for (i, outcome, ok) in steps {
            let st = &scenario.steps[*i];
            let mut s = Section::new("step", Some(i.to_string()));
            s.set("line", st.line)
                .set("command", st.command.name())
                .set("expect", &st.expect)
                .set("outcome", outcome_str(outcome))
                .set("as_expected", ok);
            if let Err(f) = outcome {
                s.set("error", &f.msg);
            }
            r.push(s);
        }

        for link in scenario.topology.links() {
            let recs: Vec<_> = self.qkd.iter().filter(|q| q.report.link_id == link.id).collect();
            let ok: Vec<_> = recs.iter().filter(|q| q.outcome.is_ok()).collect();
            let qbers: Vec<f64> = recs.iter().filter_map(|q| q.report.qber).collect();
            let sum = |f: fn(&SessionReport) -> usize| ok.iter().map(|q| f(&q.report)).sum::<usize>();
            let mut s = Section::new("link", Some(link.id.clone()));
            s.set("ends", format!("{},{}", link.a, link.b))
                .set("operational", link.operational)
                .set("sessions", recs.len())
                .set("succeeded", ok.len())
                .set("aborted", recs.len() - ok.len())
                .set("sifted_bits", sum(|r| r.sifted_len))
                .set("reconciled_bits", sum(|r| r.reconciled_len))
                .set("leaked_bits", sum(|r| r.leaked_bits))
                .set("final_bits", sum(|r| r.final_len))
                .set(
                    "qber_mean",
                    if qbers.is_empty() { "-".into() } else { f6(qbers.iter().sum::<f64>() / qbers.len() as f64) },
                );
            if let Ok((a, _)) = self.net.ends(&link.id) {
                s.set("produced_bits", a.produced_bits(&link.id).unwrap_or(0));
            }
            if let Some(p) = self.providers.get(&link.id) {
                s.set("mac_source", p.source().map_or("-".into(), |m| m.to_string()));
            }
            r.push(s);
        }

        for q in &self.qkd {
            let rep = &q.report;
            let mut s = Section::new("qkd-session", Some(rep.session_id.to_string()));
            s.set("step", q.step)
                .set("link", &rep.link_id)
                .set("mac_source", &q.mac_source)
                .set("outcome", outcome_str(&q.outcome))
                .set("photons", rep.photons_sent)
                .set("detected", rep.detected)
                .set("sifted_bits", rep.sifted_len)
                .set("sample_bits", rep.sample_size)
                .set("qber", rep.qber.map_or("-".into(), f6))
                .set("reconciled_bits", rep.reconciled_len)
                .set("leaked_bits", rep.leaked_bits)
                .set("corrections", rep.corrections)
                .set("final_bits", rep.final_len)
                .set("block", rep.block_id.map_or("-".into(), |b| b.to_string()))
                .set("messages", rep.transcript.len());
            if let Err(f) = &q.outcome {
                s.set("abort_reason", &f.msg);
            }
            r.push(s);
        }

        for link in scenario.topology.links() {
            let Ok((a, b)) = self.net.ends(&link.id) else { continue };
            for stream in a.streams(&link.id).unwrap_or_default() {
                let h = KeyStream::new(link.id.as_str(), stream.as_str());
                let mut s = Section::new("stream", Some(format!("{}/{stream}", link.id)));
                for (node, store) in [(&link.a, a), (&link.b, b)] {
                    if let Ok(info) = store.stream_info(&h) {
                        s.set(&format!("consumed_{node}"), info.total_served)
                            .set(&format!("available_{node}"), info.available_bits);
                    }
                }
                r.push(s);
            }
        }

        for (n, rel) in self.relays.iter().enumerate() {
            let mut s = Section::new("relay", Some(n.to_string()));
            s.set("step", rel.step).set("src", &rel.src).set("dst", &rel.dst).set("bits", rel.bits);
            match &rel.path {
                Some((kind, inter, hops, delay)) => {
                    s.set("kind", kind)
                        .set("intermediates", list(inter))
                        .set("hops", list(hops))
                        .set("setup_delay_ms", delay);
                }
                None => {
                    s.set("kind", "-");
                }
            }
            s.set("outcome", outcome_str(&rel.outcome))
                .set("source_bits", rel.source_bits)
                .set("pad_bits_per_end", rel.pad_bits)
                .set("link_bits_consumed", 2 * (rel.source_bits + rel.pad_bits))
                .set("burned_bits", rel.burned_bits)
                .set("key_match", rel.key_match.map_or("-".into(), |m| m.to_string()));
            if let Err(f) = &rel.outcome {
                s.set("error", &f.msg);
            }
            r.push(s);
        }

        for h in &self.handshakes {
            let mut s = Section::new("handshake", Some(h.spec.name.clone()));
            let proposed: Vec<String> = h.spec.suites.iter().map(|x| x.to_string()).collect();
            s.set("step", h.step)
                .set("initiator", &h.spec.src)
                .set("responder", &h.spec.dst)
                .set("key_source", &h.source)
                .set("proposed", list(&proposed))
                .set("outcome", outcome_str(&h.outcome));
            if let Err(f) = &h.outcome {
                s.set("error", &f.msg);
            }
            if let Some(sess) = &h.session {
                let st = sess.stats();
                s.set("suite", sess.suite())
                    .set("records_sent", h.records_sent)
                    .set("records_delivered", h.records_delivered)
                    .set("records_failed", h.records_failed)
                    .set("plaintext_bytes", st.plaintext_bytes)
                    .set("pad_bits_initiator", st.pad_bits[0])
                    .set("pad_bits_responder", st.pad_bits[1])
                    .set("quantum_bits_initiator", st.quantum_bits[0])
                    .set("quantum_bits_responder", st.quantum_bits[1])
                    .set("rekeys", st.rekeys)
                    .set("waits", st.waits)
                    .set("waited_ms", st.waited_ms)
                    .set("downgraded", st.downgraded)
                    .set("events", if st.events.is_empty() { "-".into() } else { st.events.join("; ") });
            }
            r.push(s);
        }

        for (n, f) in self.faults.iter().enumerate() {
            let mut s = Section::new("fault", Some(n.to_string()));
            s.set("step", f.step)
                .set("spec", &f.spec.text)
                .set("applied_step", f.applied_step.map_or("-".into(), |x| x.to_string()))
                .set("applied", f.applied)
                .set("outcome", f.outcome.as_deref().unwrap_or("not-applied"))
                .set(
                    "detected",
                    f.applied && !matches!(f.outcome.as_deref(), None | Some("undetected") | Some("not-applied")),
                );
            r.push(s);
        }
        r
    }
}

fn f_occurrence(f: &WireFault) -> usize {
    match f {
        WireFault::FlipBit { occurrence, .. } | WireFault::Drop { occurrence, .. } => *occurrence,
    }
}

/// Runs every step in order. Step failures are recorded, not returned; the
/// `Err` case is reserved for I/O trouble writing transcripts.
pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutput> {
    let net = Network::new(scenario.topology.clone(), seed::derive(opts.seed, "link-mac"));
    let mut rt = Runtime {
        net: &net,
        seed: opts.seed,
        transcripts: opts.transcripts.clone(),
        clock_ms: 0,
        channels: BTreeMap::new(),
        providers: BTreeMap::new(),
        next_qkd: 0,
        faults: Vec::new(),
        pending: Vec::new(),
        qkd: Vec::new(),
        relays: Vec::new(),
        handshakes: Vec::new(),
    };
    let mut steps = Vec::new();
    let mut failed_steps = Vec::new();
    for (i, step) in scenario.steps.iter().enumerate() {
        let outcome = rt.exec(i, &step.command);
        let as_expected = step.expect.matches(&outcome.as_ref().map(|_| ()).map_err(|f| f.kind.clone()));
        if !as_expected {
            match &outcome {
                Err(f) => log::error!("step {i} (line {}) {}: {}", step.line, step.text, f.msg),
                Ok(()) => log::error!("step {i} (line {}) {}: succeeded, expected {}", step.line, step.text, step.expect),
            }
            failed_steps.push(i);
        }
        steps.push((i, outcome, as_expected));
    }
    for h in &rt.handshakes {
        if let Some(s) = &h.session {
            rt.save(&format!("handshake-{}.bin", h.spec.name), |w| write_frames(w, s.transcript()))?;
        }
    }
    let report = rt.report(scenario, &steps);
    Ok(RunOutput { report, failed_steps })
}
