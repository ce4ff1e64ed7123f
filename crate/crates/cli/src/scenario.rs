//! Scenario files.
//!
//! One command per line, `#` starts a comment. Topology lines (`node`,
//! `link`, `topology <file>`) come first; everything after is the script,
//! executed in order. Options are `key=value` words after the positional
//! arguments; every scripted step accepts `expect=ok|fail|<error-kind>`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use qkdsim_core::bb84::MsgType;
use qkdsim_core::qnet::Topology;
use qkdsim_core::securechan::{Ciphersuite, Direction, ExhaustionPolicy, FrameKind};
use qkdsim_core::{Error, Result};

/// What a step is expected to do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    Ok,
    AnyFailure,
    Kind(String),
}

impl Expect {
    fn parse(s: &str, line: usize) -> Result<Self> {
        Ok(match s {
            "ok" => Expect::Ok,
            "fail" => Expect::AnyFailure,
            k if KNOWN_KINDS.contains(&k) => Expect::Kind(k.to_string()),
            other => return Err(parse_err(line, format!("unknown expectation {other}"))),
        })
    }

    pub fn matches(&self, outcome: &std::result::Result<(), String>) -> bool {
        match (self, outcome) {
            (Expect::Ok, Ok(())) => true,
            (Expect::AnyFailure, Err(_)) => true,
            (Expect::Kind(k), Err(got)) => k == got,
            _ => false,
        }
    }
}

impl std::fmt::Display for Expect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Expect::Ok => f.write_str("ok"),
            Expect::AnyFailure => f.write_str("fail"),
            Expect::Kind(k) => f.write_str(k),
        }
    }
}

const KNOWN_KINDS: &[&str] = &[
    "degenerate-input",
    "invalid-parameter",
    "contract-violation",
    "protocol",
    "insufficient-material",
    "eavesdrop-suspected",
    "mac-failure",
    "timeout",
    "reconciliation-failed",
    "desynchronized",
    "unknown-link",
    "unknown-node",
    "duplicate-stream",
    "no-route",
    "untrusted-intermediate",
    "negotiation-failure",
    "auth-failure",
    "replay",
    "suite-exhausted",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    pub loss: f64,
    pub flip: f64,
    pub eve: f64,
    pub photons: usize,
    pub sample_fraction: Option<f64>,
    pub abort_threshold: Option<f64>,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            loss: 0.0,
            flip: 0.0,
            eve: 0.0,
            photons: 20_000,
            sample_fraction: None,
            abort_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultAction {
    Flip { bit: usize },
    Drop,
}

/// Where an injected fault lands: the next step that touches the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultTarget {
    Qkd { link: String, msg: MsgType },
    Relay { link: String },
    Handshake { name: String, kind: FrameKind },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultSpec {
    pub target: FaultTarget,
    pub action: FaultAction,
    pub occurrence: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandshakeSpec {
    pub name: String,
    pub src: String,
    pub dst: String,
    pub suites: Vec<Ciphersuite>,
    pub responder_suites: Vec<Ciphersuite>,
    pub psk: String,
    pub responder_psk: Option<String>,
    pub policy: ExhaustionPolicy,
    pub rekey_records: Option<u64>,
    pub rekey_bytes: Option<u64>,
    /// Draw from this stream of a direct link instead of relaying.
    pub stream: Option<(String, String)>,
    /// Scripted producer for the stream: `(at_ms, bits)`.
    pub refills: Vec<(u64, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Channel { link: String, spec: ChannelSpec },
    Bootstrap { link: String, psk: String, threshold: Option<u64> },
    QkdSession { link: String, count: usize },
    OpenStream { link: String, stream: String },
    Consume { link: String, stream: String, bits: usize },
    Relay { src: String, dst: String, bits: usize },
    Handshake(Box<HandshakeSpec>),
    SendRecord { name: String, dir: Direction, body: Vec<u8>, count: usize },
    InjectFault(FaultSpec),
    Wait { ms: u64 },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Channel { .. } => "channel",
            Command::Bootstrap { .. } => "bootstrap",
            Command::QkdSession { .. } => "qkd-session",
            Command::OpenStream { .. } => "open-stream",
            Command::Consume { .. } => "consume",
            Command::Relay { .. } => "relay",
            Command::Handshake(_) => "handshake",
            Command::SendRecord { .. } => "send-record",
            Command::InjectFault(_) => "inject-fault",
            Command::Wait { .. } => "wait",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub line: usize,
    pub text: String,
    pub command: Command,
    pub expect: Expect,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub topology: Topology,
    pub steps: Vec<Step>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

struct Args<'a> {
    line: usize,
    pos: Vec<&'a str>,
    opts: BTreeMap<&'a str, Vec<&'a str>>,
    used: BTreeSet<&'a str>,
}

impl<'a> Args<'a> {
    fn new(words: &[&'a str], line: usize) -> Self {
        let mut pos = Vec::new();
        let mut opts: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for w in words {
            match w.split_once('=') {
                Some((k, v)) => opts.entry(k).or_default().push(v),
                None => pos.push(*w),
            }
        }
        Self { line, pos, opts, used: BTreeSet::new() }
    }

    fn positional(&self, n: usize, usage: &str) -> Result<()> {
        if self.pos.len() != n {
            return Err(parse_err(self.line, format!("usage: {usage}")));
        }
        Ok(())
    }

    fn opt(&mut self, key: &'a str) -> Option<&'a str> {
        self.used.insert(key);
        self.opts.get(key).and_then(|v| v.last().copied())
    }

    fn all(&mut self, key: &'a str) -> Vec<&'a str> {
        self.used.insert(key);
        self.opts.get(key).cloned().unwrap_or_default()
    }

    fn num<T: std::str::FromStr>(&mut self, key: &'a str) -> Result<Option<T>> {
        let line = self.line;
        self.opt(key)
            .map(|v| v.parse().map_err(|_| parse_err(line, format!("bad value for {key}: {v}"))))
            .transpose()
    }

    fn finish(&self) -> Result<()> {
        match self.opts.keys().find(|k| !self.used.contains(*k)) {
            Some(k) => Err(parse_err(self.line, format!("unknown option {k}"))),
            None => Ok(()),
        }
    }
}

fn number<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| parse_err(line, format!("bad {what}: {s}")))
}

fn suite_list(s: &str, line: usize) -> Result<Vec<Ciphersuite>> {
    s.split(',')
        .map(|p| Ciphersuite::parse(p).map_err(|e| parse_err(line, e.to_string())))
        .collect()
}

fn policy(s: &str, line: usize) -> Result<ExhaustionPolicy> {
    match s.split_once(':') {
        None if s == "fail" => Ok(ExhaustionPolicy::fail()),
        None if s == "fallback" => Ok(ExhaustionPolicy::fallback()),
        Some(("block", ms)) => {
            ExhaustionPolicy::block(number(ms, "timeout", line)?).map_err(|e| parse_err(line, e.to_string()))
        }
        _ => Err(parse_err(line, format!("unknown policy {s} (fail, block:<ms>, fallback)"))),
    }
}

fn text_body(s: &str) -> Vec<u8> {
    s.replace("\\s", " ").into_bytes()
}

fn parse_fault(pos: &[&str], args: &mut Args<'_>, text: &str) -> Result<FaultSpec> {
    let line = args.line;
    let usage = "inject-fault qkd|relay|handshake <target> flip|drop <message> <occurrence> [bit=N]";
    if pos.len() != 5 {
        return Err(parse_err(line, format!("usage: {usage}")));
    }
    let occurrence = number(pos[4], "occurrence", line)?;
    let action = match pos[2] {
        "flip" => FaultAction::Flip {
            bit: args.num("bit")?.ok_or_else(|| parse_err(line, "flip needs bit=N"))?,
        },
        "drop" => FaultAction::Drop,
        other => return Err(parse_err(line, format!("unknown fault action {other}"))),
    };
    let target = match pos[0] {
        "qkd" => FaultTarget::Qkd {
            link: pos[1].to_string(),
            msg: MsgType::from_name(pos[3]).ok_or_else(|| parse_err(line, format!("unknown message {}", pos[3])))?,
        },
        "relay" => {
            if pos[3] != MsgType::RelayKey.name() {
                return Err(parse_err(line, "relay faults apply to relay-key messages"));
            }
            FaultTarget::Relay { link: pos[1].to_string() }
        }
        "handshake" => FaultTarget::Handshake {
            name: pos[1].to_string(),
            kind: FrameKind::from_name(pos[3]).ok_or_else(|| parse_err(line, format!("unknown frame {}", pos[3])))?,
        },
        other => return Err(parse_err(line, format!("unknown fault target {other}"))),
    };
    Ok(FaultSpec {
        target,
        action,
        occurrence,
        text: text.to_string(),
    })
}

fn parse_command(words: &[&str], line: usize, text: &str) -> Result<(Command, Expect)> {
    let mut a = Args::new(&words[1..], line);
    let expect = match a.opt("expect") {
        Some(e) => Expect::parse(e, line)?,
        None => Expect::Ok,
    };
    let p = a.pos.clone();
    let cmd = match words[0] {
        "channel" => {
            a.positional(1, "channel <link> [loss=F] [flip=F] [eve=F] [photons=N] [sample=F] [threshold=F]")?;
            let d = ChannelSpec::default();
            Command::Channel {
                link: p[0].to_string(),
                spec: ChannelSpec {
                    loss: a.num("loss")?.unwrap_or(d.loss),
                    flip: a.num("flip")?.unwrap_or(d.flip),
                    eve: a.num("eve")?.unwrap_or(d.eve),
                    photons: a.num("photons")?.unwrap_or(d.photons),
                    sample_fraction: a.num("sample")?,
                    abort_threshold: a.num("threshold")?,
                },
            }
        }
        "bootstrap" => {
            a.positional(1, "bootstrap <link> psk=<text> [threshold=N]")?;
            Command::Bootstrap {
                link: p[0].to_string(),
                psk: a.opt("psk").ok_or_else(|| parse_err(line, "bootstrap needs psk=<text>"))?.to_string(),
                threshold: a.num("threshold")?,
            }
        }
        "qkd-session" => {
            a.positional(1, "qkd-session <link> [count=N]")?;
            Command::QkdSession {
                link: p[0].to_string(),
                count: a.num("count")?.unwrap_or(1),
            }
        }
        "open-stream" => {
            a.positional(2, "open-stream <link> <stream>")?;
            Command::OpenStream { link: p[0].to_string(), stream: p[1].to_string() }
        }
        "consume" => {
            a.positional(3, "consume <link> <stream> <bits>")?;
            Command::Consume {
                link: p[0].to_string(),
                stream: p[1].to_string(),
                bits: number(p[2], "bit count", line)?,
            }
        }
        "relay" => {
            a.positional(2, "relay <src> <dst> bits=N")?;
            Command::Relay {
                src: p[0].to_string(),
                dst: p[1].to_string(),
                bits: a.num("bits")?.ok_or_else(|| parse_err(line, "relay needs bits=N"))?,
            }
        }
        "handshake" => {
            a.positional(3, "handshake <name> <initiator> <responder> [suites=..] [policy=..] ...")?;
            let suites = suite_list(a.opt("suites").unwrap_or("classical"), line)?;
            let responder_suites = match a.opt("responder-suites") {
                Some(s) => suite_list(s, line)?,
                None => suites.clone(),
            };
            let stream = a
                .opt("stream")
                .map(|s| {
                    s.split_once('/')
                        .map(|(l, s)| (l.to_string(), s.to_string()))
                        .ok_or_else(|| parse_err(line, "stream=<link>/<stream>"))
                })
                .transpose()?;
            let refills = a
                .all("refill")
                .into_iter()
                .map(|r| {
                    let (t, n) = r.split_once(':').ok_or_else(|| parse_err(line, "refill=<at_ms>:<bits>"))?;
                    Ok((number(t, "refill time", line)?, number(n, "refill size", line)?))
                })
                .collect::<Result<Vec<_>>>()?;
            if !refills.is_empty() && stream.is_none() {
                return Err(parse_err(line, "refill needs stream=<link>/<stream>"));
            }
            Command::Handshake(Box::new(HandshakeSpec {
                name: p[0].to_string(),
                src: p[1].to_string(),
                dst: p[2].to_string(),
                suites,
                responder_suites,
                psk: a.opt("psk").unwrap_or("scenario psk").to_string(),
                responder_psk: a.opt("responder-psk").map(str::to_string),
                policy: policy(a.opt("policy").unwrap_or("fail"), line)?,
                rekey_records: a.num("rekey-records")?,
                rekey_bytes: a.num("rekey-bytes")?,
                stream,
                refills,
            }))
        }
        "send-record" => {
            a.positional(2, "send-record <handshake> i2r|r2i bytes=N|text=<text> [count=N]")?;
            let dir = match p[1] {
                "i2r" => Direction::InitiatorToResponder,
                "r2i" => Direction::ResponderToInitiator,
                other => return Err(parse_err(line, format!("unknown direction {other}"))),
            };
            let body = match (a.opt("text"), a.num::<usize>("bytes")?) {
                (Some(t), None) => text_body(t),
                (None, Some(n)) => (0..n).map(|i| i as u8).collect(),
                _ => return Err(parse_err(line, "send-record needs exactly one of bytes=N or text=...")),
            };
            Command::SendRecord {
                name: p[0].to_string(),
                dir,
                body,
                count: a.num("count")?.unwrap_or(1),
            }
        }
        "inject-fault" => Command::InjectFault(parse_fault(&p, &mut a, text)?),
        "wait" => {
            a.positional(1, "wait <ms>")?;
            Command::Wait { ms: number(p[0], "duration", line)? }
        }
        other => return Err(parse_err(line, format!("unknown command {other}"))),
    };
    a.finish()?;
    Ok((cmd, expect))
}

fn strip_comment(raw: &str) -> &str {
    raw.split('#').next().unwrap_or("").trim()
}

impl Scenario {
    /// Parses scenario text. `base` resolves `topology <file>` lines.
    pub fn parse(name: &str, text: &str, base: &Path) -> Result<Self> {
        // inline topology lines keep their own line numbers; included files
        // are appended after the last scenario line
        let total = text.lines().count();
        let mut inline = vec![String::new(); total];
        let mut included = String::new();
        let mut include_line = 0;
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = strip_comment(raw);
            if body.is_empty() {
                continue;
            }
            let words: Vec<&str> = body.split_whitespace().collect();
            match words[0] {
                "node" | "link" | "topology" if !steps.is_empty() => {
                    return Err(parse_err(line, "topology lines must precede the script"));
                }
                "node" | "link" => inline[i] = body.to_string(),
                "topology" => {
                    if words.len() != 2 {
                        return Err(parse_err(line, "usage: topology <file>"));
                    }
                    let path: PathBuf = base.join(words[1]);
                    let file = std::fs::read_to_string(&path)
                        .map_err(|e| parse_err(line, format!("cannot read {}: {e}", path.display())))?;
                    Topology::parse(&file).map_err(|e| parse_err(line, format!("{}: {e}", path.display())))?;
                    included.push_str(&file);
                    included.push('\n');
                    include_line = line;
                }
                _ => {
                    let (command, expect) = parse_command(&words, line, body)?;
                    steps.push(Step {
                        line,
                        text: body.to_string(),
                        command,
                        expect,
                    });
                }
            }
        }
        let mut topo_text = inline.join("\n");
        topo_text.push('\n');
        topo_text.push_str(&included);
        let topology = Topology::parse(&topo_text).map_err(|e| match e {
            Error::Parse { line, msg } if line > total => parse_err(include_line, msg),
            e => e,
        })?;
        let scenario = Scenario {
            name: name.to_string(),
            topology,
            steps,
        };
        scenario.check_references()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&name, &text, path.parent().unwrap_or(Path::new(".")))
    }

    fn check_references(&self) -> Result<()> {
        let t = &self.topology;
        let mut handshakes = BTreeSet::new();
        for s in &self.steps {
            let err = |msg: String| parse_err(s.line, msg);
            let link = |l: &str| t.link(l).map(|_| ()).map_err(|_| err(format!("unknown link {l}")));
            let node = |n: &str| t.node(n).map(|_| ()).map_err(|_| err(format!("unknown node {n}")));
            match &s.command {
                Command::Channel { link: l, .. }
                | Command::Bootstrap { link: l, .. }
                | Command::QkdSession { link: l, .. }
                | Command::OpenStream { link: l, .. }
                | Command::Consume { link: l, .. } => link(l)?,
                Command::Relay { src, dst, .. } => {
                    node(src)?;
                    node(dst)?;
                }
                Command::Handshake(h) => {
                    node(&h.src)?;
                    node(&h.dst)?;
                    if let Some((l, _)) = &h.stream {
                        link(l)?;
                    }
                    if !handshakes.insert(h.name.clone()) {
                        return Err(err(format!("handshake {} declared twice", h.name)));
                    }
                }
                Command::SendRecord { name, .. } => {
                    if !handshakes.contains(name) {
                        return Err(err(format!("send-record before handshake {name}")));
                    }
                }
                Command::InjectFault(f) => match &f.target {
                    FaultTarget::Qkd { link: l, .. } | FaultTarget::Relay { link: l } => link(l)?,
                    FaultTarget::Handshake { .. } => {}
                },
                Command::Wait { .. } => {}
            }
        }
        Ok(())
    }
}
