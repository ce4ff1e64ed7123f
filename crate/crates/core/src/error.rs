use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("insufficient key material: short by {shortfall} bits")]
    InsufficientMaterial { shortfall: usize },

    #[error("eavesdropping suspected: estimated QBER {qber:.4} exceeds threshold {threshold:.4}")]
    EavesdropSuspected { qber: f64, threshold: f64 },

    #[error("MAC verification failed on {msg_type} message")]
    MacFailure { msg_type: String },

    #[error("timed out after {after_ms} ms waiting for {what}")]
    Timeout { what: String, after_ms: u64 },

    #[error("reconciliation failed: keys still differ after verification ({leaked_bits} bits leaked over {rounds} messages)")]
    ReconciliationFailed { leaked_bits: usize, rounds: usize },

    #[error("stream {stream} on link {link} is desynchronized")]
    Desynchronized { link: String, stream: String },

    #[error("unknown link {0}")]
    UnknownLink(String),

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("stream {stream} already open on link {link}")]
    DuplicateStream { link: String, stream: String },

    #[error("no operational route from {src} to {dst}")]
    NoRoute { src: String, dst: String },

    #[error("intermediate node {0} is not trusted")]
    UntrustedIntermediate(String),

    #[error("negotiation failed: {0}")]
    NegotiationFailure(String),

    #[error("peer authentication failed")]
    AuthFailure,

    #[error("record rejected: expected sequence {expected}, got {got}")]
    Replay { expected: u64, got: u64 },

    #[error("{suite} suite ran out of quantum key material: short by {shortfall} bits")]
    SuiteExhausted { suite: String, shortfall: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shortfall(&self) -> Option<usize> {
        match self {
            Error::InsufficientMaterial { shortfall } | Error::SuiteExhausted { shortfall, .. } => {
                Some(*shortfall)
            }
            _ => None,
        }
    }

    /// Stable short name of the variant, used in reports and scripts.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "degenerate-input",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::ContractViolation(_) => "contract-violation",
            Error::Protocol(_) => "protocol",
            Error::InsufficientMaterial { .. } => "insufficient-material",
            Error::EavesdropSuspected { .. } => "eavesdrop-suspected",
            Error::MacFailure { .. } => "mac-failure",
            Error::Timeout { .. } => "timeout",
            Error::ReconciliationFailed { .. } => "reconciliation-failed",
            Error::Desynchronized { .. } => "desynchronized",
            Error::UnknownLink(_) => "unknown-link",
            Error::UnknownNode(_) => "unknown-node",
            Error::DuplicateStream { .. } => "duplicate-stream",
            Error::NoRoute { .. } => "no-route",
            Error::UntrustedIntermediate(_) => "untrusted-intermediate",
            Error::NegotiationFailure(_) => "negotiation-failure",
            Error::AuthFailure => "auth-failure",
            Error::Replay { .. } => "replay",
            Error::SuiteExhausted { .. } => "suite-exhausted",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }
}
