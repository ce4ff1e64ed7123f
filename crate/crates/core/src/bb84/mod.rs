//! The BB84 pipeline over an authenticated classical channel.

pub mod message;
pub mod session;
pub mod sift;

pub use message::{ChannelEndpoint, ClassicalChannel, ClassicalMessage, Fault, MacKey, MsgType, SyncDigestPayload};
pub use session::{run_link_session, LinkEnds, SessionConfig, SessionFailure, SessionKeys, SessionReport};
pub use sift::{apply_retain, estimate_qber, sift, QberEstimate, SiftAnnouncement, SiftRetainList, SiftedKey};
