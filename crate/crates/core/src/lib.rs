//! Deterministic simulation of a QKD sub-network and the security protocols
//! that consume its keys.
//!
//! The pipeline runs bottom-up: [`qchannel`] moves photons, [`bb84`] sifts
//! and estimates errors, [`reconcile`] runs Cascade, [`amplify`] compresses
//! with a Toeplitz hash, and the result lands in a per-node [`keystore`].
//! [`qnet`] routes and relays keys across trusted nodes; [`securechan`] is a
//! small IKE/TLS-shaped handshake that draws on those keys.

pub mod amplify;
pub mod bb84;
pub mod bits;
pub mod crypto;
mod error;
pub mod keystore;
pub mod qchannel;
pub mod qnet;
pub mod reconcile;
pub mod securechan;
pub mod seed;

pub use bits::BitString;
pub use error::{Error, Result};
