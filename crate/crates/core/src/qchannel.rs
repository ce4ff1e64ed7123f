//! Simulated quantum channel: Alice's random preparation, an optional
//! intercept-resend eavesdropper, and Bob's random-basis measurement.
//!
//! A photon lost in the channel produces no detection. Detector dark counts
//! are not modeled separately; they are part of `flip_prob`.

use rand::Rng;

use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    Rectilinear = 0,
    Diagonal = 1,
}

impl Basis {
    pub fn from_bit(b: bool) -> Self {
        if b {
            Basis::Diagonal
        } else {
            Basis::Rectilinear
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Basis::Rectilinear),
            1 => Some(Basis::Diagonal),
            _ => None,
        }
    }

    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_bit(rng.random())
    }
}

/// One entry of Alice's record of the photons she sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhotonRecord {
    pub index: u32,
    pub basis: Basis,
    pub bit: bool,
}

/// One photon Bob detected, with the basis he measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionRecord {
    pub index: u32,
    pub basis: Basis,
    pub bit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    loss_prob: f64,
    flip_prob: f64,
    eve_prob: f64,
}

impl ChannelParams {
    pub fn new(loss_prob: f64, flip_prob: f64, eve_prob: f64) -> Result<Self> {
        for (name, v) in [("loss_prob", loss_prob), ("flip_prob", flip_prob), ("eve_prob", eve_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name}={v} not in [0,1]")));
            }
        }
        Ok(Self {
            loss_prob,
            flip_prob,
            eve_prob,
        })
    }

    pub fn noiseless() -> Self {
        Self {
            loss_prob: 0.0,
            flip_prob: 0.0,
            eve_prob: 0.0,
        }
    }

    pub fn loss_prob(&self) -> f64 {
        self.loss_prob
    }

    pub fn flip_prob(&self) -> f64 {
        self.flip_prob
    }

    pub fn eve_prob(&self) -> f64 {
        self.eve_prob
    }
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self::noiseless()
    }
}

/// Prepares `count` photons with independent uniform bases and bits.
pub fn encode_batch(count: usize, rng_seed: u64) -> Result<Vec<PhotonRecord>> {
    if count == 0 {
        return Err(Error::DegenerateInput("photon count must be at least 1".into()));
    }
    let count = u32::try_from(count)
        .map_err(|_| Error::InvalidParameter(format!("photon count {count} exceeds u32")))?;
    let mut rng = seed::rng(rng_seed);
    Ok((0..count)
        .map(|index| PhotonRecord {
            index,
            basis: Basis::random(&mut rng),
            bit: rng.random(),
        })
        .collect())
}

/// Sends photons through the channel and measures them at Bob.
pub fn transmit(
    photons: &[PhotonRecord],
    params: &ChannelParams,
    rng_seed: u64,
) -> Result<Vec<DetectionRecord>> {
    if photons.is_empty() {
        return Err(Error::DegenerateInput("no photons to transmit".into()));
    }
    let mut rng = seed::rng(rng_seed);
    let mut out = Vec::with_capacity(photons.len());
    for p in photons {
        if rng.random_bool(params.loss_prob) {
            continue;
        }
        let (mut basis, mut bit) = (p.basis, p.bit);
        if rng.random_bool(params.eve_prob) {
            // intercept-resend: Eve measures in a random basis and re-prepares
            let eve_basis = Basis::random(&mut rng);
            if eve_basis != basis {
                bit = rng.random();
            }
            basis = eve_basis;
        }
        let bob_basis = Basis::random(&mut rng);
        let measured = if bob_basis == basis {
            bit ^ rng.random_bool(params.flip_prob)
        } else {
            rng.random()
        };
        out.push(DetectionRecord {
            index: p.index,
            basis: bob_basis,
            bit: measured,
        });
    }
    Ok(out)
}
