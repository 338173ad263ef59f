//! Two-party additive secret sharing over Z_{2^n}.

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{FixedConfig, FixedTensor, RingElement};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartyId {
    P0,
    P1,
}

impl PartyId {
    pub fn index(self) -> usize {
        match self {
            PartyId::P0 => 0,
            PartyId::P1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            PartyId::P0
        } else {
            PartyId::P1
        }
    }

    pub fn other(self) -> Self {
        match self {
            PartyId::P0 => PartyId::P1,
            PartyId::P1 => PartyId::P0,
        }
    }
}

/// Values that can be additively shared: scalars and tensors.
pub trait ShareValue: Clone + Sized {
    fn config(&self) -> FixedConfig;
    fn add_value(&self, other: &Self) -> Result<Self>;
    fn sub_value(&self, other: &Self) -> Result<Self>;
    fn scale_value(&self, c: u64) -> Self;
    /// A uniformly random value of the same shape.
    fn random_like<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Self;
}

impl ShareValue for RingElement {
    fn config(&self) -> FixedConfig {
        self.cfg()
    }

    fn add_value(&self, other: &Self) -> Result<Self> {
        crate::ring::ring_add(*self, *other)
    }

    fn sub_value(&self, other: &Self) -> Result<Self> {
        crate::ring::ring_sub(*self, *other)
    }

    fn scale_value(&self, c: u64) -> Self {
        RingElement::new(self.value().wrapping_mul(c), self.cfg())
    }

    fn random_like<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Self {
        RingElement::new(rng.next_u64(), self.cfg())
    }
}

impl ShareValue for FixedTensor {
    fn config(&self) -> FixedConfig {
        self.cfg()
    }

    fn add_value(&self, other: &Self) -> Result<Self> {
        self.add(other)
    }

    fn sub_value(&self, other: &Self) -> Result<Self> {
        self.sub(other)
    }

    fn scale_value(&self, c: u64) -> Self {
        self.scale(c)
    }

    fn random_like<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Self {
        random_tensor(self.cfg(), self.shape().to_vec(), rng)
    }
}

/// One party's additive share.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Share<V> {
    pub party: PartyId,
    pub value: V,
}

impl<V: ShareValue> Share<V> {
    pub fn new(party: PartyId, value: V) -> Self {
        Self { party, value }
    }

    pub fn add(&self, other: &Share<V>) -> Result<Share<V>> {
        if self.party != other.party {
            return Err(Error::PartyMismatch { expected: self.party, got: other.party });
        }
        Ok(Share::new(self.party, self.value.add_value(&other.value)?))
    }

    pub fn sub(&self, other: &Share<V>) -> Result<Share<V>> {
        if self.party != other.party {
            return Err(Error::PartyMismatch { expected: self.party, got: other.party });
        }
        Ok(Share::new(self.party, self.value.sub_value(&other.value)?))
    }

    /// Adds a public constant; only party 0 applies it.
    pub fn add_public(&self, c: &V) -> Result<Share<V>> {
        match self.party {
            PartyId::P0 => Ok(Share::new(self.party, self.value.add_value(c)?)),
            PartyId::P1 => {
                self.value.config().ensure_same(&c.config())?;
                Ok(self.clone())
            }
        }
    }

    pub fn mul_public(&self, c: RingElement) -> Result<Share<V>> {
        self.value.config().ensure_same(&c.cfg())?;
        Ok(Share::new(self.party, self.value.scale_value(c.value())))
    }
}

impl Share<FixedTensor> {
    pub fn trunc(&self) -> Share<FixedTensor> {
        Share::new(self.party, self.value.trunc_share(self.party))
    }
}

pub fn share_add<V: ShareValue>(a: &Share<V>, b: &Share<V>) -> Result<Share<V>> {
    a.add(b)
}

pub fn share_add_public<V: ShareValue>(a: &Share<V>, c: &V) -> Result<Share<V>> {
    a.add_public(c)
}

pub fn share_mul_public<V: ShareValue>(a: &Share<V>, c: RingElement) -> Result<Share<V>> {
    a.mul_public(c)
}

/// Splits `x` into two shares; share 0 is uniform.
pub fn split<V: ShareValue, R: RngCore + CryptoRng>(x: &V, rng: &mut R) -> Result<(Share<V>, Share<V>)> {
    let r = x.random_like(rng);
    let other = x.sub_value(&r)?;
    Ok((Share::new(PartyId::P0, r), Share::new(PartyId::P1, other)))
}

pub fn reconstruct<V: ShareValue>(s0: &Share<V>, s1: &Share<V>) -> Result<V> {
    if s0.party != PartyId::P0 {
        return Err(Error::PartyMismatch { expected: PartyId::P0, got: s0.party });
    }
    if s1.party != PartyId::P1 {
        return Err(Error::PartyMismatch { expected: PartyId::P1, got: s1.party });
    }
    s0.value.add_value(&s1.value)
}

pub fn random_tensor<R: RngCore + ?Sized>(cfg: FixedConfig, shape: Vec<usize>, rng: &mut R) -> FixedTensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.next_u64()).collect();
    FixedTensor::new(cfg, shape, data).expect("length matches shape")
}

/// Deterministic generator for tests and reproducible runs; `stream`
/// separates independent consumers of one seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn os_rng() -> ChaCha20Rng {
    ChaCha20Rng::from_entropy()
}
