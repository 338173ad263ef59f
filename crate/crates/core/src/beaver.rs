//! Dealer-generated multiplication triples and Beaver multiplication.
//!
//! Every secure product opens `x - a` and `y - b` in a single message each
//! way. Triples are moved into the operation that uses them, so a triple
//! can never be consumed twice.

use std::collections::VecDeque;

use rand::{CryptoRng, RngCore};

use crate::error::{Error, Result};
use crate::ring::{FixedConfig, FixedTensor, RingElement};
use crate::sharing::{random_tensor, split, PartyId, Share, ShareValue};
use crate::transport::{Channel, PayloadKind, Reader, Writer};

/// One party's shares of `(a, b, c)`. For scalar and elementwise triples
/// `c = a * b`; see `MatTriple` for the matrix form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triple<V> {
    pub a: Share<V>,
    pub b: Share<V>,
    pub c: Share<V>,
}

pub type BeaverTriple = Triple<RingElement>;

/// Elementwise tensor triple: `c = a ⊙ b`.
pub type VecTriple = Triple<FixedTensor>;

/// Matrix triple: `A: [m x k]`, `B: [k x p]`, `C = A * B`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatTriple {
    pub a: Share<FixedTensor>,
    pub b: Share<FixedTensor>,
    pub c: Share<FixedTensor>,
}

impl<V: ShareValue> Triple<V> {
    pub fn party(&self) -> PartyId {
        self.a.party
    }
}

impl MatTriple {
    pub fn party(&self) -> PartyId {
        self.a.party
    }

    /// `(m, k, p)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let a = self.a.value.shape();
        let b = self.b.value.shape();
        (a[0], a[1], b[1])
    }
}

fn split_triple<V: ShareValue, R: RngCore + CryptoRng>(a: V, b: V, c: V, rng: &mut R) -> Result<(Triple<V>, Triple<V>)> {
    let (a0, a1) = split(&a, rng)?;
    let (b0, b1) = split(&b, rng)?;
    let (c0, c1) = split(&c, rng)?;
    Ok((Triple { a: a0, b: b0, c: c0 }, Triple { a: a1, b: b1, c: c1 }))
}

pub fn gen_triple<R: RngCore + CryptoRng>(cfg: FixedConfig, rng: &mut R) -> (BeaverTriple, BeaverTriple) {
    let a = RingElement::new(rng.next_u64(), cfg);
    let b = RingElement::new(rng.next_u64(), cfg);
    let c = RingElement::new(a.value().wrapping_mul(b.value()), cfg);
    split_triple(a, b, c, rng).expect("same configuration")
}

pub fn gen_vec_triple<R: RngCore + CryptoRng>(len: usize, cfg: FixedConfig, rng: &mut R) -> (VecTriple, VecTriple) {
    let a = random_tensor(cfg, vec![len], rng);
    let b = random_tensor(cfg, vec![len], rng);
    let c = a.hadamard(&b).expect("same shape");
    split_triple(a, b, c, rng).expect("same configuration")
}

pub fn gen_mat_triple<R: RngCore + CryptoRng>(
    m: usize,
    k: usize,
    p: usize,
    cfg: FixedConfig,
    rng: &mut R,
) -> (MatTriple, MatTriple) {
    let a = random_tensor(cfg, vec![m, k], rng);
    let b = random_tensor(cfg, vec![k, p], rng);
    let c = a.matmul(&b).expect("compatible shapes");
    let (t0, t1) = split_triple(a, b, c, rng).expect("same configuration");
    (MatTriple { a: t0.a, b: t0.b, c: t0.c }, MatTriple { a: t1.a, b: t1.b, c: t1.c })
}

/// FIFO of single-use correlated randomness.
#[derive(Debug)]
pub struct TripleStore<T> {
    label: &'static str,
    items: VecDeque<T>,
}

impl<T> TripleStore<T> {
    pub fn new(label: &'static str) -> Self {
        Self { label, items: VecDeque::new() }
    }

    pub fn push(&mut self, t: T) {
        self.items.push_back(t);
    }

    pub fn take(&mut self) -> Result<T> {
        self.items.pop_front().ok_or(Error::TripleExhausted(self.label))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl<T> Extend<T> for TripleStore<T> {
    fn extend<I: IntoIterator<Item = T>>(&mut self, iter: I) {
        self.items.extend(iter)
    }
}

fn ensure_party(expected: PartyId, got: PartyId) -> Result<()> {
    if expected != got {
        return Err(Error::PartyMismatch { expected, got });
    }
    Ok(())
}

/// Sends our masked openings and returns the opened public values.
fn open_pair(
    chan: &mut Channel,
    cfg: FixedConfig,
    d: &[u64],
    e: &[u64],
) -> Result<(Vec<u64>, Vec<u64>)> {
    let mut w = Writer::with_capacity((d.len() + e.len()) * cfg.elem_bytes());
    w.ring_slice(cfg, d).ring_slice(cfg, e);
    chan.send(PayloadKind::Opening, w.finish())?;
    let payload = chan.expect(PayloadKind::Opening)?;
    let mut r = Reader::new(&payload);
    let pd = r.ring_vec(cfg, d.len())?;
    let pe = r.ring_vec(cfg, e.len())?;
    r.finish()?;
    let mask = cfg.mask();
    let open = |mine: &[u64], theirs: Vec<u64>| -> Vec<u64> {
        mine.iter().zip(theirs).map(|(&a, b)| a.wrapping_add(b) & mask).collect()
    };
    Ok((open(d, pd), open(e, pe)))
}

/// Elementwise Beaver product of tensor shares; no truncation.
pub fn secure_mul_elementwise(
    x: &Share<FixedTensor>,
    y: &Share<FixedTensor>,
    t: VecTriple,
    chan: &mut Channel,
) -> Result<Share<FixedTensor>> {
    let party = x.party;
    ensure_party(party, y.party)?;
    ensure_party(party, t.party())?;
    let cfg = x.value.cfg();
    cfg.ensure_same(&y.value.cfg())?;
    if x.value.len() != y.value.len() || x.value.len() != t.a.value.len() {
        return Err(Error::ShapeMismatch(format!(
            "elementwise product of {} and {} elements with a triple of {}",
            x.value.len(),
            y.value.len(),
            t.a.value.len()
        )));
    }
    let flat = |v: &FixedTensor| v.data().to_vec();
    let d = x.value.sub(&t.a.value.clone().reshape(x.value.shape().to_vec())?)?;
    let e = y.value.sub(&t.b.value.clone().reshape(x.value.shape().to_vec())?)?;
    let (dp, ep) = open_pair(chan, cfg, &flat(&d), &flat(&e))?;
    let mask = cfg.mask();
    let (a, b, c) = (t.a.value.data(), t.b.value.data(), t.c.value.data());
    let z = (0..dp.len())
        .map(|i| {
            let mut z = c[i].wrapping_add(dp[i].wrapping_mul(b[i])).wrapping_add(a[i].wrapping_mul(ep[i]));
            if party == PartyId::P0 {
                z = z.wrapping_add(dp[i].wrapping_mul(ep[i]));
            }
            z & mask
        })
        .collect();
    Ok(Share::new(party, FixedTensor::new(cfg, x.value.shape().to_vec(), z)?))
}

/// Scalar Beaver product; no truncation.
pub fn secure_mul(
    x: &Share<RingElement>,
    y: &Share<RingElement>,
    t: BeaverTriple,
    chan: &mut Channel,
) -> Result<Share<RingElement>> {
    let cfg = x.value.cfg();
    let lift = |s: &Share<RingElement>| -> Result<Share<FixedTensor>> {
        Ok(Share::new(s.party, FixedTensor::new(s.value.cfg(), vec![1], vec![s.value.value()])?))
    };
    let vt = Triple { a: lift(&t.a)?, b: lift(&t.b)?, c: lift(&t.c)? };
    let z = secure_mul_elementwise(&lift(x)?, &lift(y)?, vt, chan)?;
    Ok(Share::new(z.party, RingElement::new(z.value.data()[0], cfg)))
}

/// Beaver matrix product `X * W` of shares; no truncation.
///
/// Opens `D = X - A` and `E = W - B` in one message each way, so each
/// party sends `m*k + k*p` ring elements.
pub fn secure_matmul(
    x: &Share<FixedTensor>,
    w: &Share<FixedTensor>,
    t: MatTriple,
    chan: &mut Channel,
) -> Result<Share<FixedTensor>> {
    let party = x.party;
    ensure_party(party, w.party)?;
    ensure_party(party, t.party())?;
    let cfg = x.value.cfg();
    cfg.ensure_same(&w.value.cfg())?;
    if x.value.shape() != t.a.value.shape() || w.value.shape() != t.b.value.shape() {
        return Err(Error::ShapeMismatch(format!(
            "matmul {:?} * {:?} with triple {:?} * {:?}",
            x.value.shape(),
            w.value.shape(),
            t.a.value.shape(),
            t.b.value.shape()
        )));
    }
    let d = x.value.sub(&t.a.value)?;
    let e = w.value.sub(&t.b.value)?;
    let (dp, ep) = open_pair(chan, cfg, d.data(), e.data())?;
    let d = FixedTensor::new(cfg, d.shape().to_vec(), dp)?;
    let e = FixedTensor::new(cfg, e.shape().to_vec(), ep)?;
    let mut z = t.c.value.add(&d.matmul(&t.b.value)?)?.add(&t.a.value.matmul(&e)?)?;
    if party == PartyId::P0 {
        z = z.add(&d.matmul(&e)?)?;
    }
    Ok(Share::new(party, z))
}
