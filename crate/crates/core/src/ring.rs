//! Fixed-point arithmetic over the ring Z_{2^n}.
//!
//! Ring values are stored as `u64` words reduced modulo `2^n`; values at or
//! above `2^{n-1}` are negative in the signed (two's complement) reading.
//! A real `x` is encoded as `round(x * 2^f) mod 2^n`, so every product of two
//! encoded values carries `2f` fractional bits and must be truncated by `f`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sharing::PartyId;
use crate::tensor::Tensor;

/// Parameters of the fixed-point ring shared by every party of a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedConfig {
    /// Ring width `n` in bits: 8, 16, 32 or 64.
    pub bits: u32,
    /// Fractional bits `f`.
    pub frac_bits: u32,
    /// Seed length of the function-secret-sharing PRG, in bits.
    pub lambda: u32,
}

impl Default for FixedConfig {
    fn default() -> Self {
        Self { bits: 64, frac_bits: 13, lambda: 128 }
    }
}

impl fmt::Display for FixedConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Z_2^{}/f{}/λ{}", self.bits, self.frac_bits, self.lambda)
    }
}

impl FixedConfig {
    pub fn new(bits: u32, frac_bits: u32) -> Result<Self> {
        let cfg = Self { bits, frac_bits, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 8 | 16 | 32 | 64) {
            return Err(Error::InvalidConfig(format!("ring width {} not in {{8,16,32,64}}", self.bits)));
        }
        if self.frac_bits == 0 || self.frac_bits + 2 >= self.bits {
            return Err(Error::InvalidConfig(format!(
                "need 0 < f < n - 2, got f={} n={}",
                self.frac_bits, self.bits
            )));
        }
        // The comparison-key PRG works on 128-bit seeds only.
        if self.lambda != 128 {
            return Err(Error::InvalidConfig(format!("lambda must be 128, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Errors unless `other` is the same configuration.
    pub fn ensure_same(&self, other: &FixedConfig) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(self.to_string(), other.to_string()))
        }
    }

    #[inline]
    pub fn mask(&self) -> u64 {
        if self.bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.bits) - 1
        }
    }

    #[inline]
    pub fn reduce(&self, v: u64) -> u64 {
        v & self.mask()
    }

    /// Bytes per ring element on the wire.
    #[inline]
    pub fn elem_bytes(&self) -> usize {
        (self.bits / 8) as usize
    }

    /// Signed (two's complement) reading of a reduced ring word.
    #[inline]
    pub fn to_signed(&self, v: u64) -> i64 {
        let shift = 64 - self.bits;
        ((v << shift) as i64) >> shift
    }

    #[inline]
    pub fn from_signed(&self, v: i64) -> u64 {
        self.reduce(v as u64)
    }

    #[inline]
    pub fn msb(&self, v: u64) -> bool {
        (v >> (self.bits - 1)) & 1 == 1
    }

    /// Value of one unit in the last place.
    pub fn ulp(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Largest magnitude `encode` accepts (exclusive): `2^{n-f-1}`.
    pub fn range_limit(&self) -> f64 {
        ((self.bits - self.frac_bits - 1) as f64).exp2()
    }

    pub fn encode_raw(&self, x: f64) -> Result<u64> {
        let limit = self.range_limit();
        if !x.is_finite() || x.abs() >= limit {
            return Err(Error::Overflow { value: x, limit });
        }
        // f64::round is half-away-from-zero.
        let scaled = (x * (self.frac_bits as f64).exp2()).round();
        let max = ((self.bits - 1) as f64).exp2();
        if scaled.abs() >= max {
            return Err(Error::Overflow { value: x, limit });
        }
        Ok(self.from_signed(scaled as i64))
    }

    /// Encodes with wrap-around instead of a range check.
    pub fn encode_wrapping(&self, x: f64) -> u64 {
        let scaled = (x * (self.frac_bits as f64).exp2()).round();
        self.from_signed(scaled as i64)
    }

    #[inline]
    pub fn decode_raw(&self, v: u64) -> f64 {
        self.to_signed(v) as f64 * self.ulp()
    }

    /// Arithmetic right shift by `f` in the signed reading.
    #[inline]
    pub fn trunc_raw(&self, v: u64) -> u64 {
        self.from_signed(self.to_signed(v) >> self.frac_bits)
    }

    /// Shift by `f` rounding to nearest, ties toward positive infinity.
    /// Unbiased in expectation, unlike `trunc_raw`, which matters when many
    /// rescaled products are summed.
    #[inline]
    pub fn round_shift_raw(&self, v: u64) -> u64 {
        let half = 1i64 << (self.frac_bits - 1);
        self.from_signed(self.to_signed(v).wrapping_add(half) >> self.frac_bits)
    }

    /// Local truncation of one additive share.
    ///
    /// Party 0 shifts its share, party 1 shifts the negation of its share and
    /// negates back. The reconstructed result is within one ulp of the true
    /// truncation unless the shares wrap around the secret, which happens with
    /// probability about `|x| / 2^{n-f}`.
    #[inline]
    pub fn trunc_share_raw(&self, party: PartyId, v: u64) -> u64 {
        match party {
            PartyId::P0 => v >> self.frac_bits,
            PartyId::P1 => self.reduce((self.reduce(v.wrapping_neg()) >> self.frac_bits).wrapping_neg()),
        }
    }

    /// A short tag identifying the configuration, used during synchronization.
    pub fn fingerprint(&self) -> u64 {
        (self.bits as u64) | ((self.frac_bits as u64) << 8) | ((self.lambda as u64) << 16)
    }
}

/// One element of Z_{2^n}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RingElement {
    value: u64,
    cfg: FixedConfig,
}

impl RingElement {
    pub fn new(value: u64, cfg: FixedConfig) -> Self {
        Self { value: cfg.reduce(value), cfg }
    }

    pub fn zero(cfg: FixedConfig) -> Self {
        Self { value: 0, cfg }
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn cfg(&self) -> FixedConfig {
        self.cfg
    }

    pub fn signed(&self) -> i64 {
        self.cfg.to_signed(self.value)
    }

    pub fn neg(self) -> Self {
        Self::new(self.value.wrapping_neg(), self.cfg)
    }
}

impl fmt::Display for RingElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

/// `round(x * 2^f) mod 2^n`, rejecting `|x| >= 2^{n-f-1}`.
pub fn encode(x: f64, cfg: FixedConfig) -> Result<RingElement> {
    Ok(RingElement { value: cfg.encode_raw(x)?, cfg })
}

pub fn decode(r: RingElement) -> f64 {
    r.cfg.decode_raw(r.value)
}

pub fn ring_add(a: RingElement, b: RingElement) -> Result<RingElement> {
    a.cfg.ensure_same(&b.cfg)?;
    Ok(RingElement::new(a.value.wrapping_add(b.value), a.cfg))
}

pub fn ring_sub(a: RingElement, b: RingElement) -> Result<RingElement> {
    a.cfg.ensure_same(&b.cfg)?;
    Ok(RingElement::new(a.value.wrapping_sub(b.value), a.cfg))
}

pub fn ring_mul(a: RingElement, b: RingElement) -> Result<RingElement> {
    a.cfg.ensure_same(&b.cfg)?;
    Ok(RingElement::new(a.value.wrapping_mul(b.value), a.cfg))
}

pub fn trunc(r: RingElement) -> RingElement {
    RingElement { value: r.cfg.trunc_raw(r.value), cfg: r.cfg }
}

/// A row-major tensor of ring elements under one configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedTensor {
    cfg: FixedConfig,
    shape: Vec<usize>,
    data: Vec<u64>,
}

impl FixedTensor {
    pub fn new(cfg: FixedConfig, shape: Vec<usize>, data: Vec<u64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {:?} holds {} elements, got {}", shape, len, data.len())));
        }
        let data = data.into_iter().map(|v| cfg.reduce(v)).collect();
        Ok(Self { cfg, shape, data })
    }

    pub fn zeros(cfg: FixedConfig, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { cfg, shape, data: vec![0; len] }
    }

    pub fn from_f64(cfg: FixedConfig, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let data = values.iter().map(|&x| cfg.encode_raw(x)).collect::<Result<Vec<_>>>()?;
        Self::new(cfg, shape, data)
    }

    pub fn from_tensor(cfg: FixedConfig, t: Tensor<u64>) -> Self {
        let (shape, data) = t.into_parts();
        Self { cfg, shape, data: data.into_iter().map(|v| cfg.reduce(v)).collect() }
    }

    pub fn into_tensor(self) -> Tensor<u64> {
        Tensor::from_parts(self.shape, self.data)
    }

    pub fn to_tensor(&self) -> Tensor<u64> {
        Tensor::from_parts(self.shape.clone(), self.data.clone())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| self.cfg.decode_raw(v)).collect()
    }

    pub fn cfg(&self) -> FixedConfig {
        self.cfg
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> RingElement {
        RingElement { value: self.data[i], cfg: self.cfg }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    fn check_same(&self, other: &FixedTensor) -> Result<()> {
        self.cfg.ensure_same(&other.cfg)?;
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    fn zip_with(&self, other: &FixedTensor, f: impl Fn(u64, u64) -> u64) -> Result<FixedTensor> {
        self.check_same(other)?;
        let mask = self.cfg.mask();
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b) & mask).collect();
        Ok(FixedTensor { cfg: self.cfg, shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &FixedTensor) -> Result<FixedTensor> {
        self.zip_with(other, u64::wrapping_add)
    }

    pub fn sub(&self, other: &FixedTensor) -> Result<FixedTensor> {
        self.zip_with(other, u64::wrapping_sub)
    }

    /// Elementwise ring product (no truncation).
    pub fn hadamard(&self, other: &FixedTensor) -> Result<FixedTensor> {
        self.zip_with(other, u64::wrapping_mul)
    }

    pub fn neg(&self) -> FixedTensor {
        self.map(u64::wrapping_neg)
    }

    pub fn scale(&self, c: u64) -> FixedTensor {
        self.map(|v| v.wrapping_mul(c))
    }

    pub fn map(&self, f: impl Fn(u64) -> u64) -> FixedTensor {
        let mask = self.cfg.mask();
        FixedTensor { cfg: self.cfg, shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v) & mask).collect() }
    }

    /// Arithmetic truncation of every element.
    pub fn trunc(&self) -> FixedTensor {
        let cfg = self.cfg;
        self.map(|v| cfg.trunc_raw(v))
    }

    /// Local share truncation of every element.
    pub fn trunc_share(&self, party: PartyId) -> FixedTensor {
        let cfg = self.cfg;
        self.map(|v| cfg.trunc_share_raw(party, v))
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::ShapeMismatch(format!("expected a matrix, got shape {:?}", s))),
        }
    }

    /// Exact ring matrix product `[m x k] * [k x p]`.
    pub fn matmul(&self, other: &FixedTensor) -> Result<FixedTensor> {
        self.cfg.ensure_same(&other.cfg)?;
        let (m, k) = self.dims2()?;
        let (k2, p) = other.dims2()?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul [{}x{}] * [{}x{}]", m, k, k2, p)));
        }
        let mut out = vec![0u64; m * p];
        for i in 0..m {
            let row = &mut out[i * p..(i + 1) * p];
            for t in 0..k {
                let a = self.data[i * k + t];
                if a == 0 {
                    continue;
                }
                let brow = &other.data[t * p..(t + 1) * p];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o = o.wrapping_add(a.wrapping_mul(b));
                }
            }
        }
        let mask = self.cfg.mask();
        out.iter_mut().for_each(|v| *v &= mask);
        Ok(FixedTensor { cfg: self.cfg, shape: vec![m, p], data: out })
    }

    pub fn transpose(&self) -> Result<FixedTensor> {
        let (r, c) = self.dims2()?;
        let mut data = vec![0u64; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(FixedTensor { cfg: self.cfg, shape: vec![c, r], data })
    }

    /// Sum over rows of a matrix, producing a vector of column sums.
    pub fn sum_rows(&self) -> Result<FixedTensor> {
        let (r, c) = self.dims2()?;
        let mut data = vec![0u64; c];
        for i in 0..r {
            for (d, &v) in data.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *d = d.wrapping_add(v);
            }
        }
        let mask = self.cfg.mask();
        data.iter_mut().for_each(|v| *v &= mask);
        Ok(FixedTensor { cfg: self.cfg, shape: vec![c], data })
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&self, row: &FixedTensor) -> Result<FixedTensor> {
        self.cfg.ensure_same(&row.cfg)?;
        let (r, c) = self.dims2()?;
        if row.len() != c {
            return Err(Error::ShapeMismatch(format!("row of {} added to [{}x{}]", row.len(), r, c)));
        }
        let mask = self.cfg.mask();
        let data = self.data.chunks(c).flat_map(|chunk| chunk.iter().zip(&row.data).map(move |(&a, &b)| a.wrapping_add(b) & mask)).collect();
        Ok(FixedTensor { cfg: self.cfg, shape: self.shape.clone(), data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn cfg(bits: u32, f: u32) -> FixedConfig {
        FixedConfig::new(bits, f).unwrap()
    }

    #[test]
    fn encode_examples() {
        let c = cfg(64, 13);
        assert_eq!(encode(0.0, c).unwrap().value(), 0);
        assert_eq!(encode(1.5, c).unwrap().value(), 12288);
        let c32 = cfg(32, 13);
        assert_eq!(encode(-1.0, c32).unwrap().value(), (1u64 << 32) - 8192);
    }

    #[test]
    fn decode_examples() {
        let c = cfg(64, 13);
        assert_eq!(decode(RingElement::new(12288, c)), 1.5);
        let c32 = cfg(32, 13);
        assert_eq!(decode(RingElement::new((1u64 << 32) - 8192, c32)), -1.0);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let c = cfg(16, 4);
        // 2^{16-4-1} = 2048
        assert!(matches!(encode(2048.0, c), Err(Error::Overflow { .. })));
        assert!(matches!(encode(-2048.0, c), Err(Error::Overflow { .. })));
        assert!(encode(2047.9, c).is_ok());
        assert!(encode(f64::NAN, c).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let c = cfg(16, 1);
        assert_eq!(encode(0.25, c).unwrap().signed(), 1);
        assert_eq!(encode(-0.25, c).unwrap().signed(), -1);
        assert_eq!(encode(0.75, c).unwrap().signed(), 2);
    }

    #[test]
    fn invalid_configs() {
        assert!(FixedConfig::new(12, 4).is_err());
        assert!(FixedConfig::new(8, 0).is_err());
        assert!(FixedConfig::new(8, 6).is_err());
        assert!(FixedConfig::new(8, 5).is_ok());
        let bad = FixedConfig { lambda: 64, ..FixedConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn round_trip_error_bound() {
        let c = cfg(64, 13);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(-4.0..4.0);
            worst = worst.max((decode(encode(x, c).unwrap()) - x).abs());
        }
        assert!(worst <= (-14f64).exp2(), "worst {}", worst);
    }

    #[test]
    fn exact_values_round_trip() {
        let c = cfg(16, 4);
        for v in -2048 * 16 + 1..2048 * 16 {
            let x = v as f64 / 16.0;
            assert_eq!(decode(encode(x, c).unwrap()), x);
        }
    }

    #[test]
    fn add_identity_and_wrap() {
        for bits in [8, 16, 32, 64] {
            let c = cfg(bits, 3);
            let x = RingElement::new(12345, c);
            assert_eq!(ring_add(x, RingElement::zero(c)).unwrap(), x);
            let top = RingElement::new(c.mask(), c);
            assert_eq!(ring_add(top, RingElement::new(1, c)).unwrap().value(), 0);
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let a = RingElement::new(1, cfg(32, 13));
        let b = RingElement::new(1, cfg(64, 13));
        assert!(matches!(ring_add(a, b), Err(Error::ConfigMismatch(..))));
        assert!(matches!(ring_mul(a, b), Err(Error::ConfigMismatch(..))));
    }

    #[test]
    fn associativity_random() {
        let c = cfg(64, 13);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let [a, b, d] = [0; 3].map(|_| RingElement::new(rng.gen(), c));
            let l = ring_add(ring_add(a, b).unwrap(), d).unwrap();
            let r = ring_add(a, ring_add(b, d).unwrap()).unwrap();
            assert_eq!(l, r);
        }
    }

    #[test]
    fn exhaustive_ops_at_n8() {
        let c = cfg(8, 3);
        for a in 0..256u64 {
            for b in 0..256u64 {
                let (x, y) = (RingElement::new(a, c), RingElement::new(b, c));
                assert_eq!(ring_add(x, y).unwrap().value(), (a + b) % 256);
                assert_eq!(ring_sub(x, y).unwrap().value(), (a + 256 - b) % 256);
                assert_eq!(ring_mul(x, y).unwrap().value(), (a * b) % 256);
            }
        }
    }

    // Exact rational oracle: the product of encoded integers, divided by 2^f
    // with floor, compared in integer arithmetic.
    #[test]
    fn trunc_examples() {
        let c = cfg(64, 13);
        let p = ring_mul(encode(2.0, c).unwrap(), encode(3.0, c).unwrap()).unwrap();
        assert!((trunc(p).signed() - encode(6.0, c).unwrap().signed()).abs() <= 1);
        let x = encode(3.7, c).unwrap();
        assert_eq!(trunc(ring_mul(x, encode(0.0, c).unwrap()).unwrap()).value(), 0);
        let p = ring_mul(encode(-1.5, c).unwrap(), encode(2.0, c).unwrap()).unwrap();
        assert!((trunc(p).signed() - encode(-3.0, c).unwrap().signed()).abs() <= 1);
    }

    #[test]
    fn trunc_exhaustive_n16_f4() {
        let c = cfg(16, 4);
        // Operands whose exact product stays in the signed range.
        for a in -181i64..=181 {
            for b in -181i64..=181 {
                let ea = RingElement::new(c.from_signed(a), c);
                let eb = RingElement::new(c.from_signed(b), c);
                let got = trunc(ring_mul(ea, eb).unwrap()).signed();
                let exact = (a * b) as f64 / 16.0;
                assert!((got as f64 - exact).abs() <= 1.0, "{}*{}: {} vs {}", a, b, got, exact);
            }
        }
    }

    #[test]
    fn share_truncation_within_one_ulp() {
        let c = cfg(64, 13);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let x: i64 = rng.gen_range(-(1i64 << 40)..(1i64 << 40));
            let s0: u64 = rng.gen();
            let s1 = c.from_signed(x).wrapping_sub(s0);
            let t = c.trunc_share_raw(PartyId::P0, s0).wrapping_add(c.trunc_share_raw(PartyId::P1, s1));
            let diff = c.to_signed(t) - (x >> 13);
            assert!(diff.abs() <= 1, "x={} diff={}", x, diff);
        }
    }

    #[test]
    fn matmul_and_transpose() {
        let c = cfg(32, 4);
        let a = FixedTensor::new(c, vec![2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let b = FixedTensor::new(c, vec![3, 2], vec![7, 8, 9, 10, 11, 12]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[58, 64, 139, 154]);
        assert_eq!(a.transpose().unwrap().data(), &[1, 4, 2, 5, 3, 6]);
        assert!(a.matmul(&a).is_err());
        assert_eq!(a.sum_rows().unwrap().data(), &[5, 7, 9]);
    }

    #[test]
    fn tensor_shape_checked() {
        let c = cfg(32, 4);
        assert!(FixedTensor::new(c, vec![2, 2], vec![1, 2, 3]).is_err());
        let a = FixedTensor::zeros(c, vec![2, 2]);
        let b = FixedTensor::zeros(c, vec![4]);
        assert!(a.add(&b).is_err());
    }
}
