//! Function secret sharing for the masked sign test behind secure ReLU.
//!
//! A key pair hides a uniform mask `α`. Given the public value
//! `x_pub = x + α`, the two evaluations sum to `1` when `signed(x_pub - α) ≥ 0`
//! and to `0` otherwise, as an unscaled ring element.
//!
//! Writing `x_pub - α` bitwise, its sign bit is
//! `msb(x_pub) ⊕ msb(α) ⊕ [low(x_pub) < low(α)]`, where `low` drops the top
//! bit. The keys carry a distributed comparison function (DCF) over the low
//! `n - 1` bits that outputs `β = ±1` below `low(α)`, plus shares of
//! `msb(α)`, so together they share `u = msb(α) ⊕ [low(x_pub) < low(α)]`.
//! Because `msb(x_pub)` is public, each server finishes the XOR locally.
//!
//! The DCF is a GGM tree: every node expands a 128-bit seed into two child
//! seeds, two control bits and two output words. Per-level correction words
//! make the two evaluations agree off the path to `low(α)`; value corrections
//! accumulate `β` exactly where the path turns right while `x` turns left.

mod prg;

use rand::{CryptoRng, Rng, RngCore};

pub use prg::{expand, Expansion};

use crate::beaver::{secure_mul_elementwise, VecTriple};
use crate::error::{Error, Result};
use crate::ring::{FixedConfig, FixedTensor, RingElement};
use crate::sharing::{split, PartyId, Share};
use crate::transport::{Channel, Reader, Writer};

/// Correction word for one tree level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelCorrection {
    pub seed: u128,
    pub value: u64,
    pub t_left: bool,
    pub t_right: bool,
}

/// One server's key for the masked sign test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComparisonKey {
    pub party: PartyId,
    pub cfg: FixedConfig,
    /// Additive share of `α`.
    pub mask_share: RingElement,
    /// Additive share of `msb(α)` as 0/1.
    pub sign_share: RingElement,
    pub root_seed: u128,
    /// `n - 1` levels, most significant bit first.
    pub levels: Vec<LevelCorrection>,
    pub output_correction: RingElement,
}

fn low_bits(cfg: FixedConfig) -> u32 {
    cfg.bits - 1
}

fn bit(v: u64, depth: u32, i: u32) -> usize {
    ((v >> (depth - 1 - i)) & 1) as usize
}

/// `(-1)^t · v` in the ring.
fn signed_by(t: bool, v: u64) -> u64 {
    if t {
        v.wrapping_neg()
    } else {
        v
    }
}

struct DcfKeys {
    roots: [u128; 2],
    levels: Vec<LevelCorrection>,
    output: u64,
}

/// DCF over `depth` bits: shares of `β` for inputs below `alpha`, else `0`.
fn dcf_gen<R: RngCore + CryptoRng>(cfg: FixedConfig, depth: u32, alpha: u64, beta: u64, rng: &mut R) -> DcfKeys {
    let mask = cfg.mask();
    let roots = [rng.gen::<u128>(), rng.gen::<u128>()];
    let mut s = roots;
    let mut t = [false, true];
    let mut v_alpha = 0u64;
    let mut levels = Vec::with_capacity(depth as usize);
    for i in 0..depth {
        let e = [expand(s[0]), expand(s[1])];
        let a_i = bit(alpha, depth, i);
        let (keep, lose) = (a_i, 1 - a_i);
        let seed = e[0].seeds[lose] ^ e[1].seeds[lose];
        let mut value = e[1].values[lose].wrapping_sub(e[0].values[lose]).wrapping_sub(v_alpha);
        if lose == 0 {
            value = value.wrapping_add(beta);
        }
        let value = signed_by(t[1], value) & mask;
        v_alpha = v_alpha
            .wrapping_sub(e[1].values[keep])
            .wrapping_add(e[0].values[keep])
            .wrapping_add(signed_by(t[1], value));
        let t_left = e[0].bits[0] ^ e[1].bits[0] ^ (a_i == 0);
        let t_right = e[0].bits[1] ^ e[1].bits[1] ^ (a_i == 1);
        let t_keep = if keep == 0 { t_left } else { t_right };
        for b in 0..2 {
            s[b] = e[b].seeds[keep] ^ if t[b] { seed } else { 0 };
            t[b] = e[b].bits[keep] ^ (t[b] & t_keep);
        }
        levels.push(LevelCorrection { seed, value, t_left, t_right });
    }
    let output = signed_by(t[1], (s[1] as u64).wrapping_sub(s[0] as u64).wrapping_sub(v_alpha)) & mask;
    DcfKeys { roots, levels, output }
}

fn dcf_eval(party: PartyId, cfg: FixedConfig, root: u128, levels: &[LevelCorrection], output: u64, x: u64) -> u64 {
    let depth = levels.len() as u32;
    let neg = party == PartyId::P1;
    let mut s = root;
    let mut t = neg;
    let mut acc = 0u64;
    for (i, cw) in levels.iter().enumerate() {
        let e = expand(s);
        let dir = bit(x, depth, i as u32);
        let v = e.values[dir].wrapping_add(if t { cw.value } else { 0 });
        acc = acc.wrapping_add(signed_by(neg, v));
        let t_cw = if dir == 0 { cw.t_left } else { cw.t_right };
        s = e.seeds[dir] ^ if t { cw.seed } else { 0 };
        t = e.bits[dir] ^ (t & t_cw);
    }
    let last = (s as u64).wrapping_add(if t { output } else { 0 });
    acc.wrapping_add(signed_by(neg, last)) & cfg.mask()
}

/// Generates a key pair for a fresh uniform mask.
pub fn keygen_comparison<R: RngCore + CryptoRng>(
    cfg: FixedConfig,
    rng: &mut R,
) -> (RingElement, ComparisonKey, ComparisonKey) {
    let alpha = RingElement::new(rng.next_u64(), cfg);
    let (k0, k1) = keygen_with_mask(alpha, rng);
    (alpha, k0, k1)
}

/// Generates a key pair for a caller-chosen mask.
pub fn keygen_with_mask<R: RngCore + CryptoRng>(alpha: RingElement, rng: &mut R) -> (ComparisonKey, ComparisonKey) {
    let cfg = alpha.cfg();
    let depth = low_bits(cfg);
    let a = alpha.value();
    let a_msb = cfg.msb(a);
    let low = a & (cfg.mask() >> 1);
    let one = 1u64;
    let beta = if a_msb { one.wrapping_neg() & cfg.mask() } else { one };
    let dcf = dcf_gen(cfg, depth, low, beta, rng);
    let (m0, m1) = split(&alpha, rng).expect("single configuration");
    let (g0, g1) = split(&RingElement::new(a_msb as u64, cfg), rng).expect("single configuration");
    let key = |party: PartyId, m: Share<RingElement>, g: Share<RingElement>| ComparisonKey {
        party,
        cfg,
        mask_share: m.value,
        sign_share: g.value,
        root_seed: dcf.roots[party.index()],
        levels: dcf.levels.clone(),
        output_correction: RingElement::new(dcf.output, cfg),
    };
    (key(PartyId::P0, m0, g0), key(PartyId::P1, m1, g1))
}

impl ComparisonKey {
    pub fn mask(&self) -> Share<RingElement> {
        Share::new(self.party, self.mask_share)
    }

    /// Serialized size in bytes for a configuration.
    pub fn serialized_len(cfg: FixedConfig) -> usize {
        let w = cfg.elem_bytes();
        1 + 2 * w + 16 + (cfg.bits as usize - 1) * (16 + w + 1) + w
    }

    /// Fixed little-endian layout; see `docs/wire-format.md`.
    pub fn write(&self, w: &mut Writer) {
        let cfg = self.cfg;
        w.u8(self.party.index() as u8)
            .ring(cfg, self.mask_share.value())
            .ring(cfg, self.sign_share.value())
            .u128(self.root_seed);
        for cw in &self.levels {
            w.u128(cw.seed).ring(cfg, cw.value).u8(cw.t_left as u8 | (cw.t_right as u8) << 1);
        }
        w.ring(cfg, self.output_correction.value());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(Self::serialized_len(self.cfg));
        self.write(&mut w);
        w.finish()
    }

    pub fn read(cfg: FixedConfig, r: &mut Reader<'_>) -> Result<Self> {
        let party = match r.u8()? {
            0 => PartyId::P0,
            1 => PartyId::P1,
            p => return Err(Error::FrameCorrupt(format!("key party byte {}", p))),
        };
        let mask_share = RingElement::new(r.ring(cfg)?, cfg);
        let sign_share = RingElement::new(r.ring(cfg)?, cfg);
        let root_seed = r.u128()?;
        let levels = (0..low_bits(cfg))
            .map(|_| {
                let seed = r.u128()?;
                let value = r.ring(cfg)?;
                let t = r.u8()?;
                if t > 3 {
                    return Err(Error::FrameCorrupt(format!("control byte {}", t)));
                }
                Ok(LevelCorrection { seed, value, t_left: t & 1 == 1, t_right: t & 2 == 2 })
            })
            .collect::<Result<Vec<_>>>()?;
        let output_correction = RingElement::new(r.ring(cfg)?, cfg);
        Ok(Self { party, cfg, mask_share, sign_share, root_seed, levels, output_correction })
    }

    pub fn from_bytes(cfg: FixedConfig, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let k = Self::read(cfg, &mut r)?;
        r.finish()?;
        Ok(k)
    }
}

/// This server's share of `[signed(x_pub - α) ≥ 0]`.
pub fn eval_comparison(party: PartyId, k: &ComparisonKey, x_pub: RingElement) -> Result<Share<RingElement>> {
    if k.party != party {
        return Err(Error::PartyMismatch { expected: party, got: k.party });
    }
    let cfg = k.cfg;
    cfg.ensure_same(&x_pub.cfg())?;
    let x = x_pub.value();
    let low = x & (cfg.mask() >> 1);
    let lt = dcf_eval(party, cfg, k.root_seed, &k.levels, k.output_correction.value(), low);
    let u = lt.wrapping_add(k.sign_share.value());
    // bit = 1 - (msb(x_pub) XOR u); for public msb(x_pub) this is linear in u.
    let v = if cfg.msb(x) {
        u
    } else {
        match party {
            PartyId::P0 => 1u64.wrapping_sub(u),
            PartyId::P1 => u.wrapping_neg(),
        }
    };
    Ok(Share::new(party, RingElement::new(v & cfg.mask(), cfg)))
}

/// Evaluates one key per element of `x_pub`.
pub fn eval_comparison_batch(
    party: PartyId,
    keys: &[ComparisonKey],
    x_pub: &FixedTensor,
) -> Result<Share<FixedTensor>> {
    if keys.len() != x_pub.len() {
        return Err(Error::ShapeMismatch(format!("{} keys for {} inputs", keys.len(), x_pub.len())));
    }
    let cfg = x_pub.cfg();
    let bits = keys
        .iter()
        .zip(x_pub.data())
        .map(|(k, &x)| eval_comparison(party, k, RingElement::new(x, cfg)).map(|s| s.value.value()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Share::new(party, FixedTensor::new(cfg, x_pub.shape().to_vec(), bits)?))
}

/// Shares of `bit ⊙ x`: ReLU of `x` when `bit` shares its sign test.
pub fn relu_sign_to_select(
    bits: &Share<FixedTensor>,
    x: &Share<FixedTensor>,
    triple: VecTriple,
    chan: &mut Channel,
) -> Result<Share<FixedTensor>> {
    secure_mul_elementwise(bits, x, triple, chan)
}

/// One server's single-use keys for one batch, in gate order.
#[derive(Debug, Default)]
pub struct KeyBundle {
    keys: Vec<Option<ComparisonKey>>,
}

impl KeyBundle {
    pub fn new(keys: Vec<ComparisonKey>) -> Self {
        Self { keys: keys.into_iter().map(Some).collect() }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Keys not yet taken, in gate order.
    pub fn iter(&self) -> impl Iterator<Item = &ComparisonKey> {
        self.keys.iter().flatten()
    }

    /// Takes key `i`; a second take of the same key fails.
    pub fn take(&mut self, i: usize) -> Result<ComparisonKey> {
        self.keys.get_mut(i).and_then(Option::take).ok_or(Error::KeyExhausted(i))
    }

    /// Takes keys `start..start + n`.
    pub fn take_range(&mut self, start: usize, n: usize) -> Result<Vec<ComparisonKey>> {
        (start..start + n).map(|i| self.take(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beaver::gen_vec_triple;
    use crate::sharing::{reconstruct, seeded_rng};
    use crate::transport::{in_process_pair, Instruments, Role};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn oracle(cfg: FixedConfig, alpha: u64, x: u64) -> u64 {
        (cfg.to_signed(x.wrapping_sub(alpha)) >= 0) as u64
    }

    fn eval_pair(k0: &ComparisonKey, k1: &ComparisonKey, x: RingElement) -> u64 {
        let a = eval_comparison(PartyId::P0, k0, x).unwrap();
        let b = eval_comparison(PartyId::P1, k1, x).unwrap();
        reconstruct(&a, &b).unwrap().value()
    }

    #[test]
    fn small_examples() {
        let cfg = FixedConfig::new(8, 2).unwrap();
        let mut rng = seeded_rng(1, 0);
        let (k0, k1) = keygen_with_mask(RingElement::new(5, cfg), &mut rng);
        assert_eq!(eval_pair(&k0, &k1, RingElement::new(7, cfg)), 1);
        assert_eq!(eval_pair(&k0, &k1, RingElement::new(3, cfg)), 0);
        assert_eq!(eval_pair(&k0, &k1, RingElement::new(5, cfg)), 1);
    }

    #[test]
    fn random_keys_match_full_table_n8() {
        let cfg = FixedConfig::new(8, 2).unwrap();
        let mut rng = seeded_rng(2, 0);
        for _ in 0..64 {
            let (alpha, k0, k1) = keygen_comparison(cfg, &mut rng);
            for x in 0..256u64 {
                assert_eq!(eval_pair(&k0, &k1, RingElement::new(x, cfg)), oracle(cfg, alpha.value(), x));
            }
        }
    }

    #[test]
    fn random_samples_n64() {
        let cfg = FixedConfig::default();
        let mut rng = seeded_rng(3, 0);
        for _ in 0..200 {
            let (alpha, k0, k1) = keygen_comparison(cfg, &mut rng);
            for _ in 0..50 {
                let x = rng.next_u64();
                assert_eq!(eval_pair(&k0, &k1, RingElement::new(x, cfg)), oracle(cfg, alpha.value(), x));
            }
            // boundary inputs around the mask
            for d in [0u64, 1, u64::MAX, 1 << 63, (1 << 63) - 1] {
                let x = alpha.value().wrapping_add(d);
                assert_eq!(eval_pair(&k0, &k1, RingElement::new(x, cfg)), oracle(cfg, alpha.value(), x));
            }
        }
    }

    #[test]
    fn other_widths() {
        for bits in [16u32, 32] {
            let cfg = FixedConfig::new(bits, 4).unwrap();
            let mut rng = seeded_rng(4, bits as u64);
            for _ in 0..100 {
                let (alpha, k0, k1) = keygen_comparison(cfg, &mut rng);
                for _ in 0..50 {
                    let x = cfg.reduce(rng.next_u64());
                    assert_eq!(eval_pair(&k0, &k1, RingElement::new(x, cfg)), oracle(cfg, alpha.value(), x));
                }
            }
        }
    }

    #[test]
    fn keygen_is_deterministic_under_seed() {
        let cfg = FixedConfig::default();
        let a = keygen_comparison(cfg, &mut seeded_rng(5, 0));
        let b = keygen_comparison(cfg, &mut seeded_rng(5, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn serialization_round_trips_with_fixed_size() {
        for bits in [8u32, 16, 32, 64] {
            let cfg = FixedConfig::new(bits, 3).unwrap();
            let (_, k0, k1) = keygen_comparison(cfg, &mut seeded_rng(6, 0));
            for k in [k0, k1] {
                let bytes = k.to_bytes();
                assert_eq!(bytes.len(), ComparisonKey::serialized_len(cfg));
                assert_eq!(ComparisonKey::from_bytes(cfg, &bytes).unwrap(), k);
            }
        }
        assert_eq!(ComparisonKey::serialized_len(FixedConfig::default()), 1616);
    }

    #[test]
    fn wrong_party_is_rejected() {
        let cfg = FixedConfig::new(8, 2).unwrap();
        let (_, k0, _) = keygen_comparison(cfg, &mut seeded_rng(7, 0));
        assert!(matches!(
            eval_comparison(PartyId::P1, &k0, RingElement::new(0, cfg)),
            Err(Error::PartyMismatch { .. })
        ));
    }

    #[test]
    fn bundle_keys_are_single_use() {
        let cfg = FixedConfig::new(8, 2).unwrap();
        let (_, k0, _) = keygen_comparison(cfg, &mut seeded_rng(8, 0));
        let mut b = KeyBundle::new(vec![k0.clone(), k0]);
        b.take(1).unwrap();
        assert!(matches!(b.take(1), Err(Error::KeyExhausted(1))));
        assert!(matches!(b.take(2), Err(Error::KeyExhausted(2))));
        assert!(b.take_range(0, 1).is_ok());
    }

    /// Root-seed bits of a single key do not depend on the mask.
    #[test]
    fn root_seed_bits_independent_of_mask() {
        let cfg = FixedConfig::new(8, 2).unwrap();
        let mut rng = seeded_rng(9, 0);
        let trials = 10_000;
        let mut ones = [[0u64; 128]; 2];
        for (case, alpha) in [0u64, 128].into_iter().enumerate() {
            for _ in 0..trials {
                let (k0, _) = keygen_with_mask(RingElement::new(alpha, cfg), &mut rng);
                for (j, o) in ones[case].iter_mut().enumerate() {
                    *o += ((k0.root_seed >> j) & 1) as u64;
                }
            }
        }
        let chi = ChiSquared::new(1.0).unwrap();
        for j in 0..128 {
            // 2x2 contingency: mask case by bit value.
            let table = [[ones[0][j], trials - ones[0][j]], [ones[1][j], trials - ones[1][j]]];
            let n = 2.0 * trials as f64;
            let mut stat = 0.0;
            for r in 0..2 {
                for c in 0..2 {
                    let row = (table[r][0] + table[r][1]) as f64;
                    let col = (table[0][c] + table[1][c]) as f64;
                    let exp = row * col / n;
                    stat += (table[r][c] as f64 - exp).powi(2) / exp;
                }
            }
            assert!(1.0 - chi.cdf(stat) > 0.001, "bit {} p too small", j);
        }
    }

    #[test]
    fn masked_relu_exhaustive_n8() {
        let cfg = FixedConfig::new(8, 2).unwrap();
        let inst = Instruments::new(0);
        let (mut c0, mut c1) = in_process_pair(Role::P0, Role::P1, inst);
        let mut dealer = seeded_rng(10, 0);
        let mut sh = seeded_rng(11, 0);
        let x = FixedTensor::new(cfg, vec![256], (0..256).collect()).unwrap();
        let mut keys = (vec![], vec![]);
        let mut alphas = vec![];
        for _ in 0..256 {
            let (a, k0, k1) = keygen_comparison(cfg, &mut dealer);
            alphas.push(a.value());
            keys.0.push(k0);
            keys.1.push(k1);
        }
        let alpha = FixedTensor::new(cfg, vec![256], alphas).unwrap();
        let x_pub = x.add(&alpha).unwrap();
        let (x0, x1) = split(&x, &mut sh).unwrap();
        let (t0, t1) = gen_vec_triple(256, cfg, &mut dealer);
        let xp = x_pub.clone();
        let h = std::thread::spawn(move || {
            let b = eval_comparison_batch(PartyId::P1, &keys.1, &xp).unwrap();
            relu_sign_to_select(&b, &x1, t1, &mut c1).unwrap()
        });
        let b0 = eval_comparison_batch(PartyId::P0, &keys.0, &x_pub).unwrap();
        let y0 = relu_sign_to_select(&b0, &x0, t0, &mut c0).unwrap();
        let y = reconstruct(&y0, &h.join().unwrap()).unwrap();
        for v in 0..256u64 {
            let expected = if cfg.to_signed(v) >= 0 { v } else { 0 };
            assert_eq!(y.data()[v as usize], expected);
        }
    }
}
