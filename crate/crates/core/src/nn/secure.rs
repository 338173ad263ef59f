//! Server-side layers on additive shares.
//!
//! Every function here is run by both servers in the same order over their
//! shared channel. Inputs and outputs are shares at fixed-point scale `f`.

use crate::beaver::{secure_matmul, secure_mul_elementwise, MatTriple, VecTriple};
use crate::error::{Error, Result};
use crate::fss::{eval_comparison_batch, relu_sign_to_select, ComparisonKey};
use crate::ring::{FixedTensor, RingElement};
use crate::sharing::Share;
use crate::transport::{Channel, PayloadKind, Reader, Writer};

/// `trunc(X * W) + b` on shares of `X: [B, in]`, `W: [in, out]`, `b: [out]`.
pub fn fc_secure_forward(
    x: &Share<FixedTensor>,
    w: &Share<FixedTensor>,
    b: &Share<FixedTensor>,
    t: MatTriple,
    chan: &mut Channel,
) -> Result<Share<FixedTensor>> {
    let z = secure_matmul(x, w, t, chan)?.trunc();
    Ok(Share::new(z.party, z.value.add_row(&b.value)?))
}

/// Shares of `(dX, dW, db)` from shares of `dY`, the cached input `X` and
/// the pre-update weights `W`. Uses one matrix triple for `dY * W^T` and one
/// for `X^T * dY`.
pub fn fc_secure_backward(
    grad: &Share<FixedTensor>,
    x: &Share<FixedTensor>,
    w: &Share<FixedTensor>,
    t_dx: MatTriple,
    t_dw: MatTriple,
    chan: &mut Channel,
) -> Result<(Share<FixedTensor>, Share<FixedTensor>, Share<FixedTensor>)> {
    let p = grad.party;
    let wt = Share::new(w.party, w.value.transpose()?);
    let xt = Share::new(x.party, x.value.transpose()?);
    let gx = secure_matmul(grad, &wt, t_dx, chan)?.trunc();
    let gw = secure_matmul(&xt, grad, t_dw, chan)?.trunc();
    let gb = Share::new(p, grad.value.sum_rows()?);
    Ok((gx, gw, gb))
}

/// Opens `x + α` with the peer, evaluates one comparison key per element
/// and selects. Returns shares of `ReLU(x)` and of the sign bits.
pub fn relu_secure_forward(
    x: &Share<FixedTensor>,
    keys: &[ComparisonKey],
    select: VecTriple,
    chan: &mut Channel,
) -> Result<(Share<FixedTensor>, Share<FixedTensor>)> {
    let party = x.party;
    let cfg = x.value.cfg();
    if keys.len() != x.value.len() {
        return Err(Error::KeyExhausted(keys.len()));
    }
    if let Some(k) = keys.iter().find(|k| k.party != party) {
        return Err(Error::PartyMismatch { expected: party, got: k.party });
    }
    let alpha = FixedTensor::new(cfg, x.value.shape().to_vec(), keys.iter().map(|k| k.mask_share.value()).collect())?;
    let masked = x.value.add(&alpha)?;
    let mut w = Writer::with_capacity(masked.len() * cfg.elem_bytes());
    w.ring_slice(cfg, masked.data());
    chan.send(PayloadKind::Opening, w.finish())?;
    let payload = chan.expect(PayloadKind::Opening)?;
    let mut r = Reader::new(&payload);
    let theirs = r.tensor(cfg, x.value.shape())?;
    r.finish()?;
    let x_pub = masked.add(&theirs)?;
    let bits = eval_comparison_batch(party, keys, &x_pub)?;
    let y = relu_sign_to_select(&bits, x, select, chan)?;
    Ok((y, bits))
}

/// Shares of `grad ⊙ bits`; bits are unscaled so no truncation follows.
pub fn relu_secure_backward(
    grad: &Share<FixedTensor>,
    bits: &Share<FixedTensor>,
    t: VecTriple,
    chan: &mut Channel,
) -> Result<Share<FixedTensor>> {
    secure_mul_elementwise(grad, bits, t, chan)
}

/// `param - trunc(lr * grad)` on shares, with `lr` public.
pub fn sgd_update_share(
    param: &Share<FixedTensor>,
    grad: &Share<FixedTensor>,
    lr: RingElement,
) -> Result<Share<FixedTensor>> {
    let step = grad.mul_public(lr)?.trunc();
    param.sub(&step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beaver::{gen_mat_triple, gen_vec_triple};
    use crate::fss::keygen_comparison;
    use crate::nn::arith::FixedArith;
    use crate::nn::layers;
    use crate::ring::FixedConfig;
    use crate::sharing::{reconstruct, seeded_rng, split, PartyId};
    use crate::tensor::Tensor;
    use crate::transport::{in_process_pair, Instruments, Role};
    use rand::Rng;

    fn within(a: &FixedTensor, b: &[u64], ulps: i64) -> bool {
        let cfg = a.cfg();
        a.data().iter().zip(b).all(|(&x, &y)| (cfg.to_signed(x.wrapping_sub(y) & cfg.mask())).abs() <= ulps)
    }

    fn rand_real(cfg: FixedConfig, shape: Vec<usize>, scale: f64, rng: &mut impl Rng) -> FixedTensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        FixedTensor::from_f64(cfg, shape, &v).unwrap()
    }

    /// Runs a two-party closure on two threads over a fresh channel pair.
    fn both<T: Send + 'static>(f: impl Fn(PartyId, &mut Channel) -> T + Send + Sync + Clone + 'static) -> (T, T) {
        let (mut a, mut b) = in_process_pair(Role::P0, Role::P1, Instruments::new(0));
        let g = f.clone();
        let h = std::thread::spawn(move || g(PartyId::P1, &mut b));
        (f(PartyId::P0, &mut a), h.join().unwrap())
    }

    fn pick<T>(party: PartyId, pair: (T, T)) -> T {
        match party {
            PartyId::P0 => pair.0,
            PartyId::P1 => pair.1,
        }
    }

    #[test]
    fn fc_forward_matches_plain() {
        let cfg = FixedConfig::default();
        let a = FixedArith::new(cfg);
        let (r0, r1) = both(move |party, chan| {
            let mut rng = seeded_rng(1, 0);
            let mut out = Vec::new();
            for _ in 0..100 {
                let x = rand_real(cfg, vec![4, 64], 1.0, &mut rng);
                let w = rand_real(cfg, vec![64, 32], 0.2, &mut rng);
                let b = rand_real(cfg, vec![32], 0.2, &mut rng);
                let xs = pick(party, split(&x, &mut rng).unwrap());
                let ws = pick(party, split(&w, &mut rng).unwrap());
                let bs = pick(party, split(&b, &mut rng).unwrap());
                let t = pick(party, gen_mat_triple(4, 64, 32, cfg, &mut rng));
                let y = fc_secure_forward(&xs, &ws, &bs, t, chan).unwrap();
                out.push((x, w, b, y));
            }
            out
        });
        for ((x, w, b, y0), (_, _, _, y1)) in r0.into_iter().zip(r1) {
            let plain = layers::fc_plain_forward(&a, &x.to_tensor(), &w.to_tensor(), &b.to_tensor()).unwrap();
            assert!(within(&reconstruct(&y0, &y1).unwrap(), plain.data(), 2));
        }
    }

    #[test]
    fn fc_zero_weights_give_bias_and_degenerate_shape() {
        let cfg = FixedConfig::default();
        let (r0, r1) = both(move |party, chan| {
            let mut rng = seeded_rng(2, 0);
            let x = rand_real(cfg, vec![3, 5], 1.0, &mut rng);
            let w = FixedTensor::zeros(cfg, vec![5, 2]);
            let b = FixedTensor::from_f64(cfg, vec![2], &[0.5, -1.25]).unwrap();
            let xs = pick(party, split(&x, &mut rng).unwrap());
            let ws = pick(party, split(&w, &mut rng).unwrap());
            let bs = pick(party, split(&b, &mut rng).unwrap());
            let t = pick(party, gen_mat_triple(3, 5, 2, cfg, &mut rng));
            let y = fc_secure_forward(&xs, &ws, &bs, t, chan).unwrap();

            let x1 = FixedTensor::from_f64(cfg, vec![1, 1], &[1.5]).unwrap();
            let w1 = FixedTensor::from_f64(cfg, vec![1, 1], &[-2.0]).unwrap();
            let b1 = FixedTensor::from_f64(cfg, vec![1], &[0.25]).unwrap();
            let xs = pick(party, split(&x1, &mut rng).unwrap());
            let ws = pick(party, split(&w1, &mut rng).unwrap());
            let bs = pick(party, split(&b1, &mut rng).unwrap());
            let t = pick(party, gen_mat_triple(1, 1, 1, cfg, &mut rng));
            (y, fc_secure_forward(&xs, &ws, &bs, t, chan).unwrap())
        });
        let y = reconstruct(&r0.0, &r1.0).unwrap();
        for row in y.to_f64().chunks(2) {
            assert!((row[0] - 0.5).abs() <= cfg.ulp() && (row[1] + 1.25).abs() <= cfg.ulp());
        }
        let s = reconstruct(&r0.1, &r1.1).unwrap().to_f64()[0];
        assert!((s - (-2.75)).abs() <= 2.0 * cfg.ulp());
    }

    #[test]
    fn fc_backward_and_sgd_match_plain() {
        let cfg = FixedConfig::default();
        let a = FixedArith::new(cfg);
        let lr = cfg.encode_raw(0.1).unwrap();
        let (r0, r1) = both(move |party, chan| {
            let mut rng = seeded_rng(3, 0);
            let x = rand_real(cfg, vec![4, 16], 1.0, &mut rng);
            let w = rand_real(cfg, vec![16, 8], 0.3, &mut rng);
            let g = rand_real(cfg, vec![4, 8], 0.1, &mut rng);
            let xs = pick(party, split(&x, &mut rng).unwrap());
            let ws = pick(party, split(&w, &mut rng).unwrap());
            let gs = pick(party, split(&g, &mut rng).unwrap());
            let t1 = pick(party, gen_mat_triple(4, 8, 16, cfg, &mut rng));
            let t2 = pick(party, gen_mat_triple(16, 4, 8, cfg, &mut rng));
            let (gx, gw, gb) = fc_secure_backward(&gs, &xs, &ws, t1, t2, chan).unwrap();
            let w_new = sgd_update_share(&ws, &gw, RingElement::new(lr, cfg)).unwrap();
            (x, w, g, gx, gw, gb, w_new)
        });
        let (x, w, g, gx0, gw0, gb0, wn0) = r0;
        let (_, _, _, gx1, gw1, gb1, wn1) = r1;
        let (px, pw, pb) = layers::fc_plain_backward(&a, &g.to_tensor(), &x.to_tensor(), &w.to_tensor()).unwrap();
        assert!(within(&reconstruct(&gx0, &gx1).unwrap(), px.data(), 2));
        assert!(within(&reconstruct(&gw0, &gw1).unwrap(), pw.data(), 2));
        assert_eq!(reconstruct(&gb0, &gb1).unwrap().data(), pb.data());
        let mut plain_w = w.to_tensor();
        layers::sgd_update(&a, &mut plain_w, &pw, lr).unwrap();
        assert!(within(&reconstruct(&wn0, &wn1).unwrap(), plain_w.data(), 4));
    }

    #[test]
    fn sgd_share_edge_cases() {
        let cfg = FixedConfig::default();
        let mut rng = seeded_rng(4, 0);
        let p = rand_real(cfg, vec![6], 1.0, &mut rng);
        let (p0, p1) = split(&p, &mut rng).unwrap();
        let (z0, z1) = split(&FixedTensor::zeros(cfg, vec![6]), &mut rng).unwrap();
        let lr = RingElement::new(cfg.encode_raw(0.5).unwrap(), cfg);
        let u0 = sgd_update_share(&p0, &z0, lr).unwrap();
        let u1 = sgd_update_share(&p1, &z1, lr).unwrap();
        assert!(within(&reconstruct(&u0, &u1).unwrap(), p.data(), 1));
        let (g0, g1) = split(&rand_real(cfg, vec![6], 1.0, &mut rng), &mut rng).unwrap();
        let zero = RingElement::zero(cfg);
        let u0 = sgd_update_share(&p0, &g0, zero).unwrap();
        let u1 = sgd_update_share(&p1, &g1, zero).unwrap();
        assert_eq!(reconstruct(&u0, &u1).unwrap(), p);
    }

    #[test]
    fn relu_secure_exhaustive_n8_and_backward() {
        let cfg = FixedConfig::new(8, 2).unwrap();
        let (r0, r1) = both(move |party, chan| {
            let mut rng = seeded_rng(5, 0);
            let x = FixedTensor::new(cfg, vec![2, 128], (0..256).collect()).unwrap();
            let xs = pick(party, split(&x, &mut rng).unwrap());
            let keys: Vec<ComparisonKey> = (0..256)
                .map(|_| {
                    let (_, k0, k1) = keygen_comparison(cfg, &mut rng);
                    pick(party, (k0, k1))
                })
                .collect();
            let t = pick(party, gen_vec_triple(256, cfg, &mut rng));
            let (y, bits) = relu_secure_forward(&xs, &keys, t, chan).unwrap();
            let g = FixedTensor::new(cfg, vec![2, 128], vec![3; 256]).unwrap();
            let gs = pick(party, split(&g, &mut rng).unwrap());
            let t = pick(party, gen_vec_triple(256, cfg, &mut rng));
            let gx = relu_secure_backward(&gs, &bits, t, chan).unwrap();
            (y, gx)
        });
        let y = reconstruct(&r0.0, &r1.0).unwrap();
        let gx = reconstruct(&r0.1, &r1.1).unwrap();
        let a = FixedArith::new(cfg);
        let (plain, mask) = layers::relu_plain_forward(&a, &Tensor::new(vec![256], (0..256).collect()).unwrap());
        assert_eq!(y.data(), plain.data());
        for (v, m) in gx.data().iter().zip(mask) {
            assert_eq!(*v, if m { 3 } else { 0 });
        }
    }

    #[test]
    fn relu_secure_simple_values() {
        let cfg = FixedConfig::default();
        let (r0, r1) = both(move |party, chan| {
            let mut rng = seeded_rng(6, 0);
            let x = FixedTensor::from_f64(cfg, vec![1, 2], &[1.0, -1.0]).unwrap();
            let xs = pick(party, split(&x, &mut rng).unwrap());
            let keys: Vec<ComparisonKey> = (0..2)
                .map(|_| {
                    let (_, k0, k1) = keygen_comparison(cfg, &mut rng);
                    pick(party, (k0, k1))
                })
                .collect();
            let t = pick(party, gen_vec_triple(2, cfg, &mut rng));
            relu_secure_forward(&xs, &keys, t, chan).unwrap().0
        });
        assert_eq!(reconstruct(&r0, &r1).unwrap().to_f64(), vec![1.0, 0.0]);
    }

    #[test]
    fn missing_keys_are_reported() {
        let cfg = FixedConfig::new(8, 2).unwrap();
        let (mut c0, _c1) = in_process_pair(Role::P0, Role::P1, Instruments::new(0));
        let mut rng = seeded_rng(7, 0);
        let x = Share::new(PartyId::P0, FixedTensor::zeros(cfg, vec![4]));
        let (t0, _) = gen_vec_triple(4, cfg, &mut rng);
        assert!(matches!(relu_secure_forward(&x, &[], t0, &mut c0), Err(Error::KeyExhausted(_))));
    }
}
