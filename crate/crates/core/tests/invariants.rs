//! Property tests for the algebraic invariants the protocol relies on.

use proptest::prelude::*;
use splitfss::beaver::{gen_vec_triple, secure_mul_elementwise};
use splitfss::fss::{eval_comparison, keygen_with_mask, ComparisonKey};
use splitfss::sharing::{reconstruct, seeded_rng, split};
use splitfss::transport::{in_process_pair, tensor_from_payload, tensor_payload, Instruments, Role};
use splitfss::{FixedConfig, FixedTensor, PartyId, RingElement};

fn ring() -> impl Strategy<Value = FixedConfig> {
    prop_oneof![Just((8u32, 4u32)), Just((16, 8)), Just((32, 13)), Just((64, 13)), Just((64, 20))]
        .prop_map(|(n, f)| FixedConfig::new(n, f).unwrap())
}

fn signed_ge_zero(cfg: FixedConfig, v: u64) -> bool {
    cfg.to_signed(cfg.reduce(v)) >= 0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn split_then_reconstruct_is_identity(cfg in ring(), v in any::<u64>(), seed in any::<u64>()) {
        let x = RingElement::new(cfg.reduce(v), cfg);
        let (s0, s1) = split(&x, &mut seeded_rng(seed, 0)).unwrap();
        prop_assert_eq!(s0.party, PartyId::P0);
        prop_assert_eq!(reconstruct(&s0, &s1).unwrap(), x);
    }

    #[test]
    fn shares_are_linear(cfg in ring(), a in any::<u64>(), b in any::<u64>(), c in any::<u64>(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, 0);
        let (x, y, k) = (RingElement::new(cfg.reduce(a), cfg), RingElement::new(cfg.reduce(b), cfg), RingElement::new(cfg.reduce(c), cfg));
        let (x0, x1) = split(&x, &mut rng).unwrap();
        let (y0, y1) = split(&y, &mut rng).unwrap();
        let sum = reconstruct(&x0.add(&y0).unwrap(), &x1.add(&y1).unwrap()).unwrap();
        prop_assert_eq!(sum.value(), cfg.reduce(x.value().wrapping_add(y.value())));
        let shifted = reconstruct(&x0.add_public(&k).unwrap(), &x1.add_public(&k).unwrap()).unwrap();
        prop_assert_eq!(shifted.value(), cfg.reduce(x.value().wrapping_add(k.value())));
        let scaled = reconstruct(&x0.mul_public(k).unwrap(), &x1.mul_public(k).unwrap()).unwrap();
        prop_assert_eq!(scaled.value(), cfg.reduce(x.value().wrapping_mul(k.value())));
    }

    #[test]
    fn encoding_round_trips_within_half_an_ulp(cfg in ring(), u in -1.0f64..1.0) {
        let x = u * cfg.range_limit() * 0.99;
        let back = cfg.decode_raw(cfg.encode_raw(x).unwrap());
        prop_assert!((back - x).abs() <= cfg.ulp() / 2.0 + 1e-12 * x.abs());
    }

    #[test]
    fn rounding_shift_is_nearest(cfg in ring(), v in any::<i32>()) {
        let v = (v as i64) >> 33u32.saturating_sub(cfg.bits);
        let exact = v as f64 / (cfg.frac_bits as f64).exp2();
        let got = cfg.to_signed(cfg.round_shift_raw(cfg.from_signed(v))) as f64;
        prop_assert!((got - exact).abs() <= 0.5);
    }

    #[test]
    fn share_truncation_is_off_by_at_most_one(v in -(1i64 << 40)..(1i64 << 40), seed in any::<u64>()) {
        let cfg = FixedConfig::default();
        let x = FixedTensor::new(cfg, vec![1], vec![cfg.from_signed(v)]).unwrap();
        let (s0, s1) = split(&x, &mut seeded_rng(seed, 0)).unwrap();
        let t = reconstruct(&s0.trunc(), &s1.trunc()).unwrap();
        let diff = cfg.to_signed(t.data()[0]) - (v >> cfg.frac_bits);
        prop_assert!(diff.abs() <= 1, "off by {}", diff);
    }

    #[test]
    fn comparison_shares_reconstruct_the_sign_test(cfg in ring(), a in any::<u64>(), x in any::<u64>(), seed in any::<u64>()) {
        let (a, x) = (cfg.reduce(a), cfg.reduce(x));
        let (k0, k1) = keygen_with_mask(RingElement::new(a, cfg), &mut seeded_rng(seed, 0));
        let xp = RingElement::new(x, cfg);
        let bit = reconstruct(&eval_comparison(PartyId::P0, &k0, xp).unwrap(), &eval_comparison(PartyId::P1, &k1, xp).unwrap()).unwrap();
        prop_assert_eq!(bit.value(), signed_ge_zero(cfg, x.wrapping_sub(a)) as u64);
        prop_assert_eq!(reconstruct(&k0.mask(), &k1.mask()).unwrap().value(), a);
    }

    #[test]
    fn comparison_keys_round_trip_through_bytes(cfg in ring(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, 0);
        let (k0, k1) = keygen_with_mask(RingElement::new(cfg.reduce(rand::RngCore::next_u64(&mut rng)), cfg), &mut rng);
        for k in [k0, k1] {
            let bytes = k.to_bytes();
            prop_assert_eq!(bytes.len(), ComparisonKey::serialized_len(cfg));
            prop_assert_eq!(ComparisonKey::from_bytes(cfg, &bytes).unwrap(), k);
        }
    }

    #[test]
    fn tensor_payloads_round_trip(cfg in ring(), data in proptest::collection::vec(any::<u64>(), 1..64)) {
        let data: Vec<u64> = data.into_iter().map(|v| cfg.reduce(v)).collect();
        let t = FixedTensor::new(cfg, vec![data.len()], data).unwrap();
        let bytes = tensor_payload(&t);
        prop_assert_eq!(bytes.len(), t.len() * cfg.elem_bytes());
        prop_assert_eq!(tensor_from_payload(cfg, t.shape(), &bytes).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn beaver_elementwise_products_are_exact(cfg in ring(), len in 1usize..40, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, 0);
        let x = splitfss::sharing::random_tensor(cfg, vec![len], &mut rng);
        let y = splitfss::sharing::random_tensor(cfg, vec![len], &mut rng);
        let (x0, x1) = split(&x, &mut rng).unwrap();
        let (y0, y1) = split(&y, &mut rng).unwrap();
        let (t0, t1) = gen_vec_triple(len, cfg, &mut rng);
        let (mut c0, mut c1) = in_process_pair(Role::P0, Role::P1, Instruments::new(0));
        let h = std::thread::spawn(move || secure_mul_elementwise(&x1, &y1, t1, &mut c1).unwrap());
        let z0 = secure_mul_elementwise(&x0, &y0, t0, &mut c0).unwrap();
        let z = reconstruct(&z0, &h.join().unwrap()).unwrap();
        let want: Vec<u64> = x.data().iter().zip(y.data()).map(|(&a, &b)| cfg.reduce(a.wrapping_mul(b))).collect();
        prop_assert_eq!(z.data(), want.as_slice());
    }
}
