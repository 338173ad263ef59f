//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::RngCore;
use splitfss::beaver::{gen_mat_triple, secure_matmul};
use splitfss::fss::{eval_comparison, keygen_with_mask};
use splitfss::harness::audit::{
    audit_backend_equivalence, audit_label_confinement, audit_lia_game, audit_mask_uniformity, MaskSource,
};
use splitfss::harness::dataset::{load_idx, Dataset};
use splitfss::nn::gradcheck::check_all;
use splitfss::nn::NetworkSpec;
use splitfss::protocol::{run_training, Mode, RunOptions, SessionConfig, SessionOutcome, TrainConfig};
use splitfss::sharing::{random_tensor, reconstruct, seeded_rng, split};
use splitfss::transport::{in_process_pair, Instruments, Role};
use splitfss::{FixedConfig, FixedTensor, PartyId, RingElement};

type Outcome = (bool, String);

fn mnist(train: usize, test: usize, cfg: FixedConfig) -> (Dataset, Dataset) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk");
    let tr = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"), Some(train), cfg).unwrap();
    let te = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"), Some(test), cfg).unwrap();
    (tr, te)
}

fn fss_exhaustive() -> Outcome {
    let cfg = FixedConfig::new(8, 4).unwrap();
    let mut rng = seeded_rng(101, 0);
    let mut matches = 0;
    for a in 0..256u64 {
        let (k0, k1) = keygen_with_mask(RingElement::new(a, cfg), &mut rng);
        for x in 0..256u64 {
            let xp = RingElement::new(x, cfg);
            let s0 = eval_comparison(PartyId::P0, &k0, xp).unwrap();
            let s1 = eval_comparison(PartyId::P1, &k1, xp).unwrap();
            let bit = (s0.value.value() + s1.value.value()) & 0xff;
            let oracle = ((x.wrapping_sub(a) as u8) as i8 >= 0) as u64;
            matches += (bit == oracle) as usize;
        }
    }
    (matches == 65_536, format!("{}/65536 comparisons match", matches))
}

fn ring_matmul_u32(a: &[u64], b: &[u64], n: usize) -> Vec<u64> {
    let mut c = vec![0u64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0u32;
            for k in 0..n {
                s = s.wrapping_add((a[i * n + k] as u32).wrapping_mul(b[k * n + j] as u32));
            }
            c[i * n + j] = s as u64;
        }
    }
    c
}

fn beaver_exact() -> Outcome {
    const RUNS: usize = 1000;
    let cfg = FixedConfig::new(32, 13).unwrap();
    let mut rng = seeded_rng(102, 0);
    let (mut plain, mut p0, mut p1) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..RUNS {
        let x = random_tensor(cfg, vec![8, 8], &mut rng);
        let w = random_tensor(cfg, vec![8, 8], &mut rng);
        let (x0, x1) = split(&x, &mut rng).unwrap();
        let (w0, w1) = split(&w, &mut rng).unwrap();
        let (t0, t1) = gen_mat_triple(8, 8, 8, cfg, &mut rng);
        plain.push(ring_matmul_u32(x.data(), w.data(), 8));
        p0.push((x0, w0, t0));
        p1.push((x1, w1, t1));
    }
    let (mut c0, mut c1) = in_process_pair(Role::P0, Role::P1, Instruments::new(0));
    let h = std::thread::spawn(move || p1.into_iter().map(|(x, w, t)| secure_matmul(&x, &w, t, &mut c1).unwrap()).collect::<Vec<_>>());
    let z0: Vec<_> = p0.into_iter().map(|(x, w, t)| secure_matmul(&x, &w, t, &mut c0).unwrap()).collect();
    let z1 = h.join().unwrap();
    let exact = plain
        .iter()
        .zip(z0.iter().zip(&z1))
        .filter(|(want, (a, b))| reconstruct(a, b).unwrap().data() == want.as_slice())
        .count();
    (exact == RUNS, format!("{}/{} products bit-identical", exact, RUNS))
}

/// Local truncations on the path from the batch to parameter layer `i`'s
/// update: every server FC forward, the output layer's forward and (for
/// earlier layers) its input gradient, the input gradient of every later
/// parameter layer before the output, then the weight gradient and the
/// update itself.
fn truncations(spec: &NetworkSpec, i: usize) -> usize {
    let part = spec.partition();
    let params = |r: std::ops::Range<usize>| r.filter(|&j| spec.layers[j].kind.has_params()).collect::<Vec<_>>();
    let server_fwd = params(part.server.clone()).len();
    let output = params(part.output.clone());
    let before_output = params(0..part.output.start);
    let output_terms = if output.contains(&i) { 1 } else { 2 };
    let later = before_output.iter().filter(|&&j| j > i).count();
    server_fwd + output_terms + later + 2
}

fn lockstep() -> Outcome {
    let cfg = FixedConfig::default();
    let (tr, te) = mnist(4, 4, cfg);
    let spec = NetworkSpec::network1(10);
    let t = TrainConfig { lr: 1.0, batch_size: 4, batches: 1, epochs: 1, seed: 1, test_samples: 4 };
    let run = |mode| {
        let sc = SessionConfig::new(mode, t.clone(), cfg, spec.clone()).with_private_seed(3);
        run_training(&sc, &tr, &te, &RunOptions::default()).unwrap().model.plain_params().unwrap()
    };
    let (public, private) = (run(Mode::UShapedPublic), run(Mode::UShapedPrivate));
    let ulps = |a: &FixedTensor, b: &FixedTensor| {
        a.data().iter().zip(b.data()).map(|(&x, &y)| cfg.to_signed(x.wrapping_sub(y) & cfg.mask()).unsigned_abs()).max().unwrap_or(0)
    };
    let mut ok = true;
    let mut detail = Vec::new();
    for (i, (a, b)) in public.iter().zip(&private).enumerate() {
        let (Some((wa, ba)), Some((wb, bb))) = (a, b) else { continue };
        let bound = 2 * truncations(&spec, i) as u64;
        let d = ulps(wa, wb).max(ulps(ba, bb));
        ok &= d <= bound;
        detail.push(format!("layer {} {}/{} ulp", i, d, bound));
    }
    (ok && !detail.is_empty(), detail.join(", "))
}

struct Desk {
    public: SessionOutcome,
    vanilla: SessionOutcome,
    private: SessionOutcome,
}

fn desk_runs() -> Desk {
    let cfg = FixedConfig::default();
    let (tr, te) = mnist(4000, 1000, cfg);
    let t = TrainConfig::for_dataset(1.0, 16, 2, 1, tr.len(), te.len());
    let run = |mode| {
        let sc = SessionConfig::new(mode, t.clone(), cfg, NetworkSpec::network1(10)).with_private_seed(7);
        run_training(&sc, &tr, &te, &RunOptions { timeout: Duration::from_secs(120), ..RunOptions::default() }).unwrap()
    };
    std::thread::scope(|s| {
        let p = s.spawn(|| run(Mode::UShapedPublic));
        let v = s.spawn(|| run(Mode::VanillaPublic));
        let private = run(Mode::UShapedPrivate);
        Desk { public: p.join().unwrap(), vanilla: v.join().unwrap(), private }
    })
}

fn accuracy_parity(d: &Desk) -> Outcome {
    let public = 100.0 * d.public.accuracy().unwrap();
    let private = 100.0 * d.private.accuracy().unwrap();
    let ok = public >= 90.0 && (private - public).abs() <= 4.0;
    (ok, format!("public {:.2}%, private {:.2}%, gap {:.2} pp", public, private, (private - public).abs()))
}

fn comm_structure(d: &Desk) -> Outcome {
    let (u, v) = (d.public.comm.server, d.vanilla.comm.server);
    let ratio = d.private.comm.client as f64 / d.public.comm.client as f64;
    let ok = u > v && (1.8..=2.6).contains(&ratio);
    (ok, format!("server bytes u-shaped {} vs vanilla {}; client ratio private/public {:.3}", u, v, ratio))
}

fn mask_uniformity() -> Outcome {
    let cfg = FixedConfig::new(8, 4).unwrap();
    let mut rng = seeded_rng(106, splitfss::streams::DEALER);
    let r = audit_mask_uniformity(100_000, cfg, [0.5, -1.25], MaskSource::Dealer(&mut rng)).unwrap();
    let detail = format!(
        "p uniform {:.4} / {:.4}, p two-sample {:.4}",
        r.uniform[0].p_value, r.uniform[1].p_value, r.two_sample.p_value
    );
    (r.passes(0.001), detail)
}

fn lia_game() -> Outcome {
    let r = audit_lia_game(5000, 10, 64, FixedConfig::default(), 107).unwrap();
    let ok = r.shares_at_chance(3.0) && r.plaintext.accuracy > 0.3;
    let detail = format!(
        "shares {:.2}% (chance {:.0}% ± {:.2}), plaintext {:.2}%",
        100.0 * r.shares.accuracy,
        100.0 * r.chance,
        300.0 * r.chance_sigma,
        100.0 * r.plaintext.accuracy
    );
    (ok, detail)
}

fn gradient_checks() -> Outcome {
    let checks = check_all(FixedConfig::default(), 1e-2, 108).unwrap();
    let coords: usize = checks.iter().map(|c| c.coords).sum();
    let failures: usize = checks.iter().map(|c| c.failures).sum();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    (failures == 0 && coords > 0, format!("{}/{} coordinates within 1e-2, worst {:.2e}", coords - failures, coords, worst))
}

fn label_confinement() -> Outcome {
    let cfg = FixedConfig::new(8, 4).unwrap();
    let (tr, te) = mnist(256, 32, cfg);
    let t = TrainConfig::for_dataset(0.5, 16, 1, 109, tr.len(), te.len());
    let sc = SessionConfig::new(Mode::UShapedPrivate, t, cfg, NetworkSpec::network1(10));
    let r = audit_label_confinement(&sc, &tr, &te).unwrap();
    let detail = format!(
        "{} server-bound frames, {} violations, share p {:.4} / {:.4}",
        r.server_bound_frames,
        r.violations.len(),
        r.share_uniformity[0].p_value,
        r.share_uniformity[1].p_value
    );
    (r.passes(0.001), detail)
}

fn transport() -> Outcome {
    let cfg = FixedConfig::default();
    let (tr, te) = mnist(64, 16, cfg);
    let t = TrainConfig::for_dataset(1.0, 8, 1, 110, tr.len(), te.len());
    let sc = SessionConfig::new(Mode::UShapedPrivate, t, cfg, NetworkSpec::network1(10)).with_private_seed(11);
    let r = audit_backend_equivalence(&sc, &tr, &te).unwrap();
    let detail = format!("{} frames, differing channels {:?}, conserved {:?}, bytes {:?}", r.frames, r.differing, r.conserved, r.bytes);
    (r.passes(), detail)
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let (ok, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        (false, format!("panicked: {}", msg.unwrap_or_default()))
    });
    // Written past the test harness's capture so the lines always show.
    let mut out = std::io::stdout();
    let _ = writeln!(
        out,
        "criterion {:>2} {} {}: {} ({:.1}s)",
        n,
        if ok { "PASS" } else { "FAIL" },
        name,
        detail,
        start.elapsed().as_secs_f64()
    );
    let _ = out.flush();
    ok
}

#[test]
fn acceptance() {
    let mut ok = vec![
        report(1, "fss exhaustive n=8", fss_exhaustive),
        report(2, "beaver matmul exactness", beaver_exact),
        report(3, "lockstep private vs public", lockstep),
    ];
    let start = Instant::now();
    let desk = catch_unwind(desk_runs);
    let _ = writeln!(std::io::stdout(), "desk-scale runs took {:.1}s", start.elapsed().as_secs_f64());
    match &desk {
        Ok(d) => {
            ok.push(report(4, "accuracy parity", || accuracy_parity(d)));
            ok.push(report(5, "communication structure", || comm_structure(d)));
        }
        Err(_) => {
            ok.push(report(4, "accuracy parity", || (false, "desk-scale runs panicked".into())));
            ok.push(report(5, "communication structure", || (false, "desk-scale runs panicked".into())));
        }
    }
    ok.push(report(6, "mask uniformity", mask_uniformity));
    ok.push(report(7, "label inference game", lia_game));
    ok.push(report(8, "gradient checks", gradient_checks));
    ok.push(report(9, "label confinement", label_confinement));
    ok.push(report(10, "transport equivalence", transport));
    let failed: Vec<usize> = ok.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {:?}", failed);
}

#[test]
fn truncation_counts_follow_the_layer_positions() {
    let spec = NetworkSpec::network1(10);
    let counts: Vec<(usize, usize)> = (0..spec.layers.len())
        .filter(|&i| spec.layers[i].kind.has_params())
        .map(|i| (i, truncations(&spec, i)))
        .collect();
    assert_eq!(counts, vec![(0, 7), (3, 6), (6, 5), (8, 4)]);
}

#[test]
fn ring_oracle_wraps_at_32_bits() {
    let mut rng = seeded_rng(1, 0);
    let a: Vec<u64> = (0..4).map(|_| rng.next_u64() >> 32).collect();
    let id = vec![1, 0, 0, 1];
    assert_eq!(ring_matmul_u32(&a, &id, 2), a);
    assert_eq!(ring_matmul_u32(&[1 << 31, 0, 0, 0], &[2, 0, 0, 0], 2)[0], 0);
}
