//! Privacy and transport audits over real protocol runs.

use std::collections::HashMap;

use rand::{Rng, RngCore};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::harness::dataset::{one_hot, Dataset};
use crate::nn::{layers, FixedArith, LayerKind, RealParams};
use crate::protocol::{run_session, Backend, RunOptions, SessionConfig};
use crate::ring::{FixedConfig, FixedTensor};
use crate::sharing::{random_tensor, seeded_rng, split};
use crate::transport::{PayloadKind, Role, TapRecord};
use crate::FixedSegment;

/// Pearson statistic and upper-tail p-value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: f64,
    pub p_value: f64,
}

impl ChiSquare {
    fn of(statistic: f64, dof: usize) -> Self {
        let p_value = ChiSquared::new(dof as f64).map(|d| d.sf(statistic)).unwrap_or(f64::NAN);
        Self { statistic, dof: dof as f64, p_value }
    }

    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value > alpha
    }
}

/// Goodness of fit of `counts` against the uniform distribution.
pub fn chi_square_uniform(counts: &[u64]) -> ChiSquare {
    let n: u64 = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    ChiSquare::of(stat, counts.len() - 1)
}

/// Homogeneity of two histograms over the same bins. Bins empty in both
/// are dropped.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> ChiSquare {
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let n = na + nb;
    let mut stat = 0.0;
    let mut bins = 0;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        bins += 1;
        let (ea, eb) = (na * col / n, nb * col / n);
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    ChiSquare::of(stat, bins.max(2) - 1)
}

/// Histogram of ring words at `n = 8`.
pub fn byte_histogram(values: impl IntoIterator<Item = u64>) -> Vec<u64> {
    let mut h = vec![0u64; 256];
    for v in values {
        h[(v & 0xff) as usize] += 1;
    }
    h
}

#[derive(Clone, Debug, Serialize)]
pub struct MaskReport {
    pub samples: usize,
    pub atm: [f64; 2],
    pub uniform: [ChiSquare; 2],
    pub two_sample: ChiSquare,
}

impl MaskReport {
    pub fn passes(&self, alpha: f64) -> bool {
        self.uniform.iter().all(|c| c.passes(alpha)) && self.two_sample.passes(alpha)
    }
}

/// Where masks come from.
pub enum MaskSource<'a> {
    /// The dealer's mask generator.
    Dealer(&'a mut dyn RngCore),
    /// A fixed mask word; a negative control.
    Constant(u64),
}

impl MaskSource<'_> {
    fn draw(&mut self, cfg: FixedConfig, n: usize) -> FixedTensor {
        match self {
            MaskSource::Dealer(rng) => random_tensor(cfg, vec![n], &mut **rng),
            MaskSource::Constant(c) => FixedTensor::new(cfg, vec![n], vec![*c; n]).expect("shape matches data"),
        }
    }
}

/// `x_pub = ATm + α` for two fixed activation values over `samples` fresh
/// masks each, at `n = 8`.
pub fn audit_mask_uniformity(samples: usize, cfg: FixedConfig, atm: [f64; 2], mut masks: MaskSource<'_>) -> Result<MaskReport> {
    if cfg.bits != 8 {
        return Err(Error::InvalidConfig(format!("mask audit bins exactly at n = 8, not {}", cfg.bits)));
    }
    let mut hists = Vec::with_capacity(2);
    for &v in &atm {
        let x = FixedTensor::from_f64(cfg, vec![samples], &vec![v; samples])?;
        let x_pub = x.add(&masks.draw(cfg, samples))?;
        hists.push(byte_histogram(x_pub.data().iter().copied()));
    }
    Ok(MaskReport {
        samples,
        atm,
        uniform: [chi_square_uniform(&hists[0]), chi_square_uniform(&hists[1])],
        two_sample: chi_square_two_sample(&hists[0], &hists[1]),
    })
}

/// Accuracy of one adversary view, with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Guess {
    pub accuracy: f64,
    pub std_err: f64,
}

impl Guess {
    fn of(hits: usize, trials: usize) -> Self {
        let p = hits as f64 / trials as f64;
        Self { accuracy: p, std_err: (p * (1.0 - p) / trials as f64).sqrt() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LiaReport {
    pub trials: usize,
    pub classes: usize,
    pub chance: f64,
    /// Standard deviation of a chance-level guesser over `trials`.
    pub chance_sigma: f64,
    pub plaintext: Guess,
    pub shares: Guess,
}

impl LiaReport {
    /// The share view is within `k` sigma of chance.
    pub fn shares_at_chance(&self, k: f64) -> bool {
        (self.shares.accuracy - self.chance).abs() <= k * self.chance_sigma
    }
}

/// Class the adversary picks: pull the cut gradient back through its shadow
/// of the head and take the largest-magnitude entry.
fn largest_entry_guess(grad: &[f64], shadow: &RealParams, classes: usize) -> usize {
    let width = grad.len();
    let mut best = (0, f64::MIN);
    for c in 0..classes {
        let s: f64 = (0..width).map(|k| grad[k] * shadow.w[k * classes + c]).sum::<f64>().abs();
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

/// The label inference game against a one-layer client head `width -> classes`
/// with identity output and squared loss, run through the client's own
/// layer code. Each trial draws an activation and a label, computes the cut
/// gradient, and lets the adversary guess from (a) the plaintext gradient
/// and (b) one server's additive share of it. The adversary's shadow head
/// equals the client's, the most favourable case for the attack.
pub fn audit_lia_game(trials: usize, classes: usize, width: usize, cfg: FixedConfig, seed: u64) -> Result<LiaReport> {
    if trials == 0 || classes == 0 || classes > 256 {
        return Err(Error::InvalidConfig(format!("{} trials over {} classes", trials, classes)));
    }
    let mut rng = seeded_rng(seed, 0);
    let bound = 1.0 / (width as f64).sqrt();
    let head = RealParams {
        w_shape: vec![width, classes],
        w: (0..width * classes).map(|_| rng.gen_range(-bound..bound)).collect(),
        b: (0..classes).map(|_| rng.gen_range(-bound..bound)).collect(),
    };
    let arith = FixedArith::new(cfg);
    let kind = LayerKind::Fc { inputs: width, outputs: classes };
    let mut seg = FixedSegment::new(arith, &[kind], &[Some(head.clone())])?;
    let (mut plain_hits, mut share_hits) = (0, 0);
    for _ in 0..trials {
        let label = rng.gen_range(0..classes) as u8;
        let a: Vec<f64> = (0..width).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = FixedTensor::from_f64(cfg, vec![1, width], &a)?;
        let y_hat = seg.forward(x.into_tensor())?;
        let y = one_hot(&[label], classes, cfg).into_tensor();
        let (_, g) = layers::mse_loss(&arith, &y_hat, &y)?;
        let (g_cut, _) = seg.backward(g, true)?;
        let g_cut = FixedTensor::from_tensor(cfg, g_cut.expect("input gradient requested"));
        let (s0, _) = split(&g_cut, &mut rng)?;
        if largest_entry_guess(&g_cut.to_f64(), &head, classes) == label as usize {
            plain_hits += 1;
        }
        if largest_entry_guess(&s0.value.to_f64(), &head, classes) == label as usize {
            share_hits += 1;
        }
    }
    let chance = 1.0 / classes as f64;
    Ok(LiaReport {
        trials,
        classes,
        chance,
        chance_sigma: (chance * (1.0 - chance) / trials as f64).sqrt(),
        plaintext: Guess::of(plain_hits, trials),
        shares: Guess::of(share_hits, trials),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConfinementReport {
    pub frames: usize,
    pub server_bound_frames: usize,
    /// Server-bound frames carrying labels or a value computed from them
    /// without fresh randomness.
    pub violations: Vec<String>,
    /// Pooled gradient-share words per server and their uniformity.
    pub share_words: [usize; 2],
    pub share_uniformity: [ChiSquare; 2],
}

impl ConfinementReport {
    pub fn passes(&self, alpha: f64) -> bool {
        self.violations.is_empty() && self.share_uniformity.iter().all(|c| c.passes(alpha))
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Runs a session with every frame recorded and inspects what the servers
/// received from the client. `cfg` must use `n = 8` so shares can be
/// binned exactly.
pub fn audit_label_confinement(cfg: &SessionConfig, train: &Dataset, test: &Dataset) -> Result<ConfinementReport> {
    if cfg.fixed.bits != 8 {
        return Err(Error::InvalidConfig("label confinement is audited at n = 8".into()));
    }
    let out = run_session(cfg, train, test, None, &RunOptions { wiretap: true, ..RunOptions::default() })?;
    let tap = out.tap.expect("wiretap requested");
    let records = tap.records();
    let fixed = cfg.fixed;
    let t = &cfg.train;

    // Replay the client's batch order to know each batch's labels.
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = seeded_rng(t.seed, crate::streams::SHUFFLE);
    let mut batch_labels: HashMap<(u16, u32), Vec<u8>> = HashMap::new();
    for e in 0..t.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
        for k in 0..t.batches {
            let idx = &order[k * t.batch_size..(k + 1) * t.batch_size];
            batch_labels.insert((e as u16, k as u32), idx.iter().map(|&i| train.labels[i]).collect());
        }
    }

    let mut grads: HashMap<(u16, u32), [Option<&TapRecord>; 2]> = HashMap::new();
    let mut violations = Vec::new();
    let mut server_bound = 0;
    for r in &records {
        if r.from != Role::Client {
            continue;
        }
        server_bound += 1;
        let pos = (r.header.epoch, r.header.batch);
        if r.header.kind == PayloadKind::Labels {
            violations.push(format!("labels frame to {} at {:?}", r.to, pos));
        }
        if !matches!(r.header.kind, PayloadKind::SyncRequest | PayloadKind::MaskedInput | PayloadKind::CutGradient) {
            violations.push(format!("{:?} frame to {} at {:?}", r.header.kind, r.to, pos));
        }
        if let Some(labels) = batch_labels.get(&pos) {
            let onehot = one_hot(labels, cfg.network.classes, fixed);
            if contains(&r.payload, labels) || contains(&r.payload, &crate::transport::tensor_payload(&onehot)) {
                violations.push(format!("{:?} to {} at {:?} embeds the batch labels", r.header.kind, r.to, pos));
            }
        }
        if r.header.kind == PayloadKind::CutGradient {
            let slot = grads.entry(pos).or_default();
            let i = if r.to == Role::P0 { 0 } else { 1 };
            slot[i] = Some(r);
        }
    }

    let mut words: [Vec<u64>; 2] = [Vec::new(), Vec::new()];
    for (pos, pair) in &grads {
        let [Some(a), Some(b)] = pair else {
            violations.push(format!("gradient at {:?} sent unsplit to one server", pos));
            continue;
        };
        let n = a.payload.len();
        let s0 = FixedTensor::new(fixed, vec![n], a.payload.iter().map(|&v| v as u64).collect())?;
        let s1 = FixedTensor::new(fixed, vec![n], b.payload.iter().map(|&v| v as u64).collect())?;
        let g = s0.add(&s1)?;
        if s0 == g || s1 == g {
            violations.push(format!("a server received the plaintext gradient at {:?}", pos));
        }
        words[0].extend_from_slice(s0.data());
        words[1].extend_from_slice(s1.data());
    }
    let [w0, w1] = words;
    Ok(ConfinementReport {
        frames: records.len(),
        server_bound_frames: server_bound,
        violations,
        share_words: [w0.len(), w1.len()],
        share_uniformity: [chi_square_uniform(&byte_histogram(w0)), chi_square_uniform(&byte_histogram(w1))],
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BackendReport {
    pub frames: usize,
    /// Channels `from -> to` whose transcripts differ between backends.
    pub differing: Vec<String>,
    pub conserved: [bool; 2],
    pub bytes: [u64; 2],
}

impl BackendReport {
    pub fn passes(&self) -> bool {
        self.differing.is_empty() && self.conserved == [true, true] && self.bytes[0] == self.bytes[1]
    }
}

/// Runs `cfg` in-process and over loopback TCP and compares, channel by
/// channel, every frame's header and payload. Needs `cfg.private_seed` so
/// both runs draw the same randomness.
pub fn audit_backend_equivalence(cfg: &SessionConfig, train: &Dataset, test: &Dataset) -> Result<BackendReport> {
    if cfg.mode.is_private() && cfg.private_seed.is_none() {
        return Err(Error::InvalidConfig("backend comparison needs a private seed".into()));
    }
    let run = |backend| run_session(cfg, train, test, None, &RunOptions { backend, wiretap: true, ..RunOptions::default() });
    let (a, b) = (run(Backend::InProcess)?, run(Backend::Tcp)?);
    let (ta, tb) = (a.tap.expect("wiretap requested"), b.tap.expect("wiretap requested"));
    let mut differing = Vec::new();
    for (from, to) in cfg.mode.links().into_iter().flat_map(|(x, y)| [(x, y), (y, x)]) {
        let key = |r: &TapRecord| (r.header, r.payload.clone());
        let ca: Vec<_> = ta.channel(from, to).iter().map(key).collect();
        let cb: Vec<_> = tb.channel(from, to).iter().map(key).collect();
        if ca != cb {
            differing.push(format!("{} -> {}", from, to));
        }
    }
    Ok(BackendReport {
        frames: ta.records().len(),
        differing,
        conserved: [a.counters.conserved(), b.counters.conserved()],
        bytes: [a.counters.total_sent(), b.counters.total_sent()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::gen_synthetic;
    use crate::nn::NetworkSpec;
    use crate::protocol::{Mode, TrainConfig};

    fn n8() -> FixedConfig {
        FixedConfig::new(8, 4).unwrap()
    }

    #[test]
    fn chi_square_flags_skew_and_accepts_flat() {
        assert!(chi_square_uniform(&[100; 256]).passes(0.001));
        let mut skew = vec![100; 256];
        skew[0] = 400;
        assert!(!chi_square_uniform(&skew).passes(0.001));
        assert!(chi_square_two_sample(&[50, 50], &[50, 50]).p_value > 0.99);
        assert!(!chi_square_two_sample(&[100, 0], &[0, 100]).passes(0.001));
    }

    #[test]
    fn dealer_masks_pass_and_a_constant_mask_fails() {
        let mut rng = seeded_rng(1, 0);
        let r = audit_mask_uniformity(20_000, n8(), [0.5, -1.25], MaskSource::Dealer(&mut rng)).unwrap();
        assert!(r.passes(0.001), "{:?}", r);
        let c = audit_mask_uniformity(20_000, n8(), [0.5, -1.25], MaskSource::Constant(17)).unwrap();
        assert!(!c.uniform[0].passes(0.001));
        assert!(!c.two_sample.passes(0.001));
        assert!(audit_mask_uniformity(10, FixedConfig::default(), [0.0, 1.0], MaskSource::Constant(0)).is_err());
    }

    #[test]
    fn single_class_game_is_always_won() {
        let r = audit_lia_game(50, 1, 8, FixedConfig::default(), 3).unwrap();
        assert_eq!(r.plaintext.accuracy, 1.0);
        assert_eq!(r.shares.accuracy, 1.0);
    }

    #[test]
    fn plaintext_gradients_leak_and_shares_do_not() {
        let r = audit_lia_game(2000, 10, 64, FixedConfig::default(), 4).unwrap();
        assert!(r.plaintext.accuracy > 0.3, "{:?}", r);
        assert!(r.shares_at_chance(3.0), "{:?}", r);
    }

    fn small_private(fixed: FixedConfig) -> (SessionConfig, Dataset, Dataset) {
        let t = TrainConfig { lr: 0.5, batch_size: 4, batches: 3, epochs: 1, seed: 3, test_samples: 4 };
        let cfg = SessionConfig::new(Mode::UShapedPrivate, t, fixed, NetworkSpec::network1(10)).with_private_seed(5);
        (cfg, gen_synthetic(12, &[1, 28, 28], 10, 1, fixed).unwrap(), gen_synthetic(4, &[1, 28, 28], 10, 2, fixed).unwrap())
    }

    #[test]
    fn private_session_confines_labels() {
        let (cfg, train, test) = small_private(n8());
        let r = audit_label_confinement(&cfg, &train, &test).unwrap();
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        assert_eq!(r.share_words, [3 * 4 * 64, 3 * 4 * 64]);
    }

    #[test]
    fn public_modes_fail_the_label_check() {
        for mode in [Mode::VanillaPublic, Mode::UShapedPublic] {
            let (mut cfg, train, test) = small_private(n8());
            cfg.mode = mode;
            let r = audit_label_confinement(&cfg, &train, &test).unwrap();
            assert!(!r.violations.is_empty(), "{}", mode);
        }
    }

    #[test]
    fn backends_agree_on_a_small_session() {
        let (cfg, train, test) = small_private(FixedConfig::default());
        let r = audit_backend_equivalence(&cfg, &train, &test).unwrap();
        assert!(r.passes(), "{:?}", r);
        assert!(r.frames > 0);
    }
}
