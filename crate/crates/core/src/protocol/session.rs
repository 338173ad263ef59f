//! Runs every role of a session in one process and gathers the results.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::protocol::client::{run_client, ClientOutcome};
use crate::protocol::config::{Mode, SessionConfig};
use crate::protocol::dealer::run_dealer;
use crate::protocol::model::{LayerParams, TrainedModel};
use crate::protocol::server::{run_private_server, run_public_server, ServerOutcome};
use crate::protocol::{Metrics, Peers};
use crate::transport::{in_process_pair, tcp_pair, CounterSnapshot, Instruments, Phase, Role, Wiretap, DEFAULT_TIMEOUT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    InProcess,
    /// Loopback TCP, one connection per role pair.
    Tcp,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub backend: Backend,
    pub wiretap: bool,
    pub timeout: Duration,
    pub session: u8,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { backend: Backend::InProcess, wiretap: false, timeout: DEFAULT_TIMEOUT, session: 1 }
    }
}

#[derive(Debug)]
pub enum RoleOutcome {
    Client(ClientOutcome),
    Server(ServerOutcome),
    Dealer,
}

/// Runs one role to completion over already connected channels. The client
/// needs the datasets; the others ignore them.
pub fn run_role(
    role: Role,
    cfg: &SessionConfig,
    peers: Peers,
    data: Option<(&Dataset, &Dataset)>,
    initial: Option<&TrainedModel>,
) -> Result<RoleOutcome> {
    match role {
        Role::Client => {
            let (train, test) = data.ok_or_else(|| Error::InvalidConfig("the client needs its datasets".into()))?;
            run_client(cfg, peers, train, test, initial).map(RoleOutcome::Client)
        }
        Role::P0 | Role::P1 if cfg.mode.is_private() => run_private_server(cfg, role, peers, initial).map(RoleOutcome::Server),
        Role::P0 => run_public_server(cfg, peers, initial).map(RoleOutcome::Server),
        Role::P1 => Err(Error::InvalidConfig(format!("P1 takes no part in {} mode", cfg.mode))),
        Role::Dealer => run_dealer(cfg, peers, initial.is_some()).map(|_| RoleOutcome::Dealer),
    }
}

/// Bytes per table column, from the counters of a finished session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CommReport {
    /// Frames the client sent or received while training.
    pub client: u64,
    /// Frames a server sent or received while training, each frame once.
    pub server: u64,
    pub preprocessing: u64,
    /// All frames in the forward, loss and backward phases.
    pub training: u64,
    pub testing: u64,
    pub setup: u64,
}

const TRAINING: [Phase; 3] = [Phase::Forward, Phase::Loss, Phase::Backward];

impl CommReport {
    pub fn of(snap: &CounterSnapshot) -> Self {
        let pair_sum = |keep: &dyn Fn(Role, Role) -> bool, phases: &[Phase]| -> u64 {
            let mut s = 0;
            for from in Role::ALL {
                for to in Role::ALL {
                    if keep(from, to) {
                        s += phases.iter().map(|&p| snap.sent(from, to, p)).sum::<u64>();
                    }
                }
            }
            s
        };
        let is_server = |r: Role| matches!(r, Role::P0 | Role::P1);
        Self {
            client: pair_sum(&|a, b| a == Role::Client || b == Role::Client, &TRAINING),
            server: pair_sum(&|a, b| is_server(a) || is_server(b), &TRAINING),
            preprocessing: snap.sent_in(&[Phase::Preprocessing]),
            training: snap.sent_in(&TRAINING),
            testing: snap.sent_in(&[Phase::Test]),
            setup: snap.sent_in(&[Phase::Setup]),
        }
    }

    pub fn total(&self) -> u64 {
        self.preprocessing + self.training + self.testing + self.setup
    }
}

#[derive(Debug)]
pub struct SessionOutcome {
    pub model: TrainedModel,
    pub metrics: Metrics,
    /// Per-batch losses; from the server in vanilla mode.
    pub losses: Vec<f64>,
    pub predictions: Vec<u8>,
    pub counters: CounterSnapshot,
    pub comm: CommReport,
    pub tap: Option<Arc<Wiretap>>,
    pub wall: Duration,
}

impl SessionOutcome {
    pub fn accuracy(&self) -> Option<f64> {
        self.metrics.accuracy()
    }
}

fn connect(mode: Mode, inst: &Instruments, backend: Backend) -> Result<Vec<(Role, Peers)>> {
    let mut chans: Vec<(Role, Vec<_>)> = mode.roles().iter().map(|&r| (r, Vec::new())).collect();
    for (a, b) in mode.links() {
        let (ca, cb) = match backend {
            Backend::InProcess => in_process_pair(a, b, inst.clone()),
            Backend::Tcp => tcp_pair(a, b, inst.clone())?,
        };
        for (r, v) in &mut chans {
            if *r == a {
                v.push(ca);
                break;
            }
        }
        for (r, v) in &mut chans {
            if *r == b {
                v.push(cb);
                break;
            }
        }
    }
    Ok(chans.into_iter().map(|(r, v)| (r, Peers::new(v))).collect())
}

/// Picks the error that explains a failed session: a role's own failure
/// rather than the closed channels and timeouts it caused elsewhere.
fn root_cause(errors: Vec<(Role, Error)>) -> Error {
    let secondary = |e: &Error| matches!(e, Error::ChannelClosed(_) | Error::Timeout(_));
    let mut errors = errors;
    let i = errors.iter().position(|(_, e)| !secondary(e)).unwrap_or(0);
    errors.swap_remove(i).1
}

/// Runs all roles of `cfg.mode` on threads of this process.
pub fn run_session(
    cfg: &SessionConfig,
    train: &Dataset,
    test: &Dataset,
    initial: Option<&TrainedModel>,
    opts: &RunOptions,
) -> Result<SessionOutcome> {
    cfg.validate()?;
    let mut inst = Instruments::new(opts.session).with_timeout(opts.timeout);
    if opts.wiretap {
        inst = inst.with_tap();
    }
    let initial = match initial {
        Some(m) if (m.mode.is_private()) != cfg.mode.is_private() => {
            Some(m.for_mode(cfg.mode, &mut crate::protocol::private_rng(cfg.private_seed, crate::streams::DEALER))?)
        }
        Some(m) => Some(m.clone()),
        None => None,
    };
    let roles = connect(cfg.mode, &inst, opts.backend)?;
    let start = Instant::now();
    let results: Vec<(Role, Result<RoleOutcome>)> = std::thread::scope(|s| {
        let handles: Vec<_> = roles
            .into_iter()
            .map(|(role, peers)| {
                let initial = initial.as_ref();
                let h = s.spawn(move || run_role(role, cfg, peers, Some((train, test)), initial));
                (role, h)
            })
            .collect();
        handles
            .into_iter()
            .map(|(r, h)| (r, h.join().unwrap_or_else(|_| Err(Error::ChannelClosed(format!("{} panicked", r))))))
            .collect()
    });
    let wall = start.elapsed();

    let mut errors = Vec::new();
    let mut client = None;
    let mut servers = Vec::new();
    for (role, r) in results {
        match r {
            Ok(RoleOutcome::Client(c)) => client = Some(c),
            Ok(RoleOutcome::Server(s)) => servers.push(s),
            Ok(RoleOutcome::Dealer) => {}
            Err(e) => errors.push((role, e)),
        }
    }
    if !errors.is_empty() {
        return Err(root_cause(errors));
    }
    let client = client.expect("every mode has a client");

    let mut layers = vec![LayerParams::None; cfg.network.layers.len()];
    for (i, p) in client.layers {
        layers[i] = p;
    }
    let mut losses = client.metrics.losses.clone();
    servers.sort_by_key(|s| s.role as u8);
    match servers.as_slice() {
        [] => {}
        [p0] => {
            for (i, w, b) in &p0.params {
                layers[*i] = LayerParams::Plain { w: w.clone(), b: b.clone() };
            }
            if losses.is_empty() {
                losses = p0.losses.clone();
            }
        }
        [p0, p1] => {
            for ((i, w0, b0), (_, w1, b1)) in p0.params.iter().zip(&p1.params) {
                layers[*i] = LayerParams::Shared { w: [w0.clone(), w1.clone()], b: [b0.clone(), b1.clone()] };
            }
        }
        _ => unreachable!("at most two servers"),
    }
    let model = TrainedModel { mode: cfg.mode, fixed: cfg.fixed, network: cfg.network.clone(), layers };
    let counters = inst.counters.snapshot();
    Ok(SessionOutcome {
        model,
        metrics: Metrics { losses: losses.clone(), ..client.metrics },
        losses,
        predictions: client.predictions,
        comm: CommReport::of(&counters),
        counters,
        tap: inst.tap.clone(),
        wall,
    })
}

/// Trains from the seeded initialization and tests on `test`.
pub fn run_training(cfg: &SessionConfig, train: &Dataset, test: &Dataset, opts: &RunOptions) -> Result<SessionOutcome> {
    run_session(cfg, train, test, None, opts)
}

/// Tests `model` without training.
pub fn run_inference(cfg: &SessionConfig, model: &TrainedModel, test: &Dataset, opts: &RunOptions) -> Result<SessionOutcome> {
    let mut cfg = cfg.clone();
    cfg.train.epochs = 0;
    cfg.train.batches = 0;
    let empty = Dataset::empty(test.cfg(), test.sample_shape(), test.classes);
    run_session(&cfg, &empty, test, Some(model), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::gen_synthetic;
    use crate::nn::NetworkSpec;
    use crate::protocol::config::TrainConfig;
    use crate::ring::FixedConfig;

    fn data() -> (Dataset, Dataset) {
        let cfg = FixedConfig::default();
        (
            gen_synthetic(12, &[1, 28, 28], 10, 5, cfg).unwrap(),
            gen_synthetic(6, &[1, 28, 28], 10, 6, cfg).unwrap(),
        )
    }

    fn session(mode: Mode, epochs: usize) -> SessionConfig {
        let t = TrainConfig { lr: 0.5, batch_size: 4, batches: 3, epochs, seed: 2, test_samples: 6 };
        SessionConfig::new(mode, t, FixedConfig::default(), NetworkSpec::network1(10)).with_private_seed(8)
    }

    #[test]
    fn every_mode_trains_and_conserves_bytes() {
        let (train, test) = data();
        for mode in Mode::ALL {
            let out = run_training(&session(mode, 1), &train, &test, &RunOptions::default()).unwrap();
            assert_eq!(out.metrics.tested, 6, "{}", mode);
            assert_eq!(out.losses.len(), 3, "{}", mode);
            assert!(out.counters.conserved(), "{}", mode);
            assert_eq!(out.model.plain_params().unwrap().iter().filter(|p| p.is_some()).count(), 4);
            match mode {
                Mode::LocalPublic => assert_eq!(out.comm.total(), 0),
                Mode::UShapedPrivate => assert!(out.comm.preprocessing > 0),
                _ => assert_eq!(out.comm.preprocessing, 0),
            }
        }
    }

    #[test]
    fn public_modes_follow_the_local_computation_exactly() {
        let (train, test) = data();
        let run = |m| run_training(&session(m, 1), &train, &test, &RunOptions::default()).unwrap();
        let local = run(Mode::LocalPublic);
        for m in [Mode::VanillaPublic, Mode::UShapedPublic] {
            let o = run(m);
            assert_eq!(o.model.layers, local.model.layers, "{}", m);
            assert_eq!(o.losses, local.losses, "{}", m);
            assert_eq!(o.predictions, local.predictions, "{}", m);
        }
    }

    #[test]
    fn zero_epochs_leave_the_model_untouched() {
        let (train, test) = data();
        let cfg = session(Mode::UShapedPrivate, 0);
        let out = run_training(&cfg, &train, &test, &RunOptions::default()).unwrap();
        assert_eq!(out.comm.training, 0);
        let init = crate::nn::init_params(&cfg.network, cfg.train.seed).unwrap();
        let got = out.model.real_params().unwrap();
        for (a, b) in got.iter().zip(&init) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    assert!(a.w.iter().zip(&b.w).all(|(x, y)| (x - y).abs() <= cfg.fixed.ulp()));
                }
                (None, None) => {}
                _ => panic!("parameter layout changed"),
            }
        }
    }

    #[test]
    fn inference_on_a_trained_model_reproduces_its_predictions() {
        let (train, test) = data();
        for mode in [Mode::UShapedPublic, Mode::UShapedPrivate] {
            let cfg = session(mode, 1);
            let trained = run_training(&cfg, &train, &test, &RunOptions::default()).unwrap();
            let again = run_inference(&cfg, &trained.model, &test, &RunOptions::default()).unwrap();
            assert_eq!(again.comm.training, 0);
            if mode.is_private() {
                // Fresh masks perturb truncation by an ulp; predictions may differ only on near-ties.
                let same = again.predictions.iter().zip(&trained.predictions).filter(|(a, b)| a == b).count();
                assert!(same >= 5, "{:?} vs {:?}", again.predictions, trained.predictions);
            } else {
                assert_eq!(again.predictions, trained.predictions);
            }
        }
    }

    #[test]
    fn a_failing_role_is_reported_instead_of_the_hangups_it_causes() {
        let (train, test) = data();
        let mut cfg = session(Mode::UShapedPublic, 1);
        cfg.train.batches = 50;
        let e = run_training(&cfg, &train, &test, &RunOptions::default()).unwrap_err();
        assert!(matches!(e, Error::InvalidConfig(_)), "{}", e);
    }
}
