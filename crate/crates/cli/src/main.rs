use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splitfss::harness::audit::{
    audit_backend_equivalence, audit_label_confinement, audit_lia_game, audit_mask_uniformity, MaskSource,
};
use splitfss::harness::dataset::{gen_synthetic, load_idx, Dataset};
use splitfss::harness::report::{bench, render, table, BenchConfig, Format, RunReport};
use splitfss::nn::gradcheck::check_all;
use splitfss::nn::NetworkSpec;
use splitfss::protocol::net::connect_role;
use splitfss::protocol::{
    run_inference, run_role, run_session, Backend, Endpoints, Mode, RoleOutcome, RunOptions, SessionConfig,
    TrainConfig, TrainedModel,
};
use splitfss::sharing::seeded_rng;
use splitfss::transport::{Instruments, Role};
use splitfss::{Error, FixedConfig, Result};

#[derive(Parser)]
#[command(name = "splitfss", version, about = "U-shaped split learning with function secret sharing")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one mode and report accuracy and communication.
    Train(TrainArgs),
    /// Test a saved model.
    Eval(EvalArgs),
    /// Train every mode on every network with the same settings.
    Bench(BenchArgs),
    /// Privacy, transport and gradient audits.
    Audit(AuditArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DatasetKind {
    Mnist,
    Fmnist,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    All,
    Client,
    P0,
    P1,
    Dealer,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    InProcess,
    Tcp,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist", env = "SPLITFSS_DATASET")]
    dataset: DatasetKind,
    #[arg(long, default_value = "data/mnist-desk/train-images-idx3-ubyte", env = "SPLITFSS_TRAIN_IMAGES")]
    train_images: PathBuf,
    #[arg(long, default_value = "data/mnist-desk/train-labels-idx1-ubyte", env = "SPLITFSS_TRAIN_LABELS")]
    train_labels: PathBuf,
    #[arg(long, default_value = "data/mnist-desk/t10k-images-idx3-ubyte", env = "SPLITFSS_TEST_IMAGES")]
    test_images: PathBuf,
    #[arg(long, default_value = "data/mnist-desk/t10k-labels-idx1-ubyte", env = "SPLITFSS_TEST_LABELS")]
    test_labels: PathBuf,
    /// Training samples to use, from the front of the file.
    #[arg(long, env = "SPLITFSS_LIMIT")]
    limit: Option<usize>,
    /// Test samples to use, from the front of the file.
    #[arg(long, env = "SPLITFSS_TEST_LIMIT")]
    test_limit: Option<usize>,
}

#[derive(Args, Clone)]
struct RingArgs {
    #[arg(long, default_value_t = 64, env = "SPLITFSS_RING_BITS")]
    ring_bits: u32,
    #[arg(long, default_value_t = 13, env = "SPLITFSS_FRAC_BITS")]
    frac_bits: u32,
}

impl RingArgs {
    fn fixed(&self) -> Result<FixedConfig> {
        FixedConfig::new(self.ring_bits, self.frac_bits)
    }
}

#[derive(Args, Clone)]
struct SessionArgs {
    #[arg(long, default_value = "ushaped-private", env = "SPLITFSS_MODE")]
    mode: Mode,
    /// `1`, `2`, or a network TOML file.
    #[arg(long, default_value = "1", env = "SPLITFSS_NETWORK")]
    network: String,
    #[arg(long, default_value_t = 2, env = "SPLITFSS_EPOCHS")]
    epochs: usize,
    #[arg(long, default_value_t = 16, env = "SPLITFSS_BATCH")]
    batch: usize,
    #[arg(long, default_value_t = 1.0, env = "SPLITFSS_LR")]
    lr: f64,
    /// Shared seed: initialization and batch order.
    #[arg(long, default_value_t = 1, env = "SPLITFSS_SEED")]
    seed: u64,
    /// Seed for the client's gradient shares and the dealer's material.
    /// Omit to draw from the OS.
    #[arg(long, env = "SPLITFSS_PRIVATE_SEED")]
    private_seed: Option<u64>,
    #[command(flatten)]
    ring: RingArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "all", env = "SPLITFSS_ROLE")]
    role: RoleArg,
    /// Address this role listens on; defaults to its endpoint.
    #[arg(long, env = "SPLITFSS_LISTEN")]
    listen: Option<String>,
    /// Peer endpoint as `role=host:port`; repeatable.
    #[arg(long = "connect", env = "SPLITFSS_CONNECT", value_delimiter = ',')]
    connect: Vec<String>,
    /// With `--role all`: run the roles over loopback TCP instead of queues.
    #[arg(long, value_enum, default_value = "in-process", env = "SPLITFSS_BACKEND")]
    backend: BackendArg,
    #[arg(long, default_value_t = 30, env = "SPLITFSS_TIMEOUT")]
    timeout_secs: u64,
    #[arg(long, env = "SPLITFSS_REPORT")]
    report: Option<PathBuf>,
    #[arg(long, default_value = "json", env = "SPLITFSS_FORMAT")]
    format: Format,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    session: SessionArgs,
    /// Write the trained model as JSON (`--role all` only).
    #[arg(long, env = "SPLITFSS_MODEL_OUT")]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    session: SessionArgs,
    #[arg(long, env = "SPLITFSS_MODEL")]
    model: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2", env = "SPLITFSS_NETWORKS")]
    networks: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "local-public,vanilla-public,ushaped-public,ushaped-private", env = "SPLITFSS_MODES")]
    modes: Vec<Mode>,
    #[arg(long, default_value_t = 2, env = "SPLITFSS_EPOCHS")]
    epochs: usize,
    #[arg(long, default_value_t = 16, env = "SPLITFSS_BATCH")]
    batch: usize,
    #[arg(long, default_value_t = 1.0, env = "SPLITFSS_LR")]
    lr: f64,
    #[arg(long, default_value_t = 1, env = "SPLITFSS_SEED")]
    seed: u64,
    #[arg(long, env = "SPLITFSS_PRIVATE_SEED")]
    private_seed: Option<u64>,
    #[command(flatten)]
    ring: RingArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, env = "SPLITFSS_REPORT")]
    report: Option<PathBuf>,
    #[arg(long, default_value = "csv", env = "SPLITFSS_FORMAT")]
    format: Format,
}

#[derive(Args)]
struct AuditArgs {
    #[command(subcommand)]
    which: Audit,
}

#[derive(Subcommand)]
enum Audit {
    /// Uniformity of masked activations at n = 8.
    Mask {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.5,-1.25", allow_hyphen_values = true)]
        atm: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        frac_bits: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Label inference from cut gradients and from their shares.
    Lia {
        #[arg(long, default_value_t = 5000)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Wiretap of a private session at n = 8 on synthetic data.
    Labels {
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 4)]
        frac_bits: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// In-process and TCP transcripts of one private session.
    Backends {
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Plaintext backward passes against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 13)]
        frac_bits: u32,
        #[arg(long, default_value_t = 1e-2)]
        tol: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn network(arg: &str, classes: usize) -> Result<NetworkSpec> {
    let p = Path::new(arg);
    if arg.ends_with(".toml") || p.is_file() {
        NetworkSpec::load(p)
    } else {
        NetworkSpec::by_name(arg, classes)
    }
}

fn datasets(d: &DataArgs, seed: u64, cfg: FixedConfig) -> Result<(Dataset, Dataset, String)> {
    match d.dataset {
        DatasetKind::Synthetic => {
            let shape = [1, 28, 28];
            let train = gen_synthetic(d.limit.unwrap_or(1000), &shape, 10, seed, cfg)?;
            let test = gen_synthetic(d.test_limit.unwrap_or(200), &shape, 10, seed.wrapping_add(1), cfg)?;
            Ok((train, test, "synthetic".into()))
        }
        kind => {
            let train = load_idx(&d.train_images, &d.train_labels, d.limit, cfg)?;
            let test = load_idx(&d.test_images, &d.test_labels, d.test_limit, cfg)?;
            Ok((train, test, format!("{:?}", kind).to_lowercase()))
        }
    }
}

fn endpoints(connect: &[String]) -> Result<Endpoints> {
    let mut ep = Endpoints::default();
    for c in connect {
        let (role, addr) = c
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--connect {:?} is not role=host:port", c)))?;
        match role {
            "p0" => ep.p0 = addr.into(),
            "p1" => ep.p1 = addr.into(),
            "dealer" => ep.dealer = addr.into(),
            r => return Err(Error::InvalidConfig(format!("no endpoint for role {:?}", r))),
        }
    }
    Ok(ep)
}

fn write_report(rows: &[RunReport], path: Option<&Path>, format: Format) -> Result<()> {
    let text = render(rows, format)?;
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{}", text),
    }
    Ok(())
}

fn session(s: &SessionArgs, train: &Dataset, test: &Dataset) -> Result<SessionConfig> {
    let fixed = s.ring.fixed()?;
    let t = TrainConfig::for_dataset(s.lr, s.batch, s.epochs, s.seed, train.len(), test.len());
    let mut cfg = SessionConfig::new(s.mode, t, fixed, network(&s.network, train.classes)?);
    cfg.endpoints = endpoints(&s.connect)?;
    cfg.private_seed = s.private_seed;
    Ok(cfg)
}

fn options(s: &SessionArgs) -> RunOptions {
    RunOptions {
        backend: match s.backend {
            BackendArg::InProcess => Backend::InProcess,
            BackendArg::Tcp => Backend::Tcp,
        },
        timeout: Duration::from_secs(s.timeout_secs),
        ..RunOptions::default()
    }
}

/// Runs a single role of a multi-process session.
fn run_one_role(s: &SessionArgs, cfg: &SessionConfig, data: (&Dataset, &Dataset), model: Option<&TrainedModel>) -> Result<()> {
    let role = match s.role {
        RoleArg::Client => Role::Client,
        RoleArg::P0 => Role::P0,
        RoleArg::P1 => Role::P1,
        RoleArg::Dealer => Role::Dealer,
        RoleArg::All => unreachable!("handled by the caller"),
    };
    let inst = Instruments::new(1).with_timeout(Duration::from_secs(s.timeout_secs));
    let counters = inst.counters.clone();
    let peers = connect_role(role, cfg.mode, &cfg.endpoints, s.listen.as_deref(), inst)?;
    match run_role(role, cfg, peers, Some(data), model)? {
        RoleOutcome::Client(c) => {
            let snap = counters.snapshot();
            eprintln!(
                "accuracy {:.2}% over {} samples; {} bytes sent, {} received",
                100.0 * c.metrics.accuracy().unwrap_or(0.0),
                c.metrics.tested,
                snap.sent_by(Role::Client, &splitfss::transport::Phase::ALL),
                Role::ALL.iter().map(|&r| splitfss::transport::Phase::ALL.iter().map(|&p| snap.received(r, Role::Client, p)).sum::<u64>()).sum::<u64>(),
            );
        }
        RoleOutcome::Server(o) => eprintln!("{} done; {} parameter layers held", o.role, o.params.len()),
        RoleOutcome::Dealer => eprintln!("dealer done"),
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let s = &a.session;
    let (train, test, name) = datasets(&s.data, s.seed, s.ring.fixed()?)?;
    let cfg = session(s, &train, &test)?;
    if s.role != RoleArg::All {
        if a.model_out.is_some() {
            return Err(Error::InvalidConfig("--model-out needs --role all".into()));
        }
        return run_one_role(s, &cfg, (&train, &test), None);
    }
    let out = run_session(&cfg, &train, &test, None, &options(s))?;
    if let Some(p) = &a.model_out {
        out.model.save(p)?;
    }
    let rows = [RunReport::of(&cfg, &name, train.len(), &out)];
    eprint!("{}", table(&rows));
    write_report(&rows, s.report.as_deref(), s.format)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let s = &a.session;
    let model = TrainedModel::load(&a.model)?;
    let fixed = model.fixed;
    let (_, test, name) = datasets(&DataArgs { limit: Some(0), ..s.data.clone() }, s.seed, fixed)?;
    let mut cfg = session(s, &Dataset::empty(fixed, test.sample_shape(), test.classes), &test)?;
    cfg.fixed = fixed;
    cfg.network = model.network.clone();
    if s.role != RoleArg::All {
        cfg.train.epochs = 0;
        cfg.train.batches = 0;
        let empty = Dataset::empty(fixed, test.sample_shape(), test.classes);
        let local = if cfg.mode.is_private() == model.mode.is_private() {
            model
        } else {
            model.for_mode(cfg.mode, &mut seeded_rng(s.private_seed.unwrap_or(s.seed), 0))?
        };
        return run_one_role(s, &cfg, (&empty, &test), Some(&local));
    }
    let out = run_inference(&cfg, &model, &test, &options(s))?;
    let rows = [RunReport::of(&cfg, &name, 0, &out)];
    eprint!("{}", table(&rows));
    write_report(&rows, s.report.as_deref(), s.format)
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let fixed = a.ring.fixed()?;
    let (train, test, name) = datasets(&a.data, a.seed, fixed)?;
    let cfg = BenchConfig {
        modes: a.modes.clone(),
        networks: a.networks.clone(),
        lr: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        private_seed: a.private_seed,
        fixed,
        dataset: name,
    };
    let rows = bench(&cfg, &train, &test, &RunOptions::default())?;
    eprint!("{}", table(&rows));
    write_report(&rows, a.report.as_deref(), a.format)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_audit(a: &AuditArgs) -> Result<bool> {
    match &a.which {
        Audit::Mask { samples, atm, frac_bits, seed } => {
            let [x, y] = atm[..] else {
                return Err(Error::InvalidConfig("--atm takes two values".into()));
            };
            let mut rng = seeded_rng(*seed, splitfss::streams::DEALER);
            let r = audit_mask_uniformity(*samples, FixedConfig::new(8, *frac_bits)?, [x, y], MaskSource::Dealer(&mut rng))?;
            print_json(&r)?;
            Ok(r.passes(0.001))
        }
        Audit::Lia { trials, classes, width, seed } => {
            let r = audit_lia_game(*trials, *classes, *width, FixedConfig::default(), *seed)?;
            print_json(&r)?;
            Ok(r.shares_at_chance(3.0))
        }
        Audit::Labels { samples, batch, frac_bits, seed } => {
            let fixed = FixedConfig::new(8, *frac_bits)?;
            let train = gen_synthetic(*samples, &[1, 28, 28], 10, *seed, fixed)?;
            let test = gen_synthetic(*batch, &[1, 28, 28], 10, seed + 1, fixed)?;
            let t = TrainConfig::for_dataset(0.5, *batch, 1, *seed, train.len(), test.len());
            let cfg = SessionConfig::new(Mode::UShapedPrivate, t, fixed, NetworkSpec::network1(10));
            let r = audit_label_confinement(&cfg, &train, &test)?;
            print_json(&r)?;
            Ok(r.passes(0.001))
        }
        Audit::Backends { samples, batch, seed } => {
            let fixed = FixedConfig::default();
            let train = gen_synthetic(*samples, &[1, 28, 28], 10, *seed, fixed)?;
            let test = gen_synthetic(*batch, &[1, 28, 28], 10, seed + 1, fixed)?;
            let t = TrainConfig::for_dataset(0.5, *batch, 1, *seed, train.len(), test.len());
            let cfg = SessionConfig::new(Mode::UShapedPrivate, t, fixed, NetworkSpec::network1(10)).with_private_seed(*seed);
            let r = audit_backend_equivalence(&cfg, &train, &test)?;
            print_json(&r)?;
            Ok(r.passes())
        }
        Audit::Gradcheck { frac_bits, tol, seed } => {
            let r = check_all(FixedConfig::new(64, *frac_bits)?, *tol, *seed)?;
            print_json(&r)?;
            Ok(r.iter().all(|c| c.failures == 0))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Bench(a) => cmd_bench(a).map(|_| true),
        Command::Audit(a) => cmd_audit(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("audit failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
