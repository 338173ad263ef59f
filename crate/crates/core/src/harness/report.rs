//! Run reports and the mode-by-network comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::nn::NetworkSpec;
use crate::protocol::{run_training, Mode, RunOptions, SessionConfig, SessionOutcome, TrainConfig};
use crate::ring::FixedConfig;

const MB: f64 = 1e6;

/// One row of the results table. Bytes are exact; `*_mb` columns use 10^6.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub network: String,
    pub dataset: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub ring_bits: u32,
    pub frac_bits: u32,
    pub testing_accuracy_pct: f64,
    pub final_loss: Option<f64>,
    pub training_time_min: f64,
    pub client_comm_mb: f64,
    pub server_comm_mb: f64,
    pub preprocessing_comm_mb: f64,
    pub training_comm_mb: f64,
    pub testing_comm_mb: f64,
    pub client_bytes: u64,
    pub server_bytes: u64,
    pub preprocessing_bytes: u64,
    pub training_bytes: u64,
    pub testing_bytes: u64,
}

impl RunReport {
    pub fn of(cfg: &SessionConfig, dataset: &str, train_samples: usize, out: &SessionOutcome) -> Self {
        let c = out.comm;
        Self {
            mode: cfg.mode.to_string(),
            network: cfg.network.name.clone(),
            dataset: dataset.to_string(),
            epochs: cfg.train.epochs,
            batch_size: cfg.train.batch_size,
            lr: cfg.train.lr,
            train_samples,
            test_samples: cfg.train.test_samples,
            ring_bits: cfg.fixed.bits,
            frac_bits: cfg.fixed.frac_bits,
            testing_accuracy_pct: 100.0 * out.accuracy().unwrap_or(0.0),
            final_loss: out.losses.last().copied(),
            training_time_min: out.wall.as_secs_f64() / 60.0,
            client_comm_mb: c.client as f64 / MB,
            server_comm_mb: c.server as f64 / MB,
            preprocessing_comm_mb: c.preprocessing as f64 / MB,
            training_comm_mb: c.training as f64 / MB,
            testing_comm_mb: c.testing as f64 / MB,
            client_bytes: c.client,
            server_bytes: c.server,
            preprocessing_bytes: c.preprocessing,
            training_bytes: c.training,
            testing_bytes: c.testing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(Error::InvalidConfig(format!("unknown report format {:?}", other))),
        }
    }
}

pub fn to_csv(rows: &[RunReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidConfig(format!("csv: {}", e)))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(format!("csv: {}", e)))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<RunReport>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidConfig(format!("csv: {}", e)))
}

pub fn render(rows: &[RunReport], format: Format) -> Result<String> {
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(rows)?),
        Format::Csv => to_csv(rows),
    }
}

/// Fixed-width comparison table for a terminal.
pub fn table(rows: &[RunReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:<9} {:>8} {:>10} {:>12} {:>12} {:>12} {:>12} {:>10}",
        "mode", "network", "acc %", "time min", "client MB", "server MB", "prep MB", "test MB", "loss"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:<9} {:>8.2} {:>10.3} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>10}",
            r.mode,
            r.network,
            r.testing_accuracy_pct,
            r.training_time_min,
            r.client_comm_mb,
            r.server_comm_mb,
            r.preprocessing_comm_mb,
            r.testing_comm_mb,
            r.final_loss.map(|l| format!("{:.4}", l)).unwrap_or_else(|| "-".into()),
        );
    }
    s
}

/// Everything a bench run shares across the matrix.
#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub modes: Vec<Mode>,
    pub networks: Vec<String>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub private_seed: Option<u64>,
    pub fixed: FixedConfig,
    pub dataset: String,
}

/// Trains every mode on every network with identical settings.
pub fn bench(cfg: &BenchConfig, train: &Dataset, test: &Dataset, opts: &RunOptions) -> Result<Vec<RunReport>> {
    if !cfg.modes.contains(&Mode::UShapedPublic) {
        return Err(Error::InvalidConfig("the bench matrix needs the public u-shaped baseline".into()));
    }
    let mut rows = Vec::new();
    for name in &cfg.networks {
        let network = NetworkSpec::by_name(name, train.classes)?;
        for &mode in &cfg.modes {
            let t = TrainConfig::for_dataset(cfg.lr, cfg.batch_size, cfg.epochs, cfg.seed, train.len(), test.len());
            let mut sc = SessionConfig::new(mode, t, cfg.fixed, network.clone());
            sc.private_seed = cfg.private_seed;
            let out = run_training(&sc, train, test, opts)?;
            rows.push(RunReport::of(&sc, &cfg.dataset, train.len(), &out));
        }
    }
    Ok(rows)
}
