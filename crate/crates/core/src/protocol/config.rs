//! Session configuration shared by all roles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::ring::FixedConfig;
use crate::transport::Role;

/// Which parties hold which layers, and whether the middle runs on shares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Every layer on the client; no communication.
    LocalPublic,
    /// One server holds the middle and output layers and receives labels.
    VanillaPublic,
    /// One server holds the middle layers in plaintext.
    UShapedPublic,
    /// Two servers hold the middle layers as shares; a dealer supplies keys
    /// and triples.
    UShapedPrivate,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::LocalPublic, Mode::VanillaPublic, Mode::UShapedPublic, Mode::UShapedPrivate];

    pub fn name(self) -> &'static str {
        match self {
            Mode::LocalPublic => "local-public",
            Mode::VanillaPublic => "vanilla-public",
            Mode::UShapedPublic => "ushaped-public",
            Mode::UShapedPrivate => "ushaped-private",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn is_private(self) -> bool {
        self == Mode::UShapedPrivate
    }

    /// Roles that take part in a session, client first.
    pub fn roles(self) -> &'static [Role] {
        match self {
            Mode::LocalPublic => &[Role::Client],
            Mode::VanillaPublic | Mode::UShapedPublic => &[Role::Client, Role::P0],
            Mode::UShapedPrivate => &[Role::Client, Role::P0, Role::P1, Role::Dealer],
        }
    }

    /// Connected role pairs.
    pub fn links(self) -> Vec<(Role, Role)> {
        let roles = self.roles();
        let mut out = Vec::new();
        for (i, &a) in roles.iter().enumerate() {
            for &b in &roles[i + 1..] {
                out.push((a, b));
            }
        }
        out
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "local-public" | "local" => Ok(Mode::LocalPublic),
            "vanilla-public" | "vanilla" => Ok(Mode::VanillaPublic),
            "ushaped-public" | "u-shaped-public" | "ushaped" => Ok(Mode::UShapedPublic),
            "ushaped-private" | "u-shaped-private" | "private" => Ok(Mode::UShapedPrivate),
            other => Err(Error::Spec(format!("unknown mode {:?}", other))),
        }
    }
}

/// Training schedule: learning rate, batch size `B`, batches per epoch `N`,
/// epochs `E`, the shared seed and the number of test samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub batches: usize,
    pub epochs: usize,
    pub seed: u64,
    pub test_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1.0, batch_size: 16, batches: 250, epochs: 2, seed: 1, test_samples: 1000 }
    }
}

impl TrainConfig {
    /// Full passes over `train_len` samples; a trailing partial batch is dropped.
    pub fn for_dataset(lr: f64, batch_size: usize, epochs: usize, seed: u64, train_len: usize, test_len: usize) -> Self {
        Self { lr, batch_size, batches: train_len / batch_size.max(1), epochs, seed, test_samples: test_len }
    }

    pub fn test_batches(&self) -> usize {
        self.test_samples.div_ceil(self.batch_size)
    }

    /// Size of test batch `t`; the last one may be partial.
    pub fn test_batch_len(&self, t: usize) -> usize {
        self.batch_size.min(self.test_samples - t * self.batch_size)
    }

    /// The learning rate as the ring word every role applies.
    pub fn lr_raw(&self, cfg: FixedConfig) -> Result<u64> {
        let raw = cfg.encode_raw(self.lr)?;
        if raw == 0 && self.lr != 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate {} rounds to zero at {} fractional bits", self.lr, cfg.frac_bits)));
        }
        Ok(raw)
    }

    pub fn validate(&self, cfg: FixedConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        if self.epochs >= u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("{} epochs exceed the wire limit", self.epochs)));
        }
        self.lr_raw(cfg)?;
        Ok(())
    }
}

/// TCP addresses for the networked roles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoints {
    pub p0: String,
    pub p1: String,
    pub dealer: String,
}

impl Default for Endpoints {
    fn default() -> Self {
        Self { p0: "127.0.0.1:7700".into(), p1: "127.0.0.1:7701".into(), dealer: "127.0.0.1:7702".into() }
    }
}

impl Endpoints {
    pub fn of(&self, role: Role) -> Option<&str> {
        match role {
            Role::P0 => Some(&self.p0),
            Role::P1 => Some(&self.p1),
            Role::Dealer => Some(&self.dealer),
            Role::Client => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub mode: Mode,
    pub train: TrainConfig,
    pub fixed: FixedConfig,
    pub network: NetworkSpec,
    #[serde(default)]
    pub endpoints: Endpoints,
    /// Seed for the client's gradient-share randomness and the dealer's
    /// keys and triples. Deliberately not synchronized: a server that knew it
    /// could strip the shares. `None` draws from the OS.
    #[serde(default)]
    pub private_seed: Option<u64>,
}

impl SessionConfig {
    pub fn new(mode: Mode, train: TrainConfig, fixed: FixedConfig, network: NetworkSpec) -> Self {
        Self { mode, train, fixed, network, endpoints: Endpoints::default(), private_seed: None }
    }

    pub fn with_private_seed(mut self, seed: u64) -> Self {
        self.private_seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.fixed.validate()?;
        self.train.validate(self.fixed)?;
        self.network.validate()
    }
}
