//! The four roles and how a training session runs between them.
//!
//! Per training batch `(e, k)` every frame is stamped with that pair and a
//! phase. In private mode the exchange is:
//!
//! ```text
//! dealer -> client  InputMask  α_in                      (Preprocessing)
//! dealer -> Pj      Bundle     α_in share, keys, triples (Preprocessing)
//! client -> Pj      MaskedInput  ATm + α_in              (Forward)
//! P0 <-> P1         Opening    masked values             (Forward)
//! Pj -> client      CutActivation share                  (Forward)
//! client -> Pj      CutGradient share                    (Loss)
//! P0 <-> P1         Opening                              (Backward)
//! Pj -> client      InputGradient share                  (Backward)
//! ```
//!
//! Test batches use epoch `E` and the `Test` phase, without the gradient
//! half. Public modes replace the two servers by P0 running plaintext.

mod client;
pub mod config;
mod dealer;
pub mod material;
pub mod model;
pub mod net;
mod server;
pub mod session;
pub mod sync;

use serde::Serialize;

pub use client::{run_client, ClientOutcome};
pub use config::{Endpoints, Mode, SessionConfig, TrainConfig};
pub use dealer::run_dealer;
pub use model::{LayerParams, RawTensor, TrainedModel};
pub use server::{run_private_server, run_public_server, ServerOutcome};
pub use session::{run_inference, run_role, run_session, run_training, Backend, CommReport, RoleOutcome, RunOptions, SessionOutcome};

use crate::error::{Error, Result};
use crate::sharing::{os_rng, seeded_rng};
use crate::transport::{Channel, Phase, Role};

/// A role's channels, keyed by peer.
#[derive(Debug, Default)]
pub struct Peers {
    chans: Vec<Channel>,
}

impl Peers {
    pub fn new(chans: Vec<Channel>) -> Self {
        Self { chans }
    }

    pub fn get(&mut self, role: Role) -> Result<&mut Channel> {
        self.chans
            .iter_mut()
            .find(|c| c.peer() == role)
            .ok_or_else(|| Error::ChannelClosed(format!("no channel to {}", role)))
    }

    pub fn roles(&self) -> Vec<Role> {
        self.chans.iter().map(|c| c.peer()).collect()
    }

    pub fn enter_all(&mut self, epoch: usize, batch: usize, phase: Phase) {
        for c in &mut self.chans {
            c.enter(epoch as u16, batch as u32, phase);
        }
    }

    pub fn set_phase_all(&mut self, phase: Phase) {
        for c in &mut self.chans {
            c.set_phase(phase);
        }
    }
}

/// Generator for randomness that must stay private to one role.
pub(crate) fn private_rng(seed: Option<u64>, stream: u64) -> rand_chacha::ChaCha20Rng {
    match seed {
        Some(s) => seeded_rng(s, stream),
        None => os_rng(),
    }
}

/// Mean loss per training batch and final test accuracy.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub losses: Vec<f64>,
    pub correct: usize,
    pub tested: usize,
}

impl Metrics {
    pub fn accuracy(&self) -> Option<f64> {
        (self.tested > 0).then(|| self.correct as f64 / self.tested as f64)
    }
}
