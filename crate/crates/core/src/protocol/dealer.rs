//! The dealer: initial weight shares, then one batch of material at a time.
//!
//! Material is streamed rather than generated up front; the bounded links
//! keep the dealer at most a few batches ahead of the servers.

use crate::error::Result;
use crate::protocol::config::SessionConfig;
use crate::protocol::material::{encode_params, gen_batch, split_params, ServerPlan};
use crate::protocol::sync::{answer, SyncParams};
use crate::protocol::{private_rng, Peers};
use crate::streams;
use crate::transport::{tensor_payload, PayloadKind, Phase, Role};

pub fn run_dealer(cfg: &SessionConfig, mut peers: Peers, resumed: bool) -> Result<()> {
    cfg.validate()?;
    let fixed = cfg.fixed;
    let t = &cfg.train;
    answer(peers.get(Role::Client)?, &SyncParams::of(cfg, resumed)?)?;
    let plan = ServerPlan::of(&cfg.network)?;
    let mut rng = private_rng(cfg.private_seed, streams::DEALER);

    if !resumed {
        let init = crate::nn::init_params(&cfg.network, t.seed)?;
        let [s0, s1] = split_params(&init[cfg.network.partition().server], fixed, &mut rng)?;
        peers.enter_all(0, 0, Phase::Preprocessing);
        peers.get(Role::P0)?.send(PayloadKind::WeightShares, encode_params(&s0))?;
        peers.get(Role::P1)?.send(PayloadKind::WeightShares, encode_params(&s1))?;
    }

    let train = (0..t.epochs).flat_map(|e| (0..t.batches).map(move |k| (e, k, t.batch_size, true)));
    let test = (0..t.test_batches()).map(|b| (t.epochs, b, t.test_batch_len(b), false));
    for (e, k, rows, training) in train.chain(test) {
        let (alpha, [m0, m1]) = gen_batch(&plan, rows, training, fixed, &mut rng)?;
        peers.enter_all(e, k, Phase::Preprocessing);
        peers.get(Role::Client)?.send(PayloadKind::InputMask, tensor_payload(&alpha))?;
        peers.get(Role::P0)?.send(PayloadKind::Bundle, m0.encode())?;
        peers.get(Role::P1)?.send(PayloadKind::Bundle, m1.encode())?;
    }
    Ok(())
}
