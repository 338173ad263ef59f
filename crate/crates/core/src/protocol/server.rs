//! The servers: P0 alone in public modes, P0 and P1 on shares in private mode.

use crate::error::{Error, Result};
use crate::harness::dataset::one_hot;
use crate::nn::{secure, Arith, FixedArith};
use crate::protocol::client::start_params;
use crate::protocol::config::{Mode, SessionConfig};
use crate::protocol::material::{decode_params, BatchMaterial, PlanLayer, ServerPlan, ShareParams};
use crate::protocol::model::{RawTensor, TrainedModel};
use crate::protocol::sync::{answer, SyncParams};
use crate::protocol::Peers;
use crate::ring::{FixedConfig, FixedTensor, RingElement};
use crate::sharing::{PartyId, Share};
use crate::transport::{tensor_from_payload, tensor_payload, Channel, PayloadKind, Phase, Role};
use crate::FixedSegment;

#[derive(Clone, Debug)]
pub struct ServerOutcome {
    pub role: Role,
    /// `(global layer index, W, b)` for each parameterized layer held. In
    /// private mode these are this server's shares.
    pub params: Vec<(usize, RawTensor, RawTensor)>,
    /// Per-batch loss, computed here only in vanilla mode.
    pub losses: Vec<f64>,
}

/// P0 in the public modes: the middle segment in plaintext, plus the output
/// layer and loss in vanilla mode.
pub fn run_public_server(cfg: &SessionConfig, mut peers: Peers, initial: Option<&TrainedModel>) -> Result<ServerOutcome> {
    if cfg.mode.is_private() || cfg.mode == Mode::LocalPublic {
        return Err(Error::InvalidConfig(format!("no public server in {} mode", cfg.mode)));
    }
    cfg.validate()?;
    let fixed = cfg.fixed;
    let t = &cfg.train;
    let spec = &cfg.network;
    let part = spec.partition();
    let vanilla = cfg.mode == Mode::VanillaPublic;
    let range = if vanilla { part.server.start..part.output.end } else { part.server.clone() };
    let in_w = spec.width_at(range.start)?;
    let out_w = spec.width_at(part.output.start)?;

    let chan = peers.get(Role::Client)?;
    answer(chan, &SyncParams::of(cfg, initial.is_some())?)?;
    let params = start_params(cfg, initial)?;
    let arith = FixedArith::new(fixed);
    let mut seg = FixedSegment::from_spec(arith, spec, range.clone(), &params)?;
    let lr = t.lr_raw(fixed)?;
    let mut losses = Vec::new();

    for e in 0..t.epochs {
        for k in 0..t.batches {
            chan.enter(e as u16, k as u32, Phase::Forward);
            let rows = t.batch_size;
            let x = tensor_from_payload(fixed, &[rows, in_w], &chan.expect(PayloadKind::Activation)?)?;
            let y = seg.forward(x.into_tensor())?;
            let g = if vanilla {
                let labels = chan.expect(PayloadKind::Labels)?;
                if labels.len() != rows || labels.iter().any(|&l| l as usize >= spec.classes) {
                    return Err(Error::FrameCorrupt(format!("{} labels for a batch of {}", labels.len(), rows)));
                }
                let y_true = one_hot(&labels, spec.classes, fixed).into_tensor();
                let (j, g) = crate::nn::layers::mse_loss(&arith, &y, &y_true)?;
                losses.push(arith.to_f64(j));
                g
            } else {
                chan.send(PayloadKind::CutActivation, tensor_payload(&FixedTensor::from_tensor(fixed, y)))?;
                chan.set_phase(Phase::Loss);
                tensor_from_payload(fixed, &[rows, out_w], &chan.expect(PayloadKind::CutGradient)?)?.into_tensor()
            };
            chan.set_phase(Phase::Backward);
            let gx = seg.backward_update(g, lr, true)?.expect("input gradient requested");
            chan.send(PayloadKind::InputGradient, tensor_payload(&FixedTensor::from_tensor(fixed, gx)))?;
        }
    }

    for b in 0..t.test_batches() {
        chan.enter(t.epochs as u16, b as u32, Phase::Test);
        let rows = t.test_batch_len(b);
        let x = tensor_from_payload(fixed, &[rows, in_w], &chan.expect(PayloadKind::Activation)?)?;
        let y = FixedTensor::from_tensor(fixed, seg.forward(x.into_tensor())?);
        let kind = if vanilla { PayloadKind::Prediction } else { PayloadKind::CutActivation };
        chan.send(kind, tensor_payload(&y))?;
    }

    let params = range
        .zip(seg.params())
        .filter_map(|(i, p)| p.map(|(w, b)| (i, RawTensor::of_plain(&w), RawTensor::of_plain(&b))))
        .collect();
    Ok(ServerOutcome { role: Role::P0, params, losses })
}

/// Forward caches for one batch.
enum Cached {
    Fc { x: Share<FixedTensor> },
    Relu { bits: Share<FixedTensor> },
}

struct PrivateServer {
    party: PartyId,
    fixed: FixedConfig,
    plan: ServerPlan,
    params: ShareParams,
    lr: RingElement,
}

impl PrivateServer {
    /// This server's share of the cut input: `x_pub - α` on P0, `-α` on P1.
    fn unmask(&self, x_pub: &FixedTensor, alpha: &Share<FixedTensor>) -> Result<Share<FixedTensor>> {
        let neg = Share::new(self.party, alpha.value.neg());
        match self.party {
            PartyId::P0 => neg.add_public(x_pub),
            PartyId::P1 => Ok(neg),
        }
    }

    fn forward(
        &self,
        mut x: Share<FixedTensor>,
        mat: &mut BatchMaterial,
        peer: &mut Channel,
        keep: bool,
    ) -> Result<(Share<FixedTensor>, Vec<Cached>)> {
        let mut cache = Vec::with_capacity(self.plan.layers.len());
        for (i, layer) in self.plan.layers.iter().enumerate() {
            x = match layer {
                PlanLayer::Fc { .. } => {
                    let (w, b) = self.params[i].as_ref().expect("fc has parameters");
                    let y = secure::fc_secure_forward(&x, w, b, mat.fc_forward(i)?, peer)?;
                    if keep {
                        cache.push(Cached::Fc { x });
                    }
                    y
                }
                PlanLayer::Relu { .. } => {
                    let (keys, select) = mat.relu_forward(i)?;
                    let (y, bits) = secure::relu_secure_forward(&x, &keys, select, peer)?;
                    if keep {
                        cache.push(Cached::Relu { bits });
                    }
                    y
                }
            };
        }
        Ok((x, cache))
    }

    fn backward(
        &mut self,
        mut g: Share<FixedTensor>,
        cache: Vec<Cached>,
        mat: &mut BatchMaterial,
        peer: &mut Channel,
    ) -> Result<Share<FixedTensor>> {
        for (i, c) in cache.into_iter().enumerate().rev() {
            g = match c {
                Cached::Relu { bits } => secure::relu_secure_backward(&g, &bits, mat.relu_backward(i)?, peer)?,
                Cached::Fc { x } => {
                    let (t_dx, t_dw) = mat.fc_backward(i)?;
                    let (w, b) = self.params[i].as_mut().expect("fc has parameters");
                    let (gx, gw, gb) = secure::fc_secure_backward(&g, &x, w, t_dx, t_dw, peer)?;
                    *w = secure::sgd_update_share(w, &gw, self.lr)?;
                    *b = secure::sgd_update_share(b, &gb, self.lr)?;
                    gx
                }
            };
        }
        Ok(g)
    }

    fn material(&self, dealer: &mut Channel, epoch: usize, batch: usize, rows: usize, train: bool) -> Result<BatchMaterial> {
        dealer.enter(epoch as u16, batch as u32, Phase::Preprocessing);
        let mat = BatchMaterial::decode(self.party, self.fixed, &dealer.expect(PayloadKind::Bundle)?)?;
        if mat.rows != rows || mat.train != train || mat.layers.len() != self.plan.layers.len() {
            return Err(Error::UnexpectedMessage(format!(
                "bundle for {} rows (train {}) where {} rows (train {}) were due",
                mat.rows, mat.train, rows, train
            )));
        }
        Ok(mat)
    }
}

/// P0 or P1 in private mode.
pub fn run_private_server(cfg: &SessionConfig, role: Role, mut peers: Peers, initial: Option<&TrainedModel>) -> Result<ServerOutcome> {
    let party = match role {
        Role::P0 => PartyId::P0,
        Role::P1 => PartyId::P1,
        r => return Err(Error::InvalidConfig(format!("{} is not a server", r))),
    };
    if !cfg.mode.is_private() {
        return Err(Error::InvalidConfig(format!("shared servers run only in private mode, not {}", cfg.mode)));
    }
    cfg.validate()?;
    let fixed = cfg.fixed;
    let t = &cfg.train;
    let part = cfg.network.partition();
    let plan = ServerPlan::of(&cfg.network)?;
    let (in_w, out_w) = (plan.input_width, plan.output_width());
    let other = if party == PartyId::P0 { Role::P1 } else { Role::P0 };

    answer(peers.get(Role::Client)?, &SyncParams::of(cfg, initial.is_some())?)?;
    let params = match initial {
        Some(m) => {
            m.fixed.ensure_same(&fixed)?;
            m.server_shares(party, part.server.clone())?
        }
        None => {
            let dealer = peers.get(Role::Dealer)?;
            dealer.enter(0, 0, Phase::Preprocessing);
            decode_params(party, fixed, &dealer.expect(PayloadKind::WeightShares)?)?
        }
    };
    let well_formed = params.len() == plan.layers.len()
        && params.iter().zip(&plan.layers).all(|(p, l)| match (p, l) {
            (Some((w, b)), PlanLayer::Fc { inputs, outputs }) => {
                w.value.shape() == [*inputs, *outputs] && b.value.shape() == [*outputs] && w.party == party
            }
            (None, PlanLayer::Relu { .. }) => true,
            _ => false,
        });
    if !well_formed {
        return Err(Error::ShapeMismatch("weight shares do not match the server segment".into()));
    }
    let mut srv = PrivateServer { party, fixed, plan, params, lr: RingElement::new(t.lr_raw(fixed)?, fixed) };

    for e in 0..t.epochs {
        for k in 0..t.batches {
            let rows = t.batch_size;
            let mut mat = srv.material(peers.get(Role::Dealer)?, e, k, rows, true)?;
            peers.enter_all(e, k, Phase::Forward);
            let client = peers.get(Role::Client)?;
            let x_pub = tensor_from_payload(fixed, &[rows, in_w], &client.expect(PayloadKind::MaskedInput)?)?;
            let x = srv.unmask(&x_pub, &mat.alpha)?;
            let (y, cache) = srv.forward(x, &mut mat, peers.get(other)?, true)?;
            let client = peers.get(Role::Client)?;
            client.send(PayloadKind::CutActivation, tensor_payload(&y.value))?;
            client.set_phase(Phase::Loss);
            let g = tensor_from_payload(fixed, &[rows, out_w], &client.expect(PayloadKind::CutGradient)?)?;
            peers.set_phase_all(Phase::Backward);
            let gx = srv.backward(Share::new(party, g), cache, &mut mat, peers.get(other)?)?;
            peers.get(Role::Client)?.send(PayloadKind::InputGradient, tensor_payload(&gx.value))?;
        }
    }

    for b in 0..t.test_batches() {
        let rows = t.test_batch_len(b);
        let mut mat = srv.material(peers.get(Role::Dealer)?, t.epochs, b, rows, false)?;
        peers.enter_all(t.epochs, b, Phase::Test);
        let client = peers.get(Role::Client)?;
        let x_pub = tensor_from_payload(fixed, &[rows, in_w], &client.expect(PayloadKind::MaskedInput)?)?;
        let x = srv.unmask(&x_pub, &mat.alpha)?;
        let (y, _) = srv.forward(x, &mut mat, peers.get(other)?, false)?;
        peers.get(Role::Client)?.send(PayloadKind::CutActivation, tensor_payload(&y.value))?;
    }

    let params = part
        .server
        .zip(&srv.params)
        .filter_map(|(i, p)| p.as_ref().map(|(w, b)| (i, RawTensor::of(&w.value), RawTensor::of(&b.value))))
        .collect();
    Ok(ServerOutcome { role, params, losses: Vec::new() })
}
