//! The data owner: front and output layers, labels, and the loss.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::harness::dataset::{one_hot, Dataset};
use crate::nn::{Arith, FixedArith, RealParams};
use crate::protocol::config::{Mode, SessionConfig};
use crate::protocol::model::{LayerParams, RawTensor, TrainedModel};
use crate::protocol::sync::{propose, SyncParams};
use crate::protocol::{private_rng, Metrics, Peers};
use crate::ring::{FixedConfig, FixedTensor};
use crate::sharing::{seeded_rng, split};
use crate::streams;
use crate::tensor::Tensor;
use crate::transport::{tensor_from_payload, tensor_payload, PayloadKind, Phase, Role};
use crate::FixedSegment;

#[derive(Clone, Debug)]
pub struct ClientOutcome {
    pub metrics: Metrics,
    /// Predicted class per test sample, in test-set order.
    pub predictions: Vec<u8>,
    /// Final parameters of the layers the client holds, by global index.
    pub layers: Vec<(usize, LayerParams)>,
}

struct Client<'a> {
    cfg: &'a SessionConfig,
    fixed: FixedConfig,
    peers: Peers,
    front: FixedSegment,
    /// Server layers, run locally in local mode only.
    middle: Option<FixedSegment>,
    output: FixedSegment,
    lr: u64,
    cut_in: usize,
    cut_out: usize,
    share_rng: rand_chacha::ChaCha20Rng,
}

pub fn run_client(
    cfg: &SessionConfig,
    peers: Peers,
    train: &Dataset,
    test: &Dataset,
    initial: Option<&TrainedModel>,
) -> Result<ClientOutcome> {
    cfg.validate()?;
    let fixed = cfg.fixed;
    let spec = &cfg.network;
    for d in [train, test] {
        if d.sample_shape() != spec.input_shape.as_slice() || d.classes != spec.classes {
            return Err(Error::ShapeMismatch(format!(
                "dataset of {:?} samples and {} classes for a network over {:?} and {} classes",
                d.sample_shape(),
                d.classes,
                spec.input_shape,
                spec.classes
            )));
        }
    }
    let t = &cfg.train;
    if train.len() < t.batches * t.batch_size || test.len() < t.test_samples {
        return Err(Error::InvalidConfig(format!(
            "{} batches of {} and {} test samples need more than {} / {} samples",
            t.batches,
            t.batch_size,
            t.test_samples,
            train.len(),
            test.len()
        )));
    }
    let train = train.with_config(fixed)?;
    let test = test.with_config(fixed)?;

    let mut peers = peers;
    let local = SyncParams::of(cfg, initial.is_some())?;
    for &role in &cfg.mode.roles()[1..] {
        propose(peers.get(role)?, &local)?;
    }

    let params = start_params(cfg, initial)?;
    let part = spec.partition();
    let arith = FixedArith::new(fixed);
    let front = FixedSegment::from_spec(arith, spec, part.front.clone(), &params)?;
    let output = FixedSegment::from_spec(arith, spec, part.output.clone(), &params)?;
    let middle = match cfg.mode {
        Mode::LocalPublic => Some(FixedSegment::from_spec(arith, spec, part.server.clone(), &params)?),
        _ => None,
    };
    let mut client = Client {
        cfg,
        fixed,
        peers,
        front,
        middle,
        output,
        lr: t.lr_raw(fixed)?,
        cut_in: spec.width_at(part.server.start)?,
        cut_out: spec.width_at(part.output.start)?,
        share_rng: private_rng(cfg.private_seed, streams::CLIENT_SHARES),
    };

    let mut metrics = Metrics::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = seeded_rng(t.seed, streams::SHUFFLE);
    for e in 0..t.epochs {
        order.shuffle(&mut shuffle);
        for k in 0..t.batches {
            let idx = &order[k * t.batch_size..(k + 1) * t.batch_size];
            if let Some(loss) = client.train_batch(e, k, &train, idx)? {
                metrics.losses.push(loss);
            }
        }
    }

    let mut predictions = Vec::with_capacity(t.test_samples);
    for b in 0..t.test_batches() {
        let start = b * t.batch_size;
        let idx: Vec<usize> = (start..start + t.test_batch_len(b)).collect();
        let (x, labels) = test.batch(&idx);
        let pred = client.test_batch(t.epochs, b, x)?;
        metrics.correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        predictions.extend(pred);
    }
    metrics.tested = predictions.len();

    let mut layers = Vec::new();
    let mut collect = |range: std::ops::Range<usize>, seg: &FixedSegment| {
        for (i, p) in range.zip(seg.params()) {
            layers.push((
                i,
                match p {
                    None => LayerParams::None,
                    Some((w, b)) => LayerParams::Plain { w: RawTensor::of_plain(&w), b: RawTensor::of_plain(&b) },
                },
            ));
        }
    };
    collect(part.front.clone(), &client.front);
    if let Some(m) = &client.middle {
        collect(part.server.clone(), m);
    }
    collect(part.output.clone(), &client.output);
    Ok(ClientOutcome { metrics, predictions, layers })
}

/// Full-network real parameters to start from.
pub(crate) fn start_params(cfg: &SessionConfig, initial: Option<&TrainedModel>) -> Result<Vec<Option<RealParams>>> {
    match initial {
        None => crate::nn::init_params(&cfg.network, cfg.train.seed),
        Some(m) => {
            m.fixed.ensure_same(&cfg.fixed)?;
            if m.network != cfg.network {
                return Err(Error::Spec(format!("model is for {}, session for {}", m.network.name, cfg.network.name)));
            }
            let mut plain = m.clone();
            // Server shares are never joined on the client.
            for l in &mut plain.layers {
                if matches!(l, LayerParams::Shared { .. }) {
                    *l = LayerParams::None;
                }
            }
            plain.real_params()
        }
    }
}

fn argmax_rows(cfg: FixedConfig, y: &FixedTensor) -> Vec<u8> {
    let c = y.shape()[1];
    y.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if cfg.to_signed(v) > cfg.to_signed(row[best]) {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

impl Client<'_> {
    fn fixed(&self, t: Tensor<u64>) -> FixedTensor {
        FixedTensor::from_tensor(self.fixed, t)
    }

    /// Runs the front segment and flattens the activation map to `[b, width]`.
    fn front_forward(&mut self, x: FixedTensor) -> Result<(FixedTensor, Vec<usize>)> {
        let atm = self.front.forward(x.into_tensor())?;
        let shape = atm.shape().to_vec();
        let rows = shape[0];
        let flat = self.fixed(atm).reshape(vec![rows, self.cut_in])?;
        Ok((flat, shape))
    }

    /// Private mode only: the dealer's input mask for this batch.
    fn input_mask(&mut self, epoch: usize, batch: usize, rows: usize) -> Result<FixedTensor> {
        let (fixed, width) = (self.fixed, self.cut_in);
        let dealer = self.peers.get(Role::Dealer)?;
        dealer.enter(epoch as u16, batch as u32, Phase::Preprocessing);
        tensor_from_payload(fixed, &[rows, width], &dealer.expect(PayloadKind::InputMask)?)
    }

    /// Sends the (masked) cut input and returns the reconstructed cut
    /// activation. Vanilla mode has no cut activation and returns `None`.
    fn server_forward(&mut self, flat: &FixedTensor, alpha: Option<FixedTensor>) -> Result<Option<FixedTensor>> {
        let rows = flat.shape()[0];
        let out_shape = [rows, self.cut_out];
        match self.cfg.mode {
            Mode::LocalPublic => {
                let m = self.middle.as_mut().expect("local mode runs the middle segment");
                let y = m.forward(flat.to_tensor())?;
                Ok(Some(self.fixed(y)))
            }
            Mode::VanillaPublic => {
                self.peers.get(Role::P0)?.send(PayloadKind::Activation, tensor_payload(flat))?;
                Ok(None)
            }
            Mode::UShapedPublic => {
                let p0 = self.peers.get(Role::P0)?;
                p0.send(PayloadKind::Activation, tensor_payload(flat))?;
                let cut = p0.expect(PayloadKind::CutActivation)?;
                Ok(Some(tensor_from_payload(self.fixed, &out_shape, &cut)?))
            }
            Mode::UShapedPrivate => {
                let alpha = alpha.expect("private mode masks its input");
                let x_pub = tensor_payload(&flat.add(&alpha)?);
                self.peers.get(Role::P0)?.send(PayloadKind::MaskedInput, x_pub.clone())?;
                self.peers.get(Role::P1)?.send(PayloadKind::MaskedInput, x_pub)?;
                let mut cut = FixedTensor::zeros(self.fixed, out_shape.to_vec());
                for r in [Role::P0, Role::P1] {
                    let s = self.peers.get(r)?.expect(PayloadKind::CutActivation)?;
                    cut = cut.add(&tensor_from_payload(self.fixed, &out_shape, &s)?)?;
                }
                Ok(Some(cut))
            }
        }
    }

    /// Hands the cut gradient back and returns the gradient at the cut input.
    fn server_backward(&mut self, g_cut: Option<FixedTensor>, rows: usize) -> Result<FixedTensor> {
        let in_shape = [rows, self.cut_in];
        match self.cfg.mode {
            Mode::LocalPublic => {
                let lr = self.lr;
                let m = self.middle.as_mut().expect("local mode runs the middle segment");
                let g = m.backward_update(g_cut.expect("cut gradient").into_tensor(), lr, true)?;
                Ok(self.fixed(g.expect("input gradient requested")))
            }
            Mode::VanillaPublic | Mode::UShapedPublic => {
                let fixed = self.fixed;
                let p0 = self.peers.get(Role::P0)?;
                if let Some(g) = g_cut {
                    p0.set_phase(Phase::Loss);
                    p0.send(PayloadKind::CutGradient, tensor_payload(&g))?;
                }
                p0.set_phase(Phase::Backward);
                tensor_from_payload(fixed, &in_shape, &p0.expect(PayloadKind::InputGradient)?)
            }
            Mode::UShapedPrivate => {
                let (g0, g1) = split(&g_cut.expect("cut gradient"), &mut self.share_rng)?;
                self.peers.set_phase_all(Phase::Loss);
                self.peers.get(Role::P0)?.send(PayloadKind::CutGradient, tensor_payload(&g0.value))?;
                self.peers.get(Role::P1)?.send(PayloadKind::CutGradient, tensor_payload(&g1.value))?;
                self.peers.set_phase_all(Phase::Backward);
                let mut g = FixedTensor::zeros(self.fixed, in_shape.to_vec());
                for r in [Role::P0, Role::P1] {
                    let s = self.peers.get(r)?.expect(PayloadKind::InputGradient)?;
                    g = g.add(&tensor_from_payload(self.fixed, &in_shape, &s)?)?;
                }
                Ok(g)
            }
        }
    }

    /// One SGD step; returns the batch loss when the client computes it.
    fn train_batch(&mut self, epoch: usize, batch: usize, data: &Dataset, idx: &[usize]) -> Result<Option<f64>> {
        let rows = idx.len();
        let alpha = match self.cfg.mode {
            Mode::UShapedPrivate => Some(self.input_mask(epoch, batch, rows)?),
            _ => None,
        };
        self.peers.enter_all(epoch, batch, Phase::Forward);
        let (x, labels) = data.batch(idx);
        let (flat, atm_shape) = self.front_forward(x)?;
        let cut = self.server_forward(&flat, alpha)?;

        let (loss, g_cut) = match cut {
            Some(cut) => {
                let a = *self.output.arith();
                let y_hat = self.output.forward(cut.into_tensor())?;
                let y = one_hot(&labels, self.cfg.network.classes, self.fixed).into_tensor();
                let (j, g) = crate::nn::layers::mse_loss(&a, &y_hat, &y)?;
                let g_cut = self.output.backward_update(g, self.lr, true)?.expect("input gradient requested");
                (Some(a.to_f64(j)), Some(self.fixed(g_cut)))
            }
            None => {
                self.peers.get(Role::P0)?.send(PayloadKind::Labels, labels)?;
                (None, None)
            }
        };
        let g_in = self.server_backward(g_cut, rows)?;
        let g_atm = g_in.reshape(atm_shape)?;
        self.front.backward_update(g_atm.into_tensor(), self.lr, false)?;
        Ok(loss)
    }

    fn test_batch(&mut self, epochs: usize, batch: usize, x: FixedTensor) -> Result<Vec<u8>> {
        let rows = x.shape()[0];
        let alpha = match self.cfg.mode {
            Mode::UShapedPrivate => Some(self.input_mask(epochs, batch, rows)?),
            _ => None,
        };
        self.peers.enter_all(epochs, batch, Phase::Test);
        let (flat, _) = self.front_forward(x)?;
        let y_hat = match self.server_forward(&flat, alpha)? {
            Some(cut) => {
                let y = self.output.forward(cut.into_tensor())?;
                self.fixed(y)
            }
            None => {
                let classes = self.cfg.network.classes;
                let p = self.peers.get(Role::P0)?.expect(PayloadKind::Prediction)?;
                tensor_from_payload(self.fixed, &[rows, classes], &p)?
            }
        };
        Ok(argmax_rows(self.fixed, &y_hat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_is_signed_and_first_on_ties() {
        let cfg = FixedConfig::default();
        let y = FixedTensor::from_f64(cfg, vec![2, 3], &[-1.0, -0.5, -2.0, 0.25, 0.25, 0.1]).unwrap();
        assert_eq!(argmax_rows(cfg, &y), vec![1, 0]);
    }
}
