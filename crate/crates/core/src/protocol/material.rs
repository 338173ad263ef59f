//! Dealer-issued correlated randomness and initial weight shares.
//!
//! For a batch of `b` rows the dealer draws a fresh input mask `α_in`
//! (plaintext to the client, shares to the servers) and, per server layer:
//!
//! * FC `in -> out`: a forward triple `(b, in, out)`, and for training a
//!   `dX` triple `(b, out, in)` and a `dW` triple `(in, b, out)`;
//! * ReLU of width `w`: `b * w` comparison keys and a select triple of
//!   length `b * w`, plus a backward triple of the same length for training.

use rand::{CryptoRng, RngCore};

use crate::beaver::{gen_mat_triple, gen_vec_triple, MatTriple, Triple, VecTriple};
use crate::error::{Error, Result};
use crate::fss::{keygen_comparison, ComparisonKey, KeyBundle};
use crate::nn::{LayerKind, NetworkSpec, RealParams};
use crate::ring::{FixedConfig, FixedTensor};
use crate::sharing::{random_tensor, split, PartyId, Share};
use crate::transport::{Reader, Writer};

/// The server segment as the dealer and servers see it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServerPlan {
    /// Per-sample width entering the segment.
    pub input_width: usize,
    pub layers: Vec<PlanLayer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanLayer {
    Fc { inputs: usize, outputs: usize },
    Relu { width: usize },
}

impl ServerPlan {
    pub fn of(spec: &NetworkSpec) -> Result<Self> {
        let part = spec.partition();
        let input_width = spec.width_at(part.server.start)?;
        let layers = part
            .server
            .clone()
            .map(|i| match spec.layers[i].kind {
                LayerKind::Fc { inputs, outputs } => Ok(PlanLayer::Fc { inputs, outputs }),
                LayerKind::Relu => Ok(PlanLayer::Relu { width: spec.width_at(i)? }),
                k => Err(Error::Spec(format!("{:?} cannot run on the servers", k))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { input_width, layers })
    }

    pub fn output_width(&self) -> usize {
        match self.layers.last() {
            Some(PlanLayer::Fc { outputs, .. }) => *outputs,
            Some(PlanLayer::Relu { width }) => *width,
            None => self.input_width,
        }
    }

    /// Comparison keys needed per batch row.
    pub fn keys_per_row(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                PlanLayer::Relu { width } => *width,
                PlanLayer::Fc { .. } => 0,
            })
            .sum()
    }
}

/// One server's material for one server layer.
#[derive(Debug)]
pub enum LayerMaterial {
    Fc { fwd: Option<MatTriple>, dx: Option<MatTriple>, dw: Option<MatTriple> },
    Relu { keys: KeyBundle, select: Option<VecTriple>, bwd: Option<VecTriple> },
}

/// One server's material for one batch.
#[derive(Debug)]
pub struct BatchMaterial {
    pub party: PartyId,
    pub train: bool,
    pub rows: usize,
    pub alpha: Share<FixedTensor>,
    pub layers: Vec<LayerMaterial>,
}

fn take<T>(slot: &mut Option<T>, what: &'static str) -> Result<T> {
    slot.take().ok_or(Error::TripleExhausted(what))
}

impl BatchMaterial {
    pub fn fc_forward(&mut self, layer: usize) -> Result<MatTriple> {
        match &mut self.layers[layer] {
            LayerMaterial::Fc { fwd, .. } => take(fwd, "fc forward"),
            _ => Err(Error::TripleExhausted("fc forward")),
        }
    }

    pub fn fc_backward(&mut self, layer: usize) -> Result<(MatTriple, MatTriple)> {
        match &mut self.layers[layer] {
            LayerMaterial::Fc { dx, dw, .. } => Ok((take(dx, "fc input gradient")?, take(dw, "fc weight gradient")?)),
            _ => Err(Error::TripleExhausted("fc backward")),
        }
    }

    pub fn relu_forward(&mut self, layer: usize) -> Result<(Vec<ComparisonKey>, VecTriple)> {
        match &mut self.layers[layer] {
            LayerMaterial::Relu { keys, select, .. } => {
                let n = keys.len();
                Ok((keys.take_range(0, n)?, take(select, "relu select")?))
            }
            _ => Err(Error::KeyExhausted(0)),
        }
    }

    pub fn relu_backward(&mut self, layer: usize) -> Result<VecTriple> {
        match &mut self.layers[layer] {
            LayerMaterial::Relu { bwd, .. } => take(bwd, "relu backward"),
            _ => Err(Error::TripleExhausted("relu backward")),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.train as u8).u32(self.rows as u32).tensor_with_shape(&self.alpha.value);
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            match l {
                LayerMaterial::Fc { fwd, dx, dw } => {
                    w.u8(1);
                    for t in [fwd, dx, dw].into_iter().flatten() {
                        write_mat(&mut w, t);
                    }
                }
                LayerMaterial::Relu { keys, select, bwd } => {
                    w.u8(2).u32(keys.iter().count() as u32);
                    for k in keys.iter() {
                        k.write(&mut w);
                    }
                    for t in [select, bwd].into_iter().flatten() {
                        write_vec(&mut w, t);
                    }
                }
            }
        }
        w.finish()
    }

    pub fn decode(party: PartyId, cfg: FixedConfig, payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let train = r.u8()? != 0;
        let rows = r.u32()? as usize;
        let alpha = Share::new(party, r.tensor_with_shape(cfg)?);
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            layers.push(match r.u8()? {
                1 => {
                    let fwd = Some(read_mat(&mut r, party, cfg)?);
                    let (dx, dw) = if train {
                        (Some(read_mat(&mut r, party, cfg)?), Some(read_mat(&mut r, party, cfg)?))
                    } else {
                        (None, None)
                    };
                    LayerMaterial::Fc { fwd, dx, dw }
                }
                2 => {
                    let count = r.u32()? as usize;
                    let keys = (0..count).map(|_| ComparisonKey::read(cfg, &mut r)).collect::<Result<Vec<_>>>()?;
                    if keys.iter().any(|k| k.party != party) {
                        return Err(Error::FrameCorrupt("bundle carries the other server's keys".into()));
                    }
                    let select = Some(read_vec(&mut r, party, cfg)?);
                    let bwd = if train { Some(read_vec(&mut r, party, cfg)?) } else { None };
                    LayerMaterial::Relu { keys: KeyBundle::new(keys), select, bwd }
                }
                t => return Err(Error::FrameCorrupt(format!("bundle layer tag {}", t))),
            });
        }
        r.finish()?;
        Ok(Self { party, train, rows, alpha, layers })
    }
}

fn write_mat(w: &mut Writer, t: &MatTriple) {
    w.tensor_with_shape(&t.a.value).tensor_with_shape(&t.b.value).tensor_with_shape(&t.c.value);
}

fn write_vec(w: &mut Writer, t: &VecTriple) {
    w.tensor_with_shape(&t.a.value).tensor_with_shape(&t.b.value).tensor_with_shape(&t.c.value);
}

fn read_mat(r: &mut Reader<'_>, party: PartyId, cfg: FixedConfig) -> Result<MatTriple> {
    let a = Share::new(party, r.tensor_with_shape(cfg)?);
    let b = Share::new(party, r.tensor_with_shape(cfg)?);
    let c = Share::new(party, r.tensor_with_shape(cfg)?);
    if a.value.shape().len() != 2 || b.value.shape().len() != 2 || a.value.shape()[1] != b.value.shape()[0] {
        return Err(Error::FrameCorrupt(format!("matrix triple {:?} x {:?}", a.value.shape(), b.value.shape())));
    }
    Ok(MatTriple { a, b, c })
}

fn read_vec(r: &mut Reader<'_>, party: PartyId, cfg: FixedConfig) -> Result<VecTriple> {
    let a = Share::new(party, r.tensor_with_shape(cfg)?);
    let b = Share::new(party, r.tensor_with_shape(cfg)?);
    let c = Share::new(party, r.tensor_with_shape(cfg)?);
    Ok(Triple { a, b, c })
}

/// Draws both servers' material for one batch, and the client's plaintext
/// input mask `[rows, input_width]`.
pub fn gen_batch<R: RngCore + CryptoRng>(
    plan: &ServerPlan,
    rows: usize,
    train: bool,
    cfg: FixedConfig,
    rng: &mut R,
) -> Result<(FixedTensor, [BatchMaterial; 2])> {
    let alpha = random_tensor(cfg, vec![rows, plan.input_width], rng);
    let (a0, a1) = split(&alpha, rng)?;
    let mut l0 = Vec::with_capacity(plan.layers.len());
    let mut l1 = Vec::with_capacity(plan.layers.len());
    for layer in &plan.layers {
        match *layer {
            PlanLayer::Fc { inputs, outputs } => {
                let (f0, f1) = gen_mat_triple(rows, inputs, outputs, cfg, rng);
                let (x0, x1, w0, w1) = if train {
                    let (x0, x1) = gen_mat_triple(rows, outputs, inputs, cfg, rng);
                    let (w0, w1) = gen_mat_triple(inputs, rows, outputs, cfg, rng);
                    (Some(x0), Some(x1), Some(w0), Some(w1))
                } else {
                    (None, None, None, None)
                };
                l0.push(LayerMaterial::Fc { fwd: Some(f0), dx: x0, dw: w0 });
                l1.push(LayerMaterial::Fc { fwd: Some(f1), dx: x1, dw: w1 });
            }
            PlanLayer::Relu { width } => {
                let n = rows * width;
                let (mut k0, mut k1) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for _ in 0..n {
                    let (_, a, b) = keygen_comparison(cfg, rng);
                    k0.push(a);
                    k1.push(b);
                }
                let (s0, s1) = gen_vec_triple(n, cfg, rng);
                let (b0, b1) = if train {
                    let (b0, b1) = gen_vec_triple(n, cfg, rng);
                    (Some(b0), Some(b1))
                } else {
                    (None, None)
                };
                l0.push(LayerMaterial::Relu { keys: KeyBundle::new(k0), select: Some(s0), bwd: b0 });
                l1.push(LayerMaterial::Relu { keys: KeyBundle::new(k1), select: Some(s1), bwd: b1 });
            }
        }
    }
    let m0 = BatchMaterial { party: PartyId::P0, train, rows, alpha: a0, layers: l0 };
    let m1 = BatchMaterial { party: PartyId::P1, train, rows, alpha: a1, layers: l1 };
    Ok((alpha, [m0, m1]))
}

/// Server-segment parameters as `(W, b)` shares, `None` for ReLU.
pub type ShareParams = Vec<Option<(Share<FixedTensor>, Share<FixedTensor>)>>;

/// Encodes real parameters and splits them between the servers.
pub fn split_params<R: RngCore + CryptoRng>(
    params: &[Option<RealParams>],
    cfg: FixedConfig,
    rng: &mut R,
) -> Result<[ShareParams; 2]> {
    let mut out = [Vec::new(), Vec::new()];
    for p in params {
        match p {
            None => {
                out[0].push(None);
                out[1].push(None);
            }
            Some(p) => {
                let w = FixedTensor::from_f64(cfg, p.w_shape.clone(), &p.w)?;
                let b = FixedTensor::from_f64(cfg, vec![p.b.len()], &p.b)?;
                let (w0, w1) = split(&w, rng)?;
                let (b0, b1) = split(&b, rng)?;
                out[0].push(Some((w0, b0)));
                out[1].push(Some((w1, b1)));
            }
        }
    }
    Ok(out)
}

pub fn encode_params(params: &ShareParams) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(params.len() as u32);
    for p in params {
        match p {
            None => {
                w.u8(0);
            }
            Some((wt, b)) => {
                w.u8(1).tensor_with_shape(&wt.value).tensor_with_shape(&b.value);
            }
        }
    }
    w.finish()
}

pub fn decode_params(party: PartyId, cfg: FixedConfig, payload: &[u8]) -> Result<ShareParams> {
    let mut r = Reader::new(payload);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(match r.u8()? {
            0 => None,
            1 => Some((Share::new(party, r.tensor_with_shape(cfg)?), Share::new(party, r.tensor_with_shape(cfg)?))),
            t => return Err(Error::FrameCorrupt(format!("weight share tag {}", t))),
        });
    }
    r.finish()?;
    Ok(out)
}
