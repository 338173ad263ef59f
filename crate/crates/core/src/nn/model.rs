//! Runnable plaintext segments built from layer specs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::arith::Arith;
use crate::nn::layers;
use crate::nn::spec::{LayerKind, NetworkSpec};
use crate::sharing::seeded_rng;
use crate::tensor::Tensor;

/// Real-valued parameters of one layer: `(weights, bias)` with shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealParams {
    pub w_shape: Vec<usize>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Draws initial parameters for every layer of `spec`: weights and biases
/// uniform in `±1/sqrt(fan_in)`. Layers without parameters get `None`.
/// Independent of placement, so every role derives the same values.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<Vec<Option<RealParams>>> {
    let shapes = spec.shapes()?;
    let mut rng = seeded_rng(seed, crate::streams::INIT);
    Ok(spec
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, input)| {
            l.kind.param_shape(input).map(|(w_shape, nb, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let nw: usize = w_shape.iter().product();
                let w = (0..nw).map(|_| rng.gen_range(-bound..bound)).collect();
                let b = (0..nb).map(|_| rng.gen_range(-bound..bound)).collect();
                RealParams { w_shape, w, b }
            })
        })
        .collect())
}

/// Gradients of one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad<E> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

#[derive(Clone, Debug)]
enum Cache<E> {
    None,
    Input(Tensor<E>),
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Mask(Vec<bool>),
}

#[derive(Clone, Debug)]
struct Slot<E> {
    kind: LayerKind,
    params: Option<(Tensor<E>, Tensor<E>)>,
    cache: Cache<E>,
}

/// A contiguous run of plaintext layers with parameters and forward caches.
#[derive(Clone, Debug)]
pub struct Segment<A: Arith> {
    arith: A,
    slots: Vec<Slot<A::Elem>>,
}

impl<A: Arith> Segment<A> {
    /// Builds a segment from layer kinds and their real-valued parameters.
    pub fn new(arith: A, kinds: &[LayerKind], params: &[Option<RealParams>]) -> Result<Self> {
        if kinds.len() != params.len() {
            return Err(Error::Spec(format!("{} layers with {} parameter slots", kinds.len(), params.len())));
        }
        let slots = kinds
            .iter()
            .zip(params)
            .map(|(&kind, p)| {
                let params = match (kind.has_params(), p) {
                    (true, Some(p)) => Some(Self::encode(&arith, p)?),
                    (false, None) => None,
                    _ => return Err(Error::Spec(format!("parameter slot does not match {:?}", kind))),
                };
                Ok(Slot { kind, params, cache: Cache::None })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arith, slots })
    }

    fn encode(arith: &A, p: &RealParams) -> Result<(Tensor<A::Elem>, Tensor<A::Elem>)> {
        let enc = |v: &[f64]| v.iter().map(|&x| arith.from_f64(x)).collect::<Result<Vec<_>>>();
        Ok((Tensor::new(p.w_shape.clone(), enc(&p.w)?)?, Tensor::new(vec![p.b.len()], enc(&p.b)?)?))
    }

    /// Builds layers `range` of `spec` from a full-network parameter list.
    pub fn from_spec(arith: A, spec: &NetworkSpec, range: std::ops::Range<usize>, params: &[Option<RealParams>]) -> Result<Self> {
        let kinds: Vec<LayerKind> = spec.layers[range.clone()].iter().map(|l| l.kind).collect();
        Self::new(arith, &kinds, &params[range])
    }

    pub fn arith(&self) -> &A {
        &self.arith
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.slots.iter().map(|s| s.kind).collect()
    }

    /// Raw parameters per layer.
    pub fn params(&self) -> Vec<Option<(Tensor<A::Elem>, Tensor<A::Elem>)>> {
        self.slots.iter().map(|s| s.params.clone()).collect()
    }

    /// Replaces raw parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Option<(Tensor<A::Elem>, Tensor<A::Elem>)>>) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::ShapeMismatch(format!("{} parameter slots for {} layers", params.len(), self.slots.len())));
        }
        for (slot, p) in self.slots.iter_mut().zip(params) {
            match (&slot.params, &p) {
                (Some((w, b)), Some((nw, nb))) if w.shape() == nw.shape() && b.shape() == nb.shape() => {}
                (None, None) => {}
                _ => return Err(Error::ShapeMismatch(format!("parameter shapes for {:?}", slot.kind))),
            }
            slot.params = p;
        }
        Ok(())
    }

    /// Decoded parameters per layer.
    pub fn real_params(&self) -> Vec<Option<RealParams>> {
        let a = &self.arith;
        self.slots
            .iter()
            .map(|s| {
                s.params.as_ref().map(|(w, b)| RealParams {
                    w_shape: w.shape().to_vec(),
                    w: w.data().iter().map(|&v| a.to_f64(v)).collect(),
                    b: b.data().iter().map(|&v| a.to_f64(v)).collect(),
                })
            })
            .collect()
    }

    /// Runs the segment, caching what backward needs.
    pub fn forward(&mut self, mut x: Tensor<A::Elem>) -> Result<Tensor<A::Elem>> {
        let a = self.arith.clone();
        for slot in &mut self.slots {
            x = match slot.kind {
                LayerKind::Conv2d { stride, .. } => {
                    let (w, b) = slot.params.as_ref().expect("conv has parameters");
                    let y = layers::conv2d_forward(&a, &x, w, b, stride)?;
                    slot.cache = Cache::Input(x);
                    y
                }
                LayerKind::MaxPool2x2 => {
                    let (y, argmax) = layers::maxpool2x2_forward(&a, &x)?;
                    slot.cache = Cache::Pool { argmax, in_shape: x.shape().to_vec() };
                    y
                }
                LayerKind::Relu => {
                    let (y, mask) = layers::relu_plain_forward(&a, &x);
                    slot.cache = Cache::Mask(mask);
                    y
                }
                LayerKind::Fc { .. } => {
                    let (w, b) = slot.params.as_ref().expect("fc has parameters");
                    let y = layers::fc_plain_forward(&a, &x, w, b)?;
                    slot.cache = Cache::Input(x);
                    y
                }
            };
        }
        Ok(x)
    }

    /// Backpropagates `grad` through the cached forward pass. Returns the
    /// input gradient (when requested) and per-layer parameter gradients.
    #[allow(clippy::type_complexity)]
    pub fn backward(
        &mut self,
        mut grad: Tensor<A::Elem>,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor<A::Elem>>, Vec<Option<ParamGrad<A::Elem>>>)> {
        let a = self.arith.clone();
        let n = self.slots.len();
        let mut grads = vec![None; n];
        for (i, slot) in self.slots.iter_mut().enumerate().rev() {
            let need_x = i > 0 || need_input_grad;
            let cache = std::mem::replace(&mut slot.cache, Cache::None);
            grad = match (slot.kind, cache) {
                (LayerKind::Conv2d { stride, .. }, Cache::Input(x)) => {
                    let (w, _) = slot.params.as_ref().expect("conv has parameters");
                    let (gx, gw, gb) = layers::conv2d_backward(&a, &grad, &x, w, stride, need_x)?;
                    grads[i] = Some(ParamGrad { w: gw, b: gb });
                    match gx {
                        Some(g) => g,
                        None => break,
                    }
                }
                (LayerKind::MaxPool2x2, Cache::Pool { argmax, in_shape }) => {
                    layers::maxpool2x2_backward(&a, &grad, &argmax, &in_shape)?
                }
                (LayerKind::Relu, Cache::Mask(mask)) => layers::relu_plain_backward(&a, &grad, &mask)?,
                (LayerKind::Fc { .. }, Cache::Input(x)) => {
                    let (w, _) = slot.params.as_ref().expect("fc has parameters");
                    let (gx, gw, gb) = layers::fc_plain_backward(&a, &grad, &x, w)?;
                    grads[i] = Some(ParamGrad { w: gw, b: gb });
                    gx
                }
                (kind, _) => return Err(Error::UnexpectedMessage(format!("backward through {:?} without forward", kind))),
            };
        }
        Ok((if need_input_grad { Some(grad) } else { None }, grads))
    }

    /// Applies `param -= lr * grad` to every parameterized layer.
    pub fn apply(&mut self, grads: &[Option<ParamGrad<A::Elem>>], lr: A::Elem) -> Result<()> {
        let a = self.arith.clone();
        for (slot, g) in self.slots.iter_mut().zip(grads) {
            if let (Some((w, b)), Some(g)) = (slot.params.as_mut(), g) {
                layers::sgd_update(&a, w, &g.w, lr)?;
                layers::sgd_update(&a, b, &g.b, lr)?;
            }
        }
        Ok(())
    }

    /// Backward followed by the parameter update.
    pub fn backward_update(&mut self, grad: Tensor<A::Elem>, lr: A::Elem, need_input_grad: bool) -> Result<Option<Tensor<A::Elem>>> {
        let (gx, grads) = self.backward(grad, need_input_grad)?;
        self.apply(&grads, lr)?;
        Ok(gx)
    }
}
