//! Plaintext layer kernels, generic over the element arithmetic.
//!
//! Activations are `[B, C, H, W]` for spatial layers and `[B, D]` for FC
//! layers. Conv weights are `[O, C, K, K]`; FC weights are `[in, out]`.

use crate::error::{Error, Result};
use crate::nn::arith::Arith;
use crate::tensor::Tensor;

type T<A> = Tensor<<A as Arith>::Elem>;

fn dims4(t: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match t {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        s => Err(Error::ShapeMismatch(format!("{} expects a rank-4 tensor, got {:?}", what, s))),
    }
}

fn dims2(t: &[usize], what: &str) -> Result<(usize, usize)> {
    match t {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::ShapeMismatch(format!("{} expects a matrix, got {:?}", what, s))),
    }
}

/// `rescale(x * w)` for row-major `x: [m, k]`, `w: [k, p]`.
pub fn matmul<A: Arith>(a: &A, x: &[A::Elem], w: &[A::Elem], m: usize, k: usize, p: usize) -> Vec<A::Elem> {
    let mut out = vec![a.zero(); m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for t in 0..k {
            let xv = x[i * k + t];
            for (o, &wv) in row.iter_mut().zip(&w[t * p..(t + 1) * p]) {
                *o = a.add(*o, a.mul_wide(xv, wv));
            }
        }
    }
    out.iter_mut().for_each(|v| *v = a.rescale(*v));
    out
}

fn transpose<E: Copy>(x: &[E], r: usize, c: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(x[i * c + j]);
        }
    }
    out
}

pub fn conv2d_forward<A: Arith>(a: &A, x: &T<A>, w: &T<A>, b: &T<A>, stride: usize) -> Result<T<A>> {
    let (bs, c, h, wd) = dims4(x.shape(), "conv2d input")?;
    let (o, c2, k, k2) = dims4(w.shape(), "conv2d weight")?;
    if c != c2 || k != k2 || b.len() != o || h < k || wd < k || stride == 0 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (oh, ow) = ((h - k) / stride + 1, (wd - k) / stride + 1);
    let (xd, wdt, bd) = (x.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(bs * o * oh * ow);
    let mut acc = vec![a.zero(); oh * ow];
    for bi in 0..bs {
        for oc in 0..o {
            acc.iter_mut().for_each(|v| *v = a.zero());
            for ic in 0..c {
                let plane = &xd[(bi * c + ic) * h * wd..(bi * c + ic + 1) * h * wd];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = wdt[((oc * c + ic) * k + ki) * k + kj];
                        for oy in 0..oh {
                            let row = &plane[(oy * stride + ki) * wd + kj..];
                            let dst = &mut acc[oy * ow..(oy + 1) * ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = a.add(*d, a.mul_wide(wv, row[ox * stride]));
                            }
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&v| a.add(a.rescale(v), bd[oc])));
        }
    }
    Tensor::new(vec![bs, o, oh, ow], out)
}

/// Returns `(grad_x, grad_w, grad_b)`; `grad_x` only when requested.
pub fn conv2d_backward<A: Arith>(
    a: &A,
    grad_out: &T<A>,
    x: &T<A>,
    w: &T<A>,
    stride: usize,
    need_grad_x: bool,
) -> Result<(Option<T<A>>, T<A>, T<A>)> {
    let (bs, c, h, wd) = dims4(x.shape(), "conv2d input")?;
    let (o, _, k, _) = dims4(w.shape(), "conv2d weight")?;
    let (oh, ow) = ((h - k) / stride + 1, (wd - k) / stride + 1);
    if grad_out.shape() != [bs, o, oh, ow] {
        return Err(Error::ShapeMismatch(format!("conv2d grad {:?} for output {:?}", grad_out.shape(), [bs, o, oh, ow])));
    }
    let (g, xd, wdt) = (grad_out.data(), x.data(), w.data());
    let mut gw = vec![a.zero(); o * c * k * k];
    let mut gb = vec![a.zero(); o];
    let mut gx = if need_grad_x { vec![a.zero(); bs * c * h * wd] } else { Vec::new() };
    for bi in 0..bs {
        for oc in 0..o {
            let gplane = &g[(bi * o + oc) * oh * ow..(bi * o + oc + 1) * oh * ow];
            gb[oc] = gplane.iter().fold(gb[oc], |s, &v| a.add(s, v));
            for ic in 0..c {
                let base = (bi * c + ic) * h * wd;
                let plane = &xd[base..base + h * wd];
                for ki in 0..k {
                    for kj in 0..k {
                        let widx = ((oc * c + ic) * k + ki) * k + kj;
                        let wv = wdt[widx];
                        let mut s = gw[widx];
                        for oy in 0..oh {
                            let off = (oy * stride + ki) * wd + kj;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for (ox, &gv) in grow.iter().enumerate() {
                                s = a.add(s, a.mul_wide(gv, plane[off + ox * stride]));
                            }
                            if need_grad_x {
                                let dst = &mut gx[base + off..];
                                for (ox, &gv) in grow.iter().enumerate() {
                                    dst[ox * stride] = a.add(dst[ox * stride], a.mul_wide(wv, gv));
                                }
                            }
                        }
                        gw[widx] = s;
                    }
                }
            }
        }
    }
    gw.iter_mut().for_each(|v| *v = a.rescale(*v));
    let gx = if need_grad_x {
        gx.iter_mut().for_each(|v| *v = a.rescale(*v));
        Some(Tensor::new(x.shape().to_vec(), gx)?)
    } else {
        None
    };
    Ok((gx, Tensor::new(w.shape().to_vec(), gw)?, Tensor::new(vec![o], gb)?))
}

/// 2x2 max pooling with stride 2; ties go to the first element in
/// row-major window order. Returns the output and the flat input index of
/// each selected element.
pub fn maxpool2x2_forward<A: Arith>(a: &A, x: &T<A>) -> Result<(T<A>, Vec<usize>)> {
    let (bs, c, h, w) = dims4(x.shape(), "maxpool input")?;
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(bs * c * oh * ow);
    let mut arg = Vec::with_capacity(bs * c * oh * ow);
    for plane in 0..bs * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if a.greater(xd[idx], xd[best]) {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![bs, c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward<A: Arith>(a: &A, grad_out: &T<A>, argmax: &[usize], in_shape: &[usize]) -> Result<T<A>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::ShapeMismatch(format!("maxpool grad of {} for {} windows", grad_out.len(), argmax.len())));
    }
    let mut gx = vec![a.zero(); in_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx[i] = a.add(gx[i], g);
    }
    Tensor::new(in_shape.to_vec(), gx)
}

/// Output and the stored sign bit `[x >= 0]` per element.
pub fn relu_plain_forward<A: Arith>(a: &A, x: &T<A>) -> (T<A>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| a.non_negative(v)).collect();
    let y = x.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { a.zero() }).collect();
    (Tensor::new(x.shape().to_vec(), y).expect("same length"), mask)
}

pub fn relu_plain_backward<A: Arith>(a: &A, grad_out: &T<A>, mask: &[bool]) -> Result<T<A>> {
    if grad_out.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!("relu grad of {} for {} inputs", grad_out.len(), mask.len())));
    }
    let g = grad_out.data().iter().zip(mask).map(|(&v, &m)| if m { v } else { a.zero() }).collect();
    Tensor::new(grad_out.shape().to_vec(), g)
}

/// `x [B, in] * w [in, out] + b`. Inputs of higher rank are flattened.
pub fn fc_plain_forward<A: Arith>(a: &A, x: &T<A>, w: &T<A>, b: &T<A>) -> Result<T<A>> {
    let bs = *x.shape().first().ok_or_else(|| Error::ShapeMismatch("fc input of rank 0".into()))?;
    let (i, o) = dims2(w.shape(), "fc weight")?;
    if x.len() != bs * i || b.len() != o {
        return Err(Error::ShapeMismatch(format!("fc input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape())));
    }
    let mut y = matmul(a, x.data(), w.data(), bs, i, o);
    for row in y.chunks_mut(o) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v = a.add(*v, bv);
        }
    }
    Tensor::new(vec![bs, o], y)
}

/// Returns `(grad_x, grad_w, grad_b)`; `grad_x` has `x`'s shape.
pub fn fc_plain_backward<A: Arith>(a: &A, grad_out: &T<A>, x: &T<A>, w: &T<A>) -> Result<(T<A>, T<A>, T<A>)> {
    let bs = x.shape()[0];
    let (i, o) = dims2(w.shape(), "fc weight")?;
    if grad_out.shape() != [bs, o] {
        return Err(Error::ShapeMismatch(format!("fc grad {:?} for output [{}, {}]", grad_out.shape(), bs, o)));
    }
    let g = grad_out.data();
    let gx = matmul(a, g, &transpose(w.data(), i, o), bs, o, i);
    let gw = matmul(a, &transpose(x.data(), bs, i), g, i, bs, o);
    let mut gb = vec![a.zero(); o];
    for row in g.chunks(o) {
        for (s, &v) in gb.iter_mut().zip(row) {
            *s = a.add(*s, v);
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(vec![i, o], gw)?, Tensor::new(vec![o], gb)?))
}

/// Mean squared error over all `B * C` entries and its gradient
/// `2 (ŷ - y) / (B C)`.
pub fn mse_loss<A: Arith>(a: &A, y_hat: &T<A>, y: &T<A>) -> Result<(A::Elem, T<A>)> {
    if y_hat.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!("mse of {:?} against {:?}", y_hat.shape(), y.shape())));
    }
    let n = y.len().max(1);
    let diff: Vec<A::Elem> = y_hat.data().iter().zip(y.data()).map(|(&p, &t)| a.sub(p, t)).collect();
    let sq = diff.iter().fold(a.zero(), |s, &d| a.add(s, a.mul_wide(d, d)));
    let loss = a.div_int(a.rescale(sq), n);
    let grad = diff.iter().map(|&d| a.div_int(a.add(d, d), n)).collect();
    Ok((loss, Tensor::new(y.shape().to_vec(), grad)?))
}

/// `param - lr * grad`, elementwise.
pub fn sgd_update<A: Arith>(a: &A, param: &mut T<A>, grad: &T<A>, lr: A::Elem) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch(format!("sgd on {:?} with grad {:?}", param.shape(), grad.shape())));
    }
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p = a.sub(*p, a.mul(lr, g));
    }
    Ok(())
}
