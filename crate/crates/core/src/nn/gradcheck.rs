//! Fixed-point backward passes checked against central differences.
//!
//! Each layer is driven by the scalar `L = Σ r ⊙ layer(inputs)` for a random
//! upstream gradient `r` (the MSE loss is checked directly). The fixed-point
//! backward runs on encoded tensors; the reference differentiates an `f64`
//! forward on the decoded values of those same tensors, so quantization of
//! the inputs is not counted as error.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::nn::arith::{Arith, FixedArith, FloatArith};
use crate::nn::layers;
use crate::ring::FixedConfig;
use crate::sharing::seeded_rng;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is near zero are judged on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 0.1;
const STEP: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub layer: &'static str,
    pub wrt: &'static str,
    pub coords: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

type F = FloatArith<f64>;

struct Case {
    fx: FixedArith,
    tol: f64,
    out: Vec<GradCheck>,
}

impl Case {
    fn enc(&self, shape: Vec<usize>, v: &[f64]) -> Result<Tensor<u64>> {
        Tensor::new(shape, v.iter().map(|&x| self.fx.from_f64(x)).collect::<Result<Vec<_>>>()?)
    }

    fn dec(&self, t: &Tensor<u64>) -> Vec<f64> {
        t.data().iter().map(|&v| self.fx.to_f64(v)).collect()
    }

    /// Compares `analytic` with central differences of `f` around `x`.
    fn compare(
        &mut self,
        layer: &'static str,
        wrt: &'static str,
        x: &[f64],
        analytic: &[f64],
        f: impl Fn(&[f64]) -> f64,
    ) {
        let mut max = 0.0f64;
        let mut failures = 0;
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + STEP;
            let up = f(&probe);
            probe[i] = x[i] - STEP;
            let down = f(&probe);
            probe[i] = x[i];
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(analytic[i], numeric);
            max = max.max(e);
            if e >= self.tol {
                failures += 1;
            }
        }
        self.out.push(GradCheck { layer, wrt, coords: x.len(), max_rel_err: max, failures });
    }
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero by more than the finite-difference step.
fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.02..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).expect("shape matches")
}

/// Runs every plaintext layer's check at `cfg` with relative tolerance `tol`.
pub fn check_all(cfg: FixedConfig, tol: f64, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = seeded_rng(seed, 0);
    let mut c = Case { fx: FixedArith::new(cfg), tol, out: Vec::new() };
    let fa = F::new();
    let fx = c.fx;

    for (name, stride) in [("conv2d", 1usize), ("conv2d_stride2", 2)] {
        let (xs, ws) = ([2usize, 2, 7, 7], [3usize, 2, 3, 3]);
        let oh = (7 - 3) / stride + 1;
        let os = [2usize, 3, oh, oh];
        let x = uniform(&mut rng, 196, -1.0, 1.0);
        let w = uniform(&mut rng, 54, -0.5, 0.5);
        let b = uniform(&mut rng, 3, -0.5, 0.5);
        let r = uniform(&mut rng, os.iter().product(), -1.0, 1.0);
        let (xq, wq, bq, rq) = (c.enc(xs.to_vec(), &x)?, c.enc(ws.to_vec(), &w)?, c.enc(vec![3], &b)?, c.enc(os.to_vec(), &r)?);
        let (x, w, b, r) = (c.dec(&xq), c.dec(&wq), c.dec(&bq), c.dec(&rq));
        let (gx, gw, gb) = layers::conv2d_backward(&fx, &rq, &xq, &wq, stride, true)?;
        let loss = |x: &[f64], w: &[f64], b: &[f64]| {
            dot(&layers::conv2d_forward(&fa, &t(&xs, x), &t(&ws, w), &t(&[3], b), stride).unwrap().into_parts().1, &r)
        };
        c.compare(name, "input", &x, &c.dec(&gx.unwrap()), |p| loss(p, &w, &b));
        c.compare(name, "weight", &w, &c.dec(&gw), |p| loss(&x, p, &b));
        c.compare(name, "bias", &b, &c.dec(&gb), |p| loss(&x, &w, p));
    }

    {
        let shape = [2usize, 2, 4, 4];
        // distinct values spaced well beyond the step so no window ties
        let mut x: Vec<f64> = (0..64).map(|i| (i as f64 - 32.0) * 0.03).collect();
        x.shuffle(&mut rng);
        let r = uniform(&mut rng, 16, -1.0, 1.0);
        let (xq, rq) = (c.enc(shape.to_vec(), &x)?, c.enc(vec![2, 2, 2, 2], &r)?);
        let (x, r) = (c.dec(&xq), c.dec(&rq));
        let (_, arg) = layers::maxpool2x2_forward(&fx, &xq)?;
        let gx = layers::maxpool2x2_backward(&fx, &rq, &arg, &shape)?;
        c.compare("maxpool2x2", "input", &x, &c.dec(&gx), |p| {
            dot(&layers::maxpool2x2_forward(&fa, &t(&shape, p)).unwrap().0.into_parts().1, &r)
        });
    }

    {
        let x = away_from_zero(&mut rng, 40);
        let r = uniform(&mut rng, 40, -1.0, 1.0);
        let (xq, rq) = (c.enc(vec![4, 10], &x)?, c.enc(vec![4, 10], &r)?);
        let (x, r) = (c.dec(&xq), c.dec(&rq));
        let (_, mask) = layers::relu_plain_forward(&fx, &xq);
        let gx = layers::relu_plain_backward(&fx, &rq, &mask)?;
        c.compare("relu", "input", &x, &c.dec(&gx), |p| dot(&layers::relu_plain_forward(&fa, &t(&[4, 10], p)).0.into_parts().1, &r));
    }

    {
        let (bs, i, o) = (3usize, 6usize, 4usize);
        let x = uniform(&mut rng, bs * i, -1.0, 1.0);
        let w = uniform(&mut rng, i * o, -0.5, 0.5);
        let b = uniform(&mut rng, o, -0.5, 0.5);
        let r = uniform(&mut rng, bs * o, -1.0, 1.0);
        let (xq, wq, bq, rq) = (c.enc(vec![bs, i], &x)?, c.enc(vec![i, o], &w)?, c.enc(vec![o], &b)?, c.enc(vec![bs, o], &r)?);
        let (x, w, b, r) = (c.dec(&xq), c.dec(&wq), c.dec(&bq), c.dec(&rq));
        let (gx, gw, gb) = layers::fc_plain_backward(&fx, &rq, &xq, &wq)?;
        let loss = |x: &[f64], w: &[f64], b: &[f64]| {
            dot(&layers::fc_plain_forward(&fa, &t(&[bs, i], x), &t(&[i, o], w), &t(&[o], b)).unwrap().into_parts().1, &r)
        };
        c.compare("fc", "input", &x, &c.dec(&gx), |p| loss(p, &w, &b));
        c.compare("fc", "weight", &w, &c.dec(&gw), |p| loss(&x, p, &b));
        c.compare("fc", "bias", &b, &c.dec(&gb), |p| loss(&x, &w, p));
    }

    {
        let (bs, cl) = (4usize, 5usize);
        let p = uniform(&mut rng, bs * cl, -1.0, 1.0);
        let mut y = vec![0.0; bs * cl];
        for row in 0..bs {
            y[row * cl + rng.gen_range(0..cl)] = 1.0;
        }
        let (pq, yq) = (c.enc(vec![bs, cl], &p)?, c.enc(vec![bs, cl], &y)?);
        let (p, y) = (c.dec(&pq), c.dec(&yq));
        let (_, g) = layers::mse_loss(&fx, &pq, &yq)?;
        c.compare("mse", "prediction", &p, &c.dec(&g), |q| {
            layers::mse_loss(&fa, &t(&[bs, cl], q), &t(&[bs, cl], &y)).unwrap().0
        });
    }

    Ok(c.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_layers_pass_at_default_precision() {
        for r in check_all(FixedConfig::default(), 1e-2, 11).unwrap() {
            assert_eq!(r.failures, 0, "{:?}", r);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut c = Case { fx: FixedArith::new(FixedConfig::default()), tol: 1e-2, out: vec![] };
        c.compare("square", "x", &[1.0, 2.0], &[2.0, 3.0], |p| p.iter().map(|v| v * v).sum());
        assert_eq!(c.out[0].failures, 1);
    }
}
