//! Alpha compositing along rays: `w_i = T_i (1 − exp(−σ_i δ_i))`,
//! `T_i = exp(−Σ_{j<i} σ_j δ_j)`, pixel `= Σ w_i c_i`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Forward quantities shared by the three composite nodes.
#[derive(Debug)]
struct Cache {
    rays: usize,
    samples: usize,
    delta: Vec<f64>,
    /// `T_1 … T_{S+1}` per ray.
    trans: Vec<f64>,
    weights: Vec<f64>,
}

/// Per-ray forward pass over `S` samples: fills `trans` (`S + 1`) and `weights` (`S`).
fn ray_forward(sigma: &[f64], delta: &[f64], trans: &mut [f64], weights: &mut [f64]) {
    trans[0] = 1.0;
    for i in 0..sigma.len() {
        let a = sigma[i] * delta[i];
        weights[i] = -trans[i] * (-a).exp_m1();
        trans[i + 1] = trans[i] * (-a).exp();
    }
}

fn forward(sigma: &[f64], delta: &[f64], rays: usize, samples: usize) -> Cache {
    let mut trans = vec![0.0; rays * (samples + 1)];
    let mut weights = vec![0.0; rays * samples];
    let run = |((r, tr), w): ((usize, &mut [f64]), &mut [f64])| {
        let s = r * samples..(r + 1) * samples;
        ray_forward(&sigma[s.clone()], &delta[s], tr, w);
    };
    if rays >= 1024 {
        trans.par_chunks_mut(samples + 1).enumerate().zip(weights.par_chunks_mut(samples)).for_each(run);
    } else {
        trans.chunks_mut(samples + 1).enumerate().zip(weights.chunks_mut(samples)).for_each(run);
    }
    Cache { rays, samples, delta: delta.to_vec(), trans, weights }
}

impl Cache {
    /// `dL/dσ` given `q_i = ∂L/∂w_i` per sample and `e = ∂L/∂T_end` per ray.
    fn sigma_grad(&self, q: impl Fn(usize, usize) -> f64, e: impl Fn(usize) -> f64) -> Vec<f64> {
        let s_n = self.samples;
        let mut g = vec![0.0; self.rays * s_n];
        for r in 0..self.rays {
            let tr = &self.trans[r * (s_n + 1)..(r + 1) * (s_n + 1)];
            let w = &self.weights[r * s_n..(r + 1) * s_n];
            let t_end = tr[s_n];
            // Σ_{i>k} q_i w_i, accumulated from the back.
            let mut tail = 0.0;
            for k in (0..s_n).rev() {
                let qk = q(r, k);
                let da = qk * tr[k + 1] - tail - e(r) * t_end;
                g[r * s_n + k] = da * self.delta[r * s_n + k];
                tail += qk * w[k];
            }
        }
        g
    }
}

#[derive(Debug)]
struct PixelOp(Arc<Cache>);
#[derive(Debug)]
struct WeightsOp(Arc<Cache>);
#[derive(Debug)]
struct TEndOp(Arc<Cache>);

impl CustomOp for PixelOp {
    fn name(&self) -> &'static str {
        "composite_pixel"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let cache = &self.0;
        let (c, g) = (inputs[0].data(), grad.data());
        let s_n = cache.samples;
        let mut gc = vec![0.0; c.len()];
        for r in 0..cache.rays {
            for k in 0..s_n {
                let w = cache.weights[r * s_n + k];
                for ch in 0..3 {
                    gc[(r * s_n + k) * 3 + ch] = w * g[r * 3 + ch];
                }
            }
        }
        let q = |r: usize, k: usize| (0..3).map(|ch| g[r * 3 + ch] * c[(r * s_n + k) * 3 + ch]).sum::<f64>();
        let gs = cache.sigma_grad(q, |_| 0.0);
        Ok(vec![
            Some(Tensor::from_parts(inputs[0].shape().to_vec(), gc)),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), gs)),
        ])
    }
}

impl CustomOp for WeightsOp {
    fn name(&self) -> &'static str {
        "composite_weights"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let s_n = self.0.samples;
        let g = grad.data();
        let gs = self.0.sigma_grad(|r, k| g[r * s_n + k], |_| 0.0);
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gs))])
    }
}

impl CustomOp for TEndOp {
    fn name(&self) -> &'static str {
        "composite_t_end"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad.data();
        let gs = self.0.sigma_grad(|_, _| 0.0, |r| g[r]);
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gs))])
    }
}

fn check_shapes(c: &[usize], sigma: &[usize], delta: &[usize]) -> Result<(usize, usize)> {
    match (c, sigma) {
        ([n, s, 3], [n2, s2]) if n == n2 && s == s2 && delta == sigma => Ok((*n, *s)),
        _ => Err(Error::Shape(format!("composite: c {c:?}, sigma {sigma:?}, delta {delta:?}"))),
    }
}

/// Composited pixels `N × 3`, weights `N × S` and final transmittance `N`.
#[derive(Clone, Debug)]
pub struct Composited<T> {
    pub pixel: T,
    pub weights: T,
    pub t_end: T,
}

/// Value-only compositing of `c: N×S×3`, `σ: N×S`, `δ: N×S`.
pub fn composite_values(c: &Tensor, sigma: &Tensor, delta: &Tensor) -> Result<Composited<Tensor>> {
    let (n, s) = check_shapes(c.shape(), sigma.shape(), delta.shape())?;
    let cache = forward(sigma.data(), delta.data(), n, s);
    let pixel = pixels(&cache, c.data());
    let t_end = (0..n).map(|r| cache.trans[r * (s + 1) + s]).collect();
    Ok(Composited {
        pixel: Tensor::from_parts(vec![n, 3], pixel),
        weights: Tensor::from_parts(vec![n, s], cache.weights),
        t_end: Tensor::from_parts(vec![n], t_end),
    })
}

fn pixels(cache: &Cache, c: &[f64]) -> Vec<f64> {
    let s_n = cache.samples;
    let mut out = vec![0.0; cache.rays * 3];
    for r in 0..cache.rays {
        for k in 0..s_n {
            let w = cache.weights[r * s_n + k];
            for ch in 0..3 {
                out[r * 3 + ch] += w * c[(r * s_n + k) * 3 + ch];
            }
        }
    }
    out
}

/// Differentiable compositing; `δ` is a constant.
pub fn composite(tape: &mut Tape, c: Var, sigma: Var, delta: &Tensor) -> Result<Composited<Var>> {
    let (n, s) = check_shapes(tape.shape(c), tape.shape(sigma), delta.shape())?;
    if tape.value(sigma).data().iter().any(|v| *v < 0.0) || delta.data().iter().any(|v| *v < 0.0) {
        return Err(Error::invalid("composite needs σ ≥ 0 and δ ≥ 0"));
    }
    let cache = Arc::new(forward(tape.value(sigma).data(), delta.data(), n, s));
    let pixel = Tensor::from_parts(vec![n, 3], pixels(&cache, tape.value(c).data()));
    let weights = Tensor::from_parts(vec![n, s], cache.weights.clone());
    let t_end = Tensor::from_parts(vec![n], (0..n).map(|r| cache.trans[r * (s + 1) + s]).collect());
    Ok(Composited {
        pixel: tape.custom(&[c, sigma], pixel, Arc::new(PixelOp(cache.clone()))),
        weights: tape.custom(&[sigma], weights, Arc::new(WeightsOp(cache.clone()))),
        t_end: tape.custom(&[sigma], t_end, Arc::new(TEndOp(cache))),
    })
}
