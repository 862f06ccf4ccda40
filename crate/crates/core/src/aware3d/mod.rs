//! Modulated convolution and the 3D-aware tri-plane block.
//!
//! Plane layouts (rows × cols): `P_xy` is y × x, `P_yz` is z × y and
//! `P_zx` is x × z. For a target plane the two other planes are averaged
//! along the axis the target does not span and broadcast back so that
//! texel `(row, col)` of every channel in the aligned stack refers to the
//! same 3D column:
//!
//! | target | stack channels                    | aligned value at `(row, col)`          |
//! |--------|-----------------------------------|----------------------------------------|
//! | xy     | `[P_xy, pool_z P_yz, pool_z P_zx]` | `mean_z P_yz[z][row]`, `mean_z P_zx[col][z]` |
//! | yz     | `[P_yz, pool_x P_zx, pool_x P_xy]` | `mean_x P_zx[x][row]`, `mean_x P_xy[col][x]` |
//! | zx     | `[P_zx, pool_y P_xy, pool_y P_yz]` | `mean_y P_xy[y][row]`, `mean_y P_yz[col][y]` |
//!
//! The plane after the target (cyclically) is pooled over its rows and
//! varies along the target rows; the one before is pooled over its columns
//! and varies along the target columns.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{kernels, CustomOp, ReduceKind, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::triplane::{PlaneAxis, TriPlane, TriPlaneVars};

pub const EPS_DEMOD: f64 = 1e-8;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Kernel, style affine and demodulation switch for one modulated 3×3 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct ModConvParams {
    /// `C_out × C_in × 3 × 3`
    pub kernel: Tensor,
    /// `d_w × C_in`
    pub affine_w: Tensor,
    /// `C_in`
    pub affine_b: Tensor,
    pub demodulate: bool,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ModConvVars {
    pub kernel: Var,
    pub affine_w: Var,
    pub affine_b: Var,
    pub demodulate: bool,
    pub eps: f64,
}

impl ModConvParams {
    pub fn init(c_in: usize, c_out: usize, style_dim: usize, demodulate: bool, rng: &mut impl Rng) -> Self {
        let kb = 1.0 / ((9 * c_in) as f64).sqrt();
        let ab = 1.0 / (style_dim.max(1) as f64).sqrt();
        Self {
            kernel: Tensor::from_parts(
                vec![c_out, c_in, 3, 3],
                (0..c_out * c_in * 9).map(|_| rng.gen_range(-kb..kb)).collect(),
            ),
            affine_w: Tensor::from_parts(
                vec![style_dim, c_in],
                (0..style_dim * c_in).map(|_| rng.gen_range(-ab..ab)).collect(),
            ),
            affine_b: Tensor::ones([c_in]),
            demodulate,
            eps: EPS_DEMOD,
        }
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape()[0]
    }
}

impl Parameters for ModConvParams {
    type Vars = ModConvVars;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.kernel);
        f(&self.affine_w);
        f(&self.affine_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.kernel);
        f(&mut self.affine_w);
        f(&mut self.affine_b);
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> ModConvVars {
        ModConvVars {
            kernel: next(),
            affine_w: next(),
            affine_b: next(),
            demodulate: self.demodulate,
            eps: self.eps,
        }
    }
}

/// Per-input-channel style scales `s = w·A + b`.
pub fn style_scales(tape: &mut Tape, w: Var, p: &ModConvVars) -> Result<Var> {
    let d_w = tape.value(w).numel();
    let c_in = tape.value(p.affine_b).numel();
    let row = tape.reshape(w, [1, d_w])?;
    let s = tape.matmul(row, p.affine_w)?;
    let s = tape.reshape(s, [c_in])?;
    tape.add(s, p.affine_b)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Modulated and optionally demodulated kernel, plus the per-output
/// demodulation factors (all 1 when demodulation is off).
fn modulate(kernel: &[f64], s: &[f64], c_out: usize, c_in: usize, demod: bool, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut kp = kernel.to_vec();
    for o in 0..c_out {
        for i in 0..c_in {
            for a in 0..9 {
                kp[(o * c_in + i) * 9 + a] *= s[i];
            }
        }
    }
    let mut d = vec![1.0; c_out];
    let mut kpp = kp.clone();
    if demod {
        for o in 0..c_out {
            let block = &kp[o * c_in * 9..(o + 1) * c_in * 9];
            d[o] = 1.0 / (block.iter().map(|k| k * k).sum::<f64>() + eps).sqrt();
            for v in &mut kpp[o * c_in * 9..(o + 1) * c_in * 9] {
                *v *= d[o];
            }
        }
    }
    (kp, kpp, d)
}

fn reflect_table(res: usize) -> [Vec<usize>; 3] {
    let t = |d: isize| (0..res).map(|i| reflect(i as isize + d, res)).collect();
    [t(-1), t(0), t(1)]
}

/// 3×3 convolution (cross-correlation) with reflect padding.
pub fn conv3x3_reflect(x: &[f64], c_in: usize, res: usize, kernel: &[f64], c_out: usize) -> Vec<f64> {
    let rr = res * res;
    let idx = reflect_table(res);
    let mut y = vec![0.0; c_out * rr];
    y.par_chunks_mut(rr).enumerate().for_each(|(o, yo)| {
        for i in 0..c_in {
            let xi = &x[i * rr..(i + 1) * rr];
            for dy in 0..3 {
                for dx in 0..3 {
                    let k = kernel[((o * c_in + i) * 3 + dy) * 3 + dx];
                    if k == 0.0 {
                        continue;
                    }
                    for r in 0..res {
                        let src = &xi[idx[dy][r] * res..(idx[dy][r] + 1) * res];
                        let dst = &mut yo[r * res..(r + 1) * res];
                        for (q, yv) in dst.iter_mut().enumerate() {
                            *yv += k * src[idx[dx][q]];
                        }
                    }
                }
            }
        }
    });
    y
}

/// Adjoints of [`conv3x3_reflect`] with respect to input and kernel.
fn conv3x3_reflect_backward(
    x: &[f64],
    gy: &[f64],
    kernel: &[f64],
    c_in: usize,
    c_out: usize,
    res: usize,
) -> (Vec<f64>, Vec<f64>) {
    let rr = res * res;
    let idx = reflect_table(res);
    let mut gk = vec![0.0; c_out * c_in * 9];
    gk.par_chunks_mut(c_in * 9).enumerate().for_each(|(o, gko)| {
        let go = &gy[o * rr..(o + 1) * rr];
        for i in 0..c_in {
            let xi = &x[i * rr..(i + 1) * rr];
            for dy in 0..3 {
                for dx in 0..3 {
                    let mut acc = 0.0;
                    for r in 0..res {
                        let src = &xi[idx[dy][r] * res..(idx[dy][r] + 1) * res];
                        let g = &go[r * res..(r + 1) * res];
                        for q in 0..res {
                            acc += g[q] * src[idx[dx][q]];
                        }
                    }
                    gko[(i * 3 + dy) * 3 + dx] = acc;
                }
            }
        }
    });
    let mut gx = vec![0.0; c_in * rr];
    gx.par_chunks_mut(rr).enumerate().for_each(|(i, gxi)| {
        for o in 0..c_out {
            let go = &gy[o * rr..(o + 1) * rr];
            for dy in 0..3 {
                for dx in 0..3 {
                    let k = kernel[((o * c_in + i) * 3 + dy) * 3 + dx];
                    if k == 0.0 {
                        continue;
                    }
                    for r in 0..res {
                        let row = idx[dy][r];
                        let g = &go[r * res..(r + 1) * res];
                        for q in 0..res {
                            gxi[row * res + idx[dx][q]] += k * g[q];
                        }
                    }
                }
            }
        }
    });
    (gx, gk)
}

#[derive(Debug)]
struct ModConvOp {
    c_in: usize,
    c_out: usize,
    res: usize,
    demod: bool,
    eps: f64,
}

impl CustomOp for ModConvOp {
    fn name(&self) -> &'static str {
        "modulated_conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, kernel, s) = (inputs[0], inputs[1], inputs[2]);
        let (ci, co) = (self.c_in, self.c_out);
        let (kp, kpp, d) = modulate(kernel.data(), s.data(), co, ci, self.demod, self.eps);
        let (gx, gkpp) = conv3x3_reflect_backward(x.data(), grad.data(), &kpp, ci, co, self.res);
        let mut gkp = gkpp;
        if self.demod {
            for o in 0..co {
                let range = o * ci * 9..(o + 1) * ci * 9;
                let dot: f64 = gkp[range.clone()].iter().zip(&kp[range.clone()]).map(|(g, k)| g * k).sum();
                let d3 = d[o] * d[o] * d[o];
                for j in range {
                    gkp[j] = d[o] * gkp[j] - d3 * kp[j] * dot;
                }
            }
        }
        let mut gk = vec![0.0; co * ci * 9];
        let mut gs = vec![0.0; ci];
        for o in 0..co {
            for i in 0..ci {
                for a in 0..9 {
                    let j = (o * ci + i) * 9 + a;
                    gk[j] = s.data()[i] * gkp[j];
                    gs[i] += kernel.data()[j] * gkp[j];
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_parts(x.shape().to_vec(), gx)),
            Some(Tensor::from_parts(kernel.shape().to_vec(), gk)),
            Some(Tensor::from_parts(vec![ci], gs)),
        ])
    }
}

/// Value-only modulated convolution of a `C_in × R × R` map.
pub fn modulated_conv2d_values(x: &Tensor, kernel: &Tensor, s: &[f64], demod: bool, eps: f64) -> Result<Tensor> {
    let (c_out, c_in) = (kernel.shape()[0], kernel.shape()[1]);
    if x.ndim() != 3 || x.shape()[0] != c_in || s.len() != c_in || x.shape()[1] != x.shape()[2] {
        return Err(Error::Shape(format!(
            "modulated conv: input {:?}, kernel {:?}, {} style scales",
            x.shape(),
            kernel.shape(),
            s.len()
        )));
    }
    let res = x.shape()[1];
    if res < 2 {
        return Err(Error::invalid("reflect padding needs spatial extent >= 2"));
    }
    let (_, kpp, _) = modulate(kernel.data(), s, c_out, c_in, demod, eps);
    Ok(Tensor::from_parts(vec![c_out, res, res], conv3x3_reflect(x.data(), c_in, res, &kpp, c_out)))
}

/// Modulated 3×3 convolution with explicit per-channel scales `s`.
pub fn modulated_conv2d_scaled(tape: &mut Tape, x: Var, kernel: Var, s: Var, demod: bool, eps: f64) -> Result<Var> {
    let out = modulated_conv2d_values(tape.value(x), tape.value(kernel), tape.value(s).data(), demod, eps)?;
    let k = tape.value(kernel).shape();
    let op = ModConvOp { c_in: k[1], c_out: k[0], res: out.shape()[1], demod, eps };
    Ok(tape.custom(&[x, kernel, s], out, Arc::new(op)))
}

/// `x: C_in × R × R` conditioned on style code `w`.
pub fn modulated_conv2d(tape: &mut Tape, x: Var, p: &ModConvVars, w: Var) -> Result<Var> {
    let s = style_scales(tape, w, p)?;
    modulated_conv2d_scaled(tape, x, p.kernel, s, p.demodulate, p.eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PooledAxis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepeatLayout {
    /// Pooled vector indexes output rows; constant along each row.
    AlongRows,
    /// Pooled vector indexes output columns; constant along each column.
    AlongCols,
}

/// Mean over one spatial axis of a `C × R × R` plane, broadcast back to
/// `C × R × R` with the pooled vector laid out per `layout`.
pub fn axis_pool_repeat(tape: &mut Tape, plane: Var, pooled: PooledAxis, layout: RepeatLayout) -> Result<Var> {
    let shape = tape.shape(plane).to_vec();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Shape(format!("axis_pool_repeat expects C×R×R, got {shape:?}")));
    }
    let axis = match pooled {
        PooledAxis::Rows => 1,
        PooledAxis::Cols => 2,
    };
    let v = tape.reduce(ReduceKind::Mean, plane, axis)?;
    match layout {
        RepeatLayout::AlongRows => tape.expand(v, 2, shape[2]),
        RepeatLayout::AlongCols => tape.expand(v, 1, shape[1]),
    }
}

/// `[target, pooled next, pooled prev]` stacked to `3C × R × R`.
pub fn aware3d_align(tape: &mut Tape, tp: &TriPlaneVars, target: PlaneAxis) -> Result<Var> {
    let k = target.index();
    let next = tp.0[(k + 1) % 3];
    let prev = tp.0[(k + 2) % 3];
    let a = axis_pool_repeat(tape, next, PooledAxis::Rows, RepeatLayout::AlongRows)?;
    let b = axis_pool_repeat(tape, prev, PooledAxis::Cols, RepeatLayout::AlongCols)?;
    tape.concat(&[tp.0[k], a, b], 0)
}

/// One modulated conv (3C → C) per target plane, each with its own style affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Aware3dParams {
    pub convs: [ModConvParams; 3],
}

impl Aware3dParams {
    pub fn init(channels: usize, style_dim: usize, rng: &mut impl Rng) -> Self {
        let mut mk = || ModConvParams::init(3 * channels, channels, style_dim, true, rng);
        Self { convs: [mk(), mk(), mk()] }
    }
}

impl Parameters for Aware3dParams {
    type Vars = [ModConvVars; 3];

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.convs.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.convs.visit_mut(f)
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> Self::Vars {
        self.convs.bind_vars(next)
    }
}

/// Align → modulated conv → leaky ReLU, for each of the three planes.
pub fn aware3d_block(tape: &mut Tape, tp: &TriPlaneVars, w: Var, p: &[ModConvVars; 3]) -> Result<TriPlaneVars> {
    let mut out = [tp.0[0]; 3];
    for axis in PlaneAxis::ALL {
        let k = axis.index();
        let stack = aware3d_align(tape, tp, axis)?;
        let y = modulated_conv2d(tape, stack, &p[k], w)?;
        out[k] = tape.leaky_relu(y, LEAKY_SLOPE);
    }
    Ok(TriPlaneVars(out))
}

/// Tape-free evaluation of [`aware3d_block`].
pub fn aware3d_block_values(tp: &TriPlane, w: &Tensor, p: &Aware3dParams) -> Result<TriPlane> {
    let mut tape = Tape::new();
    let vars = tp.bind_constant(&mut tape);
    let wv = tape.constant(w.clone());
    let pv: [ModConvVars; 3] = crate::params::bind(p, &mut tape, false).0;
    let out = aware3d_block(&mut tape, &vars, wv, &pv)?;
    Ok(out.values(&tape))
}

/// Leaky ReLU applied to a plain value tensor.
pub fn leaky_values(t: &Tensor) -> Tensor {
    t.map(|u| kernels::leaky_relu(u, LEAKY_SLOPE))
}

#[cfg(test)]
mod tests;
