//! Tri-plane field storage, bilinear lookup and the coarse + residual path.
//!
//! Each plane is a `C × R × R` tensor over the cube `[-1, 1]³`. A point maps
//! to `(u, v)` on each plane (`xy → (x, y)`, `yz → (y, z)`, `zx → (z, x)`),
//! `u` selecting the column and `v` the row. Texel centres sit at
//! `-1 + (i + 0.5)·2/R`; lookups clamp to the edge texels, so points outside
//! the cube read the boundary value.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::aware3d::{modulated_conv2d, ModConvParams, ModConvVars, LEAKY_SLOPE};
use crate::autodiff::{CustomOp, SparseMap, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlaneAxis {
    Xy,
    Yz,
    Zx,
}

impl PlaneAxis {
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::Xy, PlaneAxis::Yz, PlaneAxis::Zx];

    pub fn index(self) -> usize {
        self as usize
    }

    /// `(u, v)` = (column coordinate, row coordinate) of `p` on this plane.
    pub fn project(self, p: [f64; 3]) -> (f64, f64) {
        match self {
            PlaneAxis::Xy => (p[0], p[1]),
            PlaneAxis::Yz => (p[1], p[2]),
            PlaneAxis::Zx => (p[2], p[0]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneAxis::Xy => "xy",
            PlaneAxis::Yz => "yz",
            PlaneAxis::Zx => "zx",
        }
    }
}

/// Three axis-aligned feature planes sharing channel count and resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    planes: [Tensor; 3],
}

/// Tri-plane whose planes live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TriPlaneVars(pub [Var; 3]);

impl TriPlaneVars {
    pub fn values(&self, tape: &Tape) -> TriPlane {
        TriPlane { planes: self.0.map(|v| tape.value(v).clone()) }
    }
}

impl TriPlane {
    pub fn new(planes: [Tensor; 3]) -> Result<Self> {
        let s = planes[0].shape().to_vec();
        if s.len() != 3 || s[1] != s[2] || s[1] == 0 {
            return Err(Error::Shape(format!("tri-plane planes must be C×R×R, got {s:?}")));
        }
        if planes.iter().any(|p| p.shape() != s.as_slice()) {
            return Err(Error::Shape(format!(
                "tri-plane planes disagree: {:?}, {:?}, {:?}",
                planes[0].shape(),
                planes[1].shape(),
                planes[2].shape()
            )));
        }
        Ok(Self { planes })
    }

    pub fn zeros(channels: usize, res: usize) -> Self {
        Self { planes: std::array::from_fn(|_| Tensor::zeros([channels, res, res])) }
    }

    pub fn random(channels: usize, res: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            planes: std::array::from_fn(|_| {
                Tensor::from_parts(
                    vec![channels, res, res],
                    (0..channels * res * res).map(|_| rng.gen_range(-scale..scale)).collect(),
                )
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.planes[0].shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.planes[0].shape()[1]
    }

    pub fn plane(&self, axis: PlaneAxis) -> &Tensor {
        &self.planes[axis.index()]
    }

    pub fn plane_mut(&mut self, axis: PlaneAxis) -> &mut Tensor {
        &mut self.planes[axis.index()]
    }

    pub fn planes(&self) -> &[Tensor; 3] {
        &self.planes
    }

    pub fn into_planes(self) -> [Tensor; 3] {
        self.planes
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> TriPlaneVars {
        TriPlaneVars(std::array::from_fn(|k| tape.constant(self.planes[k].clone())))
    }

    /// Feature lookup without a tape: `N × C`.
    pub fn sample(&self, points: &[[f64; 3]]) -> Tensor {
        let taps = Taps::new(points, self.resolution());
        let planes = [&self.planes[0], &self.planes[1], &self.planes[2]];
        Tensor::from_parts(vec![points.len(), self.channels()], taps.gather(planes, self.channels()))
    }

    pub fn is_finite(&self) -> bool {
        self.planes.iter().all(Tensor::is_finite)
    }
}

impl Parameters for TriPlane {
    type Vars = TriPlaneVars;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.planes.iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.planes.iter_mut().for_each(f);
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> TriPlaneVars {
        TriPlaneVars([next(), next(), next()])
    }
}

/// Continuous texel coordinate of `coord ∈ [-1, 1]` on an `r`-texel axis,
/// clamped to the edge texel centres.
fn texel_coord(coord: f64, r: usize) -> (usize, usize, f64, f64) {
    if r == 1 {
        return (0, 0, 1.0, 0.0);
    }
    let p = ((coord.clamp(-1.0, 1.0) + 1.0) * 0.5 * r as f64 - 0.5).clamp(0.0, (r - 1) as f64);
    let i0 = (p.floor() as usize).min(r - 2);
    let f = p - i0 as f64;
    (i0, i0 + 1, 1.0 - f, f)
}

/// Precomputed bilinear taps: 3 planes × 4 texels per point.
#[derive(Debug)]
struct Taps {
    res: usize,
    offsets: Vec<u32>,
    weights: Vec<f64>,
}

impl Taps {
    fn new(points: &[[f64; 3]], res: usize) -> Self {
        let mut offsets = Vec::with_capacity(points.len() * 12);
        let mut weights = Vec::with_capacity(points.len() * 12);
        for &p in points {
            for axis in PlaneAxis::ALL {
                let (u, v) = axis.project(p);
                let (c0, c1, wc0, wc1) = texel_coord(u, res);
                let (r0, r1, wr0, wr1) = texel_coord(v, res);
                for (r, wr) in [(r0, wr0), (r1, wr1)] {
                    for (c, wc) in [(c0, wc0), (c1, wc1)] {
                        offsets.push((r * res + c) as u32);
                        weights.push(wr * wc);
                    }
                }
            }
        }
        Self { res, offsets, weights }
    }

    fn len(&self) -> usize {
        self.weights.len() / 12
    }

    fn gather(&self, planes: [&Tensor; 3], channels: usize) -> Vec<f64> {
        let rr = self.res * self.res;
        let mut out = vec![0.0; self.len() * channels];
        let work = |(n, row): (usize, &mut [f64])| {
            for k in 0..12 {
                let w = self.weights[n * 12 + k];
                let off = self.offsets[n * 12 + k] as usize;
                let plane = planes[k / 4].data();
                for (c, o) in row.iter_mut().enumerate() {
                    *o += w * plane[c * rr + off];
                }
            }
        };
        if self.len() >= 4096 {
            out.par_chunks_mut(channels.max(1)).enumerate().for_each(work);
        } else {
            out.chunks_mut(channels.max(1)).enumerate().for_each(work);
        }
        out
    }
}

#[derive(Debug)]
struct SampleOp {
    taps: Taps,
    channels: usize,
}

impl CustomOp for SampleOp {
    fn name(&self) -> &'static str {
        "triplane_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let rr = self.taps.res * self.taps.res;
        let c_n = self.channels;
        let g = grad.data();
        let n_pts = self.taps.len();
        let mut out = Vec::with_capacity(3);
        for (pk, input) in inputs.iter().enumerate() {
            let mut gp = vec![0.0; c_n * rr];
            // One channel per task; each channel accumulates in point order.
            gp.par_chunks_mut(rr).enumerate().for_each(|(c, gc)| {
                for n in 0..n_pts {
                    let gv = g[n * c_n + c];
                    if gv == 0.0 {
                        continue;
                    }
                    for k in pk * 4..pk * 4 + 4 {
                        gc[self.taps.offsets[n * 12 + k] as usize] += self.taps.weights[n * 12 + k] * gv;
                    }
                }
            });
            out.push(Some(Tensor::from_parts(input.shape().to_vec(), gp)));
        }
        Ok(out)
    }
}

/// `f(x) = P_xy(x, y) + P_yz(y, z) + P_zx(z, x)` for every point: `N × C`,
/// differentiable with respect to the plane values only.
pub fn sample_triplane(tape: &mut Tape, tp: &TriPlaneVars, points: &[[f64; 3]]) -> Result<Var> {
    let shape = tape.shape(tp.0[0]).to_vec();
    for v in &tp.0[1..] {
        if tape.shape(*v) != shape.as_slice() {
            return Err(Error::Shape(format!("tri-plane planes disagree: {:?} vs {:?}", shape, tape.shape(*v))));
        }
    }
    if let Some(p) = points.iter().find(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(Error::invalid(format!("non-finite sample point {p:?}")));
    }
    let (channels, res) = (shape[0], shape[1]);
    let taps = Taps::new(points, res);
    let planes = [tape.value(tp.0[0]), tape.value(tp.0[1]), tape.value(tp.0[2])];
    let out = Tensor::from_parts(vec![points.len(), channels], taps.gather(planes, channels));
    Ok(tape.custom(&tp.0, out, Arc::new(SampleOp { taps, channels })))
}

/// `f = f^c + f^r`.
pub fn compose(tape: &mut Tape, coarse: Var, residual: Var) -> Result<Var> {
    if tape.shape(coarse) != tape.shape(residual) {
        return Err(Error::Shape(format!(
            "compose: coarse {:?} vs residual {:?}",
            tape.shape(coarse),
            tape.shape(residual)
        )));
    }
    tape.add(coarse, residual)
}

/// Directly optimized conditioning vector for the modulated convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode(pub Tensor);

impl StyleCode {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        Self(Tensor::from_parts(vec![dim], (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.numel()
    }
}

impl Parameters for StyleCode {
    type Vars = Var;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.0)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.0)
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> Var {
        next()
    }
}

/// Residual generator: per plane, `log2(k)` blocks of
/// nearest ×2 upsample → modulated 3×3 conv → leaky ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperRes3d {
    pub blocks: Vec<[ModConvParams; 3]>,
}

impl SuperRes3d {
    pub fn init(channels: usize, style_dim: usize, factor: usize, demodulate: bool, rng: &mut impl Rng) -> Result<Self> {
        let n = upsample_steps(factor)?;
        let blocks = (0..n)
            .map(|_| std::array::from_fn(|_| ModConvParams::init(channels, channels, style_dim, demodulate, rng)))
            .collect();
        Ok(Self { blocks })
    }

    pub fn factor(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn zero_kernels(&mut self) {
        for block in &mut self.blocks {
            for conv in block.iter_mut() {
                conv.kernel.data_mut().iter_mut().for_each(|k| *k = 0.0);
            }
        }
    }
}

impl Parameters for SuperRes3d {
    type Vars = Vec<[ModConvVars; 3]>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.blocks.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.blocks.visit_mut(f)
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> Self::Vars {
        self.blocks.bind_vars(next)
    }
}

/// Number of ×2 stages for an upsampling factor in {2, 4, 8, ...}.
pub fn upsample_steps(factor: usize) -> Result<usize> {
    if factor < 2 || !factor.is_power_of_two() {
        return Err(Error::invalid(format!("super-resolution factor must be a power of two >= 2, got {factor}")));
    }
    Ok(factor.trailing_zeros() as usize)
}

/// Nearest-neighbour ×2 upsampling of a `C × R × R` map as a gather.
pub fn upsample_nearest2(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (c, r) = (s[0], s[1]);
    let r2 = 2 * r;
    let mut index = Vec::with_capacity(c * r2 * r2);
    for ch in 0..c {
        for i in 0..r2 {
            for j in 0..r2 {
                index.push(Some((ch * r + i / 2) * r + j / 2));
            }
        }
    }
    let map = Arc::new(SparseMap::gather(&index, c * r * r));
    tape.sparse(x, map, [c, r2, r2])
}

/// Residual tri-plane at `k·R` from the coarse planes.
pub fn super_resolve_3d(tape: &mut Tape, coarse: &TriPlaneVars, w: Var, params: &[[ModConvVars; 3]]) -> Result<TriPlaneVars> {
    let mut planes = coarse.0;
    for block in params {
        for k in 0..3 {
            let up = upsample_nearest2(tape, planes[k])?;
            let y = modulated_conv2d(tape, up, &block[k], w)?;
            planes[k] = tape.leaky_relu(y, LEAKY_SLOPE);
        }
    }
    Ok(TriPlaneVars(planes))
}

/// Tape-free evaluation of [`super_resolve_3d`].
pub fn super_resolve_3d_values(coarse: &TriPlane, w: &StyleCode, params: &SuperRes3d) -> Result<TriPlane> {
    let mut tape = Tape::new();
    let cv = coarse.bind_constant(&mut tape);
    let wv = tape.constant(w.0.clone());
    let pv = crate::params::bind(params, &mut tape, false).0;
    Ok(super_resolve_3d(&mut tape, &cv, wv, &pv)?.values(&tape))
}
