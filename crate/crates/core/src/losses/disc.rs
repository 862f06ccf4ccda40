//! Patch discriminator: three stride-2 3×3 conv layers and two dense
//! layers with leaky ReLU. Built only from ops that support nested
//! gradients, so the R1 penalty can differentiate its input gradient.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{SparseMap, Tape, Tensor, Var};
use crate::decoder::{linear, Linear, LinearVars};
use crate::error::{Error, Result};
use crate::params::Parameters;

pub const DISC_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminatorParams {
    pub patch: usize,
    /// im2col weights `9·C_in × C_out`.
    pub convs: Vec<Linear>,
    pub dense: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct DiscVars {
    pub convs: Vec<LinearVars>,
    pub dense: Vec<LinearVars>,
}

fn conv_out(n: usize) -> usize {
    n.div_ceil(2)
}

impl PatchDiscriminatorParams {
    pub fn init(patch: usize, channels: [usize; 3], hidden: usize, rng: &mut impl Rng) -> Self {
        let mut c_in = 3;
        let mut side = patch;
        let mut convs = Vec::with_capacity(3);
        for c in channels {
            convs.push(Linear::init(9 * c_in, c, rng));
            c_in = c;
            side = conv_out(side);
        }
        let flat = side * side * c_in;
        Self { patch, convs, dense: vec![Linear::init(flat, hidden, rng), Linear::init(hidden, 1, rng)] }
    }
}

impl Parameters for PatchDiscriminatorParams {
    type Vars = DiscVars;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.convs.visit(f);
        self.dense.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.convs.visit_mut(f);
        self.dense.visit_mut(f);
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> DiscVars {
        let convs = self.convs.bind_vars(next);
        let dense = self.dense.bind_vars(next);
        DiscVars { convs, dense }
    }
}

/// Gathers 3×3 stride-2 windows (zero padding 1) of an `h × w × c` map into
/// rows of `9c` values, `(ky, kx, c)` order.
pub fn im2col_stride2(h: usize, w: usize, c: usize) -> SparseMap {
    let (ho, wo) = (conv_out(h), conv_out(w));
    let mut index = Vec::with_capacity(ho * wo * 9 * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    let ix = (2 * ox + kx) as isize - 1;
                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                    for ch in 0..c {
                        index.push(inside.then(|| ((iy as usize) * w + ix as usize) * c + ch));
                    }
                }
            }
        }
    }
    SparseMap::gather(&index, h * w * c)
}

/// Cached im2col maps for one patch size.
#[derive(Debug)]
pub struct Discriminator {
    patch: usize,
    maps: Vec<(usize, Arc<SparseMap>)>,
}

impl Discriminator {
    pub fn new(params: &PatchDiscriminatorParams) -> Self {
        let mut side = params.patch;
        let mut c = 3;
        let mut maps = Vec::new();
        for conv in &params.convs {
            maps.push((side, Arc::new(im2col_stride2(side, side, c))));
            c = conv.fan_out();
            side = conv_out(side);
        }
        Self { patch: params.patch, maps }
    }

    /// Real-valued score of one `P × P × 3` patch.
    pub fn score(&self, tape: &mut Tape, d: &DiscVars, patch: Var) -> Result<Var> {
        let p = self.patch;
        if tape.shape(patch) != [p, p, 3] {
            return Err(Error::Shape(format!("discriminator expects {p}×{p}×3, got {:?}", tape.shape(patch))));
        }
        let mut x = tape.reshape(patch, [p * p * 3])?;
        for ((side, map), conv) in self.maps.iter().zip(&d.convs) {
            let o = conv_out(*side);
            let k = tape.shape(conv.weight)[0];
            let cols = tape.sparse(x, map.clone(), [o * o, k])?;
            let y = linear(tape, cols, conv)?;
            x = tape.leaky_relu(y, DISC_SLOPE);
        }
        let n = tape.value(x).numel();
        let mut h = tape.reshape(x, [1, n])?;
        for (i, l) in d.dense.iter().enumerate() {
            h = linear(tape, h, l)?;
            if i + 1 < d.dense.len() {
                h = tape.leaky_relu(h, DISC_SLOPE);
            }
        }
        tape.reshape(h, [1])
    }
}
