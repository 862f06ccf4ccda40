//! MLP mapping tri-plane features to color and density.

use rand::Rng;

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::Parameters;

pub const DENSITY_BIAS_INIT: f64 = -1.0;

/// Fully connected layer, `weight: in × out`, `bias: out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self {
            weight: Tensor::from_parts(
                vec![fan_in, fan_out],
                (0..fan_in * fan_out).map(|_| rng.gen_range(-b..b)).collect(),
            ),
            bias: Tensor::from_parts(vec![fan_out], (0..fan_out).map(|_| rng.gen_range(-b..b)).collect()),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros([fan_in, fan_out]), bias: Tensor::zeros([fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x·W + b` on plain values, `x: N × in`.
    pub fn apply_values(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (i, o) = (self.fan_in(), self.fan_out());
        let mut y = kernels::matmul(x, self.weight.data(), n, i, o);
        for row in y.chunks_mut(o) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        y
    }
}

impl Parameters for Linear {
    type Vars = LinearVars;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> LinearVars {
        LinearVars { weight: next(), bias: next() }
    }
}

pub fn linear(tape: &mut Tape, x: Var, l: &LinearVars) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add_rows(y, l.bias)
}

/// `D` softplus hidden layers of width `H`, then a head of `d_c + 1` units.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<Linear>,
}

impl DecoderParams {
    pub fn init(in_dim: usize, hidden: usize, depth: usize, color_dim: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = in_dim;
        for _ in 0..depth {
            layers.push(Linear::init(fan_in, hidden, rng));
            fan_in = hidden;
        }
        let mut head = Linear::init(fan_in, color_dim + 1, rng);
        head.bias.data_mut()[color_dim] = DENSITY_BIAS_INIT;
        layers.push(head);
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("decoder needs at least an output layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Shape(format!(
                    "decoder layer {i} outputs {} but layer {} takes {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        for l in &layers {
            if l.bias.numel() != l.fan_out() {
                return Err(Error::Shape(format!("bias {:?} vs weight {:?}", l.bias.shape(), l.weight.shape())));
            }
        }
        if layers.last().map_or(0, Linear::fan_out) < 2 {
            return Err(Error::Shape("decoder head needs color and density units".into()));
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn color_dim(&self) -> usize {
        self.layers.last().map_or(1, Linear::fan_out) - 1
    }

    pub fn hidden(&self) -> usize {
        if self.layers.len() > 1 {
            self.layers[0].fan_out()
        } else {
            0
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Head density bias; very negative values empty the field.
    pub fn density_bias_mut(&mut self) -> &mut f64 {
        let c = self.color_dim();
        let head = self.layers.last_mut().expect("decoder has a head");
        &mut head.bias.data_mut()[c]
    }

    /// Value-only decode: `(c: N × d_c, σ: N)`.
    pub fn decode_values(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        check_width(f.shape(), self.in_dim())?;
        let n = f.shape()[0];
        let mut h = f.data().to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply_values(&h, n);
            if i + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = kernels::softplus(*v));
            }
        }
        let dc = self.color_dim();
        let mut c = Vec::with_capacity(n * dc);
        let mut sigma = Vec::with_capacity(n);
        for row in h.chunks(dc + 1) {
            c.extend(row[..dc].iter().map(|v| kernels::sigmoid(*v)));
            sigma.push(kernels::softplus(row[dc]));
        }
        Ok((Tensor::from_parts(vec![n, dc], c), Tensor::from_parts(vec![n], sigma)))
    }
}

impl Parameters for DecoderParams {
    type Vars = Vec<LinearVars>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.layers.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.layers.visit_mut(f)
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> Self::Vars {
        self.layers.bind_vars(next)
    }
}

fn check_width(shape: &[usize], want: usize) -> Result<()> {
    if shape.len() != 2 || shape[1] != want {
        return Err(Error::Shape(format!("decoder expects N×{want} features, got {shape:?}")));
    }
    Ok(())
}

/// `(c = sigmoid(head_c): N × d_c, σ = softplus(head_σ): N)`.
pub fn decode(tape: &mut Tape, params: &[LinearVars], f: Var) -> Result<(Var, Var)> {
    let in_dim = params.first().map(|l| tape.shape(l.weight)[0]).unwrap_or(0);
    check_width(tape.shape(f), in_dim)?;
    let n = tape.shape(f)[0];
    let mut h = f;
    for (i, l) in params.iter().enumerate() {
        h = linear(tape, h, l)?;
        if i + 1 < params.len() {
            h = tape.softplus(h);
        }
    }
    let dc = tape.shape(h)[1] - 1;
    let c = tape.slice(h, 1, 0, dc)?;
    let c = tape.sigmoid(c);
    let s = tape.slice(h, 1, dc, dc + 1)?;
    let s = tape.reshape(s, [n])?;
    let sigma = tape.softplus(s);
    Ok((c, sigma))
}
