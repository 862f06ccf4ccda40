//! Finite-difference checks of every differentiable operation, one table
//! row per operation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{check_scaled, Probe};
use crate::autodiff::{ReduceKind, SparseBuilder, Tape, Tensor, Var};
use crate::aware3d::{aware3d_block, modulated_conv2d, Aware3dParams, ModConvParams};
use crate::decoder::{decode, DecoderParams};
use crate::error::Result;
use crate::losses::{disc_loss, nonsat_gen_loss, perceptual_proxy, r1_penalty, Discriminator, PatchDiscriminatorParams, DEFAULT_LEVEL_WEIGHTS};
use crate::params::Parameters;
use crate::renderer::{composite, plan_samples, render_plan, CameraPose, Field, PatchSpec, RenderOptions};
use crate::trainer::{ResolvedField, StudentConfig, StudentField};
use crate::triplane::{compose, sample_triplane, super_resolve_3d, upsample_nearest2, SuperRes3d, TriPlane, TriPlaneVars};

pub const FD_STEP: f64 = 1e-5;
/// Step for deep smooth compositions, where cancellation in the
/// difference dominates at [`FD_STEP`].
pub const FD_STEP_DEEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub configs: usize,
    pub tolerance: f64,
    /// Negates every analytic gradient so that each row must fail.
    pub inject_sign_flip: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 0, configs: 20, tolerance: TOLERANCE, inject_sign_flip: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub configs: usize,
    pub probes: usize,
    pub skipped: usize,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    probe: Probe,
    build: Build,
    h: f64,
}

impl Case {
    fn deep(mut self) -> Self {
        self.h = FD_STEP_DEEP;
        self
    }
}

fn tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Values in `±[lo, hi]`, keeping away from kinks at zero. The first entry
/// is positive so a one-sided op never has an all-zero gradient.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|i| rng.gen_range(lo..hi) * if i == 0 || rng.gen() { 1.0 } else { -1.0 }).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Scalar `Σ wᵢ yᵢ` with fixed pseudo-random weights, so every output
/// element contributes with its own sensitivity.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let w = tensor(&shape, -1.0, 1.0, &mut rng);
    let p = t.mul_const(y, Arc::new(w))?;
    Ok(t.sum_all(p))
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 2] {
    [rng.gen_range(1..5), rng.gen_range(1..5)]
}

/// Binds `p`'s tensors from consecutive tape inputs.
fn bind_slice<P: Parameters>(p: &P, vars: &[Var]) -> P::Vars {
    let mut it = vars.iter().copied();
    p.bind_vars(&mut || it.next().expect("one input per parameter tensor"))
}

fn owned<P: Parameters>(p: &P) -> Vec<Tensor> {
    p.tensors().into_iter().cloned().collect()
}

/// At most `per_input` random entries of each input.
fn sampled_probe(inputs: &[Tensor], per_input: usize, rng: &mut ChaCha8Rng) -> Probe {
    let mut e = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.numel() <= per_input {
            e.extend((0..t.numel()).map(|j| (i, j)));
        } else {
            e.extend((0..per_input).map(|_| (i, rng.gen_range(0..t.numel()))));
        }
    }
    Probe::Entries(e)
}

fn unary(f: fn(&mut Tape, Var) -> Var, lo: f64, hi: f64, signed: bool) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let s = dims(rng);
        let x = if signed { away_from_zero(&s, lo, hi, rng) } else { tensor(&s, lo, hi, rng) };
        let seed = rng.gen();
        Case { h: FD_STEP, inputs: vec![x], probe: Probe::All, build: Box::new(move |t, v| { let y = f(t, v[0]); project(t, y, seed) }) }
    }
}

fn binary(f: fn(&mut Tape, Var, Var) -> Result<Var>) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let s = dims(rng);
        let a = tensor(&s, -2.0, 2.0, rng);
        let b = away_from_zero(&s, 0.3, 2.0, rng);
        let seed = rng.gen();
        Case { h: FD_STEP, inputs: vec![a, b], probe: Probe::All, build: Box::new(move |t, v| { let y = f(t, v[0], v[1])?; project(t, y, seed) }) }
    }
}

fn random_triplane(c: usize, r: usize, rng: &mut ChaCha8Rng) -> TriPlane {
    TriPlane::random(c, r, 1.0, rng)
}

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
}

fn case_reduce(rng: &mut ChaCha8Rng) -> Case {
    let shape = [rng.gen_range(1..4), rng.gen_range(2..4), rng.gen_range(1..4)];
    let x = tensor(&shape, -2.0, 2.0, rng);
    let axis = rng.gen_range(0..3);
    let kind = [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max][rng.gen_range(0..3)];
    let seed = rng.gen();
    Case { h: FD_STEP, inputs: vec![x], probe: Probe::All, build: Box::new(move |t, v| { let y = t.reduce(kind, v[0], axis)?; project(t, y, seed) }) }
}

fn case_shape_ops(rng: &mut ChaCha8Rng) -> Case {
    // concat → slice → permute → reshape → expand → transpose, in one chain.
    let (a, b, c) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..4));
    let x = tensor(&[a, b, c], -1.0, 1.0, rng);
    let y = tensor(&[a, b + 1, c], -1.0, 1.0, rng);
    let seed = rng.gen();
    Case {
        h: FD_STEP,
        inputs: vec![x, y],
        probe: Probe::All,
        build: Box::new(move |t, v| {
            let cat = t.concat(&[v[0], v[1]], 1)?;
            let sl = t.slice(cat, 2, 1, c)?;
            let p = t.permute(sl, &[2, 0, 1])?;
            let r = t.reshape(p, [(c - 1) * a, 2 * b + 1])?;
            let e = t.expand(r, 1, 2)?;
            let e = t.reshape(e, [(c - 1) * a * 2, 2 * b + 1])?;
            let tr = t.transpose(e)?;
            project(t, tr, seed)
        }),
    }
}

fn case_sparse(rng: &mut ChaCha8Rng) -> Case {
    let (rows, cols) = (rng.gen_range(1..6), rng.gen_range(1..6));
    let mut sb = SparseBuilder::new(cols);
    for _ in 0..rows {
        for c in 0..cols {
            if rng.gen_bool(0.5) {
                sb.push(c, rng.gen_range(-1.0..1.0));
            }
        }
        sb.end_row();
    }
    let map = Arc::new(sb.finish());
    let x = tensor(&[cols], -1.0, 1.0, rng);
    let seed = rng.gen();
    Case { h: FD_STEP, inputs: vec![x], probe: Probe::All, build: Box::new(move |t, v| { let y = t.sparse(v[0], map.clone(), [rows])?; project(t, y, seed) }) }
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let inputs = vec![tensor(&[m, k], -1.0, 1.0, rng), tensor(&[k, n], -1.0, 1.0, rng), tensor(&[n], -1.0, 1.0, rng)];
    let seed = rng.gen();
    Case {
        h: FD_STEP,
        inputs,
        probe: Probe::All,
        build: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add_rows(y, v[2])?;
            project(t, y, seed)
        }),
    }
}

fn case_scale_ops(rng: &mut ChaCha8Rng) -> Case {
    let s = dims(rng);
    let x = tensor(&s, -1.0, 1.0, rng);
    let c = Arc::new(tensor(&s, -2.0, 2.0, rng));
    let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
    let seed = rng.gen();
    Case {
        h: FD_STEP,
        inputs: vec![x],
        probe: Probe::All,
        build: Box::new(move |t, v| {
            let y = t.affine(v[0], a, b);
            let y = t.scale(y, 0.7);
            let y = t.mul_const(y, c.clone())?;
            project(t, y, seed)
        }),
    }
}

fn case_triplane_sample(rng: &mut ChaCha8Rng) -> Case {
    let tp = random_triplane(rng.gen_range(1..4), rng.gen_range(1..6), rng);
    let pts = random_points(rng.gen_range(1..8), rng);
    let seed = rng.gen();
    Case {
        h: FD_STEP,
        inputs: owned(&tp),
        probe: Probe::All,
        build: Box::new(move |t, v| {
            let f = sample_triplane(t, &TriPlaneVars([v[0], v[1], v[2]]), &pts)?;
            project(t, f, seed)
        }),
    }
}

fn case_compose(rng: &mut ChaCha8Rng) -> Case {
    let s = [rng.gen_range(1..6), rng.gen_range(1..4)];
    let inputs = vec![tensor(&s, -1.0, 1.0, rng), tensor(&s, -1.0, 1.0, rng)];
    let seed = rng.gen();
    Case { h: FD_STEP, inputs, probe: Probe::All, build: Box::new(move |t, v| { let y = compose(t, v[0], v[1])?; project(t, y, seed) }) }
}

fn case_upsample(rng: &mut ChaCha8Rng) -> Case {
    let x = tensor(&[rng.gen_range(1..3), 3, 3], -1.0, 1.0, rng);
    let seed = rng.gen();
    Case { h: FD_STEP, inputs: vec![x], probe: Probe::All, build: Box::new(move |t, v| { let y = upsample_nearest2(t, v[0])?; project(t, y, seed) }) }
}

fn case_modconv(demod: bool) -> impl Fn(&mut ChaCha8Rng) -> Case {
    move |rng| {
        let (ci, co, r, d_w) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(1..4));
        let p = ModConvParams::init(ci, co, d_w, demod, rng);
        let x = tensor(&[ci, r, r], -1.0, 1.0, rng);
        let w = tensor(&[d_w], -1.0, 1.0, rng);
        let mut inputs = vec![x, w];
        inputs.extend(owned(&p));
        let seed = rng.gen();
        Case {
            h: FD_STEP,
            inputs,
            probe: Probe::All,
            build: Box::new(move |t, v| {
                let pv = bind_slice(&p, &v[2..]);
                let y = modulated_conv2d(t, v[0], &pv, v[1])?;
                project(t, y, seed)
            }),
        }
    }
}

fn case_aware3d(rng: &mut ChaCha8Rng) -> Case {
    let (c, r, d_w) = (rng.gen_range(1..3), rng.gen_range(2..4), rng.gen_range(1..3));
    let tp = random_triplane(c, r, rng);
    let p = Aware3dParams::init(c, d_w, rng);
    let mut inputs = owned(&tp);
    inputs.push(tensor(&[d_w], -1.0, 1.0, rng));
    inputs.extend(owned(&p));
    let probe = sampled_probe(&inputs, 12, rng);
    let seed = rng.gen();
    Case {
        h: FD_STEP,
        inputs,
        probe,
        build: Box::new(move |t, v| {
            let pv = bind_slice(&p, &v[4..]);
            let out = aware3d_block(t, &TriPlaneVars([v[0], v[1], v[2]]), v[3], &pv)?;
            let cat = t.concat(&out.0, 0)?;
            project(t, cat, seed)
        }),
    }
}

fn case_super_res(rng: &mut ChaCha8Rng) -> Case {
    let (c, r, d_w) = (rng.gen_range(1..3), rng.gen_range(2..4), rng.gen_range(1..3));
    let factor = if rng.gen_bool(0.5) { 2 } else { 4 };
    let tp = random_triplane(c, r, rng);
    let sr = SuperRes3d::init(c, d_w, factor, true, rng).expect("valid factor");
    let mut inputs = owned(&tp);
    inputs.push(tensor(&[d_w], -1.0, 1.0, rng));
    inputs.extend(owned(&sr));
    let probe = sampled_probe(&inputs, 12, rng);
    let seed = rng.gen();
    Case {
        h: FD_STEP,
        inputs,
        probe,
        build: Box::new(move |t, v| {
            let pv = bind_slice(&sr, &v[4..]);
            let out = super_resolve_3d(t, &TriPlaneVars([v[0], v[1], v[2]]), v[3], &pv)?;
            let cat = t.concat(&out.0, 0)?;
            project(t, cat, seed)
        }),
    }
}

fn case_decoder(rng: &mut ChaCha8Rng) -> Case {
    let (n, c, h, depth) = (rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(0..3));
    let dec = DecoderParams::init(c, h, depth, 3, rng);
    let mut inputs = vec![tensor(&[n, c], -1.0, 1.0, rng)];
    inputs.extend(owned(&dec));
    let seed = rng.gen();
    Case {
        h: FD_STEP,
        inputs,
        probe: Probe::All,
        build: Box::new(move |t, v| {
            let dv = bind_slice(&dec, &v[1..]);
            let (col, sigma) = decode(t, &dv, v[0])?;
            let a = project(t, col, seed)?;
            let b = project(t, sigma, seed ^ 1)?;
            t.add(a, b)
        }),
    }
}

fn case_composite(rng: &mut ChaCha8Rng) -> Case {
    let (n, s) = (rng.gen_range(1..4), rng.gen_range(1..9));
    let c = tensor(&[n, s, 3], 0.0, 1.0, rng);
    let sigma = tensor(&[n, s], 0.0, 3.0, rng);
    let delta = tensor(&[n, s], 0.0, 0.5, rng);
    let seed = rng.gen();
    Case {
        h: FD_STEP,
        inputs: vec![c, sigma],
        probe: Probe::All,
        build: Box::new(move |t, v| {
            let out = composite(t, v[0], v[1], &delta)?;
            let a = project(t, out.pixel, seed)?;
            let b = project(t, out.weights, seed ^ 1)?;
            let e = project(t, out.t_end, seed ^ 2)?;
            let ab = t.add(a, b)?;
            t.add(ab, e)
        }),
    }
}

/// A field that is dense near the origin, for sample planning.
struct Bump;

impl Field for Bump {
    fn query(&self, pts: &[[f64; 3]]) -> Result<(Tensor, Tensor)> {
        let s = pts.iter().map(|p| 4.0 * (-(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / 0.2).exp()).collect();
        Ok((Tensor::full([pts.len(), 3], 0.5), Tensor::vector(s)))
    }
}

fn case_render_plan(rng: &mut ChaCha8Rng) -> Case {
    let size = rng.gen_range(2..5);
    let cam = CameraPose::orbit(rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5), 3.0, 40.0, size);
    let plan = plan_samples(&Bump, &cam, &PatchSpec::full(size), &RenderOptions::hierarchical(4, 4), rng.gen()).expect("valid plan");
    let m = plan.points.len();
    let inputs = vec![tensor(&[m, 3], 0.0, 1.0, rng), tensor(&[m], -2.0, 2.0, rng)];
    let probe = sampled_probe(&inputs, 24, rng);
    let seed = rng.gen();
    Case {
        h: FD_STEP,
        inputs,
        probe,
        build: Box::new(move |t, v| {
            let img = render_plan(t, &plan, |t, _| Ok((v[0], t.softplus(v[1]))))?;
            project(t, img, seed)
        }),
    }
}

fn case_perceptual(rng: &mut ChaCha8Rng) -> Case {
    let (h, w) = (rng.gen_range(4..9), rng.gen_range(4..9));
    let inputs = vec![tensor(&[h, w, 3], 0.0, 1.0, rng), tensor(&[h, w, 3], 0.0, 1.0, rng)];
    let probe = sampled_probe(&inputs, 16, rng);
    Case { h: FD_STEP, inputs, probe, build: Box::new(|t, v| perceptual_proxy(t, v[0], v[1], &DEFAULT_LEVEL_WEIGHTS)) }
}

fn random_disc(rng: &mut ChaCha8Rng) -> PatchDiscriminatorParams {
    PatchDiscriminatorParams::init(8, [2, 3, 2], rng.gen_range(1..4), rng)
}

fn case_discriminator(rng: &mut ChaCha8Rng) -> Case {
    let d = random_disc(rng);
    let mut inputs = vec![tensor(&[8, 8, 3], 0.0, 1.0, rng)];
    inputs.extend(owned(&d));
    let probe = sampled_probe(&inputs, 10, rng);
    Case {
        h: FD_STEP,
        inputs,
        probe,
        build: Box::new(move |t, v| {
            let dv = bind_slice(&d, &v[1..]);
            Discriminator::new(&d).score(t, &dv, v[0])
        }),
    }
}

fn case_gan_losses(rng: &mut ChaCha8Rng) -> Case {
    let inputs = vec![tensor(&[1], -3.0, 3.0, rng), tensor(&[1], -3.0, 3.0, rng)];
    Case {
        h: FD_STEP,
        inputs,
        probe: Probe::All,
        build: Box::new(|t, v| {
            let g = nonsat_gen_loss(t, v[0]);
            let d = disc_loss(t, v[0], v[1])?;
            let d = t.scale(d, 0.5);
            t.add(g, d)
        }),
    }
}

fn case_r1(rng: &mut ChaCha8Rng) -> Case {
    let d = random_disc(rng);
    let mut inputs = owned(&d);
    inputs.push(tensor(&[8, 8, 3], 0.0, 1.0, rng));
    let probe = sampled_probe(&inputs, 6, rng);
    let lambda = rng.gen_range(0.5..2.0);
    Case {
        h: FD_STEP,
        inputs,
        probe,
        build: Box::new(move |t, v| {
            let n = v.len() - 1;
            let dv = bind_slice(&d, &v[..n]);
            let real = v[n];
            let score = Discriminator::new(&d).score(t, &dv, real)?;
            r1_penalty(t, score, real, lambda)
        }),
    }
}

/// Texel → super-resolution → decoder → compositing for one small patch.
fn case_pipeline(rng: &mut ChaCha8Rng) -> Case {
    let cfg = StudentConfig {
        channels: rng.gen_range(1..3),
        coarse_res: rng.gen_range(2..4),
        factor: 2,
        style_dim: 2,
        hidden: 3,
        depth: 1,
        aware3d: rng.gen_bool(0.5),
        demodulate: true,
        init_scale: 1.0,
    };
    let student = StudentField::init(&cfg, rng).expect("valid student");
    let size = rng.gen_range(2..4);
    let cam = CameraPose::orbit(rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5), 3.0, 40.0, size);
    let resolved: ResolvedField = student.resolve().expect("finite student");
    let plan = plan_samples(&resolved, &cam, &PatchSpec::full(size), &RenderOptions::hierarchical(4, 4), rng.gen()).expect("valid plan");
    let inputs = owned(&student);
    let probe = sampled_probe(&inputs, 6, rng);
    let seed = rng.gen();
    Case {
        h: FD_STEP,
        inputs,
        probe,
        build: Box::new(move |t, v| {
            let vars = bind_slice(&student, v);
            let planes = student.planes(t, &vars)?;
            let img = render_plan(t, &plan, |t, pts| StudentField::eval(t, &vars, &planes, pts))?;
            project(t, img, seed)
        }),
    }
}

type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> Case>;

fn deep(make: impl Fn(&mut ChaCha8Rng) -> Case + 'static) -> Maker {
    Box::new(move |rng| make(rng).deep())
}

fn registry() -> Vec<(&'static str, Maker)> {
    vec![
        ("neg", Box::new(unary(|t, x| t.neg(x), -2.0, 2.0, false))),
        ("exp", Box::new(unary(|t, x| t.exp(x), -2.0, 2.0, false))),
        ("softplus", Box::new(unary(|t, x| t.softplus(x), -4.0, 4.0, false))),
        ("sigmoid", Box::new(unary(|t, x| t.sigmoid(x), -4.0, 4.0, false))),
        ("relu", Box::new(unary(|t, x| t.relu(x), 0.05, 2.0, true))),
        ("leaky_relu", Box::new(unary(|t, x| t.leaky_relu(x, 0.2), 0.05, 2.0, true))),
        ("sqrt", Box::new(unary(|t, x| t.sqrt(x), 0.2, 3.0, false))),
        ("square", Box::new(unary(|t, x| t.square(x), -2.0, 2.0, false))),
        ("abs", Box::new(unary(|t, x| t.abs(x), 0.05, 2.0, true))),
        ("add", Box::new(binary(|t, a, b| t.add(a, b)))),
        ("sub", Box::new(binary(|t, a, b| t.sub(a, b)))),
        ("mul", Box::new(binary(|t, a, b| t.mul(a, b)))),
        ("div", Box::new(binary(|t, a, b| t.div(a, b)))),
        ("affine_scale_mul_const", Box::new(case_scale_ops)),
        ("matmul_add_rows", Box::new(case_matmul)),
        ("reduce_sum_mean_max", Box::new(case_reduce)),
        ("concat_slice_permute_reshape_expand", Box::new(case_shape_ops)),
        ("sparse_map", Box::new(case_sparse)),
        ("triplane_sample", Box::new(case_triplane_sample)),
        ("compose", Box::new(case_compose)),
        ("upsample_nearest2", Box::new(case_upsample)),
        ("modulated_conv_demod", deep(case_modconv(true))),
        ("modulated_conv_plain", deep(case_modconv(false))),
        ("aware3d_block", deep(case_aware3d)),
        ("super_resolve_3d", deep(case_super_res)),
        ("decoder", Box::new(case_decoder)),
        ("composite", Box::new(case_composite)),
        ("render_plan", Box::new(case_render_plan)),
        ("perceptual_proxy", Box::new(case_perceptual)),
        ("discriminator", Box::new(case_discriminator)),
        ("gan_losses", Box::new(case_gan_losses)),
        ("r1_penalty", Box::new(case_r1)),
        ("full_pipeline", deep(case_pipeline)),
    ]
}

/// Names of every checked operation, in table order.
pub fn op_names() -> Vec<&'static str> {
    registry().into_iter().map(|(n, _)| n).collect()
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<OpReport>> {
    let scale = if opts.inject_sign_flip { -1.0 } else { 1.0 };
    let mut out = Vec::new();
    for (k, (name, make)) in registry().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(k as u64);
        let (mut worst, mut probes, mut skipped) = (0.0f64, 0, 0);
        for _ in 0..opts.configs {
            let case = make(&mut rng);
            let r = check_scaled(&case.inputs, case.h, &case.probe, scale, &case.build)?;
            worst = worst.max(r.max_rel_err);
            probes += r.probes;
            skipped += r.skipped;
        }
        out.push(OpReport { name, max_rel_err: worst, configs: opts.configs, probes, skipped, passed: worst < opts.tolerance && probes > 0 });
    }
    Ok(out)
}

pub fn format_table(reports: &[OpReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(2).max(2);
    let mut s = format!("{:<width$}  {:>12}  {:>7}  {:>6}  {:>7}  result\n", "op", "max_rel_err", "configs", "probes", "skipped");
    for r in reports {
        let verdict = if r.passed { "ok" } else { "FAIL" };
        s += &format!("{:<width$}  {:>12.3e}  {:>7}  {:>6}  {:>7}  {verdict}\n", r.name, r.max_rel_err, r.configs, r.probes, r.skipped);
    }
    s
}
