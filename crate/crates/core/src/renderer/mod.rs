//! Rays, depth sampling and volume rendering of patches and images.
//!
//! Rendering runs in two phases. [`plan_samples`] fixes every sample depth
//! (stratified draws plus importance draws guided by a value-only coarse
//! pass); [`render_plan`] then evaluates the field on the tape at those
//! depths. Sample positions never receive gradients. Each pixel draws from
//! its own random stream keyed by `(seed, frame pixel index)`, so a patch
//! renders exactly the pixels of the full frame it was cut from.

pub mod camera;
pub mod composite;
pub mod sampling;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use camera::{generate_rays, ray_aabb, CameraPose, PatchSpec, Ray};
pub use composite::{composite, composite_values, Composited};
pub use sampling::{coarse_bins, importance_sample, merge_depths, spacings, stratified_sample, uniform_depths};

use crate::autodiff::{SparseMap, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;

/// Value-only radiance field: RGB `N × 3` in `[0, 1]` and density `N`.
pub trait Field: Sync {
    fn query(&self, points: &[[f64; 3]]) -> Result<(Tensor, Tensor)>;
}

pub const DEFAULT_EPS_U: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    /// Stratified coarse draws, then importance draws from the coarse weights.
    Hierarchical { coarse: usize, fine: usize, eps_u: f64 },
    /// `n` evenly spaced deterministic depths.
    Uniform { n: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub sampling: Sampling,
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            sampling: Sampling::Hierarchical { coarse: 48, fine: 48, eps_u: DEFAULT_EPS_U },
            background: [1.0; 3],
        }
    }
}

impl RenderOptions {
    pub fn hierarchical(coarse: usize, fine: usize) -> Self {
        Self { sampling: Sampling::Hierarchical { coarse, fine, eps_u: DEFAULT_EPS_U }, ..Self::default() }
    }

    pub fn uniform(n: usize) -> Self {
        Self { sampling: Sampling::Uniform { n }, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        match self.sampling {
            Sampling::Hierarchical { coarse: 0, .. } | Sampling::Uniform { n: 0 } => {
                Err(Error::invalid("at least one sample per ray is required"))
            }
            Sampling::Hierarchical { eps_u, .. } if !(eps_u >= 0.0) => Err(Error::invalid("eps_u must be >= 0")),
            _ => Ok(()),
        }
    }
}

/// Fixed sample depths for every ray of a patch that hits the unit cube.
/// Ragged rays are padded to `samples` with `t = far`, `δ = 0`.
#[derive(Clone, Debug)]
pub struct SamplePlan {
    pub patch: PatchSpec,
    /// Row-major patch pixel index of each hit ray.
    pub hits: Vec<usize>,
    pub samples: usize,
    pub points: Vec<[f64; 3]>,
    /// `hits × samples`
    pub t: Tensor,
    /// `hits × samples`
    pub delta: Tensor,
    pub background: [f64; 3],
}

fn pixel_rng(seed: u64, patch: &PatchSpec, i: usize) -> ChaCha8Rng {
    let (u, v) = patch.frame_pixel(i);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((v * patch.full + u) as u64);
    rng
}

fn at(ray: &Ray, t: f64) -> [f64; 3] {
    [ray.origin[0] + t * ray.dir[0], ray.origin[1] + t * ray.dir[1], ray.origin[2] + t * ray.dir[2]]
}

struct RayState {
    pixel: usize,
    ray: Ray,
    near: f64,
    far: f64,
    rng: ChaCha8Rng,
    t: Vec<f64>,
}

/// Chooses all sample depths for `patch`. `field` is only queried for the
/// coarse pass of hierarchical sampling.
pub fn plan_samples(field: &dyn Field, cam: &CameraPose, patch: &PatchSpec, opts: &RenderOptions, seed: u64) -> Result<SamplePlan> {
    opts.validate()?;
    let rays = generate_rays(cam, patch)?;
    let mut states: Vec<RayState> = rays
        .into_iter()
        .enumerate()
        .filter_map(|(i, ray)| {
            ray_aabb(&ray).map(|(near, far)| RayState { pixel: i, ray, near, far, rng: pixel_rng(seed, patch, i), t: Vec::new() })
        })
        .collect();

    match opts.sampling {
        Sampling::Uniform { n } => {
            for s in &mut states {
                s.t = uniform_depths(s.near, s.far, n);
            }
        }
        Sampling::Hierarchical { coarse, fine, eps_u } => {
            states.par_iter_mut().try_for_each(|s| -> Result<()> {
                s.t = stratified_sample(s.near, s.far, coarse, &mut s.rng)?;
                Ok(())
            })?;
            if fine > 0 && !states.is_empty() {
                let points: Vec<[f64; 3]> =
                    states.iter().flat_map(|s| s.t.iter().map(move |t| at(&s.ray, *t))).collect();
                let (c, sigma) = field.query(&points)?;
                let delta: Vec<f64> = states.iter().flat_map(|s| spacings(&s.t, s.far)).collect();
                let h = states.len();
                let comp = composite_values(
                    &c.reshaped([h, coarse, 3])?,
                    &sigma.reshaped([h, coarse])?,
                    &Tensor::from_parts(vec![h, coarse], delta),
                )?;
                let w = comp.weights.data();
                states.par_iter_mut().enumerate().try_for_each(|(r, s)| -> Result<()> {
                    let (edges, bw) = coarse_bins(&s.t, &w[r * coarse..(r + 1) * coarse], s.near, s.far);
                    let extra = importance_sample(&edges, &bw, fine, eps_u, &mut s.rng)?;
                    s.t = merge_depths(&s.t, &extra);
                    Ok(())
                })?;
            }
        }
    }

    let samples = states.iter().map(|s| s.t.len()).max().unwrap_or(0);
    let h = states.len();
    let mut points = Vec::with_capacity(h * samples);
    let mut t = Vec::with_capacity(h * samples);
    let mut delta = Vec::with_capacity(h * samples);
    for s in &states {
        let d = spacings(&s.t, s.far);
        for k in 0..samples {
            let (tk, dk) = if k < s.t.len() { (s.t[k], d[k]) } else { (s.far, 0.0) };
            points.push(at(&s.ray, tk));
            t.push(tk);
            delta.push(dk);
        }
    }
    Ok(SamplePlan {
        patch: *patch,
        hits: states.iter().map(|s| s.pixel).collect(),
        samples,
        points,
        t: Tensor::from_parts(vec![h, samples], t),
        delta: Tensor::from_parts(vec![h, samples], delta),
        background: opts.background,
    })
}

impl SamplePlan {
    fn background_image(&self) -> Tensor {
        let mut bg = Image::filled(self.patch.width, self.patch.height, self.background);
        for &p in &self.hits {
            bg.data_mut()[p * 3..p * 3 + 3].fill(0.0);
        }
        bg.to_tensor()
    }

    fn scatter_map(&self) -> SparseMap {
        let mut index = vec![None; self.patch.pixels() * 3];
        for (h, &p) in self.hits.iter().enumerate() {
            for ch in 0..3 {
                index[p * 3 + ch] = Some(h * 3 + ch);
            }
        }
        SparseMap::gather(&index, self.hits.len() * 3)
    }
}

/// Differentiable render of a planned patch: `height × width × 3`.
/// `eval` maps sample points to `(rgb: M×3, σ: M)` on the tape.
pub fn render_plan(
    tape: &mut Tape,
    plan: &SamplePlan,
    eval: impl FnOnce(&mut Tape, &[[f64; 3]]) -> Result<(Var, Var)>,
) -> Result<Var> {
    let (w, h) = (plan.patch.width, plan.patch.height);
    let bg = tape.constant(plan.background_image());
    if plan.hits.is_empty() {
        return Ok(bg);
    }
    let (n, s) = (plan.hits.len(), plan.samples);
    let (c, sigma) = eval(tape, &plan.points)?;
    let c = tape.reshape(c, [n, s, 3])?;
    let sigma = tape.reshape(sigma, [n, s])?;
    let comp = composite(tape, c, sigma, &plan.delta)?;
    let t3 = tape.expand(comp.t_end, 1, 3)?;
    let bg_rows = Arc::new(Tensor::from_parts(vec![n, 3], (0..n).flat_map(|_| plan.background).collect()));
    let bg_term = tape.mul_const(t3, bg_rows)?;
    let rgb = tape.add(comp.pixel, bg_term)?;
    let img = tape.sparse(rgb, Arc::new(plan.scatter_map()), [h, w, 3])?;
    tape.add(img, bg)
}

/// Value-only counterpart of [`render_plan`].
pub fn render_plan_values(field: &dyn Field, plan: &SamplePlan) -> Result<Image> {
    Ok(render_plan_rgba(field, plan)?.0)
}

/// Value render plus per-pixel opacity `1 − T_end` (0 for missed rays).
pub fn render_plan_rgba(field: &dyn Field, plan: &SamplePlan) -> Result<(Image, Vec<f64>)> {
    let mut img = Image::filled(plan.patch.width, plan.patch.height, plan.background);
    let mut alpha = vec![0.0; plan.patch.pixels()];
    if plan.hits.is_empty() {
        return Ok((img, alpha));
    }
    let comp = composite_plan(field, plan)?;
    for (r, &p) in plan.hits.iter().enumerate() {
        let te = comp.t_end.data()[r];
        alpha[p] = 1.0 - te;
        for ch in 0..3 {
            img.data_mut()[p * 3 + ch] = comp.pixel.data()[r * 3 + ch] + te * plan.background[ch];
        }
    }
    Ok((img, alpha))
}

fn composite_plan(field: &dyn Field, plan: &SamplePlan) -> Result<Composited<Tensor>> {
    let (n, s) = (plan.hits.len(), plan.samples);
    let (c, sigma) = field.query(&plan.points)?;
    composite_values(&c.reshaped([n, s, 3])?, &sigma.reshaped([n, s])?, &plan.delta)
}

/// Plans and renders one patch without a tape.
pub fn render_patch_values(field: &dyn Field, cam: &CameraPose, patch: &PatchSpec, opts: &RenderOptions, seed: u64) -> Result<Image> {
    let plan = plan_samples(field, cam, patch, opts, seed)?;
    render_plan_values(field, &plan)
}

/// Rows per band when rendering whole frames, bounding peak memory.
fn band_rows(size: usize) -> usize {
    (4096 / size.max(1)).clamp(1, size.max(1))
}

/// Full `F × F` frame, rendered in row bands.
pub fn render_image(field: &dyn Field, cam: &CameraPose, opts: &RenderOptions, seed: u64) -> Result<Image> {
    Ok(render_image_rgba(field, cam, opts, seed)?.0)
}

/// Full frame plus opacity, rendered in row bands.
pub fn render_image_rgba(field: &dyn Field, cam: &CameraPose, opts: &RenderOptions, seed: u64) -> Result<(Image, Vec<f64>)> {
    let f = cam.size;
    let mut img = Image::filled(f, f, opts.background);
    let mut alpha = vec![0.0; f * f];
    let rows = band_rows(f);
    for v0 in (0..f).step_by(rows) {
        let patch = PatchSpec::new(0, v0, f, rows.min(f - v0), f)?;
        let plan = plan_samples(field, cam, &patch, opts, seed)?;
        let (band, a) = render_plan_rgba(field, &plan)?;
        img.paste(&band, 0, v0)?;
        alpha[v0 * f..v0 * f + a.len()].copy_from_slice(&a);
    }
    Ok((img, alpha))
}

/// Expected-depth map; `None` where `Σ w < min_weight` (background).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<Option<f64>>,
}

pub const DEPTH_MIN_WEIGHT: f64 = 0.01;

/// `Σ w_i t_i / max(Σ w_i, ε)` per pixel.
pub fn render_depth(field: &dyn Field, cam: &CameraPose, patch: &PatchSpec, opts: &RenderOptions, seed: u64) -> Result<DepthMap> {
    let plan = plan_samples(field, cam, patch, opts, seed)?;
    let mut depth = vec![None; patch.pixels()];
    if !plan.hits.is_empty() {
        let comp = composite_plan(field, &plan)?;
        let s = plan.samples;
        for (r, &p) in plan.hits.iter().enumerate() {
            let w = &comp.weights.data()[r * s..(r + 1) * s];
            let t = &plan.t.data()[r * s..(r + 1) * s];
            let total: f64 = w.iter().sum();
            if total >= DEPTH_MIN_WEIGHT {
                let num: f64 = w.iter().zip(t).map(|(a, b)| a * b).sum();
                depth[p] = Some(num / total.max(1e-12));
            }
        }
    }
    Ok(DepthMap { width: patch.width, height: patch.height, depth })
}
