//! Analytic multiview image source with controllable per-view inconsistency.
//!
//! Scenes are closed-form density and albedo fields on `[-1, 1]³`, rendered
//! with many evenly spaced samples. A perturbation keyed by the camera pose
//! is then applied to the foreground, so the same view always flickers the
//! same way while neighbouring views disagree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::renderer::{render_image_rgba, CameraPose, Field, PatchSpec, RenderOptions};

pub const ORACLE_SAMPLES: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum OracleScene {
    /// `σ = σ_max · sigmoid((r − |x|) / s)` with a smooth solid texture.
    Sphere { radius: f64, density: f64, sharpness: f64 },
    /// Two Gaussian blobs of different colours.
    Blobs { density: f64, width: f64 },
    /// Soft-edged box `[-h, h]³` with procedural stripes.
    StripedBox { half: f64, density: f64, sharpness: f64, stripes: f64 },
    Vacuum,
}

impl OracleScene {
    pub fn sphere() -> Self {
        OracleScene::Sphere { radius: 0.6, density: 5.0, sharpness: 0.015 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OracleScene::Sphere { .. } => "sphere",
            OracleScene::Blobs { .. } => "blobs",
            OracleScene::StripedBox { .. } => "box",
            OracleScene::Vacuum => "vacuum",
        }
    }

    pub fn density(&self, p: [f64; 3]) -> f64 {
        let r2 = |q: [f64; 3], c: [f64; 3]| (q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2) + (q[2] - c[2]).powi(2);
        match *self {
            OracleScene::Sphere { radius, density, sharpness } => {
                density * kernels::sigmoid((radius - r2(p, [0.0; 3]).sqrt()) / sharpness)
            }
            OracleScene::Blobs { density, width } => {
                let g = |c| (-r2(p, c) / (2.0 * width * width)).exp();
                density * (g(BLOB_A) + g(BLOB_B))
            }
            OracleScene::StripedBox { half, density, sharpness, .. } => {
                let inside = p.iter().map(|v| kernels::sigmoid((half - v.abs()) / sharpness)).product::<f64>();
                density * inside
            }
            OracleScene::Vacuum => 0.0,
        }
    }

    pub fn albedo(&self, p: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = p;
        let c = match *self {
            OracleScene::Sphere { .. } => [
                0.5 + 0.3 * (3.0 * x + 1.0).sin() * (2.0 * y).cos(),
                0.5 + 0.3 * (3.0 * y + 2.0 * z).sin(),
                0.5 + 0.3 * (3.0 * z - x).cos(),
            ],
            OracleScene::Blobs { width, .. } => {
                let wa = (-((x - BLOB_A[0]).powi(2) + (y - BLOB_A[1]).powi(2) + (z - BLOB_A[2]).powi(2)) / (2.0 * width * width)).exp();
                let wb = (-((x - BLOB_B[0]).powi(2) + (y - BLOB_B[1]).powi(2) + (z - BLOB_B[2]).powi(2)) / (2.0 * width * width)).exp();
                let t = wa / (wa + wb + 1e-300);
                [0.2 + 0.6 * t, 0.3, 0.8 - 0.6 * t]
            }
            OracleScene::StripedBox { stripes, .. } => {
                let s = 0.5 + 0.35 * (stripes * x).sin();
                [s, 0.5 + 0.25 * (stripes * 0.5 * y).cos(), 1.0 - s]
            }
            OracleScene::Vacuum => [0.5; 3],
        };
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

const BLOB_A: [f64; 3] = [-0.35, 0.1, 0.0];
const BLOB_B: [f64; 3] = [0.35, -0.1, 0.1];

impl Field for OracleScene {
    fn query(&self, points: &[[f64; 3]]) -> Result<(Tensor, Tensor)> {
        let c = points.iter().flat_map(|p| self.albedo(*p)).collect();
        let s = points.iter().map(|p| self.density(*p)).collect();
        Ok((Tensor::from_parts(vec![points.len(), 3], c), Tensor::from_parts(vec![points.len()], s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InconsistencyMode {
    None,
    /// Band-limited colour noise of RMS `ε` on the foreground.
    TextureJitter,
    /// Smooth pixel displacement of at most `ε` pixels on the foreground.
    Warp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InconsistencySpec {
    pub mode: InconsistencyMode,
    pub amplitude: f64,
    /// Mixed into every per-view seed.
    pub seed: u64,
}

impl InconsistencySpec {
    pub fn none() -> Self {
        Self { mode: InconsistencyMode::None, amplitude: 0.0, seed: 0 }
    }

    pub fn jitter(amplitude: f64, seed: u64) -> Self {
        Self { mode: InconsistencyMode::TextureJitter, amplitude, seed }
    }

    pub fn is_identity(&self) -> bool {
        self.mode == InconsistencyMode::None || self.amplitude == 0.0
    }
}

/// Blur width (pixels) of the jitter noise.
pub const JITTER_BLUR: f64 = 1.5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-view seed: a hash of the pose bit patterns and the inconsistency seed.
pub fn view_seed(cam: &CameraPose, seed: u64) -> u64 {
    let mut h = splitmix(seed);
    let words = cam.rotation.iter().flatten().chain(&cam.position).chain([&cam.focal]).chain(&cam.principal);
    for v in words {
        h = splitmix(h ^ v.to_bits());
    }
    splitmix(h ^ cam.size as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub scene: OracleScene,
    pub inconsistency: InconsistencySpec,
    pub background: [f64; 3],
    pub samples: usize,
}

impl Teacher {
    pub fn new(scene: OracleScene, inconsistency: InconsistencySpec) -> Self {
        Self { scene, inconsistency, background: [1.0; 3], samples: ORACLE_SAMPLES }
    }

    fn options(&self) -> RenderOptions {
        RenderOptions { background: self.background, ..RenderOptions::uniform(self.samples) }
    }

    /// Consistent reference frame and its opacity.
    pub fn oracle_render(&self, cam: &CameraPose) -> Result<(Image, Vec<f64>)> {
        render_image_rgba(&self.scene, cam, &self.options(), 0)
    }

    /// The teacher's (possibly inconsistent) frame for `cam`.
    pub fn image(&self, cam: &CameraPose) -> Result<Image> {
        let (img, alpha) = self.oracle_render(cam)?;
        if self.inconsistency.is_identity() {
            return Ok(img);
        }
        let seed = view_seed(cam, self.inconsistency.seed);
        let eps = self.inconsistency.amplitude;
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::invalid(format!("inconsistency amplitude must be finite and >= 0, got {eps}")));
        }
        Ok(match self.inconsistency.mode {
            InconsistencyMode::None => img,
            InconsistencyMode::TextureJitter => jitter(&img, &alpha, eps, seed),
            InconsistencyMode::Warp => warp(&img, &alpha, eps, seed),
        })
    }

    /// Crop of [`Teacher::image`]; identical to cutting the full frame.
    pub fn patch(&self, cam: &CameraPose, patch: &PatchSpec) -> Result<Image> {
        if self.inconsistency.is_identity() {
            let plan = crate::renderer::plan_samples(&self.scene, cam, patch, &self.options(), 0)?;
            return crate::renderer::render_plan_values(&self.scene, &plan);
        }
        self.image(cam)?.crop(patch.u0, patch.v0, patch.width, patch.height)
    }
}

/// Foreground weight from opacity: 0 on background, 1 on solid surfaces.
pub fn foreground_mask(alpha: f64) -> f64 {
    ((alpha - 0.01) / 0.98).clamp(0.0, 1.0)
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let t: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Separable blur of a `w × h` single-channel field with clamped borders.
fn blur(field: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps.iter().enumerate().map(|(k, t)| t * field[y * w + at(x as isize + k as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps.iter().enumerate().map(|(k, t)| t * tmp[at(y as isize + k as isize - r, h) * w + x]).sum();
        }
    }
    out
}

fn jitter(img: &Image, alpha: &[f64], eps: f64, seed: u64) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taps = gaussian_taps(JITTER_BLUR);
    let mut out = img.clone();
    for ch in 0..3 {
        let white: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise = blur(&white, w, h, &taps);
        let rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt().max(1e-300);
        for (i, n) in noise.iter().enumerate() {
            let m = foreground_mask(alpha[i]);
            if m > 0.0 {
                let v = &mut out.data_mut()[i * 3 + ch];
                *v = (*v + eps * m * n / rms).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn smooth_field(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| [rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..1.0)])
        .collect();
    let mut f: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
            waves.iter().map(|[fx, fy, ph, a]| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin()).sum()
        })
        .collect();
    let m = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    f.iter_mut().for_each(|v| *v /= m);
    f
}

fn warp(img: &Image, alpha: &[f64], eps: f64, seed: u64) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = smooth_field(&mut rng, w, h);
    let dy = smooth_field(&mut rng, w, h);
    let mut out = img.clone();
    for i in 0..w * h {
        let m = foreground_mask(alpha[i]);
        if m == 0.0 {
            continue;
        }
        // Displacement magnitude is at most ε pixels.
        let (sx, sy) = (dx[i] * eps / std::f64::consts::SQRT_2, dy[i] * eps / std::f64::consts::SQRT_2);
        let px = ((i % w) as f64 + sx).clamp(0.0, (w - 1) as f64);
        let py = ((i / w) as f64 + sy).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
        let orig = img.pixel(i % w, i / w);
        let mut rgb = [0.0; 3];
        for ch in 0..3 {
            let s = (1.0 - fy) * ((1.0 - fx) * a[ch] + fx * b[ch]) + fy * ((1.0 - fx) * c[ch] + fx * d[ch]);
            rgb[ch] = m * s + (1.0 - m) * orig[ch];
        }
        out.set_pixel(i % w, i / w, rgb);
    }
    out
}

#[cfg(test)]
mod tests;
