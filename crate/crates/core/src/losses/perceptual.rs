//! Multi-scale image distance: a Gaussian pyramid of the RGB image plus a
//! gradient-magnitude channel per level, compared with mean absolute error.

use std::sync::Arc;

use crate::autodiff::{SparseBuilder, SparseMap, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_LEVEL_WEIGHTS: [f64; 3] = [1.0, 0.5, 0.25];
pub const GRAD_EPS: f64 = 1e-6;

const TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug)]
struct Level {
    h: usize,
    w: usize,
    /// Previous level → this level (absent for level 0).
    down: Option<Arc<SparseMap>>,
    gx: Arc<SparseMap>,
    gy: Arc<SparseMap>,
}

/// Precomputed linear maps for `h × w × 3` images.
#[derive(Debug)]
pub struct PerceptualProxy {
    h: usize,
    w: usize,
    weights: Vec<f64>,
    levels: Vec<Level>,
}

/// 5-tap blur with clamped borders followed by taking every second pixel.
fn blur_down(h: usize, w: usize) -> SparseMap {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut b = SparseBuilder::new(h * w * 3);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for y in 0..ho {
        for x in 0..wo {
            for ch in 0..3 {
                for (a, ka) in TAPS.iter().enumerate() {
                    for (c, kc) in TAPS.iter().enumerate() {
                        let iy = clamp(2 * y as isize + a as isize - 2, h);
                        let ix = clamp(2 * x as isize + c as isize - 2, w);
                        b.push((iy * w + ix) * 3 + ch, ka * kc);
                    }
                }
                b.end_row();
            }
        }
    }
    b.finish()
}

/// Forward difference of the channel-mean image along x (`dx`) or y; zero on
/// the last column/row.
fn gray_diff(h: usize, w: usize, along_x: bool) -> SparseMap {
    let mut b = SparseBuilder::new(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let next = if along_x { (x + 1 < w).then(|| (y, x + 1)) } else { (y + 1 < h).then(|| (y + 1, x)) };
            if let Some((ny, nx)) = next {
                for ch in 0..3 {
                    b.push((ny * w + nx) * 3 + ch, 1.0 / 3.0);
                    b.push((y * w + x) * 3 + ch, -1.0 / 3.0);
                }
            }
            b.end_row();
        }
    }
    b.finish()
}

impl PerceptualProxy {
    pub fn new(h: usize, w: usize, weights: &[f64]) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("pyramid level weights must be finite and >= 0, got {weights:?}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("empty image"));
        }
        let mut levels = Vec::with_capacity(weights.len());
        let (mut ch, mut cw) = (h, w);
        for l in 0..weights.len() {
            let down = if l == 0 {
                None
            } else {
                let m = Arc::new(blur_down(ch, cw));
                ch = ch.div_ceil(2);
                cw = cw.div_ceil(2);
                Some(m)
            };
            levels.push(Level {
                h: ch,
                w: cw,
                down,
                gx: Arc::new(gray_diff(ch, cw, true)),
                gy: Arc::new(gray_diff(ch, cw, false)),
            });
        }
        Ok(Self { h, w, weights: weights.to_vec(), levels })
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    /// Per level: the image and its gradient magnitude.
    fn features(&self, tape: &mut Tape, img: Var) -> Result<Vec<(Var, Var)>> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut cur = tape.reshape(img, [self.h * self.w * 3])?;
        for lv in &self.levels {
            if let Some(d) = &lv.down {
                cur = tape.sparse(cur, d.clone(), [lv.h * lv.w * 3])?;
            }
            let gx = tape.sparse(cur, lv.gx.clone(), [lv.h * lv.w])?;
            let gy = tape.sparse(cur, lv.gy.clone(), [lv.h * lv.w])?;
            let gx2 = tape.square(gx);
            let gy2 = tape.square(gy);
            let s = tape.add(gx2, gy2)?;
            let s = tape.affine(s, 1.0, GRAD_EPS);
            out.push((cur, tape.sqrt(s)));
        }
        Ok(out)
    }

    /// `Σ_ℓ λ_ℓ (mean|A_ℓ − B_ℓ| + mean|∇A_ℓ − ∇B_ℓ|)`. The caller detaches `b`
    /// when it is a target.
    pub fn distance(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let want = [self.h, self.w, 3];
        for v in [a, b] {
            if tape.shape(v) != want {
                return Err(Error::Shape(format!("perceptual proxy expects {want:?}, got {:?}", tape.shape(v))));
            }
        }
        let fa = self.features(tape, a)?;
        let fb = self.features(tape, b)?;
        let mut total: Option<Var> = None;
        for (l, ((ia, ga), (ib, gb))) in fa.into_iter().zip(fb).enumerate() {
            let di = tape.sub(ia, ib)?;
            let di = tape.abs(di);
            let di = tape.mean_all(di);
            let dg = tape.sub(ga, gb)?;
            let dg = tape.abs(dg);
            let dg = tape.mean_all(dg);
            let term = tape.add(di, dg)?;
            let term = tape.scale(term, self.weights[l]);
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one level"))
    }
}

/// One-off convenience wrapper around [`PerceptualProxy::distance`].
pub fn perceptual_proxy(tape: &mut Tape, a: Var, b: Var, weights: &[f64]) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("expected H×W×3 image, got {s:?}")));
    }
    PerceptualProxy::new(s[0], s[1], weights)?.distance(tape, a, b)
}
