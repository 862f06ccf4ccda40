use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::aware3d::{aware3d_block, aware3d_block_values, Aware3dParams, ModConvVars};
use crate::decoder::{decode, DecoderParams, LinearVars};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::renderer::Field;
use crate::triplane::{sample_triplane, super_resolve_3d, super_resolve_3d_values, StyleCode, SuperRes3d, TriPlane, TriPlaneVars};

/// Architecture of a freshly initialised [`StudentField`].
#[derive(Clone, Debug, PartialEq)]
pub struct StudentConfig {
    pub channels: usize,
    pub coarse_res: usize,
    /// Residual upsampling factor `k`.
    pub factor: usize,
    pub style_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub aware3d: bool,
    pub demodulate: bool,
    /// Uniform half-width of the initial coarse plane values.
    pub init_scale: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            coarse_res: 64,
            factor: 4,
            style_dim: 16,
            hidden: 64,
            depth: 2,
            aware3d: false,
            demodulate: true,
            init_scale: 0.1,
        }
    }
}

/// The optimised 3D branch: coarse planes, super-resolution, optional
/// 3D-aware refinement, decoder and style code.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentField {
    pub coarse: TriPlane,
    pub sr: SuperRes3d,
    pub aware: Option<Aware3dParams>,
    pub decoder: DecoderParams,
    pub w: StyleCode,
}

#[derive(Clone, Debug)]
pub struct StudentVars {
    pub coarse: TriPlaneVars,
    pub sr: Vec<[ModConvVars; 3]>,
    pub aware: Option<[ModConvVars; 3]>,
    pub decoder: Vec<LinearVars>,
    pub w: Var,
}

/// Both feature planes of a student as they enter sampling.
#[derive(Clone, Copy, Debug)]
pub struct StudentPlanes {
    pub refined: TriPlaneVars,
    pub residual: TriPlaneVars,
    /// Whether the residual contributes (off while fitting coarse planes only).
    pub use_residual: bool,
}

impl StudentField {
    pub fn init(cfg: &StudentConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.channels == 0 || cfg.coarse_res == 0 || cfg.style_dim == 0 || cfg.hidden == 0 {
            return Err(Error::Config("student channels, resolution, style_dim and hidden must be >= 1".into()));
        }
        let coarse = TriPlane::random(cfg.channels, cfg.coarse_res, cfg.init_scale, rng);
        let sr = SuperRes3d::init(cfg.channels, cfg.style_dim, cfg.factor, cfg.demodulate, rng)?;
        let aware = cfg.aware3d.then(|| Aware3dParams::init(cfg.channels, cfg.style_dim, rng));
        let decoder = DecoderParams::init(cfg.channels, cfg.hidden, cfg.depth, 3, rng);
        let w = StyleCode::init(cfg.style_dim, rng);
        let s = Self { coarse, sr, aware, decoder, w };
        s.validate()?;
        Ok(s)
    }

    /// Checks the cross-component invariants.
    pub fn validate(&self) -> Result<()> {
        let c = self.coarse.channels();
        let d_w = self.w.dim();
        let convs = self.sr.blocks.iter().flatten().chain(self.aware.iter().flat_map(|a| a.convs.iter()));
        for conv in convs {
            if conv.c_out() != c || conv.affine_w.shape() != [d_w, conv.c_in()] {
                return Err(Error::Shape(format!(
                    "convolution {:?} / affine {:?} do not fit {c} channels and style dim {d_w}",
                    conv.kernel.shape(),
                    conv.affine_w.shape()
                )));
            }
        }
        if self.sr.blocks.is_empty() {
            return Err(Error::invalid("super-resolution needs at least one block"));
        }
        if self.decoder.in_dim() != c || self.decoder.color_dim() != 3 {
            return Err(Error::Shape(format!(
                "decoder expects {} inputs and {} colours; planes have {c} channels",
                self.decoder.in_dim(),
                self.decoder.color_dim()
            )));
        }
        let mut finite = true;
        self.visit(&mut |t| finite &= t.is_finite());
        if !finite {
            return Err(Error::invalid("student parameters contain non-finite values"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.coarse.channels()
    }

    pub fn coarse_res(&self) -> usize {
        self.coarse.resolution()
    }

    pub fn residual_res(&self) -> usize {
        self.coarse.resolution() * self.sr.factor()
    }

    /// Refined coarse planes and the generated residual on `tape`.
    pub fn planes(&self, tape: &mut Tape, v: &StudentVars) -> Result<StudentPlanes> {
        let refined = match &v.aware {
            Some(p) => {
                let delta = aware3d_block(tape, &v.coarse, v.w, p)?;
                let mut out = v.coarse.0;
                for k in 0..3 {
                    out[k] = tape.add(v.coarse.0[k], delta.0[k])?;
                }
                TriPlaneVars(out)
            }
            None => v.coarse,
        };
        let residual = super_resolve_3d(tape, &refined, v.w, &v.sr)?;
        Ok(StudentPlanes { refined, residual, use_residual: true })
    }

    /// Colour `M × 3` and density `M` at `points` on the tape.
    pub fn eval(tape: &mut Tape, v: &StudentVars, planes: &StudentPlanes, points: &[[f64; 3]]) -> Result<(Var, Var)> {
        let mut f = sample_triplane(tape, &planes.refined, points)?;
        if planes.use_residual {
            let r = sample_triplane(tape, &planes.residual, points)?;
            f = crate::triplane::compose(tape, f, r)?;
        }
        decode(tape, &v.decoder, f)
    }

    /// Evaluates the plane generators once and returns a value-only field.
    pub fn resolve(&self) -> Result<ResolvedField> {
        let refined = match &self.aware {
            Some(p) => {
                let delta = aware3d_block_values(&self.coarse, &self.w.0, p)?;
                let planes: [Tensor; 3] =
                    std::array::from_fn(|k| self.coarse.planes()[k].zip_map(&delta.planes()[k], |a, b| a + b));
                TriPlane::new(planes)?
            }
            None => self.coarse.clone(),
        };
        let residual = super_resolve_3d_values(&refined, &self.w, &self.sr)?;
        Ok(ResolvedField { refined, residual: Some(residual), decoder: self.decoder.clone() })
    }
}

impl Parameters for StudentField {
    type Vars = StudentVars;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.coarse.visit(f);
        self.sr.visit(f);
        if let Some(a) = &self.aware {
            a.visit(f);
        }
        self.decoder.visit(f);
        self.w.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.coarse.visit_mut(f);
        self.sr.visit_mut(f);
        if let Some(a) = &mut self.aware {
            a.visit_mut(f);
        }
        self.decoder.visit_mut(f);
        self.w.visit_mut(f);
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> StudentVars {
        let coarse = self.coarse.bind_vars(next);
        let sr = self.sr.bind_vars(next);
        let aware = self.aware.as_ref().map(|a| a.bind_vars(next));
        let decoder = self.decoder.bind_vars(next);
        let w = self.w.bind_vars(next);
        StudentVars { coarse, sr, aware, decoder, w }
    }
}

/// A student with its plane generators already evaluated.
#[derive(Clone, Debug)]
pub struct ResolvedField {
    pub refined: TriPlane,
    pub residual: Option<TriPlane>,
    pub decoder: DecoderParams,
}

impl ResolvedField {
    pub fn from_planes(tape: &Tape, planes: &StudentPlanes, decoder: DecoderParams) -> Self {
        Self {
            refined: planes.refined.values(tape),
            residual: planes.use_residual.then(|| planes.residual.values(tape)),
            decoder,
        }
    }

    /// Composed features `N × C` at `points`.
    pub fn features(&self, points: &[[f64; 3]]) -> Tensor {
        let f = self.refined.sample(points);
        match &self.residual {
            Some(r) => f.zip_map(&r.sample(points), |a, b| a + b),
            None => f,
        }
    }
}

impl Field for ResolvedField {
    fn query(&self, points: &[[f64; 3]]) -> Result<(Tensor, Tensor)> {
        self.decoder.decode_values(&self.features(points))
    }
}
