//! Fitting a student field to teacher images.
//!
//! Each step renders random patches of the student on the tape, compares
//! them with the detached teacher crops through the perceptual proxy and,
//! when enabled, a patch discriminator, then takes one Adam step. The
//! discriminator trains on detached student patches against consistent
//! oracle renders from independent views.

mod adam;
pub mod checkpoint;
mod student;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Dtype};
pub use student::{ResolvedField, StudentConfig, StudentField, StudentPlanes, StudentVars};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evalkit::{mse, psnr_from_mse};
use crate::image::Image;
use crate::losses::{disc_loss, nonsat_gen_loss, r1_penalty, total_loss, DiscVars, Discriminator, LossConfig, LossTerms, PatchDiscriminatorParams, PerceptualProxy};
use crate::params::bind;
use crate::renderer::{plan_samples, render_image, render_plan, CameraPose, PatchSpec, RenderOptions};
use crate::teacher::{InconsistencySpec, Teacher};

pub const METRICS_HEADER: &str = "step,loss_total,loss_imit,loss_adv,loss_r1,psnr_preview,wallclock_s";

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    /// Full frame side `F`.
    pub image_size: usize,
    /// Patch side `P`.
    pub patch: usize,
    pub radius: f64,
    pub fov_deg: f64,
    /// Yaw range in degrees.
    pub yaw: [f64; 2],
    /// Pitch range in degrees.
    pub pitch: [f64; 2],
    pub steps: usize,
    /// Patches per step.
    pub batch: usize,
    pub adam: AdamHyper,
    pub adam_disc: AdamHyper,
    pub seed: u64,
    pub loss: LossConfig,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub background: [f64; 3],
    /// Discriminator update every `disc_every` steps (when adversarial).
    pub disc_every: usize,
    pub disc_channels: [usize; 3],
    pub disc_hidden: usize,
    /// Coarse-only warm-up steps on full low-resolution frames.
    pub stage_a_steps: usize,
    pub stage_a_size: usize,
    /// Output directory for metrics, previews and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// 0 disables periodic previews.
    pub preview_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub checkpoint_dtype: Dtype,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            patch: 64,
            radius: 3.0,
            fov_deg: 30.0,
            yaw: [-180.0, 180.0],
            pitch: [-45.0, 45.0],
            steps: 5000,
            batch: 4,
            adam: AdamHyper::new(2.5e-3),
            adam_disc: AdamHyper::new(2e-3),
            seed: 0,
            loss: LossConfig::default(),
            coarse_samples: 48,
            fine_samples: 48,
            background: [1.0; 3],
            disc_every: 2,
            disc_channels: [16, 32, 64],
            disc_hidden: 64,
            stage_a_steps: 0,
            stage_a_size: 32,
            out_dir: None,
            preview_every: 0,
            checkpoint_every: 0,
            checkpoint_dtype: Dtype::F64,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.patch > self.image_size {
            return bad(format!("patch size {} must be in 1..={}", self.patch, self.image_size));
        }
        if self.batch == 0 || self.disc_every == 0 {
            return bad("batch and disc_every must be >= 1".into());
        }
        if !(self.radius > 3f64.sqrt()) {
            return bad(format!("orbit radius {} must place the camera outside the unit cube", self.radius));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad(format!("fov {} must be in (0, 180)", self.fov_deg));
        }
        if !(self.yaw[0] <= self.yaw[1]) || !(self.pitch[0] <= self.pitch[1]) || self.pitch[0] < -89.0 || self.pitch[1] > 89.0 {
            return bad(format!("bad view ranges yaw {:?} pitch {:?} (pitch within ±89)", self.yaw, self.pitch));
        }
        if self.coarse_samples == 0 {
            return bad("at least one coarse sample per ray is required".into());
        }
        if self.stage_a_steps > 0 && self.stage_a_size == 0 {
            return bad("stage_a_size must be >= 1".into());
        }
        if self.loss.adv3d && self.patch < 8 {
            return bad("the patch discriminator needs patches of at least 8 pixels".into());
        }
        self.adam.validate()?;
        self.adam_disc.validate()?;
        self.loss.validate()
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions { background: self.background, ..RenderOptions::hierarchical(self.coarse_samples, self.fine_samples) }
    }

    /// Fixed off-axis view used for previews.
    pub fn preview_pose(&self) -> CameraPose {
        let yaw = 0.5 * (self.yaw[0] + self.yaw[1]) + 0.3 * (self.yaw[1] - self.yaw[0]).min(90.0);
        let pitch = 0.5 * (self.pitch[0] + self.pitch[1]) + 0.25 * (self.pitch[1] - self.pitch[0]);
        CameraPose::orbit(yaw.to_radians(), pitch.to_radians(), self.radius, self.fov_deg, self.image_size)
    }
}

/// Camera on the orbit sphere with yaw and pitch uniform in the configured
/// ranges, looking at the origin.
pub fn sample_view(cfg: &FitConfig, rng: &mut impl Rng) -> CameraPose {
    let pick = |r: [f64; 2], rng: &mut dyn rand::RngCore| if r[0] == r[1] { r[0] } else { rng.gen_range(r[0]..r[1]) };
    let yaw = pick(cfg.yaw, rng);
    let pitch = pick(cfg.pitch, rng);
    CameraPose::orbit(yaw.to_radians(), pitch.to_radians(), cfg.radius, cfg.fov_deg, cfg.image_size)
}

/// Square patch whose centre is uniform over the frame, shifted to stay
/// inside it.
pub fn sample_patch(full: usize, side: usize, rng: &mut impl Rng) -> Result<PatchSpec> {
    if side == 0 || side > full {
        return Err(Error::invalid(format!("patch {side} does not fit frame {full}")));
    }
    let origin = |c: usize| c.saturating_sub(side / 2).min(full - side);
    let (cu, cv) = (rng.gen_range(0..full), rng.gen_range(0..full));
    PatchSpec::square(origin(cu), origin(cv), side, full)
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_imit: f64,
    pub loss_adv: f64,
    pub loss_r1: f64,
    pub psnr_preview: f64,
    pub wallclock_s: f64,
}

impl MetricsRow {
    /// CSV line with shortest round-trip float formatting.
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss_total, self.loss_imit, self.loss_adv, self.loss_r1, self.psnr_preview, self.wallclock_s
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub student: StudentField,
    pub metrics: Vec<MetricsRow>,
    pub discriminator: Option<PatchDiscriminatorParams>,
}

fn check_finite(v: f64, step: usize, term: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, term: term.into() })
    }
}

struct Outputs {
    dir: PathBuf,
    csv: std::io::BufWriter<std::fs::File>,
}

impl Outputs {
    fn open(dir: &PathBuf) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut csv = std::io::BufWriter::new(file);
        writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self { dir: dir.clone(), csv })
    }

    fn row(&mut self, r: &MetricsRow) -> Result<()> {
        let path = self.dir.join("metrics.csv");
        writeln!(self.csv, "{}", r.csv()).and_then(|_| self.csv.flush()).map_err(|e| Error::io(path, e))
    }
}

/// Per-step rendering and loss state shared by both stages.
struct Step {
    tape: Tape,
    leaves: Vec<Var>,
    vars: StudentVars,
    planes: StudentPlanes,
    resolved: ResolvedField,
}

impl Step {
    fn new(student: &StudentField, use_residual: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let (vars, leaves) = bind(student, &mut tape, true);
        let mut planes = student.planes(&mut tape, &vars)?;
        planes.use_residual = use_residual;
        let resolved = ResolvedField::from_planes(&tape, &planes, student.decoder.clone());
        Ok(Self { tape, leaves, vars, planes, resolved })
    }

    fn render(&mut self, cam: &CameraPose, patch: &PatchSpec, opts: &RenderOptions, seed: u64) -> Result<Var> {
        let plan = plan_samples(&self.resolved, cam, patch, opts, seed)?;
        let (vars, planes) = (&self.vars, &self.planes);
        render_plan(&mut self.tape, &plan, |t, pts| StudentField::eval(t, vars, planes, pts))
    }

    fn grads(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        let g = self.tape.backward(root)?;
        Ok(self.leaves.iter().map(|v| g.get(*v).cloned()).collect())
    }
}

fn image_var(tape: &mut Tape, img: &Image) -> Var {
    tape.constant(img.to_tensor())
}

fn mean_of(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for x in &xs[1..] {
        acc = tape.add(acc, *x)?;
    }
    Ok(tape.scale(acc, 1.0 / xs.len() as f64))
}

/// Fits `student` to `teacher`. Returns the fitted student and one metrics
/// row per step; with `out_dir` set, also streams `metrics.csv` and writes
/// previews and checkpoints there.
pub fn fit_imitation(teacher: &Teacher, student: StudentField, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    student.validate()?;
    let start = Instant::now();
    let mut student = student;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut disc_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    disc_rng.set_stream(1);
    let real_teacher = Teacher { inconsistency: InconsistencySpec::none(), ..teacher.clone() };
    let opts = cfg.render_options();
    let proxy = PerceptualProxy::new(cfg.patch, cfg.patch, &cfg.loss.level_weights)?;
    let mut disc = cfg.loss.adv3d.then(|| PatchDiscriminatorParams::init(cfg.patch, cfg.disc_channels, cfg.disc_hidden, &mut disc_rng));
    let mut opt = AdamState::new();
    let mut opt_disc = AdamState::new();
    let mut out = cfg.out_dir.as_ref().map(Outputs::open).transpose()?;
    let mut rows = Vec::with_capacity(cfg.stage_a_steps + cfg.steps);
    let total_steps = cfg.stage_a_steps + cfg.steps;

    for step in 0..total_steps {
        let row = if step < cfg.stage_a_steps {
            stage_a_step(teacher, &mut student, cfg, &opts, &mut rng, &mut opt, step)?
        } else {
            let (row, fakes) = stage_b_step(teacher, &mut student, cfg, &opts, &proxy, disc.as_ref(), &mut rng, &mut opt, step)?;
            let mut row = row;
            if let Some(d) = disc.as_mut() {
                if (step - cfg.stage_a_steps).is_multiple_of(cfg.disc_every) {
                    row.loss_r1 = disc_step(&real_teacher, d, &fakes, cfg, &mut disc_rng, &mut opt_disc, step)?;
                }
            }
            row
        };
        let row = MetricsRow { wallclock_s: start.elapsed().as_secs_f64(), ..row };
        if let Some(o) = out.as_mut() {
            o.row(&row)?;
            let done = step + 1;
            if cfg.preview_every > 0 && done % cfg.preview_every == 0 {
                write_preview(&student, cfg, &o.dir.join(format!("preview_{done:06}.png")))?;
            }
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total_steps {
                write_checkpoint(&o.dir.join("checkpoint.tpl"), &student, cfg.checkpoint_dtype)?;
            }
        }
        rows.push(row);
    }
    if let Some(o) = out.as_ref() {
        write_checkpoint(&o.dir.join("checkpoint.tpl"), &student, cfg.checkpoint_dtype)?;
        write_preview(&student, cfg, &o.dir.join("preview_final.png"))?;
    }
    Ok(FitResult { student, metrics: rows, discriminator: disc })
}

fn write_preview(student: &StudentField, cfg: &FitConfig, path: &std::path::Path) -> Result<()> {
    let img = render_image(&student.resolve()?, &cfg.preview_pose(), &cfg.render_options(), cfg.seed)?;
    crate::io::write_png(path, &img)
}

fn apply_grads(student: &mut StudentField, grads: &[Option<Tensor>], opt: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    let refs: Vec<Option<&Tensor>> = grads.iter().map(|g| g.as_ref()).collect();
    adam_step(student, &refs, opt, hyper)
}

/// Coarse-only fit on full low-resolution frames.
fn stage_a_step(
    teacher: &Teacher,
    student: &mut StudentField,
    cfg: &FitConfig,
    opts: &RenderOptions,
    rng: &mut ChaCha8Rng,
    opt: &mut AdamState,
    step: usize,
) -> Result<MetricsRow> {
    let small = FitConfig { image_size: cfg.stage_a_size, ..cfg.clone() };
    let cam = sample_view(&small, rng);
    let seed: u64 = rng.gen();
    let target = teacher.image(&cam)?;
    let proxy = PerceptualProxy::new(cfg.stage_a_size, cfg.stage_a_size, &cfg.loss.level_weights)?;
    let mut s = Step::new(student, false)?;
    let img = s.render(&cam, &PatchSpec::full(cfg.stage_a_size), opts, seed)?;
    let t = image_var(&mut s.tape, &target);
    let loss = proxy.distance(&mut s.tape, img, t)?;
    let lv = s.tape.value(loss).item();
    check_finite(lv, step, "imitation")?;
    let psnr = psnr_from_mse(mse(&Image::from_tensor(s.tape.value(img))?, &target)?);
    let grads = s.grads(loss)?;
    apply_grads(student, &grads, opt, &cfg.adam)?;
    Ok(MetricsRow { step, loss_total: lv, loss_imit: lv, loss_adv: 0.0, loss_r1: 0.0, psnr_preview: psnr, wallclock_s: 0.0 })
}

#[allow(clippy::too_many_arguments)]
fn stage_b_step(
    teacher: &Teacher,
    student: &mut StudentField,
    cfg: &FitConfig,
    opts: &RenderOptions,
    proxy: &PerceptualProxy,
    disc: Option<&PatchDiscriminatorParams>,
    rng: &mut ChaCha8Rng,
    opt: &mut AdamState,
    step: usize,
) -> Result<(MetricsRow, Vec<Tensor>)> {
    let mut s = Step::new(student, true)?;
    let dvars: Option<(Discriminator, DiscVars)> = disc.map(|d| (Discriminator::new(d), bind(d, &mut s.tape, false).0));
    let (mut imits, mut advs, mut fakes) = (Vec::new(), Vec::new(), Vec::new());
    let mut sq_err = 0.0;
    for _ in 0..cfg.batch {
        let cam = sample_view(cfg, rng);
        let patch = sample_patch(cfg.image_size, cfg.patch, rng)?;
        let seed: u64 = rng.gen();
        let target = teacher.patch(&cam, &patch)?;
        let img = s.render(&cam, &patch, opts, seed)?;
        let rendered = s.tape.value(img).clone();
        sq_err += mse(&Image::from_tensor(&rendered)?, &target)?;
        if cfg.loss.imitation {
            let t = image_var(&mut s.tape, &target);
            imits.push(proxy.distance(&mut s.tape, img, t)?);
        }
        if let Some((d, dv)) = &dvars {
            let score = d.score(&mut s.tape, dv, img)?;
            advs.push(nonsat_gen_loss(&mut s.tape, score));
        }
        fakes.push(rendered);
    }
    let imitation = if imits.is_empty() { None } else { Some(mean_of(&mut s.tape, &imits)?) };
    let adv = if advs.is_empty() { None } else { Some(mean_of(&mut s.tape, &advs)?) };
    let li = imitation.map_or(0.0, |v| s.tape.value(v).item());
    let la = adv.map_or(0.0, |v| s.tape.value(v).item());
    check_finite(li, step, "imitation")?;
    check_finite(la, step, "adversarial")?;
    let total = total_loss(&mut s.tape, &LossTerms { imitation, adv }, &cfg.loss)?;
    let lt = s.tape.value(total).item();
    check_finite(lt, step, "total")?;
    let grads = s.grads(total)?;
    apply_grads(student, &grads, opt, &cfg.adam)?;
    let psnr = psnr_from_mse(sq_err / cfg.batch as f64);
    let row = MetricsRow { step, loss_total: lt, loss_imit: li, loss_adv: la, loss_r1: 0.0, psnr_preview: psnr, wallclock_s: 0.0 };
    Ok((row, fakes))
}

/// One discriminator update; returns the R1 value.
fn disc_step(
    real_teacher: &Teacher,
    params: &mut PatchDiscriminatorParams,
    fakes: &[Tensor],
    cfg: &FitConfig,
    rng: &mut ChaCha8Rng,
    opt: &mut AdamState,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (dv, leaves) = bind(&*params, &mut tape, true);
    let d = Discriminator::new(params);
    let mut terms = Vec::with_capacity(fakes.len());
    let mut r1s = Vec::with_capacity(fakes.len());
    for fake in fakes {
        let cam = sample_view(cfg, rng);
        let patch = sample_patch(cfg.image_size, cfg.patch, rng)?;
        let real_img = real_teacher.patch(&cam, &patch)?;
        let real = tape.leaf(real_img.to_tensor(), true);
        let f = tape.constant(fake.clone());
        let sf = d.score(&mut tape, &dv, f)?;
        let sr = d.score(&mut tape, &dv, real)?;
        terms.push(disc_loss(&mut tape, sf, sr)?);
        r1s.push(r1_penalty(&mut tape, sr, real, cfg.loss.lambda_r1)?);
    }
    let dl = mean_of(&mut tape, &terms)?;
    let r1 = mean_of(&mut tape, &r1s)?;
    let (dlv, r1v) = (tape.value(dl).item(), tape.value(r1).item());
    check_finite(dlv, step, "discriminator")?;
    check_finite(r1v, step, "r1")?;
    let total = tape.add(dl, r1)?;
    let g = tape.backward(total)?;
    let grads: Vec<Option<&Tensor>> = leaves.iter().map(|v| g.get(*v)).collect();
    adam_step(params, &grads, opt, &cfg.adam_disc)?;
    Ok(r1v)
}

#[cfg(test)]
mod tests;
