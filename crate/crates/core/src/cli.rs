//! Command-line front end. [`run`] returns the process exit code.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{consistency_score, density_grid, marching_cubes, psnr, spatiotemporal_texture, ssim, CameraPath};
use crate::gradcheck::{format_table, run_suite, SuiteOptions};
use crate::image::Image;
use crate::io;
use crate::renderer::{render_image, CameraPose};
use crate::trainer::{fit_imitation, read_checkpoint, ResolvedField, StudentField};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "triplane-mimic", version, about = "Fit, render, mesh and evaluate tri-plane neural fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a student field to teacher images.
    Fit(Common),
    /// Render a checkpoint along a yaw orbit.
    Render(Common),
    /// Extract a density iso-surface as OBJ.
    Mesh(Common),
    /// Consistency and fidelity report along a yaw sweep.
    Eval(Common),
    /// Finite-difference gradient suite.
    Gradcheck(Common),
    /// Print every config key with its effective value.
    PrintConfig(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
    /// `key=value` overrides, applied after the config file.
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.merge_file(p)?;
        }
        for o in &self.overrides {
            cfg.assign(o)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(t) = self.threads {
            cfg.set("threads", &t.to_string())?;
        }
        Ok(cfg)
    }
}

/// Why a command did not succeed.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Error(#[from] Error),
    #[error("{0}")]
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Error(Error::Config(_) | Error::Checkpoint(_)) => EXIT_USAGE,
            _ => EXIT_CHECK,
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

fn dispatch(cmd: &Command) -> std::result::Result<(), Failure> {
    let common = match cmd {
        Command::Fit(c) | Command::Render(c) | Command::Mesh(c) | Command::Eval(c) | Command::Gradcheck(c) | Command::PrintConfig(c) => c,
    };
    let cfg = common.resolve()?;
    if common.print_config || matches!(cmd, Command::PrintConfig(_)) {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let threads: usize = cfg.get("threads")?;
    if threads == 0 {
        return Err(Error::Config("key `threads` must be >= 1".into()).into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cmd {
        Command::Fit(_) => cmd_fit(&cfg),
        Command::Render(_) => cmd_render(&cfg),
        Command::Mesh(_) => cmd_mesh(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg),
        Command::PrintConfig(_) => unreachable!(),
    })
}

/// Seed stream for student initialisation, apart from the fit's own streams.
const INIT_STREAM: u64 = 7;

/// Fresh student for `cfg`, seeded from `seed`.
pub fn init_student(cfg: &RunConfig) -> Result<StudentField> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.get("seed")?);
    rng.set_stream(INIT_STREAM);
    StudentField::init(&cfg.student()?, &mut rng)
}

pub fn cmd_fit(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let out = cfg.require_path("out_dir")?;
    let teacher = cfg.teacher()?;
    let mut fit = cfg.fit()?;
    fit.out_dir = Some(out.clone());
    let student = init_student(cfg)?;
    let res = fit_imitation(&teacher, student, &fit)?;
    if let Some(last) = res.metrics.last() {
        println!("step {} loss_total {:.6} psnr_preview {:.3}", last.step, last.loss_total, last.psnr_preview);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn load_student(cfg: &RunConfig) -> Result<ResolvedField> {
    let path = cfg.require_path("checkpoint")?;
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint `{}` does not exist", path.display())));
    }
    let (student, _) = read_checkpoint(&path)?;
    student.resolve()
}

/// File stem width: at least three digits.
fn index_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(3)
}

pub fn cmd_render(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let out = cfg.require_path("out_dir")?;
    let field = load_student(cfg)?;
    let views: usize = cfg.get("render.views")?;
    let size: usize = cfg.get("render.size")?;
    if views == 0 || size == 0 {
        return Err(Error::Config("render.views and render.size must be >= 1".into()).into());
    }
    let ext = match cfg.raw("render.format") {
        f @ ("png" | "pfm") => f,
        f => return Err(Error::Config(format!("key `render.format`: expected png or pfm, got `{f}`")).into()),
    };
    let (yaw0, pitch): (f64, f64) = (cfg.get("render.yaw")?, cfg.get("render.pitch")?);
    let (radius, fov): (f64, f64) = (cfg.get("render.radius")?, cfg.get("render.fov_deg")?);
    let opts = cfg.render_options("render")?;
    let seed: u64 = cfg.get("seed")?;
    let w = index_width(views);
    for i in 0..views {
        let yaw = yaw0 + 360.0 * i as f64 / views as f64;
        let cam = CameraPose::orbit(yaw.to_radians(), pitch.to_radians(), radius, fov, size);
        cam.validate().map_err(|e| Error::Config(e.to_string()))?;
        let img = render_image(&field, &cam, &opts, seed)?;
        let path = out.join(format!("frame_{i:0w$}.{ext}"));
        if ext == "png" {
            io::write_png(&path, &img)?;
        } else {
            io::write_image_pfm(&path, &img)?;
        }
    }
    println!("wrote {views} frame(s) to {}", out.display());
    Ok(())
}

pub fn cmd_mesh(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let g: usize = cfg.get("mesh.grid")?;
    if g < 2 {
        return Err(Error::Config(format!("key `mesh.grid` must be >= 2, got {g}")).into());
    }
    let iso: f64 = cfg.get("mesh.iso")?;
    if !iso.is_finite() {
        return Err(Error::Config("key `mesh.iso` must be finite".into()).into());
    }
    let out = cfg.require_path("mesh.out")?;
    let field = load_student(cfg)?;
    let grid = density_grid(&field, g)?;
    let mesh = marching_cubes(&grid, iso)?;
    if mesh.is_empty() {
        eprintln!("warning: no density crosses iso {iso}; writing an empty mesh");
    }
    io::write_obj(&out, &mesh.vertices, &mesh.triangles)?;
    println!("{} vertices, {} triangles -> {}", mesh.vertices.len(), mesh.triangles.len(), out.display());
    Ok(())
}

/// Per-view scores and the two strip consistencies of an eval run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub yaw_deg: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub consistency_subject: f64,
    pub consistency_teacher: f64,
}

impl EvalReport {
    pub fn ratio(&self) -> f64 {
        self.consistency_subject / self.consistency_teacher
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("view,yaw_deg,psnr,ssim,consistency_subject,consistency_teacher,consistency_ratio\n");
        for i in 0..self.labels.len() {
            let _ = writeln!(s, "{},{},{},{},,,", self.labels[i], self.yaw_deg[i], self.psnr[i], self.ssim[i]);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let _ = writeln!(
            s,
            "mean,,{},{},{},{},{}",
            mean(&self.psnr),
            mean(&self.ssim),
            self.consistency_subject,
            self.consistency_teacher,
            self.ratio()
        );
        s
    }
}

/// Renders the eval sweep for `subject` (a student, or the teacher itself
/// when `None`) and scores it against the clean oracle.
pub fn evaluate(cfg: &RunConfig, subject: Option<&ResolvedField>) -> Result<(EvalReport, Image, Image)> {
    let teacher = cfg.teacher()?;
    let views: usize = cfg.get("eval.views")?;
    let half: f64 = cfg.get("eval.yaw_range")?;
    let size: usize = cfg.get("eval.size")?;
    let path = CameraPath::yaw_sweep(views, half, cfg.get("eval.pitch")?, cfg.get("fit.radius")?, cfg.get("fit.fov_deg")?, size)
        .map_err(|e| Error::Config(e.to_string()))?;
    let opts = cfg.render_options("render")?;
    let seed: u64 = cfg.get("seed")?;
    let (mut subj, mut teach) = (Vec::new(), Vec::new());
    let mut report = EvalReport {
        labels: path.labels().to_vec(),
        yaw_deg: (0..views).map(|i| -half + 2.0 * half * i as f64 / (views - 1) as f64).collect(),
        psnr: Vec::new(),
        ssim: Vec::new(),
        consistency_subject: 0.0,
        consistency_teacher: 0.0,
    };
    for cam in path.poses() {
        let t = teacher.image(cam)?;
        let clean = teacher.oracle_render(cam)?.0;
        let s = match subject {
            Some(f) => render_image(f, cam, &opts, seed)?,
            None => t.clone(),
        };
        report.psnr.push(psnr(&s, &clean)?);
        report.ssim.push(ssim(&s, &clean)?);
        subj.push(s);
        teach.push(t);
    }
    let row: f64 = cfg.get("eval.strip_row")?;
    let samples: usize = cfg.get("eval.strip_samples")?;
    let y = row.clamp(0.0, 1.0) * (size - 1) as f64;
    let (p0, p1) = ([0.0, y], [(size - 1) as f64, y]);
    let strip_s = spatiotemporal_texture(&subj, p0, p1, samples)?;
    let strip_t = spatiotemporal_texture(&teach, p0, p1, samples)?;
    report.consistency_subject = consistency_score(&strip_s)?;
    report.consistency_teacher = consistency_score(&strip_t)?;
    Ok((report, strip_s, strip_t))
}

pub fn cmd_eval(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let out = cfg.require_path("out_dir")?;
    let field = match cfg.raw("eval.subject") {
        "student" => Some(load_student(cfg)?),
        "teacher" => None,
        v => return Err(Error::Config(format!("key `eval.subject`: expected student or teacher, got `{v}`")).into()),
    };
    let (report, strip_s, strip_t) = evaluate(cfg, field.as_ref())?;
    write_text(&out.join("eval.csv"), &report.csv())?;
    io::write_png(out.join("strip_subject.png"), &strip_s)?;
    io::write_png(out.join("strip_teacher.png"), &strip_t)?;
    println!(
        "consistency subject {:.6e} teacher {:.6e} ratio {:.4}",
        report.consistency_subject,
        report.consistency_teacher,
        report.ratio()
    );
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> std::result::Result<(), Failure> {
    let opts = SuiteOptions {
        seed: cfg.get("seed")?,
        configs: cfg.get("gradcheck.configs")?,
        tolerance: cfg.get("gradcheck.tolerance")?,
        inject_sign_flip: cfg.get_bool("gradcheck.inject_sign_flip")?,
    };
    if opts.configs == 0 {
        return Err(Error::Config("key `gradcheck.configs` must be >= 1".into()).into());
    }
    let reports = run_suite(&opts)?;
    print!("{}", format_table(&reports));
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} ops exceed rel err {:e}", reports.len(), opts.tolerance)));
    }
    println!("all {} ops within {:e}", reports.len(), opts.tolerance);
    Ok(())
}
