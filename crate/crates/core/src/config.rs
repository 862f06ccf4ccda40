//! Flat `key=value` run configuration.
//!
//! Every key has a default in [`KEYS`]; setting any other key is an error.
//! An empty value means "unset", which commands that need a path reject with
//! a message naming the key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{LossConfig, DEFAULT_LEVEL_WEIGHTS};
use crate::renderer::RenderOptions;
use crate::teacher::{InconsistencyMode, InconsistencySpec, OracleScene, Teacher};
use crate::trainer::{AdamHyper, Dtype, FitConfig, StudentConfig};

/// `(key, default, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    ("threads", "1", "worker threads; 1 is the determinism reference"),
    ("out_dir", "", "output directory (fit, render, eval)"),
    ("checkpoint", "", "TPL1 checkpoint to load (render, mesh, eval)"),
    ("scene", "sphere", "sphere | blobs | box | vacuum"),
    ("scene.radius", "0.6", "sphere radius"),
    ("scene.density", "5", "peak density"),
    ("scene.sharpness", "0.015", "edge softness of sphere and box"),
    ("scene.width", "0.25", "blob standard deviation"),
    ("scene.half", "0.5", "box half extent"),
    ("scene.stripes", "12", "box stripe frequency"),
    ("teacher.inconsistency", "jitter", "none | jitter | warp"),
    ("teacher.epsilon", "0", "inconsistency amplitude"),
    ("teacher.seed", "0", "mixed into every per-view perturbation seed"),
    ("teacher.samples", "256", "uniform samples per teacher ray"),
    ("background", "1,1,1", "background colour"),
    ("student.channels", "32", "feature channels C"),
    ("student.coarse_res", "64", "coarse plane resolution"),
    ("student.factor", "4", "residual upsampling factor (2 or 4)"),
    ("student.style_dim", "16", "style code length"),
    ("student.hidden", "64", "decoder hidden width"),
    ("student.depth", "2", "decoder hidden layers"),
    ("student.aware3d", "false", "cross-plane refinement block"),
    ("student.demodulate", "true", "weight demodulation in modulated convolutions"),
    ("student.init_scale", "0.1", "half-width of initial coarse plane values"),
    ("fit.image_size", "128", "full frame side F"),
    ("fit.patch", "64", "patch side P"),
    ("fit.radius", "3", "orbit radius"),
    ("fit.fov_deg", "30", "vertical field of view"),
    ("fit.yaw_min", "-180", "degrees"),
    ("fit.yaw_max", "180", "degrees"),
    ("fit.pitch_min", "-45", "degrees"),
    ("fit.pitch_max", "45", "degrees"),
    ("fit.steps", "5000", "optimizer steps"),
    ("fit.batch", "4", "patches per step"),
    ("fit.lr", "0.0025", "student Adam step size"),
    ("fit.beta1", "0.9", "Adam first-moment decay"),
    ("fit.beta2", "0.999", "Adam second-moment decay"),
    ("fit.adam_eps", "1e-8", "Adam epsilon"),
    ("fit.disc_lr", "0.002", "discriminator Adam step size"),
    ("fit.coarse_samples", "48", "coarse samples per ray"),
    ("fit.fine_samples", "48", "importance samples per ray"),
    ("fit.disc_every", "2", "discriminator update period"),
    ("fit.disc_channels", "16,32,64", "discriminator conv widths"),
    ("fit.disc_hidden", "64", "discriminator dense width"),
    ("fit.stage_a_steps", "0", "coarse-only warm-up steps"),
    ("fit.stage_a_size", "32", "warm-up frame side"),
    ("fit.preview_every", "0", "preview PNG period; 0 = final only"),
    ("fit.checkpoint_every", "0", "checkpoint period; 0 = final only"),
    ("fit.checkpoint_dtype", "f64", "f32 | f64"),
    ("loss.imitation", "true", "perceptual imitation term"),
    ("loss.adv3d", "false", "patch adversarial term"),
    ("loss.w_imitation", "1", "imitation weight"),
    ("loss.w_adv", "1", "adversarial weight"),
    ("loss.lambda_r1", "1", "R1 penalty weight"),
    ("loss.level_weights", "", "perceptual pyramid weights; empty = built-in"),
    ("render.views", "1", "frames on a yaw orbit; 1 = single frame"),
    ("render.size", "128", "frame side"),
    ("render.yaw", "0", "yaw of the first frame, degrees"),
    ("render.pitch", "0", "degrees"),
    ("render.radius", "3", "camera distance"),
    ("render.fov_deg", "30", "vertical field of view"),
    ("render.format", "png", "png | pfm"),
    ("render.coarse_samples", "48", "coarse samples per ray"),
    ("render.fine_samples", "48", "importance samples per ray"),
    ("mesh.grid", "128", "density grid side G"),
    ("mesh.iso", "2.5", "density iso-level"),
    ("mesh.out", "", "OBJ output path"),
    ("eval.views", "60", "views on the yaw sweep"),
    ("eval.yaw_range", "35", "sweep half range, degrees"),
    ("eval.pitch", "0", "sweep pitch, degrees"),
    ("eval.size", "64", "frame side; the sweep uses fit.radius and fit.fov_deg"),
    ("eval.subject", "student", "student | teacher"),
    ("eval.strip_row", "0.5", "strip line height as a fraction of the frame"),
    ("eval.strip_samples", "64", "samples along the strip line"),
    ("gradcheck.configs", "20", "random configurations per op"),
    ("gradcheck.tolerance", "1e-4", "max relative error"),
    ("gradcheck.inject_sign_flip", "false", "negate analytic gradients (checker self-test)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|&(k, v, _)| (k, v.to_string())).collect() }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("key `{key}`: cannot parse `{value}` as {what}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = KEYS
            .iter()
            .find(|(k, ..)| *k == key)
            .map(|(k, ..)| *k)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    /// Applies a file's worth of assignments; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.merge_text(&text)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("`{key}` is not a config key"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| bad(key, v, std::any::type_name::<T>()))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(bad(key, v, "bool")),
        }
    }

    pub fn get_list(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|s| s.trim().parse().map_err(|_| bad(key, v, "comma-separated numbers"))).collect()
    }

    fn get_triple(&self, key: &str) -> Result<[f64; 3]> {
        let l = self.get_list(key)?;
        l.try_into().map_err(|_| bad(key, self.raw(key), "three comma-separated numbers"))
    }

    /// A path that must be set.
    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        match self.raw(key) {
            "" => Err(Error::Config(format!("missing required key `{key}`"))),
            v => Ok(PathBuf::from(v)),
        }
    }

    /// All keys in table order, one `key=value` per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, _, doc) in KEYS {
            let _ = writeln!(s, "{k}={}  # {doc}", self.values[k]);
        }
        s
    }

    pub fn scene(&self) -> Result<OracleScene> {
        let f = |k| self.get::<f64>(k);
        Ok(match self.raw("scene") {
            "sphere" => OracleScene::Sphere { radius: f("scene.radius")?, density: f("scene.density")?, sharpness: f("scene.sharpness")? },
            "blobs" => OracleScene::Blobs { density: f("scene.density")?, width: f("scene.width")? },
            "box" => OracleScene::StripedBox {
                half: f("scene.half")?,
                density: f("scene.density")?,
                sharpness: f("scene.sharpness")?,
                stripes: f("scene.stripes")?,
            },
            "vacuum" => OracleScene::Vacuum,
            v => return Err(bad("scene", v, "sphere|blobs|box|vacuum")),
        })
    }

    pub fn teacher(&self) -> Result<Teacher> {
        let mode = match self.raw("teacher.inconsistency") {
            "none" => InconsistencyMode::None,
            "jitter" => InconsistencyMode::TextureJitter,
            "warp" => InconsistencyMode::Warp,
            v => return Err(bad("teacher.inconsistency", v, "none|jitter|warp")),
        };
        let amplitude: f64 = self.get("teacher.epsilon")?;
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(bad("teacher.epsilon", self.raw("teacher.epsilon"), "a finite amplitude >= 0"));
        }
        let inc = InconsistencySpec { mode, amplitude, seed: self.get("teacher.seed")? };
        let mut t = Teacher::new(self.scene()?, inc);
        t.background = self.get_triple("background")?;
        t.samples = self.get("teacher.samples")?;
        if t.samples == 0 {
            return Err(bad("teacher.samples", "0", "a positive count"));
        }
        Ok(t)
    }

    pub fn student(&self) -> Result<StudentConfig> {
        Ok(StudentConfig {
            channels: self.get("student.channels")?,
            coarse_res: self.get("student.coarse_res")?,
            factor: self.get("student.factor")?,
            style_dim: self.get("student.style_dim")?,
            hidden: self.get("student.hidden")?,
            depth: self.get("student.depth")?,
            aware3d: self.get_bool("student.aware3d")?,
            demodulate: self.get_bool("student.demodulate")?,
            init_scale: self.get("student.init_scale")?,
        })
    }

    pub fn loss(&self) -> Result<LossConfig> {
        let mut level_weights = self.get_list("loss.level_weights")?;
        if level_weights.is_empty() {
            level_weights = DEFAULT_LEVEL_WEIGHTS.to_vec();
        }
        let cfg = LossConfig {
            lambda_r1: self.get("loss.lambda_r1")?,
            level_weights,
            imitation: self.get_bool("loss.imitation")?,
            adv3d: self.get_bool("loss.adv3d")?,
            w_imitation: self.get("loss.w_imitation")?,
            w_adv: self.get("loss.w_adv")?,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Fit settings; `out_dir` is left unset for the caller to fill.
    pub fn fit(&self) -> Result<FitConfig> {
        let adam = |lr: &str| -> Result<AdamHyper> {
            Ok(AdamHyper { lr: self.get(lr)?, beta1: self.get("fit.beta1")?, beta2: self.get("fit.beta2")?, eps: self.get("fit.adam_eps")? })
        };
        let dc = self.get_list("fit.disc_channels")?;
        let disc_channels: [usize; 3] = match dc.as_slice() {
            [a, b, c] if dc.iter().all(|v| v.fract() == 0.0 && *v >= 1.0) => [*a as usize, *b as usize, *c as usize],
            _ => return Err(bad("fit.disc_channels", self.raw("fit.disc_channels"), "three positive integers")),
        };
        let cfg = FitConfig {
            image_size: self.get("fit.image_size")?,
            patch: self.get("fit.patch")?,
            radius: self.get("fit.radius")?,
            fov_deg: self.get("fit.fov_deg")?,
            yaw: [self.get("fit.yaw_min")?, self.get("fit.yaw_max")?],
            pitch: [self.get("fit.pitch_min")?, self.get("fit.pitch_max")?],
            steps: self.get("fit.steps")?,
            batch: self.get("fit.batch")?,
            adam: adam("fit.lr")?,
            adam_disc: adam("fit.disc_lr")?,
            seed: self.get("seed")?,
            loss: self.loss()?,
            coarse_samples: self.get("fit.coarse_samples")?,
            fine_samples: self.get("fit.fine_samples")?,
            background: self.get_triple("background")?,
            disc_every: self.get("fit.disc_every")?,
            disc_channels,
            disc_hidden: self.get("fit.disc_hidden")?,
            stage_a_steps: self.get("fit.stage_a_steps")?,
            stage_a_size: self.get("fit.stage_a_size")?,
            out_dir: None,
            preview_every: self.get("fit.preview_every")?,
            checkpoint_every: self.get("fit.checkpoint_every")?,
            checkpoint_dtype: self.get::<Dtype>("fit.checkpoint_dtype")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn render_options(&self, prefix: &str) -> Result<RenderOptions> {
        let c = self.get(&format!("{prefix}.coarse_samples"))?;
        let f = self.get(&format!("{prefix}.fine_samples"))?;
        if c == 0 {
            return Err(Error::Config(format!("key `{prefix}.coarse_samples` must be >= 1")));
        }
        Ok(RenderOptions { background: self.get_triple("background")?, ..RenderOptions::hierarchical(c, f) })
    }
}
