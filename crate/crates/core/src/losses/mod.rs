//! Imitation, adversarial and R1 terms and their weighted total.
//!
//! Sign convention, with `f(u) = softplus(u) = log(1 + e^u)`:
//! the discriminator minimises `f(D(fake)) + f(−D(real)) + λ‖∇D(real)‖²`
//! and the generator minimises the non-saturating `f(−D(fake))`.

pub mod disc;
pub mod perceptual;

pub use disc::{im2col_stride2, DiscVars, Discriminator, PatchDiscriminatorParams};
pub use perceptual::{perceptual_proxy, PerceptualProxy, DEFAULT_LEVEL_WEIGHTS};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_r1: f64,
    pub level_weights: Vec<f64>,
    pub imitation: bool,
    pub adv3d: bool,
    pub w_imitation: f64,
    pub w_adv: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_r1: 1.0,
            level_weights: DEFAULT_LEVEL_WEIGHTS.to_vec(),
            imitation: true,
            adv3d: false,
            w_imitation: 1.0,
            w_adv: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_r1 >= 0.0) {
            return Err(Error::Config(format!("lambda_r1 must be >= 0, got {}", self.lambda_r1)));
        }
        if self.level_weights.is_empty() || self.level_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("level weights must be >= 0, got {:?}", self.level_weights)));
        }
        if !self.imitation && !self.adv3d {
            return Err(Error::Config("at least one of imitation / adv3d must be enabled".into()));
        }
        Ok(())
    }
}

/// Generator term `f(−D(fake))`.
pub fn nonsat_gen_loss(tape: &mut Tape, score_fake: Var) -> Var {
    let n = tape.neg(score_fake);
    let s = tape.softplus(n);
    tape.mean_all(s)
}

/// Discriminator term `f(D(fake)) + f(−D(real))`, without R1.
pub fn disc_loss(tape: &mut Tape, score_fake: Var, score_real: Var) -> Result<Var> {
    let a = tape.softplus(score_fake);
    let a = tape.mean_all(a);
    let n = tape.neg(score_real);
    let b = tape.softplus(n);
    let b = tape.mean_all(b);
    tape.add(a, b)
}

/// `λ‖∂score/∂real‖²`, recorded on the tape so that it can itself be
/// differentiated with respect to the discriminator parameters.
pub fn r1_penalty(tape: &mut Tape, score: Var, real: Var, lambda: f64) -> Result<Var> {
    let g = tape.grad_graph(score, &[real])?;
    let g = match g[0] {
        Some(g) => g,
        None => return Ok(tape.constant(crate::autodiff::Tensor::scalar(0.0))),
    };
    let sq = tape.square(g);
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, lambda))
}

/// Loss terms available for one student step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub imitation: Option<Var>,
    pub adv: Option<Var>,
}

/// Weighted sum of the enabled terms.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, cfg: &LossConfig) -> Result<Var> {
    let mut parts = Vec::new();
    if cfg.imitation {
        let t = terms.imitation.ok_or_else(|| Error::invalid("imitation enabled but not computed"))?;
        parts.push(tape.scale(t, cfg.w_imitation));
    }
    if cfg.adv3d {
        let t = terms.adv.ok_or_else(|| Error::invalid("adv3d enabled but not computed"))?;
        parts.push(tape.scale(t, cfg.w_adv));
    }
    let mut total = match parts.first() {
        Some(v) => *v,
        None => return Ok(tape.constant(crate::autodiff::Tensor::scalar(0.0))),
    };
    for p in &parts[1..] {
        total = tape.add(total, *p)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
