use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Outcome of comparing a tape gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub probes: usize,
    /// Probes dropped because every tried step straddled a kink.
    pub skipped: usize,
}

/// Successive step reductions tried when a difference straddles a kink.
pub const KINK_RETRIES: usize = 3;

/// Which input entries to probe.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    /// `(input index, flat element index)` pairs.
    Entries(Vec<(usize, usize)>),
}

/// Compares `Tape::backward` of the scalar produced by `build` against
/// five-point central differences with step `h`. Every input is a trainable leaf.
/// A difference whose ends land on other sides of a kink than the base point
/// is retried with a smaller step, then skipped.
pub fn check(
    inputs: &[Tensor],
    h: f64,
    probe: &Probe,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<FdReport> {
    check_scaled(inputs, h, probe, 1.0, build)
}

/// [`check`] with the analytic gradient multiplied by `analytic_scale`
/// before comparison; `-1` is the checker's self-test.
pub fn check_scaled(
    inputs: &[Tensor],
    h: f64,
    probe: &Probe,
    analytic_scale: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<FdReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let base = tape.kink_pattern();
    let eval = |perturbed: &[Tensor]| -> Result<(f64, bool)> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let r = build(&mut t, &vs)?;
        Ok((t.value(r).item(), t.kink_pattern() == base))
    };

    let entries: Vec<(usize, usize)> = match probe {
        Probe::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
        Probe::Entries(e) => e.clone(),
    };

    let (mut worst, mut skipped) = (0.0f64, 0);
    let mut work = inputs.to_vec();
    for &(i, j) in &entries {
        let x0 = work[i].data()[j];
        let mut numeric = None;
        let mut step = h;
        for _ in 0..=KINK_RETRIES {
            let mut f = [0.0; 4];
            let mut smooth = true;
            for (k, m) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                work[i].data_mut()[j] = x0 + m * step;
                let (v, same) = eval(&work)?;
                f[k] = v;
                smooth &= same;
            }
            if smooth {
                numeric = Some((8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * step));
                break;
            }
            step *= 0.1;
        }
        work[i].data_mut()[j] = x0;
        let Some(numeric) = numeric else {
            skipped += 1;
            continue;
        };
        let analytic = analytic_scale * grads.get(vars[i]).map_or(0.0, |g| g.data()[j]);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(FdReport { max_rel_err: worst, probes: entries.len() - skipped, skipped })
}
