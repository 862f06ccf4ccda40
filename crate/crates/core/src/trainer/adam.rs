use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::Parameters;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// First and second moments per tensor, in [`Parameters`] visit order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. `grads[i]` belongs to the i-th tensor of
/// `params`; `None` counts as a zero gradient.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &[Option<&Tensor>], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    if grads.len() != shapes.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameter tensors", grads.len(), shapes.len())));
    }
    for (g, s) in grads.iter().zip(&shapes) {
        if let Some(g) = g {
            if g.shape() != s.as_slice() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), s)));
            }
        }
    }
    if state.m.is_empty() {
        state.m = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != shapes.len() || state.m.iter().zip(&shapes).any(|(m, s)| m.shape() != s.as_slice()) {
        return Err(Error::Shape("optimizer state does not match the parameters".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let mut i = 0;
    params.visit_mut(&mut |p| {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = grads[i].map(|g| g.data());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            *x -= hyper.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hyper.eps);
        }
        i += 1;
    });
    Ok(())
}
