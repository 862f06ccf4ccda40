use rand::Rng;

use crate::error::{Error, Result};

/// Duplicates closer than this collapse when merging sample sets.
pub const DEDUPE_TOL: f64 = 1e-12;

/// One uniform draw in each of `n` equal bins of `[near, far]`.
pub fn stratified_sample(near: f64, far: f64, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(near < far) || !near.is_finite() || !far.is_finite() {
        return Err(Error::invalid(format!("invalid depth bounds [{near}, {far}]")));
    }
    if n == 0 {
        return Err(Error::invalid("stratified sampling needs at least one sample"));
    }
    let w = (far - near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let t = near + w * (i as f64 + rng.gen::<f64>());
            t.clamp(near + w * i as f64, near + w * (i + 1) as f64)
        })
        .collect())
}

/// `n` evenly spaced depths `near + i·(far − near)/n`.
pub fn uniform_depths(near: f64, far: f64, n: usize) -> Vec<f64> {
    let w = (far - near) / n as f64;
    (0..n).map(|i| near + w * i as f64).collect()
}

/// Importance intervals from coarse samples `t_1 … t_S` on `[near, far]`.
///
/// Density first seen at `t_k` means the transition happened in
/// `[t_{k−1}, t_k]`, so weight `w_k` owns that interval (`t_0 = near`). The
/// tail `[t_S, far]` gets zero weight and is reached only through `ε_u`.
/// Returns `S + 2` edges and `S + 1` weights.
pub fn coarse_bins(t: &[f64], weights: &[f64], near: f64, far: f64) -> (Vec<f64>, Vec<f64>) {
    let mut edges = Vec::with_capacity(t.len() + 2);
    edges.push(near);
    edges.extend_from_slice(t);
    edges.push(far);
    let mut w = weights.to_vec();
    w.push(0.0);
    (edges, w)
}

/// Inverse-CDF draws from the piecewise-constant density whose value on
/// interval `i` (between `edges[i]` and `edges[i + 1]`) is proportional to
/// `weights[i] + eps_u`. Falls back to uniform when the total mass is zero.
pub fn importance_sample(edges: &[f64], weights: &[f64], n: usize, eps_u: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if edges.len() != weights.len() + 1 || weights.is_empty() {
        return Err(Error::Shape(format!("{} edges for {} weights", edges.len(), weights.len())));
    }
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let width = (edges[i + 1] - edges[i]).max(0.0);
        acc += (w.max(0.0) + eps_u) * width;
        cdf.push(acc);
    }
    if !(acc > 0.0) || !acc.is_finite() {
        for (i, c) in cdf.iter_mut().enumerate().skip(1) {
            *c = edges[i] - edges[0];
        }
        acc = cdf[weights.len()];
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            let i = cdf[1..].partition_point(|c| *c <= u).min(weights.len() - 1);
            let span = cdf[i + 1] - cdf[i];
            let f = if span > 0.0 { ((u - cdf[i]) / span).clamp(0.0, 1.0) } else { 0.5 };
            edges[i] + f * (edges[i + 1] - edges[i])
        })
        .collect())
}

/// Sorted union of two depth sets with near-duplicates collapsed.
pub fn merge_depths(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup_by(|x, prev| (*x - *prev).abs() <= DEDUPE_TOL);
    all
}

/// `δ_i = t_{i+1} − t_i`, with the last spacing running to `far`.
pub fn spacings(t: &[f64], far: f64) -> Vec<f64> {
    (0..t.len())
        .map(|i| if i + 1 < t.len() { t[i + 1] - t[i] } else { (far - t[i]).max(0.0) })
        .collect()
}
