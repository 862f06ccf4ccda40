use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{kernels, Tensor};
use crate::gradcheck::fd::{check, rel_err, Probe};
use crate::params::{bind, Parameters};

fn rand_image(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_parts(vec![h, w, 3], (0..h * w * 3).map(|_| rng.gen::<f64>()).collect())
}

fn proxy_value(a: &Tensor, b: &Tensor) -> f64 {
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let d = perceptual_proxy(&mut t, va, vb, &DEFAULT_LEVEL_WEIGHTS).unwrap();
    t.value(d).item()
}

#[test]
fn proxy_is_a_pseudometric() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_image(16, 12, &mut rng);
    let b = rand_image(16, 12, &mut rng);
    assert_eq!(proxy_value(&a, &a), 0.0);
    let ab = proxy_value(&a, &b);
    assert!(ab > 0.0);
    assert!((ab - proxy_value(&b, &a)).abs() < 1e-15);
}

#[test]
fn brightness_shift_costs_less_than_checkerboard() {
    // Smooth base image so the checkerboard is the only high frequency.
    let (h, w) = (32, 32);
    let base = Tensor::from_parts(
        vec![h, w, 3],
        (0..h * w * 3).map(|i| 0.4 + 0.2 * (((i / 3) % w) as f64 / w as f64)).collect(),
    );
    let bright = base.map(|v| v + 0.1);
    let mut checker = base.clone();
    for (i, v) in checker.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i / 3) / w, (i / 3) % w);
        *v += if (x + y) % 2 == 0 { 0.1 } else { -0.1 };
    }
    // Equal energy: both perturbations have squared norm 0.01 per value.
    let lb = proxy_value(&base, &bright);
    let lc = proxy_value(&base, &checker);
    assert!(lb < lc, "brightness {lb} vs checkerboard {lc}");
}

#[test]
fn proxy_shape_mismatch_is_an_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([4, 4, 3]));
    let b = t.constant(Tensor::zeros([4, 5, 3]));
    assert!(perceptual_proxy(&mut t, a, b, &DEFAULT_LEVEL_WEIGHTS).is_err());
    assert!(PerceptualProxy::new(4, 4, &[1.0, -1.0]).is_err());
}

#[test]
fn proxy_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_image(8, 8, &mut rng);
    let b = rand_image(8, 8, &mut rng);
    let report = check(&[a], 1e-6, &Probe::All, |t, v| {
        let bv = t.constant(b.clone());
        perceptual_proxy(t, v[0], bv, &DEFAULT_LEVEL_WEIGHTS)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn teacher_side_gets_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::new();
    let a = t.param(rand_image(8, 8, &mut rng));
    let teacher = t.param(rand_image(8, 8, &mut rng));
    let target = t.detach(teacher);
    let d = perceptual_proxy(&mut t, a, target, &DEFAULT_LEVEL_WEIGHTS).unwrap();
    let g = t.backward(d).unwrap();
    assert!(g.get(a).is_some());
    assert!(g.get(teacher).is_none_or(|g| g.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn softplus_identities() {
    assert!((kernels::softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    for u in [-700.0, -30.0, -1.0, 0.5, 20.0, 700.0] {
        assert!(kernels::softplus(u) > 0.0 || u < -700.0 + 1.0);
        assert!((kernels::softplus(u) - kernels::softplus(-u) - u).abs() < 1e-12);
    }
    assert!(kernels::softplus(-50.0) < 1e-20);
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(0.0));
    let y = t.softplus(x);
    assert_eq!(t.backward(y).unwrap().get(x).unwrap().item(), 0.5);
}

fn scalar_loss(f: impl Fn(&mut Tape, Var, Var) -> Result<Var>, fake: f64, real: f64) -> f64 {
    let mut t = Tape::new();
    let (a, b) = (t.constant(Tensor::vector(vec![fake])), t.constant(Tensor::vector(vec![real])));
    let l = f(&mut t, a, b).unwrap();
    t.value(l).item()
}

#[test]
fn gan_sign_convention() {
    let gen = |t: &mut Tape, f: Var, _: Var| Ok(nonsat_gen_loss(t, f));
    // Generator prefers fakes the discriminator scores as real.
    assert!(scalar_loss(gen, 2.0, 0.0) < scalar_loss(gen, -2.0, 0.0));
    assert!((scalar_loss(gen, 0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    // Discriminator prefers high real scores and low fake scores.
    let d = |t: &mut Tape, f: Var, r: Var| disc_loss(t, f, r);
    assert!(scalar_loss(d, -2.0, 2.0) < scalar_loss(d, 2.0, -2.0));
    assert!((scalar_loss(d, 0.0, 0.0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn r1_of_linear_and_constant_discriminators() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = Arc::new(rand_image(4, 4, &mut rng));
    let knorm: f64 = k.data().iter().map(|v| v * v).sum();
    for _ in 0..3 {
        let mut t = Tape::new();
        let x = t.param(rand_image(4, 4, &mut rng));
        let s = t.mul_const(x, k.clone()).unwrap();
        let s = t.sum_all(s);
        let p = r1_penalty(&mut t, s, x, 2.0).unwrap();
        assert!((t.value(p).item() - 2.0 * knorm).abs() < 1e-12);
    }
    let mut t = Tape::new();
    let x = t.param(rand_image(4, 4, &mut rng));
    let s = t.constant(Tensor::scalar(3.0));
    let p = r1_penalty(&mut t, s, x, 1.0).unwrap();
    assert_eq!(t.value(p).item(), 0.0);
}

/// Two-layer toy discriminator `v·softplus(W x + b)`.
fn toy_score(t: &mut Tape, x: Var, w: Var, b: Var, v: Var) -> Result<Var> {
    let h = t.matmul(w, x)?;
    let h = t.add(h, b)?;
    let h = t.softplus(h);
    let s = t.mul(h, v)?;
    Ok(t.sum_all(s))
}

#[test]
fn r1_matches_fd_gradient_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = |s: &[usize], rng: &mut ChaCha8Rng| {
        Tensor::from_parts(s.to_vec(), (0..s.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let (x, w, b, v) = (r(&[4, 1], &mut rng), r(&[3, 4], &mut rng), r(&[3, 1], &mut rng), r(&[3, 1], &mut rng));
    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let (wv, bv, vv) = (t.constant(w.clone()), t.constant(b.clone()), t.constant(v.clone()));
    let s = toy_score(&mut t, xv, wv, bv, vv).unwrap();
    let p = r1_penalty(&mut t, s, xv, 1.0).unwrap();
    let h = 1e-5;
    let mut norm = 0.0;
    for i in 0..4 {
        let eval = |d: f64| {
            let mut t = Tape::new();
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            let vs = [xp, w.clone(), b.clone(), v.clone()].map(|a| t.constant(a));
            let s = toy_score(&mut t, vs[0], vs[1], vs[2], vs[3]).unwrap();
            t.value(s).item()
        };
        let g = (eval(h) - eval(-h)) / (2.0 * h);
        norm += g * g;
    }
    assert!(rel_err(t.value(p).item(), norm) < 1e-3);
}

fn small_disc(rng: &mut ChaCha8Rng) -> PatchDiscriminatorParams {
    PatchDiscriminatorParams::init(8, [3, 4, 4], 5, rng)
}

#[test]
fn im2col_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w, c, co) = (5, 6, 2, 3);
    let x = Tensor::from_parts(vec![h * w * c], (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let k: Vec<f64> = (0..9 * c * co).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cols = im2col_stride2(h, w, c).apply(x.data());
    let (ho, wo) = (3, 3);
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..co {
                let mut want = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (2 * oy as isize + ky as isize - 1, 2 * ox as isize + kx as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ch in 0..c {
                            let xv = x.data()[((iy as usize) * w + ix as usize) * c + ch];
                            want += xv * k[((ky * 3 + kx) * c + ch) * co + o];
                        }
                    }
                }
                let row = &cols[(oy * wo + ox) * 9 * c..(oy * wo + ox + 1) * 9 * c];
                let got: f64 = row.iter().enumerate().map(|(j, v)| v * k[j * co + o]).sum();
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn discriminator_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = small_disc(&mut rng);
    let disc = Discriminator::new(&params);
    let x = rand_image(8, 8, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(params.tensors().into_iter().cloned());
    let report = check(&inputs, 1e-5, &Probe::All, |t, v| {
        let mut it = v[1..].iter().copied();
        let dv = params.bind_vars(&mut || it.next().unwrap());
        let s = disc.score(t, &dv, v[0])?;
        Ok(t.sum_all(s))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn r1_double_backward_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = small_disc(&mut rng);
    let disc = Discriminator::new(&params);
    let real = rand_image(8, 8, &mut rng);
    let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let report = check(&inputs, 1e-5, &Probe::All, |t, v| {
        let mut it = v.iter().copied();
        let dv = params.bind_vars(&mut || it.next().unwrap());
        let x = t.param(real.clone());
        let s = disc.score(t, &dv, x)?;
        let s = t.sum_all(s);
        r1_penalty(t, s, x, 1.0)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn disc_rejects_wrong_patch_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = small_disc(&mut rng);
    let disc = Discriminator::new(&params);
    let mut t = Tape::new();
    let (dv, _) = bind(&params, &mut t, false);
    let x = t.constant(Tensor::zeros([4, 4, 3]));
    assert!(disc.score(&mut t, &dv, x).is_err());
}

#[test]
fn total_loss_combinations() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::scalar(0.7));
    let b = t.constant(Tensor::scalar(0.2));
    let cfg = LossConfig::default();
    let only = total_loss(&mut t, &LossTerms { imitation: Some(a), adv: Some(b) }, &cfg).unwrap();
    assert_eq!(t.value(only).item(), 0.7);
    let both_cfg = LossConfig { adv3d: true, ..LossConfig::default() };
    let both = total_loss(&mut t, &LossTerms { imitation: Some(a), adv: Some(b) }, &both_cfg).unwrap();
    assert!((t.value(both).item() - 0.9).abs() < 1e-15);
    let (a2, b2) = (t.constant(Tensor::scalar(1.4)), t.constant(Tensor::scalar(0.4)));
    let doubled = total_loss(&mut t, &LossTerms { imitation: Some(a2), adv: Some(b2) }, &both_cfg).unwrap();
    assert!((t.value(doubled).item() - 2.0 * t.value(both).item()).abs() < 1e-15);
    let z = t.constant(Tensor::scalar(0.0));
    let zero = total_loss(&mut t, &LossTerms { imitation: Some(z), adv: Some(z) }, &both_cfg).unwrap();
    assert_eq!(t.value(zero).item(), 0.0);
    assert!(total_loss(&mut t, &LossTerms::default(), &cfg).is_err());
    assert!(LossConfig { lambda_r1: -1.0, ..LossConfig::default() }.validate().is_err());
}
