use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck::fd::{check, Probe};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if away_from_zero && v.abs() < 0.2 {
                v.signum() * 0.2 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, turning any tensor into a
/// scalar whose gradient exercises every element.
fn probe_sum(t: &mut Tape, v: Var) -> Result<Var, Error> {
    let shape = t.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect())?;
    let w = t.constant(w);
    let p = t.mul(v, w)?;
    Ok(t.sum_all(p))
}

#[test]
fn softplus_at_zero_is_ln2() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::scalar(0.0));
    let y = t.softplus(x);
    assert!((t.value(y).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn add_vectors() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn product_rule() {
    let mut t = Tape::new();
    let a = t.param(Tensor::scalar(3.0));
    let b = t.param(Tensor::scalar(5.0));
    let c = t.mul(a, b).unwrap();
    let g = t.backward(c).unwrap();
    assert_eq!(g.get(a).unwrap().item(), 5.0);
    assert_eq!(g.get(b).unwrap().item(), 3.0);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([3, 2]));
    let msg = t.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn scalar_broadcast_sums_gradient() {
    let mut t = Tape::new();
    let a = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = t.param(Tensor::scalar(2.0));
    let p = t.mul(a, s).unwrap();
    let r = t.sum_all(p);
    let g = t.backward(r).unwrap();
    assert_eq!(g.get(s).unwrap().item(), 6.0);
    assert_eq!(g.get(a).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn div_backward_at_zero_divisor_errors() {
    let mut t = Tape::new();
    let a = t.param(Tensor::scalar(1.0));
    let b = t.param(Tensor::scalar(0.0));
    let c = t.div(a, b).unwrap();
    assert!(matches!(t.backward(c), Err(Error::DivByZero)));
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let i2 = t.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = t.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = t.matmul(i2, m).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = t.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);

    let bad = t.matmul(a, a);
    assert!(matches!(bad, Err(Error::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[4, 5], false);
    let b = rand_tensor(&mut rng, &[5, 3], false);
    let rep = check(&[a, b], 1e-5, &Probe::All, |t, v| {
        let p = t.matmul(v[0], v[1])?;
        probe_sum(t, p)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn reduce_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![2.0, 4.0, 6.0]));
    let m = t.reduce(ReduceKind::Mean, x, 0).unwrap();
    assert_eq!(t.value(m).item(), 4.0);

    let s = t.reduce(ReduceKind::Sum, x, 0).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    assert!(matches!(t.reduce(ReduceKind::Sum, x, 1), Err(Error::Axis { axis: 1, rank: 1 })));
}

#[test]
fn max_ties_route_to_lowest_index() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 3.0, 3.0]));
    let m = t.reduce(ReduceKind::Max, x, 0).unwrap();
    let g = t.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn mean_of_constant_plane_repeats_to_constant() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full([3, 4], 2.5));
    let m = t.reduce(ReduceKind::Mean, x, 0).unwrap();
    let r = t.expand(m, 0, 3).unwrap();
    assert_eq!(t.value(r), &Tensor::full([3, 4], 2.5));
}

#[test]
fn concat_shape_and_backward() {
    let mut t = Tape::new();
    let a = t.param(Tensor::new([2, 3], (0..6).map(f64::from).collect()).unwrap());
    let b = t.param(Tensor::new([2, 5], (0..10).map(f64::from).collect()).unwrap());
    let c = t.concat(&[a, b], 1).unwrap();
    assert_eq!(t.shape(c), &[2, 8]);
    let w = Tensor::new([2, 8], (0..16).map(f64::from).collect()).unwrap();
    let wv = t.constant(w);
    let p = t.mul(c, wv).unwrap();
    let r = t.sum_all(p);
    let g = t.backward(r).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 2.0, 8.0, 9.0, 10.0]);
    assert_eq!(g.get(b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0, 7.0, 11.0, 12.0, 13.0, 14.0, 15.0]);

    let bad = t.constant(Tensor::zeros([3, 1]));
    assert!(t.concat(&[a, bad], 1).is_err());
}

#[test]
fn permute_roundtrip_is_identity() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new([2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
    let p = t.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(t.shape(p), &[4, 2, 3]);
    let q = t.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(t.value(q), t.value(x));
}

#[test]
fn backward_of_constants_is_empty() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let s = t.sum_all(a);
    assert!(t.backward(s).unwrap().is_empty());
}

#[test]
fn non_scalar_root_rejected() {
    let mut t = Tape::new();
    let a = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(a), Err(Error::NonScalarRoot(_))));
}

#[test]
fn repeated_backward_is_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::new();
    let a = t.param(rand_tensor(&mut rng, &[3, 4], false));
    let b = t.param(rand_tensor(&mut rng, &[4, 2], false));
    let p = t.matmul(a, b).unwrap();
    let q = t.softplus(p);
    let r = t.sum_all(q);
    assert_eq!(t.backward(r).unwrap(), t.backward(r).unwrap());
}

#[test]
fn detach_blocks_gradient_and_copies_bits() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.1, -2.0, 3.5]));
    let y = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let dx = t.detach(x);
    assert_eq!(t.value(dx).data(), t.value(x).data());
    let p = t.mul(dx, y).unwrap();
    let r = t.sum_all(p);
    let g = t.backward(r).unwrap();
    assert!(g.get(x).is_none());
    assert_eq!(g.get(y).unwrap().data(), &[0.1, -2.0, 3.5]);
}

#[test]
fn every_elementwise_op_matches_finite_differences() {
    let unary = [
        Unary::Neg,
        Unary::Exp,
        Unary::Softplus,
        Unary::Sigmoid,
        Unary::Relu,
        Unary::LeakyRelu(0.2),
        Unary::Sqrt,
        Unary::Square,
        Unary::Abs,
    ];
    for (k, kind) in unary.iter().enumerate() {
        for inst in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 * k as u64 + inst);
            let mut x = rand_tensor(&mut rng, &[2, 3], true);
            if *kind == Unary::Sqrt {
                x = x.map(|v| v.abs() + 0.1);
            }
            let rep = check(&[x], 1e-6, &Probe::All, |t, v| {
                let y = t.unary(*kind, v[0]);
                probe_sum(t, y)
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-5, "{kind:?} instance {inst}: {rep:?}");
        }
    }
    for kind in [Binary::Add, Binary::Sub, Binary::Mul, Binary::Div] {
        for inst in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + inst);
            let a = rand_tensor(&mut rng, &[3, 2], true);
            let b = rand_tensor(&mut rng, &[3, 2], true);
            let s = rand_tensor(&mut rng, &[1], true);
            let rep = check(&[a, b, s], 1e-6, &Probe::All, |t, v| {
                let y = t.binary(kind, v[0], v[1])?;
                let z = t.binary(kind, y, v[2])?;
                probe_sum(t, z)
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-5, "{kind:?} instance {inst}: {rep:?}");
        }
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    for inst in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + inst);
        let a = rand_tensor(&mut rng, &[2, 3, 4], true);
        let b = rand_tensor(&mut rng, &[2, 2, 4], true);
        let bias = rand_tensor(&mut rng, &[4], false);
        let rep = check(&[a, b, bias], 1e-6, &Probe::All, |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?; // 2x5x4
            let p = t.permute(c, &[1, 2, 0])?; // 5x4x2
            let s = t.slice(p, 0, 1, 4)?; // 3x4x2
            let m = t.reduce(ReduceKind::Mean, s, 2)?; // 3x4
            let mx = t.reduce(ReduceKind::Max, c, 1)?; // 2x4
            let e = t.expand(mx, 0, 3)?; // 3x2x4
            let e = t.reshape(e, [6, 4])?;
            let e = t.slice(e, 0, 0, 3)?;
            let r = t.add_rows(m, v[2])?;
            let r = t.mul(r, e)?;
            let ss = t.reduce(ReduceKind::Sum, r, 0)?;
            probe_sum(t, ss)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-5, "instance {inst}: {rep:?}");
    }
}

#[test]
fn sparse_map_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut b = SparseBuilder::new(6);
    for r in 0..4 {
        for c in 0..6 {
            if (r + c) % 3 == 0 {
                b.push(c, rng.gen_range(-1.0..1.0));
            }
        }
        b.end_row();
    }
    let map = Arc::new(b.finish());
    let x = rand_tensor(&mut rng, &[6], false);
    let rep = check(&[x], 1e-6, &Probe::All, |t, v| {
        let y = t.sparse(v[0], map.clone(), [2, 2])?;
        let y = t.square(y);
        probe_sum(t, y)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = rand_tensor(&mut rng, &[4], false);
    let (alpha, beta) = (0.7, -1.3);
    let build = |t: &mut Tape, x: Var, which: u8| -> Result<Var, Error> {
        let l1 = {
            let e = t.exp(x);
            t.sum_all(e)
        };
        let l2 = {
            let s = t.square(x);
            let s = t.softplus(s);
            t.mean_all(s)
        };
        Ok(match which {
            1 => l1,
            2 => l2,
            _ => {
                let a = t.scale(l1, alpha);
                let b = t.scale(l2, beta);
                t.add(a, b)?
            }
        })
    };
    let grad = |which| {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let r = build(&mut t, x, which).unwrap();
        t.backward(r).unwrap().get(x).unwrap().clone()
    };
    let (g1, g2, g) = (grad(1), grad(2), grad(0));
    for i in 0..4 {
        let lin = alpha * g1.data()[i] + beta * g2.data()[i];
        assert!((g.data()[i] - lin).abs() < 1e-12);
    }
}

#[test]
fn grad_graph_matches_backward_and_differentiates_again() {
    // f(x, w) = sum(leaky(x·W)·v); compute ||df/dx||² on the tape and compare
    // its gradient in W against finite differences of the same quantity.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_tensor(&mut rng, &[2, 3], true);
    let w0 = rand_tensor(&mut rng, &[3, 4], true);
    let v0 = rand_tensor(&mut rng, &[4, 1], true);

    let penalty = |t: &mut Tape, x: Var, w: Var, v: Var| -> Result<Var, Error> {
        let h = t.matmul(x, w)?;
        let h = t.leaky_relu(h, 0.2);
        let o = t.matmul(h, v)?;
        let f = t.sum_all(o);
        let gx = t.grad_graph(f, &[x])?[0].unwrap();
        let sq = t.square(gx);
        Ok(t.sum_all(sq))
    };

    // First-order consistency with the numeric engine.
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let w = t.constant(w0.clone());
    let v = t.constant(v0.clone());
    let h = t.matmul(x, w).unwrap();
    let h = t.leaky_relu(h, 0.2);
    let o = t.matmul(h, v).unwrap();
    let f = t.sum_all(o);
    let gx_graph = t.grad_graph(f, &[x]).unwrap()[0].unwrap();
    let gx_num = t.backward(f).unwrap().get(x).unwrap().clone();
    assert!(t.value(gx_graph).max_abs_diff(&gx_num) < 1e-14);

    let rep = check(&[w0, v0], 1e-6, &Probe::All, |t, p| {
        let x = t.constant(x0.clone());
        penalty(t, x, p[0], p[1])
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn tape_is_topologically_ordered() {
    let mut t = Tape::new();
    let a = t.param(Tensor::scalar(1.0));
    let b = t.exp(a);
    let c = t.mul(a, b).unwrap();
    assert!(a.id() < b.id() && b.id() < c.id());
    assert_eq!(t.len(), 3);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn weight_of_sum_rule(xs in proptest::collection::vec(-3.0f64..3.0, 1..12)) {
            let mut t = Tape::new();
            let x = t.param(Tensor::vector(xs.clone()));
            let s = t.softplus(x);
            let r = t.sum_all(s);
            let g = t.backward(r).unwrap();
            for (gi, xi) in g.get(x).unwrap().data().iter().zip(&xs) {
                prop_assert!((gi - kernels::sigmoid(*xi)).abs() < 1e-15);
            }
            // softplus(u) - softplus(-u) = u
            for xi in &xs {
                prop_assert!((kernels::softplus(*xi) - kernels::softplus(-xi) - xi).abs() < 1e-12);
            }
        }
    }
}
