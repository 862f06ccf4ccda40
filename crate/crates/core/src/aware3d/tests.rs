use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::fd::{check, Probe};

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_triplane(c: usize, r: usize, rng: &mut impl Rng) -> TriPlane {
    TriPlane::new(std::array::from_fn(|_| rand_tensor(&[c, r, r], rng))).unwrap()
}

/// Direct 3×3 conv with reflect padding, written index by index.
fn conv_oracle(x: &Tensor, k: &Tensor) -> Tensor {
    let (co, ci, r) = (k.shape()[0], k.shape()[1], x.shape()[1]);
    let refl = |i: isize| -> usize {
        let n = r as isize;
        (if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i }) as usize
    };
    let mut out = Tensor::zeros([co, r, r]);
    for o in 0..co {
        for i in 0..r {
            for j in 0..r {
                let mut acc = 0.0;
                for c in 0..ci {
                    for a in 0..3 {
                        for b in 0..3 {
                            let ii = refl(i as isize + a as isize - 1);
                            let jj = refl(j as isize + b as isize - 1);
                            acc += k.data()[((o * ci + c) * 3 + a) * 3 + b] * x.data()[(c * r + ii) * r + jj];
                        }
                    }
                }
                out.data_mut()[(o * r + i) * r + j] = acc;
            }
        }
    }
    out
}

fn pool_repeat_values(plane: &Tensor, pooled: PooledAxis, layout: RepeatLayout) -> Tensor {
    let mut tape = Tape::new();
    let p = tape.constant(plane.clone());
    let y = axis_pool_repeat(&mut tape, p, pooled, layout).unwrap();
    tape.value(y).clone()
}

#[test]
fn pool_repeat_of_constant_plane_is_identity() {
    let plane = Tensor::full([2, 5, 5], 0.7);
    for pooled in [PooledAxis::Rows, PooledAxis::Cols] {
        for layout in [RepeatLayout::AlongRows, RepeatLayout::AlongCols] {
            assert!(pool_repeat_values(&plane, pooled, layout).max_abs_diff(&plane) < 1e-15);
        }
    }
}

#[test]
fn pool_rows_small_example() {
    // rows [1 2; 3 4]: column means are [2, 3].
    let plane = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let along_rows = pool_repeat_values(&plane, PooledAxis::Rows, RepeatLayout::AlongRows);
    assert_eq!(along_rows.data(), &[2.0, 2.0, 3.0, 3.0]);
    let along_cols = pool_repeat_values(&plane, PooledAxis::Rows, RepeatLayout::AlongCols);
    assert_eq!(along_cols.data(), &[2.0, 3.0, 2.0, 3.0]);
    let cols = pool_repeat_values(&plane, PooledAxis::Cols, RepeatLayout::AlongRows);
    assert_eq!(cols.data(), &[1.5, 1.5, 3.5, 3.5]);
}

#[test]
fn pool_repeat_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let plane = rand_tensor(&[3, 6, 6], &mut rng);
    let once = pool_repeat_values(&plane, PooledAxis::Rows, RepeatLayout::AlongCols);
    let twice = pool_repeat_values(&once, PooledAxis::Rows, RepeatLayout::AlongCols);
    assert!(once.max_abs_diff(&twice) < 1e-14);
}

/// Aligned stack built from 3D coordinates: texel (row, col) of the target
/// plane fixes two world axes; the other planes are averaged over the third.
fn align_oracle(tp: &TriPlane, target: PlaneAxis) -> Tensor {
    let (c, r) = (tp.channels(), tp.resolution());
    let at = |axis: PlaneAxis, ch: usize, row: usize, col: usize| tp.plane(axis).data()[(ch * r + row) * r + col];
    // World index triple (x, y, z) → (row, col) on each plane.
    let rc = |axis: PlaneAxis, xyz: [usize; 3]| match axis {
        PlaneAxis::Xy => (xyz[1], xyz[0]),
        PlaneAxis::Yz => (xyz[2], xyz[1]),
        PlaneAxis::Zx => (xyz[0], xyz[2]),
    };
    // (row, col, free) of the target → world triple.
    let world = |row: usize, col: usize, free: usize| match target {
        PlaneAxis::Xy => [col, row, free],
        PlaneAxis::Yz => [free, col, row],
        PlaneAxis::Zx => [row, free, col],
    };
    let k = target.index();
    let others = [PlaneAxis::ALL[(k + 1) % 3], PlaneAxis::ALL[(k + 2) % 3]];
    let mut out = Tensor::zeros([3 * c, r, r]);
    for ch in 0..c {
        for row in 0..r {
            for col in 0..r {
                let (tr, tc) = rc(target, world(row, col, 0));
                out.data_mut()[(ch * r + row) * r + col] = at(target, ch, tr, tc);
                for (slot, axis) in others.iter().enumerate() {
                    let mean = (0..r)
                        .map(|f| {
                            let (pr, pc) = rc(*axis, world(row, col, f));
                            at(*axis, ch, pr, pc)
                        })
                        .sum::<f64>()
                        / r as f64;
                    out.data_mut()[(((slot + 1) * c + ch) * r + row) * r + col] = mean;
                }
            }
        }
    }
    out
}

#[test]
fn align_matches_world_coordinate_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tp = random_triplane(2, 4, &mut rng);
    for target in PlaneAxis::ALL {
        let mut tape = Tape::new();
        let vars = tp.bind_constant(&mut tape);
        let y = aware3d_align(&mut tape, &vars, target).unwrap();
        let want = align_oracle(&tp, target);
        assert!(tape.value(y).max_abs_diff(&want) < 1e-14, "{target:?}");
    }
}

#[test]
fn conv_matches_oracle_and_unit_style_is_plain_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[3, 5, 5], &mut rng);
    let k = rand_tensor(&[2, 3, 3, 3], &mut rng);
    let plain = conv_oracle(&x, &k);
    let y = modulated_conv2d_values(&x, &k, &[1.0; 3], false, EPS_DEMOD).unwrap();
    assert!(y.max_abs_diff(&plain) < 1e-12);
}

#[test]
fn demodulation_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&[3, 4, 4], &mut rng);
    let k = rand_tensor(&[2, 3, 3, 3], &mut rng);
    let s: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
    let base = modulated_conv2d_values(&x, &k, &s, true, EPS_DEMOD).unwrap();
    for alpha in [0.5, 2.0] {
        let scaled: Vec<f64> = s.iter().map(|v| v * alpha).collect();
        let y = modulated_conv2d_values(&x, &k, &scaled, true, EPS_DEMOD).unwrap();
        assert!(y.max_abs_diff(&base) < 1e-6, "alpha {alpha}");
    }
}

#[test]
fn zero_kernel_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[2, 4, 4], &mut rng);
    let k = Tensor::zeros([2, 2, 3, 3]);
    for demod in [false, true] {
        let y = modulated_conv2d_values(&x, &k, &[0.3, 2.0], demod, EPS_DEMOD).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn modulated_conv_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for demod in [false, true] {
        let x = rand_tensor(&[2, 4, 4], &mut rng);
        let k = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let a = rand_tensor(&[3, 2], &mut rng);
        let b = Tensor::ones([2]);
        let w = rand_tensor(&[3], &mut rng);
        let proj = Arc::new(rand_tensor(&[2, 4, 4], &mut rng));
        let report = check(&[x, k, a, b, w], 1e-6, &Probe::All, |t, v| {
            let p = ModConvVars { kernel: v[1], affine_w: v[2], affine_b: v[3], demodulate: demod, eps: EPS_DEMOD };
            let y = modulated_conv2d(t, v[0], &p, v[4])?;
            let y = t.mul_const(y, proj.clone())?;
            Ok(t.sum_all(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "demod {demod}: {report:?}");
    }
}

#[test]
fn block_gradient_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tp = random_triplane(2, 3, &mut rng);
    let params = Aware3dParams::init(2, 2, &mut rng);
    let w = rand_tensor(&[2], &mut rng);
    let mut inputs: Vec<Tensor> = tp.planes().to_vec();
    inputs.push(w);
    inputs.extend(params.tensors().into_iter().cloned());
    let probe = Probe::Entries((0..inputs.len()).flat_map(|i| [(i, 0), (i, inputs[i].numel() / 2)]).collect());
    let report = check(&inputs, 1e-6, &probe, |t, v| {
        let mut it = v[4..].iter().copied();
        let pv = params.bind_vars(&mut || it.next().unwrap());
        let out = aware3d_block(t, &TriPlaneVars([v[0], v[1], v[2]]), v[3], &pv)?;
        let cat = t.concat(&out.0, 0)?;
        let sq = t.square(cat);
        Ok(t.sum_all(sq))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn block_mixes_information_across_planes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tp = random_triplane(2, 4, &mut rng);
    let params = Aware3dParams::init(2, 3, &mut rng);
    let w = rand_tensor(&[3], &mut rng);
    let base = aware3d_block_values(&tp, &w, &params).unwrap();
    let mut bumped = tp.clone();
    bumped.plane_mut(PlaneAxis::Yz).data_mut()[5] += 1.0;
    let out = aware3d_block_values(&bumped, &w, &params).unwrap();
    assert!(out.plane(PlaneAxis::Xy).max_abs_diff(base.plane(PlaneAxis::Xy)) > 1e-6);
    assert!(out.plane(PlaneAxis::Zx).max_abs_diff(base.plane(PlaneAxis::Zx)) > 1e-6);

    // Control: independent per-plane convs never see the other planes.
    let k = rand_tensor(&[2, 2, 3, 3], &mut rng);
    let a = modulated_conv2d_values(tp.plane(PlaneAxis::Xy), &k, &[1.0, 1.0], true, EPS_DEMOD).unwrap();
    let b = modulated_conv2d_values(bumped.plane(PlaneAxis::Xy), &k, &[1.0, 1.0], true, EPS_DEMOD).unwrap();
    assert_eq!(a, b);
}

#[test]
fn conv_rejects_bad_shapes() {
    let k = Tensor::zeros([1, 2, 3, 3]);
    assert!(modulated_conv2d_values(&Tensor::zeros([3, 4, 4]), &k, &[1.0, 1.0], true, EPS_DEMOD).is_err());
    assert!(modulated_conv2d_values(&Tensor::zeros([2, 1, 1]), &k, &[1.0, 1.0], true, EPS_DEMOD).is_err());
}
