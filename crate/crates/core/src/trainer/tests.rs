use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{decode_bytes, encode};
use crate::params::Parameters;
use super::*;
use crate::evalkit::density_grid;
use crate::renderer::Field;
use crate::teacher::OracleScene;

fn tiny_student(aware3d: bool, seed: u64) -> StudentField {
    let cfg = StudentConfig {
        channels: 4,
        coarse_res: 8,
        factor: 2,
        style_dim: 4,
        hidden: 16,
        depth: 1,
        aware3d,
        demodulate: true,
        init_scale: 0.1,
    };
    StudentField::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn tiny_fit(steps: usize) -> FitConfig {
    FitConfig {
        image_size: 16,
        patch: 8,
        steps,
        batch: 1,
        coarse_samples: 4,
        fine_samples: 4,
        disc_channels: [4, 4, 4],
        disc_hidden: 8,
        seed: 7,
        ..FitConfig::default()
    }
}

fn sphere_teacher() -> Teacher {
    Teacher::new(OracleScene::sphere(), InconsistencySpec::none())
}

#[test]
fn canonical_view_is_identity() {
    let cfg = FitConfig { yaw: [0.0, 0.0], pitch: [0.0, 0.0], ..FitConfig::default() };
    let cam = sample_view(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(cam.rotation, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    assert_eq!(cam.position, [0.0, 0.0, cfg.radius]);
}

#[test]
fn sampled_views_are_valid_poses_on_the_sphere() {
    let cfg = FitConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let cam = sample_view(&cfg, &mut rng);
        cam.validate().unwrap();
        let r = cam.rotation;
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][a] * r[k][b]).sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert!((det - 1.0).abs() < 1e-12);
        let p = cam.position;
        assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - cfg.radius).abs() < 1e-12);
        // Looks at the origin: the camera z axis is parallel to the position.
        for k in 0..3 {
            assert!((r[k][2] * cfg.radius - p[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn yaw_histogram_is_uniform() {
    let cfg = FitConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (bins, n) = (36, 100_000);
    let mut hist = vec![0usize; bins];
    for _ in 0..n {
        let p = sample_view(&cfg, &mut rng).position;
        let yaw = p[0].atan2(p[2]).to_degrees();
        let b = (((yaw + 180.0) / 360.0 * bins as f64) as usize).min(bins - 1);
        hist[b] += 1;
    }
    let tv: f64 = 0.5 * hist.iter().map(|&h| (h as f64 / n as f64 - 1.0 / bins as f64).abs()).sum::<f64>();
    assert!(tv < 0.02, "tv {tv}");
}

#[test]
fn patch_sampling_bounds_and_coverage() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let p = sample_patch(32, 32, &mut rng).unwrap();
        assert_eq!((p.u0, p.v0), (0, 0));
    }
    let (f, s) = (128, 64);
    let mut covered = vec![false; f * f];
    for _ in 0..10_000 {
        let p = sample_patch(f, s, &mut rng).unwrap();
        assert!(p.u0 + s <= f && p.v0 + s <= f);
        for v in p.v0..p.v0 + s {
            for u in p.u0..p.u0 + s {
                covered[v * f + u] = true;
            }
        }
    }
    assert!(covered.iter().all(|c| *c));
    assert!(sample_patch(8, 9, &mut rng).is_err());
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let mut x = Tensor::vector(vec![0.5, -2.0, 3.0]);
    let h = AdamHyper::new(0.01);
    let mut st = AdamState::new();
    adam_step(&mut x, &[Some(&Tensor::zeros([3]))], &mut st, &h).unwrap();
    assert_eq!(x.data(), &[0.5, -2.0, 3.0]);
    let mut x = Tensor::vector(vec![0.5, -2.0, 3.0]);
    let mut st = AdamState::new();
    adam_step(&mut x, &[Some(&Tensor::vector(vec![4.0, -0.1, 1e-3]))], &mut st, &h).unwrap();
    let want = [0.5 - 0.01, -2.0 + 0.01, 3.0 - 0.01];
    for (a, b) in x.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
    assert!(adam_step(&mut x, &[Some(&Tensor::zeros([2]))], &mut st, &h).is_err());
}

#[test]
fn adam_matches_hand_trace_on_square() {
    let mut x = Tensor::vector(vec![1.0]);
    let mut st = AdamState::new();
    let h = AdamHyper::new(0.1);
    let want = [0.9000000005, 0.8004122286917928, 0.7015862729460303];
    for w in want {
        let g = x.scale(2.0);
        adam_step(&mut x, &[Some(&g)], &mut st, &h).unwrap();
        assert!((x.data()[0] - w).abs() < 1e-15, "{} vs {w}", x.data()[0]);
    }
}

#[test]
fn initial_student_is_near_transparent() {
    let s = tiny_student(true, 4);
    let grid = density_grid(&s.resolve().unwrap(), 16).unwrap();
    assert!(grid.data().iter().all(|v| *v < 0.7));
}

#[test]
fn resolved_field_matches_tape_planes() {
    let s = tiny_student(true, 5);
    let mut tape = Tape::new();
    let (vars, _) = bind(&s, &mut tape, false);
    let planes = s.planes(&mut tape, &vars).unwrap();
    let pts = [[0.1, -0.3, 0.7], [-0.9, 0.2, 0.05], [0.0, 0.0, 0.0]];
    let (c, sigma) = StudentField::eval(&mut tape, &vars, &planes, &pts).unwrap();
    let (cv, sv) = s.resolve().unwrap().query(&pts).unwrap();
    assert!(tape.value(c).max_abs_diff(&cv) < 1e-14);
    assert!(tape.value(sigma).max_abs_diff(&sv) < 1e-14);
    assert_eq!(s.residual_res(), 16);
}

#[test]
fn zero_step_fit_leaves_student_unchanged() {
    let s = tiny_student(false, 6);
    let r = fit_imitation(&sphere_teacher(), s.clone(), &tiny_fit(0)).unwrap();
    assert_eq!(r.student, s);
    assert!(r.metrics.is_empty());
}

fn strip_wallclock(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    rows.iter().map(|r| MetricsRow { wallclock_s: 0.0, ..*r }).collect()
}

#[test]
fn seeded_fit_is_reproducible() {
    let mut cfg = tiny_fit(4);
    cfg.loss.adv3d = true;
    let a = fit_imitation(&sphere_teacher(), tiny_student(true, 8), &cfg).unwrap();
    let b = fit_imitation(&sphere_teacher(), tiny_student(true, 8), &cfg).unwrap();
    assert_eq!(metrics_csv(&strip_wallclock(&a.metrics)), metrics_csv(&strip_wallclock(&b.metrics)));
    assert_eq!(a.student, b.student);
    assert!(a.metrics.iter().any(|r| r.loss_r1 > 0.0));
    assert!(a.metrics.iter().all(|r| r.loss_adv > 0.0));
    assert_ne!(a.student, tiny_student(true, 8));
}

#[test]
fn metrics_csv_layout() {
    let row = MetricsRow { step: 3, loss_total: 0.1, loss_imit: 0.1, loss_adv: 0.0, loss_r1: 0.0, psnr_preview: 20.5, wallclock_s: 1.25 };
    assert_eq!(metrics_csv(&[row]), format!("{METRICS_HEADER}\n3,0.1,0.1,0,0,20.5,1.25\n"));
}

#[test]
fn non_finite_target_aborts_with_step_and_term() {
    let mut teacher = sphere_teacher();
    teacher.background = [f64::NAN; 3];
    match fit_imitation(&teacher, tiny_student(false, 9), &tiny_fit(2)) {
        Err(Error::NonFiniteLoss { step, term }) => assert_eq!((step, term.as_str()), (0, "imitation")),
        other => panic!("expected non-finite loss, got {other:?}"),
    }
}

#[test]
fn stage_a_trains_only_the_coarse_path() {
    let mut cfg = tiny_fit(0);
    cfg.stage_a_steps = 2;
    cfg.stage_a_size = 8;
    let s = tiny_student(false, 10);
    let r = fit_imitation(&sphere_teacher(), s.clone(), &cfg).unwrap();
    assert_eq!(r.metrics.len(), 2);
    assert_eq!(r.student.sr, s.sr);
    assert_ne!(r.student.coarse, s.coarse);
}

#[test]
fn imitation_loss_trends_down() {
    let mut cfg = tiny_fit(120);
    cfg.image_size = 24;
    cfg.patch = 16;
    cfg.fov_deg = 35.0;
    cfg.adam = AdamHyper::new(1e-2);
    let r = fit_imitation(&sphere_teacher(), tiny_student(false, 11), &cfg).unwrap();
    let median = |xs: &[MetricsRow]| {
        let mut v: Vec<f64> = xs.iter().map(|r| r.loss_imit).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let n = r.metrics.len() / 10;
    let (first, last) = (median(&r.metrics[..n]), median(&r.metrics[r.metrics.len() - n..]));
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn fit_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_fit(2);
    cfg.out_dir = Some(dir.path().to_path_buf());
    cfg.preview_every = 1;
    let r = fit_imitation(&sphere_teacher(), tiny_student(false, 12), &cfg).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with(METRICS_HEADER));
    for f in ["preview_000001.png", "preview_000002.png", "preview_final.png", "checkpoint.tpl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (back, dtype) = read_checkpoint(&dir.path().join("checkpoint.tpl")).unwrap();
    assert_eq!((back, dtype), (r.student, Dtype::F64));
}

#[test]
fn checkpoint_round_trips() {
    for aware in [false, true] {
        let s = tiny_student(aware, 13);
        let bytes = encode(&s, Dtype::F64);
        assert_eq!(&bytes[..4], b"TPL1");
        let header: Vec<u32> = (0..5).map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap())).collect();
        assert_eq!(header, vec![4, 8, 16, 4, 2]);
        // Planes follow the header directly, xy first.
        let first = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        assert_eq!(first, s.coarse.planes()[0].data()[0]);
        assert_eq!(decode_bytes(&bytes).unwrap(), (s.clone(), Dtype::F64));

        let (half, dt) = decode_bytes(&encode(&s, Dtype::F32)).unwrap();
        assert_eq!(dt, Dtype::F32);
        let mut rounded = s.clone();
        rounded.visit_mut(&mut |t| t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64));
        assert_eq!(half, rounded);
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let s = tiny_student(true, 14);
    let mut bytes = encode(&s, Dtype::F64);
    assert!(matches!(decode_bytes(b"TPL2xxxx"), Err(Error::Checkpoint(_))));
    assert!(matches!(decode_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    assert!(matches!(decode_bytes(&bytes[..100]), Err(Error::Checkpoint(_))));
    // Unknown trailing sections are skipped.
    bytes.extend_from_slice(b"NOTE");
    bytes.extend_from_slice(&3u64.to_le_bytes());
    bytes.extend_from_slice(b"abc");
    assert_eq!(decode_bytes(&bytes).unwrap().0, s);
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_checkpoint(&dir.path().join("missing.tpl")), Err(Error::Io { .. })));
}
