use super::*;

fn cam(yaw: f64, size: usize) -> CameraPose {
    CameraPose::orbit(yaw, 0.15, 3.0, 40.0, size)
}

fn scenes() -> Vec<OracleScene> {
    vec![
        OracleScene::sphere(),
        OracleScene::Blobs { density: 8.0, width: 0.25 },
        OracleScene::StripedBox { half: 0.5, density: 20.0, sharpness: 0.02, stripes: 12.0 },
        OracleScene::Vacuum,
    ]
}

#[test]
fn scene_fields_are_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in scenes() {
        for _ in 0..2000 {
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let d = s.density(p);
            assert!(d.is_finite() && d >= 0.0);
            assert!(s.albedo(p).iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}

#[test]
fn vacuum_is_background() {
    let t = Teacher::new(OracleScene::Vacuum, InconsistencySpec::jitter(0.1, 3));
    let img = t.image(&cam(0.2, 16)).unwrap();
    assert!(img.data().iter().all(|v| *v == 1.0));
}

#[test]
fn sphere_silhouette_area_matches_projected_disk() {
    let size = 128;
    let c = CameraPose::orbit(0.0, 0.0, 3.0, 40.0, size);
    let t = Teacher::new(OracleScene::sphere(), InconsistencySpec::none());
    let (_, alpha) = t.oracle_render(&c).unwrap();
    let area = alpha.iter().filter(|a| **a > 0.5).count() as f64;
    let half_angle = (0.6f64 / 3.0).asin();
    let r_px = c.focal * half_angle.tan();
    let want = std::f64::consts::PI * r_px * r_px;
    assert!((area / want - 1.0).abs() < 0.02, "area {area} vs {want}");
}

#[test]
fn oracle_converges_in_sample_count() {
    let c = cam(0.4, 48);
    let t = Teacher::new(OracleScene::sphere(), InconsistencySpec::none());
    let mut dense = t.clone();
    dense.samples = 2 * ORACLE_SAMPLES;
    let a = t.oracle_render(&c).unwrap().0;
    let b = dense.oracle_render(&c).unwrap().0;
    let d = a.mean_abs_diff(&b);
    assert!(d < 1e-3, "{d}");
}

#[test]
fn zero_amplitude_is_bitwise_consistent() {
    let c = cam(0.1, 32);
    let clean = Teacher::new(OracleScene::sphere(), InconsistencySpec::none()).oracle_render(&c).unwrap().0;
    for mode in [InconsistencyMode::TextureJitter, InconsistencyMode::Warp, InconsistencyMode::None] {
        let t = Teacher::new(OracleScene::sphere(), InconsistencySpec { mode, amplitude: 0.0, seed: 9 });
        assert_eq!(t.image(&c).unwrap(), clean);
    }
}

#[test]
fn flicker_is_deterministic_per_view_and_foreground_only() {
    for mode in [InconsistencyMode::TextureJitter, InconsistencyMode::Warp] {
        let t = Teacher::new(OracleScene::sphere(), InconsistencySpec { mode, amplitude: 0.5, seed: 2 });
        let c = cam(0.3, 32);
        let a = t.image(&c).unwrap();
        assert_eq!(a, t.image(&c).unwrap());
        let (clean, alpha) = t.oracle_render(&c).unwrap();
        assert_ne!(a, clean);
        for (i, al) in alpha.iter().enumerate() {
            if foreground_mask(*al) == 0.0 {
                assert_eq!(a.data()[i * 3..i * 3 + 3], clean.data()[i * 3..i * 3 + 3]);
            }
        }
    }
}

#[test]
fn jitter_breaks_view_consistency() {
    let size = 48;
    let step = (70.0f64 / 59.0).to_radians();
    let clean = Teacher::new(OracleScene::sphere(), InconsistencySpec::none());
    let noisy = Teacher::new(OracleScene::sphere(), InconsistencySpec::jitter(0.05, 1));
    let (c0, c1) = (cam(0.0, size), cam(step, size));
    let dc = clean.image(&c0).unwrap().mean_abs_diff(&clean.image(&c1).unwrap());
    let dn = noisy.image(&c0).unwrap().mean_abs_diff(&noisy.image(&c1).unwrap());
    assert!(dn >= 2.0 * dc, "noisy {dn} vs clean {dc}");
}

#[test]
fn perturbation_energy_is_linear_in_amplitude() {
    let c = cam(-0.2, 48);
    let clean = Teacher::new(OracleScene::sphere(), InconsistencySpec::none()).image(&c).unwrap();
    let energy = |eps: f64| {
        let img = Teacher::new(OracleScene::sphere(), InconsistencySpec::jitter(eps, 4)).image(&c).unwrap();
        img.data().iter().zip(clean.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let (lo, hi) = (energy(0.01), energy(0.1));
    assert!((hi / lo / 10.0 - 1.0).abs() < 0.1, "{lo} {hi}");
}

#[test]
fn patches_are_crops_of_the_frame() {
    let c = cam(0.25, 40);
    let p = PatchSpec::square(7, 12, 16, 40).unwrap();
    for inc in [InconsistencySpec::none(), InconsistencySpec::jitter(0.05, 7)] {
        let t = Teacher::new(OracleScene::sphere(), inc);
        assert_eq!(t.patch(&c, &p).unwrap(), t.image(&c).unwrap().crop(7, 12, 16, 16).unwrap());
    }
}

#[test]
fn view_seed_depends_on_pose() {
    assert_eq!(view_seed(&cam(0.1, 8), 1), view_seed(&cam(0.1, 8), 1));
    assert_ne!(view_seed(&cam(0.1, 8), 1), view_seed(&cam(0.1000001, 8), 1));
    assert_ne!(view_seed(&cam(0.1, 8), 1), view_seed(&cam(0.1, 8), 2));
}
