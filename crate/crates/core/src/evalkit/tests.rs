use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::image::Image;
use crate::renderer::Field;

fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
}

#[test]
fn psnr_examples_and_symmetry() {
    let a = Image::filled(8, 8, [0.0; 3]);
    let b = Image::filled(8, 8, [0.5; 3]);
    assert!((psnr(&a, &b).unwrap() - 6.020599913279624).abs() < 1e-12);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = (random_image(20, 17, &mut rng), random_image(20, 17, &mut rng));
    assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    assert!(psnr(&x, &Image::filled(3, 3, [0.0; 3])).is_err());
}

#[test]
fn ssim_identity_symmetry_and_ordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_image(24, 20, &mut rng);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    let y = random_image(24, 20, &mut rng);
    assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
    let mut slight = x.clone();
    slight.data_mut().iter_mut().for_each(|v| *v = (*v + 0.02).min(1.0));
    assert!(ssim(&x, &slight).unwrap() > ssim(&x, &y).unwrap());
    // Windows shrink to fit tiny images.
    let t = random_image(4, 6, &mut rng);
    assert!((ssim(&t, &t).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn strip_of_identical_images_has_zero_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(16, 12, &mut rng);
    let strip = spatiotemporal_texture(&vec![img.clone(); 6], [1.3, 2.0], [14.0, 9.5], 33).unwrap();
    assert_eq!((strip.width(), strip.height()), (33, 6));
    for v in 1..6 {
        for s in 0..33 {
            assert_eq!(strip.pixel(s, v), strip.pixel(s, 0));
        }
    }
    assert_eq!(consistency_score(&strip).unwrap(), 0.0);
}

#[test]
fn horizontal_segment_returns_pixel_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let imgs: Vec<Image> = (0..3).map(|_| random_image(10, 7, &mut rng)).collect();
    let strip = spatiotemporal_texture(&imgs, [0.0, 4.0], [9.0, 4.0], 10).unwrap();
    for (v, img) in imgs.iter().enumerate() {
        for x in 0..10 {
            assert_eq!(strip.pixel(x, v), img.pixel(x, 4));
        }
    }
    assert!(spatiotemporal_texture(&imgs, [0.0, 4.0], [10.0, 4.0], 10).is_err());
    assert!(spatiotemporal_texture(&imgs[..1], [0.0, 0.0], [1.0, 0.0], 2).is_err());
}

#[test]
fn alternating_rows_score_one() {
    let mut strip = Image::filled(5, 6, [0.0; 3]);
    for v in (1..6).step_by(2) {
        for s in 0..5 {
            strip.set_pixel(s, v, [1.0; 3]);
        }
    }
    assert_eq!(consistency_score(&strip).unwrap(), 1.0);
}

#[test]
fn yaw_sweep_spans_the_range() {
    let path = CameraPath::yaw_sweep(60, 35.0, 0.0, 3.0, 30.0, 32).unwrap();
    assert_eq!(path.len(), 60);
    assert_eq!(path.labels()[7], "view_007");
    let first = path.poses()[0].position;
    let last = path.poses()[59].position;
    assert!((first[0].atan2(first[2]) + 35f64.to_radians()).abs() < 1e-12);
    assert!((last[0].atan2(last[2]) - 35f64.to_radians()).abs() < 1e-12);
    assert!(CameraPath::yaw_sweep(1, 35.0, 0.0, 3.0, 30.0, 32).is_err());
}

#[test]
fn every_case_closes_into_loops() {
    let table = case_table();
    assert_eq!(table.len(), 256);
    assert!(table[0].is_empty() && table[255].is_empty());
    for (case, tris) in table.iter().enumerate() {
        let polys = super::mesh::tests_polygons(case);
        assert_eq!(tris.len(), polys.iter().map(|p| p.len() - 2).sum::<usize>());
        let used: usize = polys.iter().map(|p| p.len()).sum();
        // Each crossing edge appears in exactly one polygon.
        let crossing = (0..12)
            .filter(|&e| {
                let (a, b) = super::mesh::tests_edges()[e];
                (case >> a & 1) != (case >> b & 1)
            })
            .count();
        assert_eq!(used, crossing, "case {case}");
        assert!(polys.iter().all(|p| p.len() >= 3));
    }
    // Complementary cases produce the same number of vertices.
    for case in 0..256 {
        let n = |c: usize| super::mesh::tests_polygons(c).iter().map(|p| p.len()).sum::<usize>();
        assert_eq!(n(case), n(255 - case));
    }
}

fn sphere_grid(g: usize, r: f64) -> Tensor {
    let mut data = Vec::with_capacity(g * g * g);
    for i in 0..g {
        for j in 0..g {
            for k in 0..g {
                let p = [voxel_center(i, g), voxel_center(j, g), voxel_center(k, g)];
                data.push(r - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
            }
        }
    }
    Tensor::new([g, g, g], data).unwrap()
}

#[test]
fn sphere_oracle_radius_watertight_outward() {
    let (g, r) = (64, 0.6);
    let mesh = marching_cubes(&sphere_grid(g, r), 0.0).unwrap();
    assert!(!mesh.is_empty());
    let spacing = 2.0 / g as f64;
    let worst = mesh
        .vertices
        .iter()
        .map(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - r).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1.5 * spacing, "worst radius error {worst}");
    assert!(mesh.is_watertight());
    for t in 0..mesh.triangles.len() {
        let n = mesh.triangle_normal(t);
        let c = mesh.vertices[mesh.triangles[t][0]];
        assert!(n[0] * c[0] + n[1] * c[1] + n[2] * c[2] > 0.0, "triangle {t} faces inward");
        assert!(mesh.triangle_area(t) > 1e-12);
    }
}

#[test]
fn vertices_lie_on_straddling_edges() {
    let g = 12;
    let grid = sphere_grid(g, 0.55);
    let mesh = marching_cubes(&grid, 0.0).unwrap();
    let h = 2.0 / g as f64;
    let idx = |x: f64| (x + 1.0) / h - 0.5;
    for v in &mesh.vertices {
        let c = v.map(idx);
        let off: Vec<usize> = (0..3).filter(|&d| (c[d] - c[d].round()).abs() > 1e-9).collect();
        assert!(off.len() <= 1);
        let mut lo = c.map(|x| x.round() as usize);
        let mut hi = lo;
        if let Some(&d) = off.first() {
            lo[d] = c[d].floor() as usize;
            hi[d] = lo[d] + 1;
        }
        let val = |p: [usize; 3]| grid.data()[(p[0] * g + p[1]) * g + p[2]];
        assert!((val(lo) > 0.0) != (val(hi) > 0.0) || val(lo) == 0.0 || val(hi) == 0.0);
    }
}

#[test]
fn random_closed_fields_are_watertight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let g = 10;
        let mut data = vec![-1.0; g * g * g];
        for i in 1..g - 1 {
            for j in 1..g - 1 {
                for k in 1..g - 1 {
                    data[(i * g + j) * g + k] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let mesh = marching_cubes(&Tensor::new([g, g, g], data).unwrap(), 0.0).unwrap();
        assert!(mesh.is_empty() || mesh.is_watertight());
    }
}

#[test]
fn empty_level_set_and_bad_input() {
    let grid = Tensor::full([4, 4, 4], -1.0);
    assert!(marching_cubes(&grid, 0.0).unwrap().is_empty());
    assert!(marching_cubes(&Tensor::zeros([1, 1, 1]), 0.0).is_err());
    assert!(marching_cubes(&Tensor::zeros([3, 3, 2]), 0.0).is_err());
    assert!(marching_cubes(&grid, f64::NAN).is_err());
}

struct Ball;

impl Field for Ball {
    fn query(&self, pts: &[[f64; 3]]) -> crate::Result<(Tensor, Tensor)> {
        let s = pts.iter().map(|p| 1.0 - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).collect();
        Ok((Tensor::zeros([pts.len(), 3]), Tensor::vector(s)))
    }
}

#[test]
fn density_grid_samples_voxel_centres() {
    let grid = density_grid(&Ball, 5).unwrap();
    assert_eq!(grid.shape(), &[5, 5, 5]);
    let p = [voxel_center(1, 5), voxel_center(4, 5), voxel_center(2, 5)];
    assert_eq!(grid.data()[(5 + 4) * 5 + 2], Ball.query(&[p]).unwrap().1.data()[0]);
    assert_eq!(grid.data()[(2 * 5 + 2) * 5 + 2], 1.0);
    assert!(density_grid(&Ball, 1).is_err());
}

