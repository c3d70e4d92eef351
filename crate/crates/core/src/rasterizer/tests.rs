use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gaussians::{GaussianPrimitive, ShCoefficients};
use crate::geometry::Camera;
use crate::linalg::{Mat3, Vec3};
use crate::gradcheck::{random_primitive, test_camera};
use crate::oracles::brute_force_render;

fn flat_primitive(mean: Vec3<f64>, sigma: f64, opacity: f64, rgb: [f64; 3]) -> GaussianPrimitive<f64> {
    GaussianPrimitive {
        mean,
        scale_raw: Vec3::new(sigma.ln(), sigma.ln(), sigma.ln()),
        rotation_raw: [1.0, 0.0, 0.0, 0.0],
        opacity,
        sh: ShCoefficients::from_rgb(0, rgb).unwrap(),
    }
}

/// Camera with focal 16 on a 16×16 image; a point at (0.5·z/16, 0.5·z/16, z)
/// projects to the center of pixel (8, 8).
fn centered() -> (Camera<f64>, Vec3<f64>) {
    let cam = test_camera(16);
    let z = 4.0;
    (cam, Vec3::new(0.5 * z / 16.0, 0.5 * z / 16.0, z))
}

#[test]
fn single_splat_center_weight_is_opacity() {
    let (cam, mean) = centered();
    let g = flat_primitive(mean, 0.2, 0.5, [1.0, 1.0, 1.0]);
    let img = render(&cam, &[g], [0.0; 3]);
    let idx = 8 * 16 + 8;
    for ch in 0..3 {
        assert!((img.color[idx][ch] - 0.5).abs() < 1e-12);
    }
    assert!((img.alpha[idx] - 0.5).abs() < 1e-12);
    assert_eq!(img.count[idx], 1);
}

#[test]
fn empty_scene_is_background() {
    let cam = test_camera(8);
    let img = render(&cam, &[], [0.2, 0.3, 0.4]);
    assert!(img.color.iter().all(|c| *c == [0.2, 0.3, 0.4]));
    assert!(img.alpha.iter().all(|a| *a == 0.0));
    let tiled = render_tiled(&cam, &[], [0.2, 0.3, 0.4], 8).unwrap();
    assert!(tiled.bitwise_eq(&img));
}

#[test]
fn coincident_splats_compose_alpha() {
    let (cam, mean) = centered();
    let g = flat_primitive(mean, 0.2, 0.5, [1.0, 0.0, 0.0]);
    let img = render(&cam, &[g.clone(), g], [0.0; 3]);
    assert!((img.alpha[8 * 16 + 8] - 0.75).abs() < 1e-12);
}

#[test]
fn tiled_matches_reference_and_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let size = [8, 16, 24, 32][trial % 4];
        let cam = test_camera(size);
        let n = rng.gen_range(0..20);
        let prims: Vec<_> = (0..n).map(|_| random_primitive(&mut rng, size, 1)).collect();
        let bg = [rng.gen(), rng.gen(), rng.gen()];
        let reference = render(&cam, &prims, bg);
        assert!(reference.bitwise_eq(&brute_force_render(&cam, &prims, bg)));
        for tile in TILE_SIZES {
            assert!(render_tiled(&cam, &prims, bg, tile).unwrap().bitwise_eq(&reference));
        }
    }
}

#[test]
fn bad_tile_size_is_rejected() {
    let cam = test_camera(8);
    assert!(render_tiled(&cam, &[], [0.0; 3], 12).is_err());
}

#[test]
fn splat_across_tile_boundary_reaches_both_tiles() {
    let cam = test_camera(16);
    let z = 4.0;
    // Projects to x = 8.0, the boundary between tiles of size 8.
    let g = flat_primitive(Vec3::new(0.0, 0.5 * z / 16.0, z), 0.3, 0.8, [1.0, 1.0, 1.0]);
    let img = render_tiled(&cam, &[g], [0.0; 3], 8).unwrap();
    assert!(img.alpha[8 * 16 + 7] > 0.1);
    assert!(img.alpha[8 * 16 + 8] > 0.1);
    assert!((img.alpha[8 * 16 + 7] - img.alpha[8 * 16 + 8]).abs() < 1e-12);
}

#[test]
fn permutation_with_duplicate_depths_is_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = test_camera(16);
    let mut prims: Vec<_> = (0..8).map(|_| random_primitive(&mut rng, 16, 1)).collect();
    // Force three depth ties, one of them between identical primitives.
    prims[1].mean.z = prims[0].mean.z;
    prims[3].mean.z = prims[2].mean.z;
    prims[5] = prims[4].clone();
    let base = render_tiled(&cam, &prims, [0.1; 3], 16).unwrap();
    for _ in 0..10 {
        let mut shuffled = prims.clone();
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        assert!(render_tiled(&cam, &shuffled, [0.1; 3], 16).unwrap().bitwise_eq(&base));
    }
}

#[test]
fn front_opacity_never_increases_back_weight() {
    let (cam, mean) = centered();
    let back = flat_primitive(mean * 2.0, 0.4, 0.9, [0.0, 1.0, 0.0]);
    let mut prev = f64::INFINITY;
    for k in 0..20 {
        let a = 0.05 * k as f64;
        let front = flat_primitive(mean, 0.2, a, [1.0, 0.0, 0.0]);
        let img = render(&cam, &[front, back.clone()], [0.0; 3]);
        let g = img.color[8 * 16 + 8][1];
        assert!(g <= prev + 1e-15);
        prev = g;
    }
}

#[test]
fn alpha_stays_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cam = test_camera(16);
    let mut prims: Vec<_> = (0..40).map(|_| random_primitive(&mut rng, 16, 0)).collect();
    for p in prims.iter_mut() {
        p.opacity = rng.gen_range(0.0..1.0);
    }
    let img = render(&cam, &prims, [0.0; 3]);
    assert!(img.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn small_isotropic_projection() {
    let cam = Camera::pinhole(100.0, 64, 64, Mat3::identity(), Vec3::zero()).unwrap();
    let (sigma, d) = (0.01, 5.0);
    let g = flat_primitive(Vec3::new(0.0, 0.0, d), sigma, 0.9, [1.0; 3]);
    let s = project_gaussian(&cam, &g, 0).unwrap();
    let expected = (100.0 * sigma / d).powi(2);
    assert!(((s.cov2d.m[0][0] - BLUR_FLOOR) / expected - 1.0).abs() < 0.01);
    assert!(((s.cov2d.m[1][1] - BLUR_FLOOR) / expected - 1.0).abs() < 0.01);
    assert!(s.cov2d.m[0][1].abs() < 1e-12);
}

#[test]
fn behind_camera_is_culled() {
    let cam = test_camera(16);
    let g = flat_primitive(Vec3::new(0.0, 0.0, -3.0), 0.2, 0.9, [1.0; 3]);
    assert!(project_gaussian(&cam, &g, 0).is_none());
}

#[test]
fn focal_doubling_doubles_offset() {
    let g = flat_primitive(Vec3::new(0.3, -0.2, 4.0), 0.2, 0.9, [1.0; 3]);
    let a = Camera::pinhole(20.0, 64, 64, Mat3::identity(), Vec3::zero()).unwrap();
    let b = Camera::pinhole(40.0, 64, 64, Mat3::identity(), Vec3::zero()).unwrap();
    let sa = project_gaussian(&a, &g, 0).unwrap();
    let sb = project_gaussian(&b, &g, 0).unwrap();
    assert!(((sb.mean2d.x - 32.0) - 2.0 * (sa.mean2d.x - 32.0)).abs() < 1e-12);
    assert!(((sb.mean2d.y - 32.0) - 2.0 * (sa.mean2d.y - 32.0)).abs() < 1e-12);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cam = test_camera(8);
    let prims: Vec<_> = (0..3).map(|_| random_primitive(&mut rng, 8, 1)).collect();
    let grad = ImageGradient::zeros(8, 8);
    let g = render_backward(&cam, &prims, [0.3; 3], &grad).unwrap();
    assert_eq!(g, RenderGradients::zeros(&prims));
}

#[test]
fn gradient_shape_mismatch_is_an_error() {
    let cam = test_camera(8);
    let grad = ImageGradient::<f64>::zeros(4, 8);
    assert!(render_backward(&cam, &[], [0.0; 3], &grad).is_err());
    let mut grad = ImageGradient::<f64>::zeros(8, 8);
    grad.depth = Some(vec![0.0; 3]);
    assert!(render_backward(&cam, &[], [0.0; 3], &grad).is_err());
}

#[test]
fn opacity_gradient_at_center_is_color_minus_background() {
    let (cam, mean) = centered();
    let c = [0.9, 0.4, 0.1];
    let bg = [0.2, 0.3, 0.5];
    let g = flat_primitive(mean, 0.2, 0.5, c);
    let u = [0.7, -1.3, 2.0];
    let mut grad = ImageGradient::zeros(16, 16);
    grad.color[8 * 16 + 8] = u;
    let out = render_backward(&cam, &[g], bg, &grad).unwrap();
    let expected: f64 = (0..3).map(|ch| u[ch] * (c[ch] - bg[ch])).sum();
    assert!((out.opacity[0] - expected).abs() < 1e-9);
}

#[test]
fn f32_render_matches_f64_closely() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cam = test_camera(16);
    let prims: Vec<_> = (0..6).map(|_| random_primitive(&mut rng, 16, 1)).collect();
    let img = render(&cam, &prims, [0.0; 3]);
    let cam32 = Camera::<f32>::new(cam.intrinsics().cast(), cam.rotation().cast(), cam.translation().cast(), 16, 16).unwrap();
    let prims32: Vec<GaussianPrimitive<f32>> = prims
        .iter()
        .map(|p| GaussianPrimitive {
            mean: p.mean.cast(),
            scale_raw: p.scale_raw.cast(),
            rotation_raw: p.rotation_raw.map(|v| v as f32),
            opacity: p.opacity as f32,
            sh: ShCoefficients::new(1, p.sh.coeffs().iter().map(|c| c.map(|v| v as f32)).collect()).unwrap(),
        })
        .collect();
    let img32 = render_tiled(&cam32, &prims32, [0.0; 3], 8).unwrap();
    let worst = img
        .color
        .iter()
        .flatten()
        .zip(img32.color.iter().flatten())
        .map(|(a, b)| (a - *b as f64).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "worst {worst}");
}
