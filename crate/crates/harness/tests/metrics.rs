use pairsplat::autodiff::{Tape, Tensor};
use pairsplat_harness::metrics::{psnr, ssim, PSNR_CAP};
use pairsplat_harness::regularizer::{tv_depth_regularizer, tv_energy, EDGE_SHARPNESS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: usize = 24;
const W: usize = 20;

fn image(f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(&[H, W, 3], |k| {
        let (p, c) = (k / 3, k % 3);
        f((p / W) as f64, (p % W) as f64, c as f64)
    })
}

/// The three fixed test pairs, also evaluated with skimage's
/// `structural_similarity(gaussian_weights=True, sigma=1.5,
/// use_sample_covariance=False, data_range=1)`.
fn fixed_pairs() -> Vec<(Tensor, Tensor, f64)> {
    let a = image(|i, j, c| 0.5 + 0.4 * (0.3 * i + 0.7 * j + c).sin());
    let b = image(|i, j, c| (0.5 + 0.4 * (0.3 * i + 0.7 * j + c).sin() + 0.1 * (1.3 * i * j + c).sin()).clamp(0.0, 1.0));
    let d = image(|i, j, c| 0.5 + 0.45 * (0.21 * i * i - 0.5 * j + 2.0 * c).cos());
    let e = image(|_, _, _| 0.5);
    vec![
        (a.clone(), b, 0.9591304811456601),
        (a, d.clone(), -0.026768579340575634),
        (d, e, 0.010067767104880667),
    ]
}

/// Direct 2D-window SSIM: every fully-inside 11×11 window, weights
/// recomputed per window, no separability.
fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let mut g = [[0.0; 11]; 11];
    let mut total_w = 0.0;
    for (y, row) in g.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let r2 = ((y as f64 - 5.0).powi(2) + (x as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *v = (-r2).exp();
            total_w += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let at = |t: &Tensor, y: usize, x: usize, c: usize| t.data()[(y * w + x) * 3 + c];
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..3 {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let k = g[dy][dx] / total_w;
                        let (p, q) = (at(a, y0 + dy, x0 + dx, c), at(b, y0 + dy, x0 + dx, c));
                        mx += k * p;
                        my += k * q;
                        sxx += k * p * p;
                        syy += k * q * q;
                        sxy += k * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn identical_images_cap_psnr_and_unit_ssim() {
    let (a, ..) = fixed_pairs().remove(0);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn uniform_offset_is_twenty_db() {
    let a = image(|_, _, _| 0.4);
    let b = image(|_, _, _| 0.5);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn gray_prediction_matches_hand_formula() {
    let target = image(|i, j, c| ((i + 2.0 * j + c) % 7.0) / 7.0);
    let gray = image(|_, _, _| 0.5);
    let mse: f64 = target.data().iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>() / target.len() as f64;
    assert!((psnr(&gray, &target).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
}

#[test]
fn ssim_matches_independent_and_golden_values() {
    for (a, b, golden) in fixed_pairs() {
        let ours = ssim(&a, &b).unwrap();
        assert!((ours - ssim_reference(&a, &b)).abs() < 1e-4, "reference");
        assert!((ours - golden).abs() < 1e-4, "golden {golden} vs {ours}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::from_fn(&[H, W, 3], |_| rng.gen_range(0.0..1.0));
    let b = Tensor::from_fn(&[H, W, 3], |_| rng.gen_range(0.0..1.0));
    assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-4);
}

#[test]
fn metric_shape_errors() {
    let a = Tensor::zeros(&[12, 12, 3]);
    let b = Tensor::zeros(&[12, 13, 3]);
    assert!(psnr(&a, &b).is_err());
    assert!(ssim(&a, &b).is_err());
    let small = Tensor::zeros(&[8, 8, 3]);
    assert!(ssim(&small, &small).is_err());
}

#[test]
fn constant_depth_has_zero_tv() {
    let img = image(|i, j, c| 0.5 + 0.4 * (i * 0.3 + j * 0.1 + c).sin());
    assert_eq!(tv_energy(&vec![3.0; H * W], &img, EDGE_SHARPNESS).unwrap(), 0.0);
}

#[test]
fn depth_step_on_image_edge_is_nearly_free() {
    let depth: Vec<f64> = (0..H * W).map(|p| if p % W < W / 2 { 2.0 } else { 6.0 }).collect();
    let edge = image(|_, j, _| if (j as usize) < W / 2 { 0.0 } else { 1.0 });
    let flat = image(|_, _, _| 0.5);
    let on_edge = tv_energy(&depth, &edge, EDGE_SHARPNESS).unwrap();
    let off_edge = tv_energy(&depth, &flat, EDGE_SHARPNESS).unwrap();
    assert!((off_edge - 4.0 * H as f64).abs() < 1e-9);
    assert!(on_edge < 1e-9 * off_edge, "{on_edge}");
}

#[test]
fn tv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (6, 5);
    let img = Tensor::from_fn(&[h, w, 3], |_| rng.gen_range(0.0..1.0));
    let depth = Tensor::from_fn(&[h * w, 1], |_| rng.gen_range(1.0..4.0));
    let tape = Tape::new();
    let d = tape.leaf(depth.clone());
    let loss = tv_depth_regularizer(d, &img, 2.0).unwrap();
    assert!((loss.item().unwrap() - tv_energy(depth.data(), &img, 2.0).unwrap()).abs() < 1e-12);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(d).unwrap();
    let step = 1e-6;
    for k in 0..depth.len() {
        let mut v = depth.data().to_vec();
        v[k] += step;
        let plus = tv_energy(&v, &img, 2.0).unwrap();
        v[k] -= 2.0 * step;
        let minus = tv_energy(&v, &img, 2.0).unwrap();
        let numeric = (plus - minus) / (2.0 * step);
        assert!((numeric - g.data()[k]).abs() < 1e-6 * numeric.abs().max(1.0), "{k}");
    }
}
