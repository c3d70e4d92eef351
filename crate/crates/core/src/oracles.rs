//! Independent reference implementations used by tests.
//!
//! Nothing here is used by the library itself. Each function recomputes a
//! quantity along a different route than the production code: the
//! fundamental matrix instead of ray clipping, a per-pixel sort instead of a
//! global sort plus tiles, associated Legendre polynomials instead of the
//! hard-coded SH polynomials, and central differences instead of analytic
//! gradients.

use crate::gaussians::GaussianPrimitive;
use crate::geometry::Camera;
use crate::linalg::{Mat3, Vec2, Vec3};
use crate::rasterizer::{project_gaussian, sort_splats, RenderedImage, Splat2D, MAX_WEIGHT, MIN_TRANSMITTANCE, MIN_WEIGHT};

fn skew(t: Vec3<f64>) -> Mat3<f64> {
    Mat3::from_rows([[0.0, -t.z, t.y], [t.z, 0.0, -t.x], [-t.y, t.x, 0.0]])
}

fn upper_inverse(k: &Mat3<f64>) -> Mat3<f64> {
    // Adjugate / determinant; fine for the well-conditioned test intrinsics.
    let m = &k.m;
    let det = k.det();
    let mut inv = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = match j {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c0, c1) = match i {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            inv.m[i][j] = sign * minor / det;
        }
    }
    inv
}

/// `F` with `x_targetᵀ F x_source = 0` for corresponding homogeneous pixels.
pub fn fundamental_matrix(source: &Camera<f64>, target: &Camera<f64>) -> Mat3<f64> {
    let r_rel = target.rotation().transpose() * *source.rotation();
    let t_rel = target.rotation().transpose().mul_vec(source.center() - target.center());
    let e = skew(t_rel) * r_rel;
    upper_inverse(target.intrinsics()).transpose() * e * upper_inverse(source.intrinsics())
}

/// Distance in pixels from `target_px` to the epipolar line of `source_px`.
pub fn epipolar_line_distance(f: &Mat3<f64>, source_px: Vec2<f64>, target_px: Vec2<f64>) -> f64 {
    let line = f.mul_vec(Vec3::new(source_px.x, source_px.y, 1.0));
    let num = line.x * target_px.x + line.y * target_px.y + line.z;
    num.abs() / (line.x * line.x + line.y * line.y).sqrt()
}

/// Naive renderer: for every pixel, collect every visible splat, sort that
/// pixel's list and composite it.
pub fn brute_force_render(camera: &Camera<f64>, primitives: &[GaussianPrimitive<f64>], background: [f64; 3]) -> RenderedImage<f64> {
    let splats: Vec<Splat2D<f64>> = primitives
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(camera, g, i))
        .collect();
    let (w, h) = (camera.width(), camera.height());
    let mut img = RenderedImage::new(w, h, background);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut list = splats.clone();
            sort_splats(&mut list);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut d = 0.0;
            let mut n = 0;
            for s in &list {
                let w = (s.opacity * s.power_at(px, py).exp()).min(MAX_WEIGHT);
                if w < MIN_WEIGHT {
                    continue;
                }
                let next = t * (1.0 - w);
                if next < MIN_TRANSMITTANCE {
                    break;
                }
                let wt = w * t;
                for ch in 0..3 {
                    c[ch] += s.color[ch] * wt;
                }
                d += s.view_depth * wt;
                n += 1;
                t = next;
            }
            let idx = y * w + x;
            for ch in 0..3 {
                c[ch] += background[ch] * t;
            }
            img.color[idx] = c;
            img.alpha[idx] = 1.0 - t;
            img.depth[idx] = d;
            img.count[idx] = n;
        }
    }
    img
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Associated Legendre polynomial `P_l^m(x)` with the Condon–Shortley phase.
fn assoc_legendre(l: u32, m: u32, x: f64) -> f64 {
    let mut pmm = 1.0;
    if m > 0 {
        let s = (1.0 - x * x).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= -fact * s;
            fact += 2.0;
        }
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = ((2 * ll - 1) as f64 * x * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

/// Real spherical harmonic `Y_l^m` evaluated from spherical angles.
pub fn sh_reference(l: i32, m: i32, v: Vec3<f64>) -> f64 {
    let theta = v.z.clamp(-1.0, 1.0).acos();
    let phi = v.y.atan2(v.x);
    let am = m.unsigned_abs();
    let lu = l as u32;
    let k = ((2 * lu + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(lu - am) / factorial(lu + am)).sqrt();
    let p = assoc_legendre(lu, am, theta.cos());
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => k * p,
        std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * k * p * (m as f64 * phi).cos(),
        std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * k * p * (am as f64 * phi).sin(),
    }
}

/// Central difference of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

