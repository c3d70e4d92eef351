use crate::gaussians::{normalize_quaternion, quaternion_matrix, sh_basis, GaussianPrimitive, SH_COLOR_OFFSET};
use crate::geometry::Camera;
use crate::linalg::{Mat2, Mat3, Vec2, Vec3};
use crate::scalar::Scalar;

use super::{BLUR_FLOOR, MIN_WEIGHT, NEAR_CULL};

/// A primitive projected into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D<T> {
    /// Position of the source primitive in the input list.
    pub index: usize,
    pub mean2d: Vec2<T>,
    /// Screen-space covariance including the blur floor.
    pub cov2d: Mat2<T>,
    /// Inverse of `cov2d`.
    pub conic: Mat2<T>,
    pub view_depth: T,
    pub color: [T; 3],
    pub opacity: T,
    /// Half-width of the square outside which the weight is below the skip
    /// threshold.
    pub radius: T,
}

impl<T: Scalar> Splat2D<T> {
    /// Gaussian falloff exponent `-½ dᵀ Σ₂⁻¹ d` at a pixel coordinate.
    #[inline(always)]
    pub fn power_at(&self, px: T, py: T) -> T {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let a = self.conic.m[0][0];
        let b = self.conic.m[0][1];
        let c = self.conic.m[1][1];
        T::lit(-0.5) * (a * dx * dx + c * dy * dy) - b * dx * dy
    }

    /// Screen-space bounding box `[x0, x1) × [y0, y1)` of covered pixel
    /// indices, clipped to the image.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        // Pixel i has center i + 0.5.
        let half = T::lit(0.5);
        let lo_x = (self.mean2d.x - self.radius - half).ceil();
        let hi_x = (self.mean2d.x + self.radius - half).floor();
        let lo_y = (self.mean2d.y - self.radius - half).ceil();
        let hi_y = (self.mean2d.y + self.radius - half).floor();
        let w = T::lit(width as f64);
        let h = T::lit(height as f64);
        if hi_x < T::zero() || hi_y < T::zero() || lo_x >= w || lo_y >= h {
            return None;
        }
        let x0 = lo_x.max(T::zero()).to_usize().unwrap_or(0);
        let y0 = lo_y.max(T::zero()).to_usize().unwrap_or(0);
        let x1 = (hi_x.min(w - T::one()).to_usize().unwrap_or(0) + 1).min(width);
        let y1 = (hi_y.min(h - T::one()).to_usize().unwrap_or(0) + 1).min(height);
        if x0 >= x1 || y0 >= y1 {
            return None;
        }
        Some((x0, x1, y0, y1))
    }
}

/// Intermediate quantities of a projection, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ProjectionCache<T> {
    pub p_cam: Vec3<T>,
    /// Rows of the 2×3 perspective Jacobian.
    pub jac: [Vec3<T>; 2],
    pub cov_cam: Mat3<T>,
    pub rot: Mat3<T>,
    pub scales: [T; 3],
    pub q_unit: [T; 4],
    pub q_norm: T,
    pub view_dir: Vec3<T>,
    pub view_dist: T,
    pub basis: Vec<T>,
    /// Channels where the SH color was not clamped at zero.
    pub color_active: [bool; 3],
}

/// Projects a primitive into `camera`; `None` when it is culled (behind the
/// near-cull depth, below the skip opacity, invalid, or entirely off-screen).
pub fn project_gaussian<T: Scalar>(camera: &Camera<T>, g: &GaussianPrimitive<T>, index: usize) -> Option<Splat2D<T>> {
    project_with_cache(camera, g, index).map(|(s, _)| s)
}

pub(crate) fn project_with_cache<T: Scalar>(
    camera: &Camera<T>,
    g: &GaussianPrimitive<T>,
    index: usize,
) -> Option<(Splat2D<T>, ProjectionCache<T>)> {
    if !(g.opacity * T::lit(1.0 / MIN_WEIGHT) > T::one()) {
        return None;
    }
    let p = camera.world_to_camera(g.mean);
    if !(p.z > T::lit(NEAR_CULL)) {
        return None;
    }
    let (q_unit, q_norm) = normalize_quaternion(g.rotation_raw).ok()?;
    let rot = quaternion_matrix(q_unit);
    let scales = g.scale_raw.to_array().map(|v| v.exp());

    // Σ = M Mᵀ with M = R·S.
    let mut m = rot;
    for row in m.m.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= scales[j];
        }
    }
    let cov = m * m.transpose();
    let w = camera.rotation().transpose();
    let cov_cam = w * cov * w.transpose();

    let k = camera.intrinsics();
    let (fx, skew, fy) = (k.m[0][0], k.m[0][1], k.m[1][1]);
    let inv_z = T::one() / p.z;
    let inv_z2 = inv_z * inv_z;
    let jac = [
        Vec3::new(fx * inv_z, skew * inv_z, -(fx * p.x + skew * p.y) * inv_z2),
        Vec3::new(T::zero(), fy * inv_z, -fy * p.y * inv_z2),
    ];
    let jc = [cov_cam.transpose().mul_vec(jac[0]), cov_cam.transpose().mul_vec(jac[1])];
    let blur = T::lit(BLUR_FLOOR);
    let c00 = jc[0].dot(jac[0]) + blur;
    let c01 = jc[0].dot(jac[1]);
    let c11 = jc[1].dot(jac[1]) + blur;
    let cov2d = Mat2::new(c00, c01, c01, c11);
    let conic = cov2d.inverse()?;

    let mean2d = Vec2::new(
        fx * p.x * inv_z + skew * p.y * inv_z + k.m[0][2],
        fy * p.y * inv_z + k.m[1][2],
    );

    // Largest radius at which α·exp(-½ r²/λ_max) can still reach the skip
    // threshold, plus a one-pixel margin.
    let (lambda_max, _) = cov2d.sym_eigenvalues();
    let log_ratio = (g.opacity * T::lit(1.0 / MIN_WEIGHT)).ln();
    let radius = (T::lit(2.0) * log_ratio * lambda_max).sqrt() + T::one();
    if !radius.is_finite() || !mean2d.x.is_finite() || !mean2d.y.is_finite() {
        return None;
    }

    let offset = g.mean - camera.center();
    let view_dist = offset.norm();
    let view_dir = offset * (T::one() / view_dist);
    let basis = sh_basis(g.sh.degree(), view_dir);
    let mut color = [T::lit(SH_COLOR_OFFSET); 3];
    for (y, c) in basis.iter().zip(g.sh.coeffs()) {
        for ch in 0..3 {
            color[ch] += *y * c[ch];
        }
    }
    let color_active = color.map(|c| c > T::zero());
    let color = color.map(|c| c.max(T::zero()));

    let splat = Splat2D {
        index,
        mean2d,
        cov2d,
        conic,
        view_depth: p.z,
        color,
        opacity: g.opacity,
        radius,
    };
    if splat.pixel_bounds(camera.width(), camera.height()).is_none() {
        return None;
    }
    let cache = ProjectionCache {
        p_cam: p,
        jac,
        cov_cam,
        rot,
        scales,
        q_unit,
        q_norm,
        view_dir,
        view_dist,
        basis,
        color_active,
    };
    Some((splat, cache))
}
