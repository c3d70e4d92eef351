//! 3D Gaussian primitives: covariance from scale/rotation factors, real
//! spherical-harmonics color and ray unprojection.

use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Scalar;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Offset added to the SH reconstruction before clamping at zero.
pub const SH_COLOR_OFFSET: f64 = 0.5;

pub const MAX_SH_DEGREE: usize = 2;
pub const DEFAULT_SH_DEGREE: usize = 1;

pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Per-channel spherical-harmonics coefficients, one RGB triple per basis
/// function in the order `l² + l + m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShCoefficients<T> {
    degree: usize,
    coeffs: Vec<[T; 3]>,
}

impl<T: Scalar> ShCoefficients<T> {
    pub fn new(degree: usize, coeffs: Vec<[T; 3]>) -> Result<Self> {
        if degree > MAX_SH_DEGREE {
            return Err(Error::domain(format!("SH degree {degree} exceeds {MAX_SH_DEGREE}")));
        }
        if coeffs.len() != sh_coeff_count(degree) {
            return Err(Error::shape("ShCoefficients::new", &[coeffs.len()], &[sh_coeff_count(degree)]));
        }
        Ok(Self { degree, coeffs })
    }

    pub fn zeros(degree: usize) -> Result<Self> {
        Self::new(degree, vec![[T::zero(); 3]; sh_coeff_count(degree)])
    }

    /// Degree-0 coefficients that evaluate to `rgb` in every direction.
    pub fn from_rgb(degree: usize, rgb: [T; 3]) -> Result<Self> {
        let mut sh = Self::zeros(degree)?;
        let c0 = T::lit(SH_C0);
        let off = T::lit(SH_COLOR_OFFSET);
        sh.coeffs[0] = [(rgb[0] - off) / c0, (rgb[1] - off) / c0, (rgb[2] - off) / c0];
        Ok(sh)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coeffs(&self) -> &[[T; 3]] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.coeffs
    }

    /// Number of scalar coefficients, `3·(degree+1)²`.
    pub fn len(&self) -> usize {
        3 * self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive<T> {
    pub mean: Vec3<T>,
    /// Log of the per-axis standard deviations.
    pub scale_raw: Vec3<T>,
    /// Unnormalized quaternion `(w, x, y, z)`.
    pub rotation_raw: [T; 4],
    pub opacity: T,
    pub sh: ShCoefficients<T>,
}

impl<T: Scalar> GaussianPrimitive<T> {
    pub fn covariance(&self) -> Result<Mat3<T>> {
        build_covariance(self.scale_raw, self.rotation_raw)
    }

    pub fn is_finite(&self) -> bool {
        self.mean.to_array().iter().all(|v| v.is_finite())
            && self.scale_raw.to_array().iter().all(|v| v.is_finite())
            && self.rotation_raw.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.sh.coeffs.iter().flatten().all(|v| v.is_finite())
    }
}

/// Normalized quaternion and its norm.
pub fn normalize_quaternion<T: Scalar>(q: [T; 4]) -> Result<([T; 4], T)> {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::domain("rotation quaternion has zero norm"));
    }
    Ok(([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm], norm))
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_matrix<T: Scalar>(q: [T; 4]) -> Mat3<T> {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::lit(2.0);
    Mat3::from_rows([
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ])
}

/// `Σ = R·diag(exp(scale_raw))²·Rᵀ` with `R` the rotation of the normalized
/// quaternion.
pub fn build_covariance<T: Scalar>(scale_raw: Vec3<T>, rotation_raw: [T; 4]) -> Result<Mat3<T>> {
    let (q, _) = normalize_quaternion(rotation_raw)?;
    let r = quaternion_matrix(q);
    let s = scale_raw.to_array().map(|v| (v + v).exp());
    let mut cov = Mat3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let v = r.m[i][0] * r.m[j][0] * s[0] + r.m[i][1] * r.m[j][1] * s[1] + r.m[i][2] * r.m[j][2] * s[2];
            cov.m[i][j] = v;
            cov.m[j][i] = v;
        }
    }
    Ok(cov)
}

/// Real SH basis values `Y_k(v)` for `k < (degree+1)²`.
pub fn sh_basis<T: Scalar>(degree: usize, v: Vec3<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(sh_coeff_count(degree));
    out.push(T::lit(SH_C0));
    if degree >= 1 {
        let c1 = T::lit(SH_C1);
        out.push(-c1 * v.y);
        out.push(c1 * v.z);
        out.push(-c1 * v.x);
    }
    if degree >= 2 {
        let (x, y, z) = (v.x, v.y, v.z);
        out.push(T::lit(SH_C2[0]) * x * y);
        out.push(T::lit(SH_C2[1]) * y * z);
        out.push(T::lit(SH_C2[2]) * (T::lit(2.0) * z * z - x * x - y * y));
        out.push(T::lit(SH_C2[3]) * x * z);
        out.push(T::lit(SH_C2[4]) * (x * x - y * y));
    }
    out
}

/// Gradients of the basis polynomials with respect to `(x, y, z)`, treating
/// them as functions on R³.
pub fn sh_basis_grad<T: Scalar>(degree: usize, v: Vec3<T>) -> Vec<Vec3<T>> {
    let z0 = T::zero();
    let mut out = Vec::with_capacity(sh_coeff_count(degree));
    out.push(Vec3::zero());
    if degree >= 1 {
        let c1 = T::lit(SH_C1);
        out.push(Vec3::new(z0, -c1, z0));
        out.push(Vec3::new(z0, z0, c1));
        out.push(Vec3::new(-c1, z0, z0));
    }
    if degree >= 2 {
        let (x, y, z) = (v.x, v.y, v.z);
        let two = T::lit(2.0);
        let c = SH_C2.map(T::lit);
        out.push(Vec3::new(c[0] * y, c[0] * x, z0));
        out.push(Vec3::new(z0, c[1] * z, c[1] * y));
        out.push(Vec3::new(-two * c[2] * x, -two * c[2] * y, two * two * c[2] * z));
        out.push(Vec3::new(c[3] * z, z0, c[3] * x));
        out.push(Vec3::new(two * c[4] * x, -two * c[4] * y, z0));
    }
    out
}

fn check_unit<T: Scalar>(v: Vec3<T>) -> Result<()> {
    if (v.norm() - T::one()).abs() > T::VALIDATION_TOL {
        return Err(Error::domain(format!("view direction has norm {}", v.norm())));
    }
    Ok(())
}

/// `0.5 + Σ_k c_k·Y_k(v)` per channel, without the non-negativity clamp.
pub fn eval_sh_unclamped<T: Scalar>(sh: &ShCoefficients<T>, view_dir: Vec3<T>) -> Result<[T; 3]> {
    check_unit(view_dir)?;
    Ok(sh_radiance(sh, view_dir))
}

pub(crate) fn sh_radiance<T: Scalar>(sh: &ShCoefficients<T>, view_dir: Vec3<T>) -> [T; 3] {
    let basis = sh_basis(sh.degree, view_dir);
    let off = T::lit(SH_COLOR_OFFSET);
    let mut rgb = [off; 3];
    for (y, c) in basis.iter().zip(&sh.coeffs) {
        for ch in 0..3 {
            rgb[ch] += *y * c[ch];
        }
    }
    rgb
}

/// View-dependent color, `max(0, 0.5 + Σ_k c_k·Y_k(v))` per channel.
pub fn eval_sh<T: Scalar>(sh: &ShCoefficients<T>, view_dir: Vec3<T>) -> Result<[T; 3]> {
    Ok(eval_sh_unclamped(sh, view_dir)?.map(|c| c.max(T::zero())))
}

/// Point at `depth` along `ray`.
pub fn unproject<T: Scalar>(ray: &Ray<T>, depth: T) -> Result<Vec3<T>> {
    if !(depth > T::zero()) {
        return Err(Error::domain(format!("unproject needs positive depth, got {depth}")));
    }
    Ok(ray.origin + ray.direction * depth)
}
