//! Pinhole cameras, pixel rays, projection, epipolar sampling and two-ray
//! triangulation.
//!
//! Pixel coordinates are continuous; integer pixel `(i, j)` has its center at
//! `(i + 0.5, j + 0.5)`. Depths along a [`Ray`] are Euclidean distances from
//! the ray origin (the direction has unit norm); [`Camera::project`] reports
//! the camera-frame z coordinate.

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec2, Vec3};
use crate::scalar::Scalar;

/// Default number of samples taken along an epipolar line.
pub const DEFAULT_EPIPOLAR_SAMPLES: usize = 32;

/// Pixel inset used when clipping epipolar lines to the target image.
const CLIP_INSET_PX: f64 = 1e-7;

/// Cross-product norm below which two rays count as parallel.
const PARALLEL_RAY_THRESHOLD: f64 = 1e-9;

/// A pinhole camera. `rotation`/`translation` map camera coordinates to world
/// coordinates: `x_world = rotation * x_cam + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    intrinsics: Mat3<T>,
    rotation: Mat3<T>,
    translation: Vec3<T>,
    width: usize,
    height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpipolarSample<T> {
    /// Continuous pixel coordinate in the target image.
    pub pixel: Vec2<T>,
    /// Depth along the source ray whose projection lands on `pixel`.
    pub depth: T,
}

/// Samples of the epipolar line induced in a target view by one source pixel.
///
/// Samples are ordered from near to far and are uniformly spaced in source-ray
/// disparity (inverse depth). An empty sample list means the line never enters
/// the target image between the near and far planes.
#[derive(Clone, Debug, PartialEq)]
pub struct EpipolarSegment<T> {
    pub source_view: usize,
    pub target_view: usize,
    pub pixel: Vec2<T>,
    pub samples: Vec<EpipolarSample<T>>,
}

impl<T: Scalar> EpipolarSegment<T> {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn with_views(mut self, source_view: usize, target_view: usize) -> Self {
        self.source_view = source_view;
        self.target_view = target_view;
        self
    }
}

impl<T: Scalar> Camera<T> {
    /// Validates and builds a camera.
    ///
    /// The rotation must be orthonormal with determinant +1 and the intrinsics
    /// upper-triangular with positive focal entries.
    pub fn new(
        intrinsics: Mat3<T>,
        rotation: Mat3<T>,
        translation: Vec3<T>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::domain("camera image dimensions must be positive"));
        }
        let k = &intrinsics.m;
        if !(k[0][0] > T::zero() && k[1][1] > T::zero() && k[2][2] > T::zero()) {
            return Err(Error::domain("intrinsics need positive diagonal entries"));
        }
        if k[1][0] != T::zero() || k[2][0] != T::zero() || k[2][1] != T::zero() {
            return Err(Error::domain("intrinsics must be upper-triangular"));
        }
        let tol = T::VALIDATION_TOL;
        let rtr = rotation.transpose() * rotation;
        if rtr.max_abs_diff(&Mat3::identity()) > tol {
            return Err(Error::domain("rotation is not orthonormal"));
        }
        if (rotation.det() - T::one()).abs() > tol {
            return Err(Error::domain("rotation must have determinant +1"));
        }
        // Projectively equivalent intrinsics with K[2][2] = 1.
        let intrinsics = intrinsics.scale(T::one() / k[2][2]);
        let finite = intrinsics
            .to_row_vec()
            .into_iter()
            .chain(rotation.to_row_vec())
            .chain(translation.to_array())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain("camera parameters must be finite"));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera with focal length `focal`, principal point at the image center
    /// and the given world-from-camera pose.
    pub fn pinhole(
        focal: T,
        width: usize,
        height: usize,
        rotation: Mat3<T>,
        translation: Vec3<T>,
    ) -> Result<Self> {
        let half = T::lit(0.5);
        let k = Mat3::from_rows([
            [focal, T::zero(), T::lit(width as f64) * half],
            [T::zero(), focal, T::lit(height as f64) * half],
            [T::zero(), T::zero(), T::one()],
        ]);
        Self::new(k, rotation, translation, width, height)
    }

    pub fn intrinsics(&self) -> &Mat3<T> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3<T> {
        self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        self.translation
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Continuous coordinate of the center of integer pixel `(i, j)`.
    pub fn pixel_center(i: usize, j: usize) -> Vec2<T> {
        Vec2::new(T::lit(i as f64 + 0.5), T::lit(j as f64 + 0.5))
    }

    pub fn contains(&self, pixel: Vec2<T>) -> bool {
        pixel.x >= T::zero()
            && pixel.y >= T::zero()
            && pixel.x < T::lit(self.width as f64)
            && pixel.y < T::lit(self.height as f64)
    }

    /// Same pose, intrinsics rescaled for an image downsampled by `factor`.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Shape {
                op: "downsampled",
                lhs: vec![self.height, self.width],
                rhs: vec![factor],
            });
        }
        let inv = T::one() / T::lit(factor as f64);
        let mut k = self.intrinsics;
        for j in 0..3 {
            k.m[0][j] *= inv;
            k.m[1][j] *= inv;
        }
        Ok(Self {
            intrinsics: k,
            rotation: self.rotation,
            translation: self.translation,
            width: self.width / factor,
            height: self.height / factor,
        })
    }

    /// Copy with the translation replaced.
    pub fn with_translation(&self, translation: Vec3<T>) -> Self {
        Self {
            translation,
            ..self.clone()
        }
    }

    /// `K⁻¹ [u, v, 1]ᵀ` in camera coordinates.
    fn back_project(&self, pixel: Vec2<T>) -> Vec3<T> {
        let k = &self.intrinsics.m;
        let y = (pixel.y - k[1][2]) / k[1][1];
        let x = (pixel.x - k[0][1] * y - k[0][2]) / k[0][0];
        Vec3::new(x, y, T::one())
    }

    /// World-space ray through a continuous pixel coordinate.
    pub fn ray(&self, pixel: Vec2<T>) -> Result<Ray<T>> {
        if !self.contains(pixel) {
            return Err(Error::domain(format!(
                "pixel ({}, {}) outside {}x{} image",
                pixel.x, pixel.y, self.width, self.height
            )));
        }
        Ok(self.ray_unchecked(pixel))
    }

    pub(crate) fn ray_unchecked(&self, pixel: Vec2<T>) -> Ray<T> {
        let dir_cam = self.back_project(pixel);
        Ray {
            origin: self.translation,
            direction: self.rotation.mul_vec(dir_cam).normalized(),
        }
    }

    /// World point to camera coordinates.
    pub fn world_to_camera(&self, point: Vec3<T>) -> Vec3<T> {
        self.rotation.transpose().mul_vec(point - self.translation)
    }

    /// Perspective projection of a world point: `(pixel, camera-frame z)`.
    pub fn project(&self, point: Vec3<T>) -> Result<(Vec2<T>, T)> {
        let pc = self.world_to_camera(point);
        if !(pc.z > T::zero()) {
            return Err(Error::BehindCamera(pc.z.to_f64_lossy()));
        }
        let h = self.intrinsics.mul_vec(pc);
        Ok((Vec2::new(h.x / h.z, h.y / h.z), pc.z))
    }
}

/// World-space ray through `pixel` of `camera`.
pub fn camera_ray<T: Scalar>(camera: &Camera<T>, pixel: Vec2<T>) -> Result<Ray<T>> {
    camera.ray(pixel)
}

pub fn project<T: Scalar>(camera: &Camera<T>, point: Vec3<T>) -> Result<(Vec2<T>, T)> {
    camera.project(point)
}

/// Closed interval `[lo, hi]` shrunk to where `slope * x + offset >= 0`.
fn clip_halfline<T: Scalar>(lo: T, hi: T, slope: T, offset: T) -> (T, T) {
    if slope > T::zero() {
        (lo.max(-offset / slope), hi)
    } else if slope < T::zero() {
        (lo, hi.min(-offset / slope))
    } else if offset >= T::zero() {
        (lo, hi)
    } else {
        (T::one(), T::zero())
    }
}

/// Samples the epipolar line of `pixel` (a source-view coordinate) inside the
/// target view.
///
/// Source-ray depths in `[near, far]` are clipped to those projecting inside
/// the target image, then `count` samples are placed uniformly in disparity
/// over the surviving range. Each sample records its own source-ray depth.
pub fn epipolar_segment<T: Scalar>(
    source: &Camera<T>,
    target: &Camera<T>,
    pixel: Vec2<T>,
    near: T,
    far: T,
    count: usize,
) -> Result<EpipolarSegment<T>> {
    if !(near > T::zero() && near < far) {
        return Err(Error::domain(format!(
            "epipolar range needs 0 < near < far, got [{near}, {far}]"
        )));
    }
    if count == 0 {
        return Err(Error::domain("epipolar sample count must be positive"));
    }
    let baseline = (source.center() - target.center()).norm();
    if !(baseline > T::zero()) {
        return Err(Error::domain("source and target cameras share a center"));
    }
    let ray = source.ray(pixel)?;

    // Target homogeneous coordinates of o + D·d are a + D·b; scaling by the
    // disparity ρ = 1/D gives ρ·a + b, which is affine in ρ.
    let k = target.intrinsics();
    let a = k.mul_vec(target.world_to_camera(ray.origin));
    let b = k.mul_vec(target.rotation().transpose().mul_vec(ray.direction));

    let inset = T::lit(CLIP_INSET_PX);
    let w = T::lit(target.width() as f64) - inset;
    let h = T::lit(target.height() as f64) - inset;
    let (mut lo, mut hi) = (T::one() / far, T::one() / near);
    // In front of the target camera.
    (lo, hi) = clip_halfline(lo, hi, a.z, b.z);
    // inset <= u <= w and inset <= v <= h, multiplied through by the
    // (positive) homogeneous depth.
    (lo, hi) = clip_halfline(lo, hi, a.x - inset * a.z, b.x - inset * b.z);
    (lo, hi) = clip_halfline(lo, hi, w * a.z - a.x, w * b.z - b.x);
    (lo, hi) = clip_halfline(lo, hi, a.y - inset * a.z, b.y - inset * b.z);
    (lo, hi) = clip_halfline(lo, hi, h * a.z - a.y, h * b.z - b.y);

    let mut segment = EpipolarSegment {
        source_view: 0,
        target_view: 1,
        pixel,
        samples: Vec::new(),
    };
    let span = hi - lo;
    if !(span > hi * T::lit(1e-12)) {
        return Ok(segment);
    }

    let disparities: Vec<T> = if count == 1 {
        vec![T::lit(0.5) * (lo + hi)]
    } else {
        let step = span / T::lit((count - 1) as f64);
        (0..count)
            .map(|l| {
                if l + 1 == count {
                    lo
                } else {
                    hi - step * T::lit(l as f64)
                }
            })
            .collect()
    };

    let wmax = T::lit(target.width() as f64);
    let hmax = T::lit(target.height() as f64);
    for rho in disparities {
        let den = rho * a.z + b.z;
        let mut px = Vec2::new((rho * a.x + b.x) / den, (rho * a.y + b.y) / den);
        // Guard against rounding at the clip boundary.
        px.x = px.x.max(T::zero()).min(wmax - inset);
        px.y = px.y.max(T::zero()).min(hmax - inset);
        segment.samples.push(EpipolarSample {
            pixel: px,
            depth: T::one() / rho,
        });
    }
    Ok(segment)
}

/// Depth along the source pixel's ray of the midpoint of closest approach
/// between the two pixel rays.
pub fn triangulate_depth<T: Scalar>(
    source: &Camera<T>,
    source_pixel: Vec2<T>,
    target: &Camera<T>,
    target_pixel: Vec2<T>,
) -> Result<T> {
    let r1 = source.ray(source_pixel)?;
    let r2 = target.ray(target_pixel)?;
    triangulate_rays(&r1, &r2)
}

/// Ray-parameter of `r1` at the closest approach to `r2`.
pub fn triangulate_rays<T: Scalar>(r1: &Ray<T>, r2: &Ray<T>) -> Result<T> {
    let w0 = r1.origin - r2.origin;
    let baseline = w0.norm();
    let scale = r1.origin.norm().max(r2.origin.norm()).max(T::one());
    if !(baseline > scale * T::epsilon()) {
        return Err(Error::DegenerateTriangulation(
            "rays share an origin".to_string(),
        ));
    }
    let cross = r1.direction.cross(r2.direction);
    if cross.norm() < T::lit(PARALLEL_RAY_THRESHOLD) {
        return Err(Error::DegenerateTriangulation(format!(
            "rays are parallel (|d1 x d2| = {})",
            cross.norm()
        )));
    }
    let a = r1.direction.dot(r1.direction);
    let b = r1.direction.dot(r2.direction);
    let c = r2.direction.dot(r2.direction);
    let d = r1.direction.dot(w0);
    let e = r2.direction.dot(w0);
    let denom = a * c - b * b;
    Ok((b * e - c * d) / denom)
}

/// Multiplies every camera translation by `s`.
pub fn scale_scene<T: Scalar>(cameras: &[Camera<T>], s: T) -> Result<Vec<Camera<T>>> {
    if !(s > T::zero()) || !s.is_finite() {
        return Err(Error::domain(format!("scene scale must be positive, got {s}")));
    }
    Ok(cameras
        .iter()
        .map(|c| c.with_translation(c.translation() * s))
        .collect())
}

/// Rounds `x` to `bits` significant mantissa bits (round half away from zero).
///
/// Values that differ only in the last few ulps, such as translations that
/// went through `scale_scene(·, s)` and then had `s` divided back out, snap to
/// the same representative.
pub fn snap_mantissa(x: f64, bits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let exp = x.abs().log2().floor() as i32;
    let quantum = 2f64.powi(exp - bits);
    (x / quantum).round() * quantum
}

/// Mantissa bits kept by [`canonicalize`].
pub const CANONICAL_BITS: i32 = 36;

/// A camera set expressed in units of its near plane.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalScene {
    pub cameras: Vec<Camera<f64>>,
    /// Always 1.
    pub near: f64,
    pub far: f64,
    /// World units per canonical unit (the original near plane).
    pub unit: f64,
}

/// Divides translations and `far` by `near`, snapping to [`CANONICAL_BITS`]
/// mantissa bits so that scenes differing only by a global scale (poses and
/// near/far together) map to bitwise-identical canonical scenes.
pub fn canonicalize(cameras: &[Camera<f64>], near: f64, far: f64) -> Result<CanonicalScene> {
    if !(near > 0.0 && near < far && far.is_finite()) {
        return Err(Error::domain(format!("canonicalize needs 0 < near < far, got [{near}, {far}]")));
    }
    let snap = |v: f64| snap_mantissa(v / near, CANONICAL_BITS);
    let cameras = cameras
        .iter()
        .map(|c| {
            let t = c.translation();
            c.with_translation(Vec3::new(snap(t.x), snap(t.y), snap(t.z)))
        })
        .collect();
    Ok(CanonicalScene {
        cameras,
        near: 1.0,
        far: snap(far),
        unit: near,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera(t: Vec3<f64>) -> Camera<f64> {
        Camera::pinhole(50.0, 64, 48, Mat3::identity(), t).unwrap()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = axis_camera(Vec3::zero());
        let ray = cam.ray(Vec2::new(32.0, 24.0)).unwrap();
        assert_eq!(ray.direction, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(ray.origin, Vec3::zero());
    }

    #[test]
    fn translated_camera_keeps_direction() {
        let px = Vec2::new(10.25, 40.5);
        let a = axis_camera(Vec3::zero()).ray(px).unwrap();
        let t = Vec3::new(1.0, -2.0, 3.5);
        let b = axis_camera(t).ray(px).unwrap();
        assert_eq!(b.origin, t);
        assert_eq!(a.direction, b.direction);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let cam = axis_camera(Vec3::zero());
        assert!(matches!(cam.ray(Vec2::new(64.0, 1.0)), Err(Error::Domain(_))));
        assert!(matches!(cam.ray(Vec2::new(-0.1, 1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn projection_of_axis_point() {
        let cam = axis_camera(Vec3::zero());
        let (px, depth) = cam.project(Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, Vec2::new(32.0, 24.0));
        assert_eq!(depth, 2.0);
        assert!(matches!(
            cam.project(Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let mut r = Mat3::identity();
        r.m[0][0] = -1.0;
        assert!(Camera::pinhole(10.0, 4, 4, r, Vec3::zero()).is_err());
        let mut k = Mat3::identity();
        k.m[1][0] = 0.5;
        assert!(Camera::new(k, Mat3::identity(), Vec3::zero(), 4, 4).is_err());
        assert!(Camera::pinhole(-1.0, 4, 4, Mat3::identity(), Vec3::zero()).is_err());
    }

    #[test]
    fn rectified_pair_gives_horizontal_segment() {
        let src = axis_camera(Vec3::zero());
        let tgt = axis_camera(Vec3::new(0.3, 0.0, 0.0));
        let seg = epipolar_segment(&src, &tgt, Vec2::new(20.5, 13.5), 1.0, 50.0, 16).unwrap();
        assert_eq!(seg.len(), 16);
        for s in &seg.samples {
            assert!((s.pixel.y - 13.5).abs() < 1e-9);
        }
        for w in seg.samples.windows(2) {
            assert!(w[1].depth > w[0].depth);
        }
    }

    #[test]
    fn segment_fully_outside_is_empty() {
        let src = axis_camera(Vec3::zero());
        // Target far to the side, looking the same way: near-plane points of a
        // left-edge ray project left of its image.
        let tgt = axis_camera(Vec3::new(100.0, 0.0, 0.0));
        let seg = epipolar_segment(&src, &tgt, Vec2::new(0.5, 24.0), 1.0, 2.0, 8).unwrap();
        assert!(seg.is_empty());
    }

    #[test]
    fn single_sample_segment() {
        let src = axis_camera(Vec3::zero());
        let tgt = axis_camera(Vec3::new(0.2, 0.0, 0.0));
        let seg = epipolar_segment(&src, &tgt, Vec2::new(32.5, 24.5), 1.0, 10.0, 1).unwrap();
        assert_eq!(seg.len(), 1);
    }

    #[test]
    fn segment_preconditions() {
        let src = axis_camera(Vec3::zero());
        assert!(epipolar_segment(&src, &src, Vec2::new(1.0, 1.0), 1.0, 2.0, 4).is_err());
        let tgt = axis_camera(Vec3::new(1.0, 0.0, 0.0));
        assert!(epipolar_segment(&src, &tgt, Vec2::new(1.0, 1.0), 2.0, 1.0, 4).is_err());
        assert!(epipolar_segment(&src, &tgt, Vec2::new(1.0, 1.0), 1.0, 2.0, 0).is_err());
    }

    #[test]
    fn identical_centers_are_degenerate() {
        let cam = axis_camera(Vec3::new(1.0, 1.0, 1.0));
        let err = triangulate_depth(&cam, Vec2::new(3.0, 3.0), &cam, Vec2::new(40.0, 7.0));
        assert!(matches!(err, Err(Error::DegenerateTriangulation(_))));
    }

    #[test]
    fn parallel_rays_are_degenerate() {
        let a = axis_camera(Vec3::zero());
        let b = axis_camera(Vec3::new(1.0, 0.0, 0.0));
        let err = triangulate_depth(&a, Vec2::new(32.0, 24.0), &b, Vec2::new(32.0, 24.0));
        assert!(matches!(err, Err(Error::DegenerateTriangulation(_))));
    }

    #[test]
    fn scale_scene_identity_and_inverse() {
        let cams = vec![
            axis_camera(Vec3::new(0.1, 0.2, 0.3)),
            axis_camera(Vec3::new(-1.0, 0.5, 2.0)),
        ];
        assert_eq!(scale_scene(&cams, 1.0).unwrap(), cams);
        let back = scale_scene(&scale_scene(&cams, 2.0).unwrap(), 0.5).unwrap();
        for (a, b) in back.iter().zip(&cams) {
            assert!((a.translation() - b.translation()).norm() < 1e-12);
            assert_eq!(a.rotation(), b.rotation());
            assert_eq!(a.intrinsics(), b.intrinsics());
        }
        assert!(scale_scene(&cams, 0.0).is_err());
        assert!(scale_scene(&cams, -2.0).is_err());
    }

    #[test]
    fn downsampled_camera_maps_pixel_centers() {
        let cam = axis_camera(Vec3::zero());
        let small = cam.downsampled(4).unwrap();
        assert_eq!((small.width(), small.height()), (16, 12));
        let p = Vec3::new(0.3, -0.2, 3.0);
        let (full, _) = cam.project(p).unwrap();
        let (down, _) = small.project(p).unwrap();
        assert!((full.x - 4.0 * down.x).abs() < 1e-12);
        assert!((full.y - 4.0 * down.y).abs() < 1e-12);
        assert!(cam.downsampled(5).is_err());
    }

    #[test]
    fn snapping_merges_nearby_values() {
        let x = 0.1 + 0.2;
        assert_eq!(snap_mantissa(x, 36), snap_mantissa(0.3, 36));
        assert_eq!(snap_mantissa(0.0, 36), 0.0);
        assert_eq!(snap_mantissa(-1.5, 36), -1.5);
    }
}
