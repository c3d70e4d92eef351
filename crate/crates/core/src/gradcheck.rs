//! Finite-difference verification of the analytic render gradients.
//!
//! Used by the `grad-check` command and by the test suites. Scenes are drawn
//! so that no splat sits near a clamp, skip or termination threshold, where
//! the forward pass is not differentiable.

use std::fmt;

use rand::Rng;

use crate::gaussians::{GaussianPrimitive, ShCoefficients};
use crate::geometry::Camera;
use crate::linalg::{Mat3, Vec3};
use crate::rasterizer::{
    project_gaussian, render, render_backward, sort_splats, ImageGradient, RenderGradients, Splat2D, MAX_WEIGHT,
    MIN_TRANSMITTANCE, MIN_WEIGHT,
};

/// Step and acceptance thresholds for a central-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradTolerance {
    pub step: f64,
    pub rel: f64,
    /// Absolute tolerance applied when the analytic value is below `small`.
    pub abs: f64,
    pub small: f64,
}

impl Default for GradTolerance {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel: 1e-3,
            abs: 1e-6,
            small: 1e-4,
        }
    }
}

impl GradTolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        if analytic.abs() < self.small {
            diff < self.abs
        } else {
            diff <= self.rel * analytic.abs().max(numeric.abs())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamClass {
    Mean,
    ScaleRaw,
    RotationRaw,
    Opacity,
    Sh,
}

impl ParamClass {
    pub const ALL: [ParamClass; 5] = [
        ParamClass::Mean,
        ParamClass::ScaleRaw,
        ParamClass::RotationRaw,
        ParamClass::Opacity,
        ParamClass::Sh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Mean => "mean",
            ParamClass::ScaleRaw => "scale_raw",
            ParamClass::RotationRaw => "rotation_raw",
            ParamClass::Opacity => "opacity",
            ParamClass::Sh => "sh",
        }
    }

    fn width(self, g: &GaussianPrimitive<f64>) -> usize {
        match self {
            ParamClass::Mean | ParamClass::ScaleRaw => 3,
            ParamClass::RotationRaw => 4,
            ParamClass::Opacity => 1,
            ParamClass::Sh => g.sh.len(),
        }
    }

    fn slot(self, g: &mut GaussianPrimitive<f64>, k: usize) -> &mut f64 {
        match self {
            ParamClass::Mean => match k {
                0 => &mut g.mean.x,
                1 => &mut g.mean.y,
                _ => &mut g.mean.z,
            },
            ParamClass::ScaleRaw => match k {
                0 => &mut g.scale_raw.x,
                1 => &mut g.scale_raw.y,
                _ => &mut g.scale_raw.z,
            },
            ParamClass::RotationRaw => &mut g.rotation_raw[k],
            ParamClass::Opacity => &mut g.opacity,
            ParamClass::Sh => &mut g.sh.coeffs_mut()[k / 3][k % 3],
        }
    }

    fn analytic(self, grads: &RenderGradients<f64>, i: usize, k: usize) -> f64 {
        match self {
            ParamClass::Mean => grads.mean[i][k],
            ParamClass::ScaleRaw => grads.scale_raw[i][k],
            ParamClass::RotationRaw => grads.rotation_raw[i][k],
            ParamClass::Opacity => grads.opacity[i],
            ParamClass::Sh => grads.sh[i][k / 3][k % 3],
        }
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One analytic/numeric pair.
#[derive(Clone, Copy, Debug)]
pub struct Comparison {
    pub class: ParamClass,
    pub primitive: usize,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Comparison {
    /// Relative error, or `None` when the analytic value is in the
    /// absolute-tolerance regime.
    pub fn relative_error(&self, tol: &GradTolerance) -> Option<f64> {
        (self.analytic.abs() >= tol.small)
            .then(|| (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()))
    }
}

/// Aggregate over every comparison of one parameter class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: ParamClass,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
}

impl ClassReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Scalar objective `Σ u·color + Σ v·depth` whose gradient image is `upstream`.
pub fn linear_objective(
    camera: &Camera<f64>,
    primitives: &[GaussianPrimitive<f64>],
    background: [f64; 3],
    upstream: &ImageGradient<f64>,
) -> f64 {
    let img = render(camera, primitives, background);
    let mut total = 0.0;
    for (c, u) in img.color.iter().zip(&upstream.color) {
        total += c[0] * u[0] + c[1] * u[1] + c[2] * u[2];
    }
    if let Some(dg) = &upstream.depth {
        total += img.depth.iter().zip(dg).map(|(d, v)| d * v).sum::<f64>();
    }
    total
}

/// Compares every parameter's analytic gradient with a central difference.
pub fn compare_render_gradients(
    camera: &Camera<f64>,
    primitives: &[GaussianPrimitive<f64>],
    background: [f64; 3],
    upstream: &ImageGradient<f64>,
    step: f64,
) -> crate::Result<Vec<Comparison>> {
    let grads = render_backward(camera, primitives, background, upstream)?;
    let mut out = Vec::new();
    let mut work = primitives.to_vec();
    for class in ParamClass::ALL {
        for i in 0..primitives.len() {
            for k in 0..class.width(&primitives[i]) {
                let x0 = *class.slot(&mut work[i], k);
                *class.slot(&mut work[i], k) = x0 + step;
                let plus = linear_objective(camera, &work, background, upstream);
                *class.slot(&mut work[i], k) = x0 - step;
                let minus = linear_objective(camera, &work, background, upstream);
                *class.slot(&mut work[i], k) = x0;
                out.push(Comparison {
                    class,
                    primitive: i,
                    component: k,
                    analytic: class.analytic(&grads, i, k),
                    numeric: (plus - minus) / (2.0 * step),
                });
            }
        }
    }
    Ok(out)
}

pub fn summarize(comparisons: &[Comparison], tol: &GradTolerance) -> Vec<ClassReport> {
    ParamClass::ALL
        .iter()
        .map(|&class| {
            let mut r = ClassReport {
                class,
                checked: 0,
                failures: 0,
                max_rel_err: 0.0,
                max_abs_err_small: 0.0,
            };
            for c in comparisons.iter().filter(|c| c.class == class) {
                r.checked += 1;
                if !tol.accepts(c.analytic, c.numeric) {
                    r.failures += 1;
                }
                match c.relative_error(tol) {
                    Some(e) => r.max_rel_err = r.max_rel_err.max(e),
                    None => r.max_abs_err_small = r.max_abs_err_small.max((c.analytic - c.numeric).abs()),
                }
            }
            r
        })
        .collect()
}

/// A scene drawn for gradient checking.
#[derive(Clone, Debug)]
pub struct GradScene {
    pub camera: Camera<f64>,
    pub primitives: Vec<GaussianPrimitive<f64>>,
    pub background: [f64; 3],
    pub upstream: ImageGradient<f64>,
}

/// Draws a random `size`×`size` scene of `count` primitives with SH degree
/// `degree`, rejecting draws where finite differences would straddle a
/// non-differentiable threshold.
pub fn random_grad_scene<R: Rng>(rng: &mut R, size: usize, count: usize, degree: usize) -> GradScene {
    let camera = test_camera(size);
    loop {
        let primitives: Vec<_> = (0..count).map(|_| random_primitive(rng, size, degree)).collect();
        if !is_fd_safe(&camera, &primitives, 0.05) {
            continue;
        }
        let background = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let mut upstream = ImageGradient::zeros(size, size);
        for u in upstream.color.iter_mut() {
            *u = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        }
        upstream.depth = Some((0..size * size).map(|_| rng.gen_range(-0.2..0.2)).collect());
        return GradScene {
            camera,
            primitives,
            background,
            upstream,
        };
    }
}

/// Runs the render gradient suite over `scenes` random 3-primitive 8×8 scenes.
pub fn render_gradient_suite<R: Rng>(rng: &mut R, scenes: usize, tol: &GradTolerance) -> crate::Result<Vec<ClassReport>> {
    let mut all = Vec::new();
    for trial in 0..scenes {
        let scene = random_grad_scene(rng, 8, 3, trial % 3);
        all.extend(compare_render_gradients(
            &scene.camera,
            &scene.primitives,
            scene.background,
            &scene.upstream,
            tol.step,
        )?);
    }
    Ok(summarize(&all, tol))
}

/// Random proper rotation from a random unit quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R, max_angle: f64) -> Mat3<f64> {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalized();
    let angle = rng.gen_range(-max_angle..max_angle);
    let (s, c) = (0.5 * angle).sin_cos();
    crate::gaussians::quaternion_matrix([c, axis.x * s, axis.y * s, axis.z * s])
}

/// Camera at `center` looking roughly along +z.
pub fn random_camera<R: Rng>(rng: &mut R, center: Vec3<f64>, width: usize, height: usize) -> Camera<f64> {
    let focal = rng.gen_range(0.8..1.4) * width as f64;
    let k = Mat3::from_rows([
        [focal, rng.gen_range(-0.5..0.5), width as f64 * rng.gen_range(0.4..0.6)],
        [0.0, focal * rng.gen_range(0.9..1.1), height as f64 * rng.gen_range(0.4..0.6)],
        [0.0, 0.0, 1.0],
    ]);
    Camera::new(k, random_rotation(rng, 0.3), center, width, height).expect("valid random camera")
}
/// Random primitive in front of an identity-pose camera with focal ≈ width,
/// sized to cover a few pixels of a `size`×`size` image.
pub fn random_primitive<R: Rng>(rng: &mut R, size: usize, degree: usize) -> GaussianPrimitive<f64> {
    let z = rng.gen_range(2.0..6.0);
    let extent = 0.4 * z;
    let mean = Vec3::new(rng.gen_range(-extent..extent), rng.gen_range(-extent..extent), z);
    let px_size = z / size as f64;
    let base = (rng.gen_range(1.0..4.0) * px_size).ln();
    let scale_raw = Vec3::new(
        base + rng.gen_range(-0.4..0.4),
        base + rng.gen_range(-0.4..0.4),
        base + rng.gen_range(-0.4..0.4),
    );
    let rotation_raw = [
        rng.gen_range(0.3..1.5),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ];
    let n = crate::gaussians::sh_coeff_count(degree);
    let mut coeffs = vec![[0.0; 3]; n];
    for c in coeffs[0].iter_mut() {
        *c = rng.gen_range(0.2..1.5);
    }
    for k in coeffs.iter_mut().skip(1) {
        for c in k.iter_mut() {
            *c = rng.gen_range(-0.3..0.3);
        }
    }
    GaussianPrimitive {
        mean,
        scale_raw,
        rotation_raw,
        opacity: rng.gen_range(0.1..0.95),
        sh: ShCoefficients::new(degree, coeffs).expect("valid SH"),
    }
}

/// Identity-pose square camera used with [`random_primitive`].
pub fn test_camera(size: usize) -> Camera<f64> {
    Camera::pinhole(size as f64, size, size, Mat3::identity(), Vec3::zero()).expect("valid camera")
}

/// Whether finite differences of the render are trustworthy for this scene:
/// no splat weight sits near the skip threshold or the clamp, no pixel is near
/// early termination, no SH color is near its zero clamp and no two splats are
/// close in depth.
pub fn is_fd_safe(camera: &Camera<f64>, primitives: &[GaussianPrimitive<f64>], margin: f64) -> bool {
    let mut splats: Vec<Splat2D<f64>> = Vec::new();
    for (i, g) in primitives.iter().enumerate() {
        // Every primitive must be comfortably visible, otherwise culling could
        // switch under perturbation.
        let Some(s) = project_gaussian(camera, g, i) else {
            return false;
        };
        if s.color.iter().any(|&c| c < 0.05) {
            return false;
        }
        splats.push(s);
    }
    sort_splats(&mut splats);
    for pair in splats.windows(2) {
        if (pair[1].view_depth - pair[0].view_depth).abs() < 0.05 {
            return false;
        }
    }
    for y in 0..camera.height() {
        for x in 0..camera.width() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t: f64 = 1.0;
            for s in &splats {
                let raw = s.opacity * s.power_at(px, py).exp();
                let near = |v: f64, thr: f64| (v / thr - 1.0).abs() < margin;
                if near(raw, MIN_WEIGHT) || near(raw, MAX_WEIGHT) {
                    return false;
                }
                let w = raw.min(MAX_WEIGHT);
                if w < MIN_WEIGHT {
                    continue;
                }
                let next = t * (1.0 - w);
                if (next / MIN_TRANSMITTANCE - 1.0).abs() < margin {
                    return false;
                }
                if next < MIN_TRANSMITTANCE {
                    break;
                }
                t = next;
            }
        }
    }
    true
}
