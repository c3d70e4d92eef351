//! Procedural two-view scenes: textured planes seen by a horizontal camera
//! rig, rendered by an analytic ray-plane intersector.
//!
//! Geometry is defined at unit scale. The global factor `scale` multiplies
//! camera poses (and, unless disabled, near/far and ground-truth depth);
//! images are always rendered at unit scale, so they are bitwise independent
//! of `scale`.

use pairsplat::autodiff::Tensor;
use pairsplat::geometry::Camera;
use pairsplat::linalg::{Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

const NOISE_LATTICE: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    /// Plane center at unit scale; `z` is its depth in front of the rig.
    pub center: [f64; 3],
    /// Rotation about the x axis, then the y axis (radians). Zero is
    /// fronto-parallel.
    pub tilt: [f64; 2],
    /// Half extents along the plane's local axes; `None` is unbounded.
    pub half_extent: Option<[f64; 2]>,
    pub texture_seed: u64,
    pub base_color: [f64; 3],
    /// World units per value-noise lattice cell.
    pub texture_cell: f64,
    /// Peak-to-peak amplitude of the noise around `base_color`.
    pub texture_contrast: f64,
    #[serde(default)]
    pub pattern: TexturePattern,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TexturePattern {
    #[default]
    ValueNoise,
    /// A hue that turns once every `texture_cell` units along the plane's
    /// first axis, with a ramp along the second: every point on a row gets
    /// a distinct color.
    HueRamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub planes: Vec<PlaneSpec>,
    /// Distance between the two reference cameras at unit scale.
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub near: f64,
    pub far: f64,
    /// Global scene scale `s`.
    pub scale: f64,
    /// When false, `scale` moves the cameras but leaves near/far alone,
    /// which is what an unknown SfM scale looks like to the model.
    #[serde(default = "yes")]
    pub scale_depth_range: bool,
    /// Held-out target views between the references.
    pub targets: usize,
    /// Samples per pixel side for antialiasing.
    pub supersample: usize,
    /// Color of rays that hit nothing.
    pub background: [f64; 3],
}

fn yes() -> bool {
    true
}

impl PlaneSpec {
    pub fn noise(center: [f64; 3], seed: u64, base_color: [f64; 3], cell: f64) -> Self {
        Self {
            center,
            tilt: [0.0, 0.0],
            half_extent: None,
            texture_seed: seed,
            base_color,
            texture_cell: cell,
            texture_contrast: 0.5,
            pattern: TexturePattern::ValueNoise,
        }
    }
}

impl Default for SceneSpec {
    /// A tilted card and a small square in front of an unbounded wall.
    fn default() -> Self {
        let mut wall = PlaneSpec::noise([0.0, 0.0, 6.0], 1, [0.45, 0.5, 0.55], 2.5);
        wall.tilt = [0.0, 0.15];
        let mut card = PlaneSpec::noise([-0.45, 0.1, 3.5], 2, [0.7, 0.45, 0.3], 1.4);
        card.tilt = [0.1, -0.5];
        card.half_extent = Some([0.7, 1.0]);
        let mut square = PlaneSpec::noise([0.5, -0.3, 2.2], 3, [0.3, 0.65, 0.4], 0.9);
        square.half_extent = Some([0.35, 0.35]);
        Self {
            planes: vec![wall, card, square],
            baseline: 0.6,
            width: 32,
            height: 32,
            focal: 32.0,
            near: 1.5,
            far: 12.0,
            scale: 1.0,
            scale_depth_range: true,
            targets: 3,
            supersample: 2,
            background: [0.2; 3],
        }
    }
}

impl SceneSpec {
    /// Foreground plane at depth 2 over the left part of the view, unbounded
    /// wall at depth 10, depth range [1.5, 10.5].
    pub fn two_depth_clusters() -> Self {
        let wall = PlaneSpec::noise([0.0, 0.0, 10.0], 11, [0.35, 0.45, 0.6], 4.0);
        let mut front = PlaneSpec::noise([-0.55, 0.0, 2.0], 12, [0.75, 0.5, 0.3], 0.8);
        front.half_extent = Some([0.6, 2.0]);
        Self {
            planes: vec![wall, front],
            baseline: 1.0,
            near: 1.5,
            far: 10.5,
            ..Self::default()
        }
    }

    /// One slanted plane whose texture gives every pixel along a row a
    /// distinct color, so the true correspondence along each epipolar line
    /// is unambiguous.
    pub fn planted() -> Self {
        let plane = PlaneSpec {
            center: [0.0, 0.0, 3.5],
            tilt: [0.0, 0.6],
            half_extent: None,
            texture_seed: 21,
            base_color: [0.5; 3],
            texture_cell: 4.0,
            texture_contrast: 0.7,
            pattern: TexturePattern::HueRamp,
        };
        Self {
            planes: vec![plane],
            baseline: 0.6,
            near: 1.5,
            far: 12.0,
            ..Self::default()
        }
    }

    /// A single fronto-parallel plane at `depth`.
    pub fn single_plane(depth: f64) -> Self {
        Self {
            planes: vec![PlaneSpec::noise([0.0, 0.0, depth], 5, [0.5; 3], 0.4 * depth)],
            near: depth * 0.5,
            far: depth * 4.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::validation(m));
        if self.planes.is_empty() {
            return bad("scene needs at least one plane".into());
        }
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return bad(format!("baseline must be positive, got {}", self.baseline));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return bad("image size and focal length must be positive".into());
        }
        if self.supersample == 0 {
            return bad("supersample must be at least 1".into());
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return bad(format!("need 0 < near < far, got [{}, {}]", self.near, self.far));
        }
        for (k, p) in self.planes.iter().enumerate() {
            let d = p.center[2];
            if !(d > self.near && d < self.far) {
                return bad(format!("plane {k} depth {d} outside ({}, {})", self.near, self.far));
            }
            if !(p.texture_cell > 0.0) || p.texture_contrast < 0.0 {
                return bad(format!("plane {k} has invalid texture parameters"));
            }
            if let Some([hx, hy]) = p.half_extent {
                if !(hx > 0.0 && hy > 0.0) {
                    return bad(format!("plane {k} extents must be positive"));
                }
            }
            if p.tilt.iter().any(|t| t.abs() >= std::f64::consts::FRAC_PI_2) {
                return bad(format!("plane {k} tilt must stay below 90 degrees"));
            }
        }
        Ok(())
    }

    /// Near/far as reported to the model.
    pub fn depth_range(&self) -> (f64, f64) {
        if self.scale_depth_range {
            (self.near * self.scale, self.far * self.scale)
        } else {
            (self.near, self.far)
        }
    }

    /// Camera on the rig at `position` (in baselines; the references of the
    /// full pair sit at ±0.5), poses scaled by `scale`.
    pub fn rig_camera(&self, position: f64) -> Result<Camera<f64>> {
        Ok(self.unit_camera(position)?.with_translation(Vec3::new(position * self.baseline * self.scale, 0.0, 0.0)))
    }

    fn unit_camera(&self, position: f64) -> Result<Camera<f64>> {
        Ok(Camera::pinhole(
            self.focal,
            self.width,
            self.height,
            Mat3::identity(),
            Vec3::new(position * self.baseline, 0.0, 0.0),
        )?)
    }

    /// Rig positions of the held-out targets, evenly inside the full pair.
    pub fn target_positions(&self) -> Vec<f64> {
        let n = self.targets;
        (0..n).map(|k| (k + 1) as f64 / (n + 1) as f64 - 0.5).collect()
    }
}

/// Smoothly interpolated lattice noise, periodic with [`NOISE_LATTICE`].
#[derive(Clone, Debug)]
struct ValueNoise {
    lattice: Vec<[f64; 3]>,
}

impl ValueNoise {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lattice = (0..NOISE_LATTICE * NOISE_LATTICE)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        Self { lattice }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let n = NOISE_LATTICE as i64;
        let (fx, fy) = (x.floor(), y.floor());
        let (tx, ty) = (smooth(x - fx), smooth(y - fy));
        let (ix, iy) = (fx as i64, fy as i64);
        let get = |i: i64, j: i64| self.lattice[(j.rem_euclid(n) * n + i.rem_euclid(n)) as usize];
        let (a, b, c, d) = (get(ix, iy), get(ix + 1, iy), get(ix, iy + 1), get(ix + 1, iy + 1));
        std::array::from_fn(|k| {
            let top = a[k] + (b[k] - a[k]) * tx;
            let bottom = c[k] + (d[k] - c[k]) * tx;
            top + (bottom - top) * ty
        })
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

#[derive(Clone, Debug)]
struct Plane {
    center: Vec3<f64>,
    axes: [Vec3<f64>; 2],
    normal: Vec3<f64>,
    spec: PlaneSpec,
    noise: ValueNoise,
}

impl Plane {
    fn new(spec: &PlaneSpec, seed: u64) -> Self {
        let [ax, ay] = spec.tilt;
        let rx = Mat3::from_rows([[1.0, 0.0, 0.0], [0.0, ax.cos(), -ax.sin()], [0.0, ax.sin(), ax.cos()]]);
        let ry = Mat3::from_rows([[ay.cos(), 0.0, ay.sin()], [0.0, 1.0, 0.0], [-ay.sin(), 0.0, ay.cos()]]);
        let r = ry * rx;
        let mixed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ spec.texture_seed;
        Self {
            center: Vec3::from_array(spec.center),
            axes: [r.col(0), r.col(1)],
            normal: r.col(2),
            spec: spec.clone(),
            noise: ValueNoise::new(mixed),
        }
    }

    /// Ray parameter and local coordinates of the hit, if any.
    fn intersect(&self, origin: Vec3<f64>, dir: Vec3<f64>) -> Option<(f64, [f64; 2])> {
        let denom = dir.dot(self.normal);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.center - origin).dot(self.normal) / denom;
        if !(t > 0.0) {
            return None;
        }
        let rel = origin + dir * t - self.center;
        let uv = [rel.dot(self.axes[0]), rel.dot(self.axes[1])];
        if let Some([hx, hy]) = self.spec.half_extent {
            if uv[0].abs() > hx || uv[1].abs() > hy {
                return None;
            }
        }
        Some((t, uv))
    }

    fn color(&self, uv: [f64; 2]) -> [f64; 3] {
        let s = &self.spec;
        let (u, v) = (uv[0] / s.texture_cell, uv[1] / s.texture_cell);
        let c = s.texture_contrast;
        let raw = match s.pattern {
            TexturePattern::ValueNoise => {
                let n = self.noise.at(u, v);
                std::array::from_fn(|k| s.base_color[k] + c * (n[k] - 0.5))
            }
            TexturePattern::HueRamp => {
                let theta = std::f64::consts::TAU * u;
                [
                    s.base_color[0] + 0.5 * c * theta.cos(),
                    s.base_color[1] + 0.5 * c * theta.sin(),
                    s.base_color[2] + 0.5 * c * (v / 2.0).tanh(),
                ]
            }
        };
        raw.map(|x: f64| x.clamp(0.0, 1.0))
    }
}

/// One rendered view.
#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera<f64>,
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Tensor,
    /// Camera-frame depth of the first hit at each pixel center, in the
    /// reported (scaled) units; infinite where nothing is hit.
    pub depth: Vec<f64>,
}

/// A generated scene: views 0 and 1 are the references, the rest targets.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub views: Vec<View>,
    pub near: f64,
    pub far: f64,
}

impl Scene {
    pub fn references(&self) -> [&View; 2] {
        [&self.views[0], &self.views[1]]
    }

    pub fn targets(&self) -> &[View] {
        &self.views[2..]
    }
}

/// Deterministic renderer for a [`SceneSpec`].
#[derive(Clone, Debug)]
pub struct SceneRenderer {
    spec: SceneSpec,
    planes: Vec<Plane>,
}

impl SceneRenderer {
    pub fn new(spec: &SceneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            planes: spec.planes.iter().map(|p| Plane::new(p, seed)).collect(),
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Same geometry and textures under another global scale.
    pub fn with_scale(&self, scale: f64, scale_depth_range: bool) -> Self {
        let mut out = self.clone();
        out.spec.scale = scale;
        out.spec.scale_depth_range = scale_depth_range;
        out
    }

    fn trace(&self, origin: Vec3<f64>, dir: Vec3<f64>) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, [f64; 3])> = None;
        for p in &self.planes {
            if let Some((t, uv)) = p.intersect(origin, dir) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, p.color(uv)));
                }
            }
        }
        best
    }

    /// Ray distance (unit scale) to the first surface along a ray.
    pub fn hit_distance(&self, origin: Vec3<f64>, dir: Vec3<f64>) -> Option<f64> {
        self.trace(origin, dir).map(|(t, _)| t)
    }

    /// Renders the rig camera at `position`.
    pub fn render(&self, position: f64) -> Result<View> {
        let spec = &self.spec;
        let cam = spec.unit_camera(position)?;
        let (w, h, ss) = (spec.width, spec.height, spec.supersample);
        let mut image = Vec::with_capacity(w * h * 3);
        let mut depth = Vec::with_capacity(w * h);
        let depth_scale = if spec.scale_depth_range { spec.scale } else { 1.0 };
        let inv = 1.0 / (ss * ss) as f64;
        for j in 0..h {
            for i in 0..w {
                let mut acc = [0.0; 3];
                for sj in 0..ss {
                    for si in 0..ss {
                        let px = i as f64 + (si as f64 + 0.5) / ss as f64;
                        let py = j as f64 + (sj as f64 + 0.5) / ss as f64;
                        let ray = cam.ray(pairsplat::Vec2f::new(px, py))?;
                        let c = self.trace(ray.origin, ray.direction).map_or(spec.background, |(_, c)| c);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                image.extend(acc.map(|a| a * inv));
                let ray = cam.ray(Camera::pixel_center(i, j))?;
                let z = match self.trace(ray.origin, ray.direction) {
                    Some((t, _)) => t * ray.direction.z * depth_scale,
                    None => f64::INFINITY,
                };
                depth.push(z);
            }
        }
        Ok(View {
            camera: spec.rig_camera(position)?,
            image: Tensor::new(&[h, w, 3], image)?,
            depth,
        })
    }
}

/// Renders the two references (rig positions ±0.5) and the held-out targets.
pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let renderer = SceneRenderer::new(spec, seed)?;
    let mut positions = vec![-0.5, 0.5];
    positions.extend(spec.target_positions());
    let views = positions.iter().map(|&p| renderer.render(p)).collect::<Result<_>>()?;
    let (near, far) = spec.depth_range();
    Ok(Scene {
        spec: spec.clone(),
        seed,
        views,
        near,
        far,
    })
}

/// Log-uniform draw from `[lo, hi]`.
pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}
