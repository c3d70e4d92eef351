//! End-to-end two-view model: canonical frame, encoder, head, and the
//! rasterizer spliced into the tape as a custom node.
//!
//! Everything the network sees is expressed in units of the pair's near
//! plane (see [`canonicalize`]); Gaussians come back out in world units via
//! [`to_world`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tensor, Var};
use crate::encoder::{EncodedPair, Encoder, EncoderConfig, EpipolarAttentionRecord, PairGeometry, FEATURE_DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::gaussians::{sh_coeff_count, GaussianPrimitive, ShCoefficients};
use crate::geometry::{canonicalize, CanonicalScene, Camera, Ray};
use crate::head::{
    argmax_depth, make_buckets, reparameterized_opacity, sample_depth, DepthBuckets, Head, HeadConfig, OffsetMode,
    SampleMode, ROTATION_BIAS,
};
use crate::linalg::Vec3;
use crate::rasterizer::{render_backward_tiled, render_tiled, ImageGradient, DEFAULT_TILE_SIZE};

/// Which depth parameterization produces the Gaussians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Eq. 8 buckets with `α = φ_z`.
    #[default]
    Probabilistic,
    /// Eq. 6 direct regression with a sigmoid opacity.
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub depth_mode: DepthMode,
    pub background: [f64; 3],
    pub tile_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            depth_mode: DepthMode::Probabilistic,
            background: [0.0; 3],
            tile_size: DEFAULT_TILE_SIZE,
        }
    }
}

/// A context pair plus the depth range.
#[derive(Clone, Debug)]
pub struct PairInput {
    /// `[H, W, 3]` each.
    pub images: [Tensor; 2],
    pub cameras: [Camera<f64>; 2],
    pub near: f64,
    pub far: f64,
}

/// Scale-free precomputation for one pair: canonical cameras, epipolar
/// geometry, feature-pixel rays and buckets.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub canonical: CanonicalScene,
    pub geometry: PairGeometry,
    /// Feature-pixel rays per context view, canonical frame.
    pub rays: [Vec<Ray<f64>>; 2],
    /// Angular size of a feature pixel per view.
    pub footprints: [f64; 2],
    pub buckets: DepthBuckets,
    /// Extra cameras (e.g. render targets) canonicalized with the pair.
    pub targets: Vec<Camera<f64>>,
}

/// Gaussian parameters for one context view, `N` = feature pixels.
#[derive(Clone, Copy, Debug)]
pub struct ViewGaussians<'t> {
    /// `[N, 3]`.
    pub means: Var<'t>,
    pub scale_raw: Var<'t>,
    /// `[N, 4]`.
    pub rotation_raw: Var<'t>,
    /// `[N]`.
    pub opacity: Var<'t>,
    /// `[N, 3·K]`.
    pub sh: Var<'t>,
    /// `[N]` depth along each pixel ray, canonical units.
    pub depth: Var<'t>,
}

pub struct Prediction<'t> {
    pub views: [ViewGaussians<'t>; 2],
    /// Sampled (or argmax) bucket per pixel; empty in regression mode.
    pub buckets: [Vec<usize>; 2],
    pub records: Vec<EpipolarAttentionRecord>,
    pub epipolar_applications: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    encoder: Encoder,
    head: Head,
    image_height: usize,
    image_width: usize,
}

impl Model {
    pub fn new<R: Rng>(
        config: ModelConfig,
        image_height: usize,
        image_width: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(config.encoder.clone(), image_height, image_width, store, rng)?;
        let head = Head::new(config.head.clone(), config.encoder.channels, store, rng)?;
        Ok(Self {
            config,
            encoder,
            head,
            image_height,
            image_width,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }

    /// Gaussians per pair (one per feature pixel per view).
    pub fn gaussian_count(&self) -> usize {
        let (h, w) = self.encoder.feature_size();
        2 * h * w
    }

    pub fn prepare(&self, pair: &PairInput, targets: &[Camera<f64>]) -> Result<PreparedPair> {
        for c in &pair.cameras {
            if c.width() != self.image_width || c.height() != self.image_height {
                return Err(Error::shape(
                    "context camera",
                    &[c.height(), c.width()],
                    &[self.image_height, self.image_width],
                ));
            }
        }
        let mut all = pair.cameras.to_vec();
        all.extend_from_slice(targets);
        let canonical = canonicalize(&all, pair.near, pair.far)?;
        let cams = [&canonical.cameras[0], &canonical.cameras[1]];
        let geometry = self.encoder.pair_geometry(cams, canonical.near, canonical.far)?;
        let mut rays: [Vec<Ray<f64>>; 2] = [Vec::new(), Vec::new()];
        let mut footprints = [0.0; 2];
        for v in 0..2 {
            let feat = cams[v].downsampled(FEATURE_DOWNSAMPLE)?;
            for j in 0..feat.height() {
                for i in 0..feat.width() {
                    rays[v].push(feat.ray(Camera::pixel_center(i, j))?);
                }
            }
            footprints[v] = 0.5 / feat.intrinsics().m[0][0];
        }
        let buckets = make_buckets(canonical.near, canonical.far, self.config.head.buckets)?;
        let targets = canonical.cameras[2..].to_vec();
        Ok(PreparedPair {
            canonical,
            geometry,
            rays,
            footprints,
            buckets,
            targets,
        })
    }

    pub fn encode<'t>(&self, params: &Bound<'t>, images: [Var<'t>; 2], prepared: &PreparedPair) -> Result<EncodedPair<'t>> {
        self.encoder.encode_pair(params, images, &prepared.geometry)
    }

    /// Encoder and head for both views. `mode` picks sampled or argmax
    /// buckets in probabilistic mode.
    pub fn predict<'t, R: Rng + ?Sized>(
        &self,
        params: &Bound<'t>,
        images: [Var<'t>; 2],
        prepared: &PreparedPair,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<Prediction<'t>> {
        self.predict_with(params, images, prepared, &mut |_, _, row| match mode {
            SampleMode::Sample => sample_depth(row, rng),
            SampleMode::Argmax => Ok(argmax_depth(row)),
        })
    }

    /// Like [`Model::predict`] with the bucket of every pixel given, so the
    /// discrete choice stays fixed under parameter perturbations.
    pub fn predict_frozen<'t>(
        &self,
        params: &Bound<'t>,
        images: [Var<'t>; 2],
        prepared: &PreparedPair,
        buckets: &[Vec<usize>; 2],
    ) -> Result<Prediction<'t>> {
        self.predict_with(params, images, prepared, &mut |view, pixel, row| {
            buckets[view]
                .get(pixel)
                .copied()
                .filter(|&z| z < row.len())
                .ok_or_else(|| Error::domain(format!("no valid frozen bucket for view {view} pixel {pixel}")))
        })
    }

    fn predict_with<'t>(
        &self,
        params: &Bound<'t>,
        images: [Var<'t>; 2],
        prepared: &PreparedPair,
        choose: &mut dyn FnMut(usize, usize, &[f64]) -> Result<usize>,
    ) -> Result<Prediction<'t>> {
        let encoded = self.encode(params, images, prepared)?;
        let mut buckets = [Vec::new(), Vec::new()];
        let mut views = Vec::with_capacity(2);
        for v in 0..2 {
            let (g, z) = self.view_gaussians(params, encoded.features[v].values, prepared, v, choose)?;
            buckets[v] = z;
            views.push(g);
        }
        Ok(Prediction {
            views: [views[0], views[1]],
            buckets,
            records: encoded.records,
            epipolar_applications: encoded.epipolar_applications,
        })
    }

    fn view_gaussians<'t>(
        &self,
        params: &Bound<'t>,
        features: Var<'t>,
        prepared: &PreparedPair,
        view: usize,
        choose: &mut dyn FnMut(usize, usize, &[f64]) -> Result<usize>,
    ) -> Result<(ViewGaussians<'t>, Vec<usize>)> {
        let tape = features.tape();
        let out = self.head.forward(params, features)?;
        let rays = &prepared.rays[view];
        let n = rays.len();
        let (depth, opacity, chosen) = match self.config.depth_mode {
            DepthMode::Probabilistic => {
                let z_count = prepared.buckets.len();
                let chosen: Vec<usize> = {
                    let phi = out.phi.value();
                    phi.data()
                        .chunks_exact(z_count)
                        .enumerate()
                        .map(|(pixel, row)| choose(view, pixel, row))
                        .collect::<Result<_>>()?
                };
                let alpha = reparameterized_opacity(out.phi, &chosen)?;
                let flat: Vec<usize> = chosen.iter().enumerate().map(|(i, &z)| i * z_count + z).collect();
                let delta = out.delta.take(&flat)?;
                let b = &prepared.buckets;
                let base = Tensor::new(&[n], chosen.iter().map(|&z| b.boundary(z)).collect())?;
                let depth = match self.config.head.offset_mode {
                    OffsetMode::WidthScaled => {
                        let width = Tensor::new(&[n], chosen.iter().map(|&z| b.width(z)).collect())?;
                        delta.mul(tape.constant(width))?
                    }
                    OffsetMode::Literal => delta,
                };
                (depth.add(tape.constant(base))?, alpha, chosen)
            }
            DepthMode::Regression => {
                let (near, far) = (prepared.canonical.near, prepared.canonical.far);
                let d = out
                    .depth_logit
                    .reshape(&[n])?
                    .sigmoid()
                    .scale(far - near)
                    .add_scalar(near);
                (d, out.opacity_logit.reshape(&[n])?.sigmoid(), Vec::new())
            }
        };
        let origins = Tensor::from_fn(&[n, 3], |k| rays[k / 3].origin.to_array()[k % 3]);
        let dirs = Tensor::from_fn(&[n, 3], |k| rays[k / 3].direction.to_array()[k % 3]);
        let d_col = depth.reshape(&[n, 1])?;
        let means = tape.constant(origins).add(d_col.mul(tape.constant(dirs))?)?;
        let prior = d_col.ln().add_scalar(prepared.footprints[view].ln());
        let scale_raw = out.scale_raw.add(prior)?;
        let rotation_raw = out
            .rotation_raw
            .add(tape.constant(Tensor::new(&[4], ROTATION_BIAS.to_vec())?))?;
        Ok((
            ViewGaussians {
                means,
                scale_raw,
                rotation_raw,
                opacity,
                sh: out.sh,
                depth,
            },
            chosen,
        ))
    }

    /// Renders the predicted Gaussians into `camera` (canonical frame) as an
    /// `[H·W, 4]` node of RGB plus composited depth.
    pub fn render<'t>(&self, views: &[ViewGaussians<'t>], camera: &Camera<f64>) -> Result<Var<'t>> {
        render_node(views, camera, self.config.head.sh_degree, self.config.background, self.config.tile_size)
    }

    /// Plain Gaussians (canonical units) from the current values.
    pub fn gaussians(&self, views: &[ViewGaussians<'_>]) -> Result<Vec<GaussianPrimitive<f64>>> {
        let mut out = Vec::new();
        for v in views {
            out.extend(gaussians_from_values(
                &v.means.value(),
                &v.scale_raw.value(),
                &v.rotation_raw.value(),
                &v.opacity.value(),
                &v.sh.value(),
                self.config.head.sh_degree,
            )?);
        }
        Ok(out)
    }
}

/// Canonical-frame Gaussians to world units.
pub fn to_world(gaussians: &[GaussianPrimitive<f64>], unit: f64) -> Vec<GaussianPrimitive<f64>> {
    let log_unit = unit.ln();
    gaussians
        .iter()
        .map(|g| GaussianPrimitive {
            mean: g.mean * unit,
            scale_raw: Vec3::from_array(g.scale_raw.to_array().map(|s| s + log_unit)),
            ..g.clone()
        })
        .collect()
}

fn row3(t: &Tensor, i: usize) -> [f64; 3] {
    let d = &t.data()[3 * i..3 * i + 3];
    [d[0], d[1], d[2]]
}

pub fn gaussians_from_values(
    means: &Tensor,
    scale_raw: &Tensor,
    rotation_raw: &Tensor,
    opacity: &Tensor,
    sh: &Tensor,
    sh_degree: usize,
) -> Result<Vec<GaussianPrimitive<f64>>> {
    let n = opacity.len();
    let k = sh_coeff_count(sh_degree);
    if means.len() != 3 * n || scale_raw.len() != 3 * n || rotation_raw.len() != 4 * n || sh.len() != 3 * k * n {
        return Err(Error::shape("gaussian tensors", means.shape(), &[n, 3]));
    }
    (0..n)
        .map(|i| {
            let r = &rotation_raw.data()[4 * i..4 * i + 4];
            let coeffs = sh.data()[3 * k * i..3 * k * (i + 1)]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            Ok(GaussianPrimitive {
                mean: Vec3::from_array(row3(means, i)),
                scale_raw: Vec3::from_array(row3(scale_raw, i)),
                rotation_raw: [r[0], r[1], r[2], r[3]],
                opacity: opacity.data()[i],
                sh: ShCoefficients::new(sh_degree, coeffs)?,
            })
        })
        .collect()
}

/// Differentiable render of several Gaussian sets as one scene. The output
/// is `[H·W, 4]`: RGB then depth. The backward pass is the rasterizer's
/// analytic gradient.
pub fn render_node<'t>(
    views: &[ViewGaussians<'t>],
    camera: &Camera<f64>,
    sh_degree: usize,
    background: [f64; 3],
    tile_size: usize,
) -> Result<Var<'t>> {
    let first = views.first().ok_or_else(|| Error::domain("render needs at least one Gaussian set"))?;
    let tape = first.means.tape();
    let parents: Vec<Var<'t>> = views
        .iter()
        .flat_map(|v| [v.means, v.scale_raw, v.rotation_raw, v.opacity, v.sh])
        .collect();
    let counts: Vec<usize> = views.iter().map(|v| v.opacity.value().len()).collect();
    let collect = move |p: &[&Tensor]| -> Result<Vec<GaussianPrimitive<f64>>> {
        let mut all = Vec::new();
        for c in p.chunks_exact(5) {
            all.extend(gaussians_from_values(c[0], c[1], c[2], c[3], c[4], sh_degree)?);
        }
        Ok(all)
    };
    let cam_f = camera.clone();
    let cam_b = camera.clone();
    let (w, h) = (camera.width(), camera.height());
    tape.custom_node(
        "render",
        &parents,
        |p| {
            let img = render_tiled(&cam_f, &collect(p)?, background, tile_size)?;
            let mut data = Vec::with_capacity(4 * w * h);
            for i in 0..w * h {
                data.extend_from_slice(&img.color[i]);
                data.push(img.depth[i]);
            }
            Tensor::new(&[w * h, 4], data)
        },
        move |g, p, _| {
            let gaussians = collect(p)?;
            let grad = ImageGradient {
                width: w,
                height: h,
                color: g.data().chunks_exact(4).map(|c| [c[0], c[1], c[2]]).collect(),
                depth: Some(g.data().chunks_exact(4).map(|c| c[3]).collect()),
            };
            let rg = render_backward_tiled(&cam_b, &gaussians, background, &grad, tile_size)?;
            let k = sh_coeff_count(sh_degree);
            let mut out = Vec::with_capacity(p.len());
            let mut offset = 0;
            for &n in &counts {
                let r = offset..offset + n;
                out.push(Tensor::new(&[n, 3], rg.mean[r.clone()].iter().flat_map(|v| v.to_array()).collect())?);
                out.push(Tensor::new(&[n, 3], rg.scale_raw[r.clone()].iter().flat_map(|v| v.to_array()).collect())?);
                out.push(Tensor::new(&[n, 4], rg.rotation_raw[r.clone()].iter().flatten().copied().collect())?);
                out.push(Tensor::new(&[n], rg.opacity[r.clone()].to_vec())?);
                out.push(Tensor::new(&[n, 3 * k], rg.sh[r].iter().flatten().flatten().copied().collect())?);
                offset += n;
            }
            Ok(out)
        },
    )
}
