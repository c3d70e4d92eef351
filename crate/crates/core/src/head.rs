//! Pixel-aligned Gaussian head: disparity-space depth buckets, a categorical
//! depth distribution sampled per pixel, the opacity reparameterization
//! `α = φ_z`, and the direct-regression baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_in_place, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaussians::{
    sh_coeff_count, unproject, GaussianPrimitive, ShCoefficients, MAX_SH_DEGREE, SH_C0, SH_COLOR_OFFSET,
};
use crate::geometry::Ray;
use crate::linalg::Vec3;

pub const DEFAULT_BUCKETS: usize = 64;
pub const DEFAULT_HIDDEN: usize = 64;
/// Tolerance on `Σφ = 1` accepted by [`sample_depth`].
pub const DISTRIBUTION_TOL: f64 = 1e-6;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Eq. 7 bucket depths, uniform in disparity between `near` and `far`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthBuckets {
    near: f64,
    far: f64,
    depths: Vec<f64>,
}

pub fn make_buckets(near: f64, far: f64, count: usize) -> Result<DepthBuckets> {
    if !(near > 0.0 && near < far && far.is_finite()) {
        return Err(Error::domain(format!("buckets need 0 < near < far, got [{near}, {far}]")));
    }
    if count < 2 {
        return Err(Error::domain(format!("need at least 2 buckets, got {count}")));
    }
    let span = 1.0 / near - 1.0 / far;
    // z = 0 is pinned to `near` so the endpoint is exact despite rounding.
    let depths = (0..count)
        .map(|z| {
            if z == 0 {
                near
            } else {
                1.0 / ((1.0 - z as f64 / count as f64) * span + 1.0 / far)
            }
        })
        .collect();
    Ok(DepthBuckets { near, far, depths })
}

impl DepthBuckets {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    /// `b_z` for `z ≤ Z`, with `b_Z = far`.
    pub fn boundary(&self, z: usize) -> f64 {
        if z >= self.depths.len() {
            self.far
        } else {
            self.depths[z]
        }
    }

    /// `w_z = b_{z+1} − b_z`.
    pub fn width(&self, z: usize) -> f64 {
        self.boundary(z + 1) - self.boundary(z)
    }
}

/// How the offset `δ_z ∈ [0, 1]` moves the depth within bucket `z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// `b_z + δ_z·w_z`: stays between the bucket boundaries.
    #[default]
    WidthScaled,
    /// `b_z + δ_z` in scene units, as Eq. 8 is written.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    Sample,
    Argmax,
}

/// Depth within bucket `z` for offset `delta`.
pub fn bucket_depth(buckets: &DepthBuckets, z: usize, delta: f64, mode: OffsetMode) -> f64 {
    match mode {
        OffsetMode::WidthScaled => buckets.boundary(z) + delta * buckets.width(z),
        OffsetMode::Literal => buckets.boundary(z) + delta,
    }
}

/// Eq. 6 baseline depth `near + sigmoid(logit)·(far − near)`.
pub fn regression_depth(logit: f64, near: f64, far: f64) -> f64 {
    near + sigmoid(logit) * (far - near)
}

/// Per-pixel depth distribution `(φ, δ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthDistribution {
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
}

impl DepthDistribution {
    pub fn new(phi: Vec<f64>, delta: Vec<f64>) -> Result<Self> {
        validate_distribution(&phi)?;
        if phi.len() != delta.len() {
            return Err(Error::shape("depth distribution", &[phi.len()], &[delta.len()]));
        }
        if delta.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::domain("offsets must lie in [0, 1]"));
        }
        Ok(Self { phi, delta })
    }
}

fn validate_distribution(phi: &[f64]) -> Result<()> {
    if phi.is_empty() {
        return Err(Error::domain("empty distribution"));
    }
    if phi.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::domain("distribution has negative or non-finite entries"));
    }
    let total: f64 = phi.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::domain(format!("distribution sums to {total}")));
    }
    Ok(())
}

/// Inverse-CDF categorical sample from one uniform draw.
pub fn sample_depth<R: Rng + ?Sized>(phi: &[f64], rng: &mut R) -> Result<usize> {
    validate_distribution(phi)?;
    let u: f64 = rng.gen();
    Ok(inverse_cdf(phi, u))
}

/// Smallest `z` with `u < Σ_{k≤z} φ_k`, skipping zero-probability buckets
/// when `u` lands past the rounded total.
pub fn inverse_cdf(phi: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (z, &p) in phi.iter().enumerate() {
        acc += p;
        if u < acc {
            return z;
        }
    }
    phi.iter().rposition(|&p| p > 0.0).unwrap_or(phi.len() - 1)
}

/// First index of the largest probability.
pub fn argmax_depth(phi: &[f64]) -> usize {
    let mut best = 0;
    for (z, &p) in phi.iter().enumerate() {
        if p > phi[best] {
            best = z;
        }
    }
    best
}

/// `α_n = φ[n, z_n]` as a custom node whose backward routes `∂L/∂α_n` to
/// `∂L/∂φ[n, z_n]` and nothing else. `phi` is `[N, Z]` (or `[Z]` with one
/// index); the output is `[N]`.
pub fn reparameterized_opacity<'t>(phi: Var<'t>, z: &[usize]) -> Result<Var<'t>> {
    let shape = phi.shape();
    let buckets = *shape.last().ok_or_else(|| Error::domain("opacity gather needs a rank ≥ 1 input"))?;
    let rows = if shape.len() == 1 { 1 } else { shape[0] };
    if shape.len() > 2 || rows != z.len() {
        return Err(Error::shape("reparameterized_opacity", &shape, &[z.len(), buckets]));
    }
    if let Some(bad) = z.iter().find(|&&k| k >= buckets) {
        return Err(Error::domain(format!("bucket index {bad} out of range {buckets}")));
    }
    let index: Vec<usize> = z.iter().enumerate().map(|(n, &k)| n * buckets + k).collect();
    let fwd_index = index.clone();
    phi.tape().custom_node(
        "reparameterized_opacity",
        &[phi],
        move |p| Tensor::new(&[fwd_index.len()], fwd_index.iter().map(|&i| p[0].data()[i]).collect()),
        move |g, p, _| {
            let mut out = Tensor::zeros(p[0].shape());
            for (n, &i) in index.iter().enumerate() {
                out.data_mut()[i] += g.data()[n];
            }
            Ok(vec![out])
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Number of depth buckets `Z`.
    pub buckets: usize,
    pub hidden: usize,
    pub sh_degree: usize,
    pub offset_mode: OffsetMode,
    pub color: ColorActivation,
}

/// How the DC spherical-harmonics band is produced from the raw output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorActivation {
    /// Base color `SH_C0·c₀ + 0.5 = sigmoid(raw)`, confined to `(0, 1)`.
    #[default]
    Sigmoid,
    /// Raw coefficients, unbounded.
    Linear,
}

/// DC coefficient whose evaluated color is `sigmoid(raw)`.
pub fn bounded_dc(raw: f64) -> f64 {
    (sigmoid(raw) - SH_COLOR_OFFSET) / SH_C0
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            buckets: DEFAULT_BUCKETS,
            hidden: DEFAULT_HIDDEN,
            sh_degree: 1,
            offset_mode: OffsetMode::WidthScaled,
            color: ColorActivation::Sigmoid,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buckets < 2 || self.hidden == 0 {
            return Err(Error::domain("head needs ≥ 2 buckets and a positive hidden width"));
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::domain(format!("SH degree {} above {MAX_SH_DEGREE}", self.sh_degree)));
        }
        Ok(())
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            buckets: self.buckets,
            sh_coeffs: sh_coeff_count(self.sh_degree),
        }
    }
}

/// Column ranges of the raw head output
/// `[φ logits | δ logits | scale 3 | rotation 4 | SH 3·K | depth logit | opacity logit]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub buckets: usize,
    pub sh_coeffs: usize,
}

impl HeadLayout {
    pub fn phi(&self) -> (usize, usize) {
        (0, self.buckets)
    }
    pub fn delta(&self) -> (usize, usize) {
        (self.buckets, 2 * self.buckets)
    }
    pub fn scale(&self) -> (usize, usize) {
        let s = 2 * self.buckets;
        (s, s + 3)
    }
    pub fn rotation(&self) -> (usize, usize) {
        let s = 2 * self.buckets + 3;
        (s, s + 4)
    }
    pub fn sh(&self) -> (usize, usize) {
        let s = 2 * self.buckets + 7;
        (s, s + 3 * self.sh_coeffs)
    }
    pub fn depth_logit(&self) -> usize {
        self.sh().1
    }
    pub fn opacity_logit(&self) -> usize {
        self.sh().1 + 1
    }
    pub fn width(&self) -> usize {
        self.sh().1 + 2
    }
}

/// Activated head outputs for one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub distribution: DepthDistribution,
    pub scale_raw: [f64; 3],
    pub rotation_raw: [f64; 4],
    /// `K` coefficients, each RGB.
    pub sh: Vec<[f64; 3]>,
    pub depth_logit: f64,
    pub opacity_logit: f64,
}

impl HeadOutput {
    /// Splits and activates one raw output row.
    pub fn from_raw(layout: &HeadLayout, raw: &[f64]) -> Result<Self> {
        if raw.len() != layout.width() {
            return Err(Error::shape("head output", &[raw.len()], &[layout.width()]));
        }
        let (a, b) = layout.phi();
        let mut phi = raw[a..b].to_vec();
        softmax_in_place(&mut phi);
        let (a, b) = layout.delta();
        let delta = raw[a..b].iter().map(|&v| sigmoid(v)).collect();
        let (a, _) = layout.scale();
        let (r, _) = layout.rotation();
        let (s, e) = layout.sh();
        Ok(Self {
            distribution: DepthDistribution::new(phi, delta)?,
            scale_raw: [raw[a], raw[a + 1], raw[a + 2]],
            rotation_raw: [raw[r], raw[r + 1], raw[r + 2], raw[r + 3]],
            sh: raw[s..e].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            depth_logit: raw[layout.depth_logit()],
            opacity_logit: raw[layout.opacity_logit()],
        })
    }
}

/// Raw head outputs for a batch of pixels, split into tape views.
#[derive(Clone, Copy, Debug)]
pub struct HeadBatch<'t> {
    /// `[N, Z]` softmax probabilities.
    pub phi: Var<'t>,
    /// `[N, Z]` sigmoid offsets.
    pub delta: Var<'t>,
    pub scale_raw: Var<'t>,
    pub rotation_raw: Var<'t>,
    /// `[N, 3·K]`, coefficient-major.
    pub sh: Var<'t>,
    pub depth_logit: Var<'t>,
    pub opacity_logit: Var<'t>,
}

/// Constant added to the raw quaternion so zero outputs mean identity.
pub const ROTATION_BIAS: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

/// Log-scale prior: a Gaussian at depth `d` starts with a standard deviation
/// of `d·footprint`, roughly one feature pixel wide.
pub fn scale_prior(depth: f64, footprint: f64) -> f64 {
    (depth * footprint).ln()
}

/// Two-layer MLP `f` of Eqs. 8–9 applied to layer-normalized features.
#[derive(Clone, Debug)]
pub struct Head {
    config: HeadConfig,
    layout: HeadLayout,
    channels: usize,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

impl Head {
    /// Registers `head.*` parameters. The output layer starts small so the
    /// initial distribution is close to uniform.
    pub fn new<R: Rng>(config: HeadConfig, channels: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let h = config.hidden;
        let out = layout.width();
        let b1 = (6.0 / (channels + h) as f64).sqrt();
        let b2 = 0.1 * (6.0 / (h + out) as f64).sqrt();
        let fc1 = (
            store.add("head.fc1.weight", Tensor::uniform(rng, &[channels, h], b1))?,
            store.add("head.fc1.bias", Tensor::zeros(&[h]))?,
        );
        let fc2 = (
            store.add("head.fc2.weight", Tensor::uniform(rng, &[h, out], b2))?,
            store.add("head.fc2.bias", Tensor::zeros(&[out]))?,
        );
        Ok(Self {
            config,
            layout,
            channels,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn layout(&self) -> &HeadLayout {
        &self.layout
    }

    /// Final-layer parameter ids `(weight, bias)`.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        self.fc2
    }

    /// `[N, C]` features to `[N, width]` raw outputs.
    pub fn raw<'t>(&self, params: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.channels {
            return Err(Error::shape("head input", &s, &[0, self.channels]));
        }
        let x = features.layer_norm(LAYER_NORM_EPS)?;
        let x = x.matmul(params.var(self.fc1.0))?.add(params.var(self.fc1.1))?.relu();
        x.matmul(params.var(self.fc2.0))?.add(params.var(self.fc2.1))
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, features: Var<'t>) -> Result<HeadBatch<'t>> {
        let raw = self.raw(params, features)?;
        let l = &self.layout;
        let slice = |(a, b): (usize, usize)| raw.slice_last(a, b);
        Ok(HeadBatch {
            phi: slice(l.phi())?.softmax()?,
            delta: slice(l.delta())?.sigmoid(),
            scale_raw: slice(l.scale())?,
            rotation_raw: slice(l.rotation())?,
            sh: self.activate_sh(slice(l.sh())?)?,
            depth_logit: raw.slice_last(l.depth_logit(), l.depth_logit() + 1)?,
            opacity_logit: raw.slice_last(l.opacity_logit(), l.opacity_logit() + 1)?,
        })
    }

    fn activate_sh<'t>(&self, sh: Var<'t>) -> Result<Var<'t>> {
        match self.config.color {
            ColorActivation::Linear => Ok(sh),
            ColorActivation::Sigmoid => {
                let width = *sh.shape().last().unwrap_or(&0);
                let dc = sh.slice_last(0, 3)?.sigmoid().add_scalar(-SH_COLOR_OFFSET).scale(1.0 / SH_C0);
                if width == 3 {
                    Ok(dc)
                } else {
                    Var::concat(&[dc, sh.slice_last(3, width)?])
                }
            }
        }
    }

    /// Eq. 9 for one feature vector, outside any training graph.
    pub fn predict(&self, store: &ParamStore, feature: &[f64]) -> Result<HeadOutput> {
        let tape = Tape::new();
        let params = store.bind(&tape);
        let x = tape.constant(Tensor::new(&[1, feature.len()], feature.to_vec())?);
        let raw = self.raw(&params, x)?;
        let raw = raw.value();
        let mut out = HeadOutput::from_raw(&self.layout, raw.data())?;
        if self.config.color == ColorActivation::Sigmoid {
            out.sh[0] = out.sh[0].map(bounded_dc);
        }
        Ok(out)
    }

    fn primitive(&self, out: &HeadOutput, mean: Vec3<f64>, depth: f64, opacity: f64, footprint: f64) -> Result<GaussianPrimitive<f64>> {
        let prior = scale_prior(depth, footprint);
        let r = out.rotation_raw;
        Ok(GaussianPrimitive {
            mean,
            scale_raw: Vec3::from_array(out.scale_raw.map(|s| s + prior)),
            rotation_raw: [
                r[0] + ROTATION_BIAS[0],
                r[1] + ROTATION_BIAS[1],
                r[2] + ROTATION_BIAS[2],
                r[3] + ROTATION_BIAS[3],
            ],
            opacity,
            sh: ShCoefficients::new(self.config.sh_degree, out.sh.clone())?,
        })
    }

    /// Algorithm 1: returns the Gaussian and the chosen bucket. `footprint`
    /// is the angular size of a feature pixel (see [`scale_prior`]).
    pub fn pixel_gaussian<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        feature: &[f64],
        ray: &Ray<f64>,
        footprint: f64,
        buckets: &DepthBuckets,
        rng: &mut R,
        mode: SampleMode,
    ) -> Result<(GaussianPrimitive<f64>, usize)> {
        let out = self.predict(store, feature)?;
        self.gaussian_from_output(&out, ray, footprint, buckets, rng, mode)
    }

    /// Lines 2–5 of Algorithm 1 given already-activated outputs.
    pub fn gaussian_from_output<R: Rng + ?Sized>(
        &self,
        out: &HeadOutput,
        ray: &Ray<f64>,
        footprint: f64,
        buckets: &DepthBuckets,
        rng: &mut R,
        mode: SampleMode,
    ) -> Result<(GaussianPrimitive<f64>, usize)> {
        if buckets.len() != self.config.buckets {
            return Err(Error::shape("buckets", &[buckets.len()], &[self.config.buckets]));
        }
        let phi = &out.distribution.phi;
        let z = match mode {
            SampleMode::Sample => sample_depth(phi, rng)?,
            SampleMode::Argmax => argmax_depth(phi),
        };
        let depth = bucket_depth(buckets, z, out.distribution.delta[z], self.config.offset_mode);
        let mean = unproject(ray, depth)?;
        Ok((self.primitive(out, mean, depth, phi[z], footprint)?, z))
    }

    /// Eq. 6 baseline Gaussian.
    pub fn regress_depth_baseline(
        &self,
        store: &ParamStore,
        feature: &[f64],
        ray: &Ray<f64>,
        footprint: f64,
        near: f64,
        far: f64,
    ) -> Result<GaussianPrimitive<f64>> {
        let out = self.predict(store, feature)?;
        let depth = regression_depth(out.depth_logit, near, far);
        let mean = unproject(ray, depth)?;
        self.primitive(&out, mean, depth, sigmoid(out.opacity_logit), footprint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let l = HeadConfig { buckets: 5, sh_degree: 2, ..HeadConfig::default() }.layout();
        assert_eq!(l.width(), 5 + 5 + 3 + 4 + 27 + 2);
        assert_eq!(l.depth_logit(), l.sh().1);
    }

    #[test]
    fn inverse_cdf_skips_empty_tail() {
        assert_eq!(inverse_cdf(&[0.5, 0.5, 0.0], 0.999_999_999_999_999_9), 1);
        assert_eq!(inverse_cdf(&[0.0, 1.0], 0.0), 1);
    }
}
