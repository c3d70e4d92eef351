//! Two-view encoder: per-image convolutional features refined by rounds of
//! epipolar cross-attention, residual convolution and self-attention.
//!
//! Feature maps are stored as `[H_f·W_f, C]` values in row-major pixel order.
//! Epipolar geometry is evaluated at feature resolution with feature-pixel
//! centers, so a feature pixel `(i, j)` addresses continuous coordinate
//! `(i + 0.5, j + 0.5)` of the downsampled camera.

mod depth_encoding;
mod epipolar;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, SparseRows, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Camera, DEFAULT_EPIPOLAR_SAMPLES};

pub use depth_encoding::{DepthEncoding, DEFAULT_BANDS};
pub use epipolar::{EpipolarGeometry, PairGeometry};

/// Total downsampling of the feature extractor (two 2×2 poolings).
pub const FEATURE_DOWNSAMPLE: usize = 4;
pub const DEFAULT_ROUNDS: usize = 2;
pub const DEFAULT_CHANNELS: usize = 64;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Feature channels `C`.
    pub channels: usize,
    /// Query/key width of every attention layer.
    pub key_dim: usize,
    /// Frequency bands `B` of the depth encoding.
    pub bands: usize,
    pub rounds: usize,
    pub epipolar_samples: usize,
    /// Skip epipolar cross-attention entirely.
    pub no_epipolar: bool,
    /// Drop `γ(d̃)` from the epipolar keys and values.
    pub no_depth_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            key_dim: DEFAULT_CHANNELS,
            bands: DEFAULT_BANDS,
            rounds: DEFAULT_ROUNDS,
            epipolar_samples: DEFAULT_EPIPOLAR_SAMPLES,
            no_epipolar: false,
            no_depth_encoding: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.key_dim == 0 || self.bands == 0 || self.epipolar_samples == 0 {
            return Err(Error::domain("encoder widths, bands and sample count must be positive"));
        }
        if self.rounds == 0 {
            return Err(Error::domain("encoder needs at least one round"));
        }
        Ok(())
    }
}

/// A feature grid on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap<'t> {
    /// `[height·width, C]`.
    pub values: Var<'t>,
    pub height: usize,
    pub width: usize,
    pub downsample: usize,
}

impl<'t> FeatureMap<'t> {
    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    fn with_values(&self, values: Var<'t>) -> Self {
        Self { values, ..*self }
    }

    /// `[height, width, C]` view for convolutions.
    fn as_image(&self) -> Result<Var<'t>> {
        let c = self.channels();
        self.values.reshape(&[self.height, self.width, c])
    }
}

/// Attention weights of one epipolar layer application.
#[derive(Clone, Debug)]
pub struct EpipolarAttentionRecord {
    /// View whose pixels are the queries.
    pub query_view: usize,
    pub round: usize,
    /// `[H_f·W_f, L]`; rows of pixels with empty segments are all zero.
    pub weights: Tensor,
    /// `[H_f·W_f, L]` triangulated depth of every sample (zero when empty).
    pub depths: Tensor,
    /// Per-pixel flag: the segment had samples.
    pub valid: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EpipolarIds {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct SelfAttentionIds {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct RoundIds {
    epipolar: EpipolarIds,
    conv: ConvIds,
    attention: SelfAttentionIds,
}

/// Encoder architecture and parameter handles for a fixed image size.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    image_height: usize,
    image_width: usize,
    extractor: [ConvIds; 4],
    position: ParamId,
    rounds: Vec<RoundIds>,
}

/// Output of [`Encoder::encode_pair`].
pub struct EncodedPair<'t> {
    pub features: [FeatureMap<'t>; 2],
    pub records: Vec<EpipolarAttentionRecord>,
    /// Number of epipolar layer applications that ran.
    pub epipolar_applications: usize,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn add_conv<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    gain: f64,
) -> Result<ConvIds> {
    let bound = gain * (6.0 / (9 * cin) as f64).sqrt();
    Ok(ConvIds {
        weight: store.add(format!("{name}.weight"), Tensor::uniform(rng, &[3, 3, cin, cout], bound))?,
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
    })
}

fn add_linear<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, rows: usize, cols: usize, gain: f64) -> Result<ParamId> {
    store.add(name.to_string(), Tensor::uniform(rng, &[rows, cols], gain * glorot(rows, cols)))
}

impl Encoder {
    /// Registers all encoder parameters in `store` under `encoder.*`.
    pub fn new<R: Rng>(
        config: EncoderConfig,
        image_height: usize,
        image_width: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if image_height % FEATURE_DOWNSAMPLE != 0 || image_width % FEATURE_DOWNSAMPLE != 0 {
            return Err(Error::shape(
                "encoder image size",
                &[image_height, image_width],
                &[FEATURE_DOWNSAMPLE],
            ));
        }
        let c = config.channels;
        let half = (c / 2).max(1);
        let extractor = [
            add_conv(store, rng, "encoder.extract.0", 3, half, 1.0)?,
            add_conv(store, rng, "encoder.extract.1", half, c, 1.0)?,
            add_conv(store, rng, "encoder.extract.2", c, c, 1.0)?,
            add_conv(store, rng, "encoder.extract.3", c, c, 1.0)?,
        ];
        let tokens = (image_height / FEATURE_DOWNSAMPLE) * (image_width / FEATURE_DOWNSAMPLE);
        let position = store.add("encoder.position", Tensor::uniform(rng, &[tokens, c], 0.1))?;
        let dk = config.key_dim;
        let s = c + 2 * config.bands;
        let mut rounds = Vec::with_capacity(config.rounds);
        for r in 0..config.rounds {
            let p = format!("encoder.round{r}");
            rounds.push(RoundIds {
                epipolar: EpipolarIds {
                    query: add_linear(store, rng, &format!("{p}.epipolar.query"), c, dk, 1.0)?,
                    key: add_linear(store, rng, &format!("{p}.epipolar.key"), s, dk, 1.0)?,
                    value: add_linear(store, rng, &format!("{p}.epipolar.value"), s, c, 0.5)?,
                },
                conv: add_conv(store, rng, &format!("{p}.conv"), c, c, 0.3)?,
                attention: SelfAttentionIds {
                    query: add_linear(store, rng, &format!("{p}.self.query"), c, dk, 1.0)?,
                    key: add_linear(store, rng, &format!("{p}.self.key"), c, dk, 1.0)?,
                    value: add_linear(store, rng, &format!("{p}.self.value"), c, c, 0.5)?,
                },
            });
        }
        Ok(Self {
            config,
            image_height,
            image_width,
            extractor,
            position,
            rounds,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_height / FEATURE_DOWNSAMPLE, self.image_width / FEATURE_DOWNSAMPLE)
    }

    /// Convolutional features of an `[H, W, 3]` image.
    pub fn extract_features<'t>(&self, params: &Bound<'t>, image: Var<'t>) -> Result<FeatureMap<'t>> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 || s[0] != self.image_height || s[1] != self.image_width {
            return Err(Error::shape("extract_features", &s, &[self.image_height, self.image_width, 3]));
        }
        let conv = |x: Var<'t>, ids: ConvIds| x.conv2d(params.var(ids.weight), params.var(ids.bias));
        let x = conv(image, self.extractor[0])?.relu().avg_pool2()?;
        let x = conv(x, self.extractor[1])?.relu().avg_pool2()?;
        let x = conv(x, self.extractor[2])?.relu();
        let x = conv(x, self.extractor[3])?;
        let (h, w) = self.feature_size();
        let values = x.layer_norm(LAYER_NORM_EPS)?.reshape(&[h * w, self.config.channels])?;
        Ok(FeatureMap {
            values,
            height: h,
            width: w,
            downsample: FEATURE_DOWNSAMPLE,
        })
    }

    /// Eqs. 1–3: `F[u] += Att(Q·F[u], {K·s_l}, {V·s_l})` with
    /// `s_l = F̃[ũ_l] ⊕ γ(d̃_l)`. Pixels without a segment are unchanged.
    pub fn epipolar_attention_layer<'t>(
        &self,
        params: &Bound<'t>,
        round: usize,
        features: FeatureMap<'t>,
        other: FeatureMap<'t>,
        geometry: &EpipolarGeometry,
        query_view: usize,
    ) -> Result<(FeatureMap<'t>, EpipolarAttentionRecord)> {
        let ids = self.round_ids(round)?.epipolar;
        let n = features.height * features.width;
        let l = geometry.samples();
        let valid = geometry.valid_pixels();
        let mut record = EpipolarAttentionRecord {
            query_view,
            round,
            weights: Tensor::zeros(&[n, l]),
            depths: geometry.depth_table(n),
            valid: geometry.valid_mask(n),
        };
        if valid.is_empty() {
            return Ok((features, record));
        }
        let c = features.channels();
        if other.channels() != c || geometry.target_pixels() != other.height * other.width {
            return Err(Error::shape("epipolar attention", &[n, c], &other.values.shape()));
        }
        let nv = valid.len();
        let dk = self.config.key_dim;
        let tape = features.values.tape();

        let queries = features
            .values
            .sparse_rows(Arc::new(SparseRows::gather(n, valid)?))?
            .matmul(params.var(ids.query))?;
        let sampled = other.values.sparse_rows(geometry.bilinear())?;
        let gamma = if self.config.no_depth_encoding {
            Tensor::zeros(geometry.encodings().shape())
        } else {
            geometry.encodings().clone()
        };
        let s = Var::concat(&[sampled, tape.constant(gamma)])?;
        let keys = s.matmul(params.var(ids.key))?.reshape(&[nv, l, dk])?.transpose()?;
        let values = s.matmul(params.var(ids.value))?.reshape(&[nv, l, c])?;
        let scores = queries
            .reshape(&[nv, 1, dk])?
            .bmm(keys)?
            .reshape(&[nv, l])?
            .scale(1.0 / (dk as f64).sqrt());
        let attention = scores.softmax()?;
        let update = attention
            .reshape(&[nv, 1, l])?
            .bmm(values)?
            .reshape(&[nv, c])?
            .sparse_rows(Arc::new(SparseRows::scatter(n, valid)?))?;
        {
            let a = attention.value();
            for (row, &p) in valid.iter().enumerate() {
                record.weights.data_mut()[p * l..(p + 1) * l].copy_from_slice(&a.data()[row * l..(row + 1) * l]);
            }
        }
        Ok((features.with_values(features.values.add(update)?), record))
    }

    /// Eq. 4: `F += Conv(F)`.
    pub fn residual_conv_layer<'t>(&self, params: &Bound<'t>, round: usize, features: FeatureMap<'t>) -> Result<FeatureMap<'t>> {
        let ids = self.round_ids(round)?.conv;
        let c = features.channels();
        let delta = features
            .as_image()?
            .conv2d(params.var(ids.weight), params.var(ids.bias))?
            .reshape(&[features.height * features.width, c])?;
        Ok(features.with_values(features.values.add(delta)?))
    }

    /// Eq. 5: `F += SelfAttention(F)` over all tokens, with learned positional
    /// embeddings added to queries and keys.
    pub fn self_attention_layer<'t>(&self, params: &Bound<'t>, round: usize, features: FeatureMap<'t>) -> Result<FeatureMap<'t>> {
        let position = params.var(self.position);
        self.self_attention_with(params, round, features, Some(position))
    }

    /// Self-attention with an explicit (or no) positional embedding.
    pub fn self_attention_with<'t>(
        &self,
        params: &Bound<'t>,
        round: usize,
        features: FeatureMap<'t>,
        position: Option<Var<'t>>,
    ) -> Result<FeatureMap<'t>> {
        let ids = self.round_ids(round)?.attention;
        let x = features.values;
        let xp = match position {
            Some(p) => x.add(p)?,
            None => x,
        };
        let q = xp.matmul(params.var(ids.query))?;
        let k = xp.matmul(params.var(ids.key))?;
        let v = x.matmul(params.var(ids.value))?;
        let dk = self.config.key_dim as f64;
        let attention = q.matmul(k.transpose()?)?.scale(1.0 / dk.sqrt()).softmax()?;
        Ok(features.with_values(x.add(attention.matmul(v)?)?))
    }

    /// Full two-view encoding (§4.1). Each round runs epipolar attention for
    /// both views against the other's features from the start of the round,
    /// then residual convolution and self-attention per view.
    pub fn encode_pair<'t>(
        &self,
        params: &Bound<'t>,
        images: [Var<'t>; 2],
        geometry: &PairGeometry,
    ) -> Result<EncodedPair<'t>> {
        let mut f = [
            self.extract_features(params, images[0])?,
            self.extract_features(params, images[1])?,
        ];
        let mut records = Vec::new();
        let mut applications = 0;
        for round in 0..self.config.rounds {
            if !self.config.no_epipolar {
                let (a, ra) = self.epipolar_attention_layer(params, round, f[0], f[1], geometry.forward(), 0)?;
                let (b, rb) = self.epipolar_attention_layer(params, round, f[1], f[0], geometry.backward(), 1)?;
                f = [a, b];
                records.push(ra);
                records.push(rb);
                applications += 2;
            }
            for fm in f.iter_mut() {
                *fm = self.residual_conv_layer(params, round, *fm)?;
                *fm = self.self_attention_layer(params, round, *fm)?;
            }
        }
        Ok(EncodedPair {
            features: f,
            records,
            epipolar_applications: applications,
        })
    }

    /// Epipolar geometry for a camera pair at feature resolution.
    pub fn pair_geometry(&self, cameras: [&Camera<f64>; 2], near: f64, far: f64) -> Result<PairGeometry> {
        let encoding = DepthEncoding::new(self.config.bands, near, far)?;
        PairGeometry::new(cameras, FEATURE_DOWNSAMPLE, near, far, self.config.epipolar_samples, &encoding)
    }

    fn round_ids(&self, round: usize) -> Result<RoundIds> {
        self.rounds
            .get(round)
            .copied()
            .ok_or_else(|| Error::domain(format!("round {round} out of range {}", self.rounds.len())))
    }
}
