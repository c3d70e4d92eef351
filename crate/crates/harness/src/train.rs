//! Photometric training with a baseline curriculum, and held-out evaluation.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use pairsplat::autodiff::{adam_step, encode_checkpoint, AdamConfig, AdamState, ParamStore, Tape, Tensor, Var};
use pairsplat::geometry::Camera;
use pairsplat::head::SampleMode;
use pairsplat::model::{DepthMode, Model, ModelConfig, PairInput, Prediction, PreparedPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::metrics::{psnr, ssim};
use crate::regularizer::{tv_depth_regularizer, tv_energy, EDGE_SHARPNESS};
use crate::scene::{gen_scene, log_uniform, Scene, SceneRenderer, SceneSpec};

/// Independent random streams derived from the one seed, so that arms
/// differing only in architecture still see the same data.
pub const INIT_STREAM: u64 = 0;
pub const DATA_STREAM: u64 = 1;
pub const SAMPLE_STREAM: u64 = 2;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Baseline fraction of the reference pair: linear from `start` to `end`
/// over the first `ramp` fraction of training, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Curriculum {
    pub start: f64,
    pub end: f64,
    pub ramp: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            start: 0.25,
            end: 1.0,
            ramp: 0.5,
        }
    }
}

impl Curriculum {
    pub fn fraction(&self, step: usize, steps: usize) -> f64 {
        let ramp_steps = self.ramp * steps as f64;
        if ramp_steps <= 0.0 {
            return self.end;
        }
        let t = (step as f64 / ramp_steps).min(1.0);
        self.start + (self.end - self.start) * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mse: f64,
    pub tv_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mse: 1.0, tv_depth: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Texture seed of the training scene.
    pub scene_seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub loss: LossWeights,
    pub curriculum: Curriculum,
    /// Head mode, encoder flags, `Z`, rounds and epipolar sample count.
    pub model: ModelConfig,
    /// Log-uniform per-step scene scale; poses move, near/far stay put.
    pub scale_range: Option<[f64; 2]>,
    pub edge_sharpness: f64,
    /// Write a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene_seed: 0,
            steps: 2000,
            learning_rate: 2e-3,
            loss: LossWeights::default(),
            curriculum: Curriculum::default(),
            model: small_model(),
            scale_range: None,
            edge_sharpness: EDGE_SHARPNESS,
            checkpoint_every: 0,
        }
    }
}

/// Desk-scale architecture used by default.
pub fn small_model() -> ModelConfig {
    use pairsplat::encoder::EncoderConfig;
    use pairsplat::head::HeadConfig;
    ModelConfig {
        encoder: EncoderConfig {
            channels: 16,
            key_dim: 16,
            bands: 6,
            rounds: 1,
            epipolar_samples: 24,
            ..EncoderConfig::default()
        },
        head: HeadConfig {
            buckets: 32,
            hidden: 32,
            sh_degree: 0,
            ..HeadConfig::default()
        },
        ..ModelConfig::default()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(HarnessError::validation("steps must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HarnessError::validation("learning rate must be positive"));
        }
        if self.loss.mse < 0.0 || self.loss.tv_depth < 0.0 {
            return Err(HarnessError::validation("loss weights must be non-negative"));
        }
        let c = &self.curriculum;
        if !(c.start > 0.0 && c.start <= c.end && c.end <= 1.0 && (0.0..=1.0).contains(&c.ramp)) {
            return Err(HarnessError::validation("curriculum needs 0 < start <= end <= 1 and ramp in [0, 1]"));
        }
        if let Some([lo, hi]) = self.scale_range {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(HarnessError::validation("scale range needs 0 < lo <= hi"));
            }
        }
        self.model.encoder.validate()?;
        self.model.head.validate()?;
        Ok(())
    }

    pub fn depth_mode(&self) -> DepthMode {
        self.model.depth_mode
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub psnr: f64,
    pub tv_depth: f64,
    pub baseline_fraction: f64,
    pub scale: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub log: Vec<StepRecord>,
    /// `(step, encoded checkpoint)`, ending with the final parameters.
    pub checkpoints: Vec<(usize, Vec<u8>)>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &[u8] {
        &self.checkpoints.last().expect("training always checkpoints at the end").1
    }
}

pub fn build_model(config: &ModelConfig, spec: &SceneSpec, seed: u64) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(seed, INIT_STREAM);
    let model = Model::new(config.clone(), spec.height, spec.width, &mut store, &mut rng)?;
    Ok((model, store))
}

/// Pair and target at the given rig positions, in world units.
pub fn pair_input(spec: &SceneSpec, renderer: &SceneRenderer, refs: [f64; 2]) -> Result<PairInput> {
    let views = [renderer.render(refs[0])?, renderer.render(refs[1])?];
    let (near, far) = spec.depth_range();
    Ok(PairInput {
        images: [views[0].image.clone(), views[1].image.clone()],
        cameras: [views[0].camera.clone(), views[1].camera.clone()],
        near,
        far,
    })
}

/// One differentiable forward pass: prediction, RGB render of `target`
/// (`[H·W, 3]`) and its depth channel (`[H·W, 1]`).
pub struct Forward<'t> {
    pub prediction: Prediction<'t>,
    pub rgb: Var<'t>,
    pub depth: Var<'t>,
}

pub fn forward<'t, R: Rng + ?Sized>(
    model: &Model,
    tape: &'t Tape,
    params: &pairsplat::autodiff::Bound<'t>,
    pair: &PairInput,
    prepared: &PreparedPair,
    target: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Forward<'t>> {
    let images = [tape.constant(pair.images[0].clone()), tape.constant(pair.images[1].clone())];
    let prediction = model.predict(params, images, prepared, mode, rng)?;
    let out = model.render(&prediction.views, &prepared.targets[target])?;
    Ok(Forward {
        rgb: out.slice_last(0, 3)?,
        depth: out.slice_last(3, 4)?,
        prediction,
    })
}

fn flat_rgb(image: &Tensor) -> Result<Tensor> {
    let n = image.len() / 3;
    Ok(image.clone().reshaped(&[n, 3])?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn write_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Trains on views of `spec`. Every step draws a reference pair at the
/// curriculum's baseline fraction and a target between them; no depth ever
/// enters the loss.
pub fn train(config: &TrainConfig, spec: &SceneSpec, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    let (model, mut store) = build_model(&config.model, spec, config.seed)?;
    let (log, checkpoints) = train_from(config, spec, &model, &mut store, out_dir)?;
    Ok(TrainOutcome {
        model,
        store,
        log,
        checkpoints,
    })
}

/// Continues training `store` in place (used for fine-tuning).
pub fn train_from(
    config: &TrainConfig,
    spec: &SceneSpec,
    model: &Model,
    store: &mut ParamStore,
    out_dir: Option<&Path>,
) -> Result<(Vec<StepRecord>, Vec<(usize, Vec<u8>)>)> {
    config.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        write_file(&dir.join("config.json"), serde_json::to_string_pretty(config)?.as_bytes())?;
    }
    let mut data_rng = stream_rng(config.seed, DATA_STREAM);
    let mut sample_rng = stream_rng(config.seed, SAMPLE_STREAM);
    let adam = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(adam, store.values());
    let base_renderer = SceneRenderer::new(spec, config.scene_seed)?;
    let mut log = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    for step in 0..config.steps {
        let frac = config.curriculum.fraction(step, config.steps);
        let scale = match config.scale_range {
            Some([lo, hi]) => log_uniform(&mut data_rng, lo, hi),
            None => spec.scale,
        };
        let target_pos = data_rng.gen_range(-0.5..=0.5) * frac;
        let swap = data_rng.gen_bool(0.5);
        let renderer = if config.scale_range.is_some() {
            base_renderer.with_scale(scale, false)
        } else {
            base_renderer.clone()
        };
        let refs = if swap { [frac / 2.0, -frac / 2.0] } else { [-frac / 2.0, frac / 2.0] };
        let pair = pair_input(renderer.spec(), &renderer, refs)?;
        let target = renderer.render(target_pos)?;
        let prepared = model.prepare(&pair, std::slice::from_ref(&target.camera))?;

        if store.values().iter().any(|t| !t.is_finite()) {
            return Err(diverged(step, f64::NAN, store, &log, out_dir)?);
        }
        let tape = Tape::new();
        let params = store.bind(&tape);
        let fwd = forward(model, &tape, &params, &pair, &prepared, 0, SampleMode::Sample, &mut sample_rng)?;
        let goal = tape.constant(flat_rgb(&target.image)?);
        let mse = fwd.rgb.mse(goal)?;
        let mse_value = mse.item().unwrap_or(f64::NAN);
        let mut loss = mse.scale(config.loss.mse);
        let mut tv_value = 0.0;
        if config.loss.tv_depth > 0.0 {
            let tv = tv_depth_regularizer(fwd.depth, &target.image, config.edge_sharpness)?;
            tv_value = tv.item().unwrap_or(f64::NAN);
            loss = loss.add(tv.scale(config.loss.tv_depth))?;
        }
        let loss_value = loss.item().unwrap_or(f64::NAN);
        let grads = if loss_value.is_finite() {
            params.gradients(&tape.backward(loss)?)
        } else {
            Vec::new()
        };
        if !loss_value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged(step, loss_value, store, &log, out_dir)?);
        }
        adam_step(store.values_mut(), &grads, &mut state)?;
        let record = StepRecord {
            step,
            loss: loss_value,
            mse: mse_value,
            psnr: -10.0 * mse_value.log10(),
            tv_depth: tv_value,
            baseline_fraction: frac,
            scale,
        };
        debug!("step {step}: loss {loss_value:.6} psnr {:.2}", record.psnr);
        log.push(record);
        let last = step + 1 == config.steps;
        if last || (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
            let bytes = encode_checkpoint(store);
            if let Some(dir) = out_dir {
                let name = if last { "final.ckpt".to_string() } else { format!("step{:06}.ckpt", step + 1) };
                write_file(&dir.join(name), &bytes)?;
            }
            checkpoints.push((step + 1, bytes));
        }
    }
    if let Some(dir) = out_dir {
        write_log(&dir.join("train_log.csv"), &log)?;
    }
    info!(
        "trained {} steps, final loss {:.6}",
        config.steps,
        log.last().map_or(f64::NAN, |r| r.loss)
    );
    Ok((log, checkpoints))
}

/// The divergence error, after dumping parameters and the log so far.
fn diverged(step: usize, loss: f64, store: &ParamStore, log: &[StepRecord], out_dir: Option<&Path>) -> Result<HarnessError> {
    let dump = match out_dir {
        Some(dir) => {
            let path = dir.join(format!("diverged_step{step:06}.ckpt"));
            write_file(&path, &encode_checkpoint(store))?;
            write_log(&dir.join("train_log.csv"), log)?;
            Some(path)
        }
        None => None,
    };
    Ok(HarnessError::Diverged { step, loss, dump })
}

/// Mean PSNR over windows of `window` steps at the start and end of a log.
pub fn psnr_gain(log: &[StepRecord], window: usize) -> f64 {
    let w = window.min(log.len() / 2).max(1);
    let mean = |r: &[StepRecord]| r.iter().map(|x| x.psnr).sum::<f64>() / r.len() as f64;
    mean(&log[log.len() - w..]) - mean(&log[..w])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub scene: usize,
    pub target: usize,
    pub psnr_sample: f64,
    pub ssim_sample: f64,
    pub psnr_argmax: f64,
    pub ssim_argmax: f64,
    /// Edge-aware TV of the rendered depth (sample mode).
    pub depth_tv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr_sample: f64,
    pub mean_ssim_sample: f64,
    pub mean_psnr_argmax: f64,
    pub mean_ssim_argmax: f64,
    pub mean_depth_tv: f64,
    /// Fraction of reference pixels whose predicted depth is more than 25%
    /// off in disparity (sample mode).
    pub depth_outlier_fraction: f64,
    /// Mean opacity of the sampled Gaussians.
    pub mean_opacity: f64,
    pub encode_seconds: f64,
    pub render_seconds: f64,
}

impl EvalReport {
    /// The headline number: sampled Gaussians, as in training.
    pub fn psnr(&self) -> f64 {
        self.mean_psnr_sample
    }
}

/// Held-out views: full-baseline pairs with their targets, one scene per
/// draw of the scale when a range is given.
pub fn eval_scenes(
    spec: &SceneSpec,
    scene_seed: u64,
    count: usize,
    scale_range: Option<[f64; 2]>,
    draw_seed: u64,
) -> Result<Vec<Scene>> {
    let mut rng = stream_rng(draw_seed, DATA_STREAM + 100);
    (0..count)
        .map(|_| {
            let mut s = spec.clone();
            if let Some([lo, hi]) = scale_range {
                s.scale = log_uniform(&mut rng, lo, hi);
                s.scale_depth_range = false;
            }
            gen_scene(&s, scene_seed)
        })
        .collect()
}

/// Renders every target of every scene in sample and argmax mode.
pub fn evaluate(model: &Model, store: &ParamStore, scenes: &[Scene], seed: u64, edge_sharpness: f64) -> Result<EvalReport> {
    let mut views = Vec::new();
    let mut encode_seconds = 0.0;
    let mut render_seconds = 0.0;
    let mut outliers = 0usize;
    let mut rays = 0usize;
    let mut opacity_sum = 0.0;
    let mut opacity_count = 0usize;
    let mut rng = stream_rng(seed, SAMPLE_STREAM + 100);
    for (si, scene) in scenes.iter().enumerate() {
        let [r0, r1] = scene.references();
        let pair = PairInput {
            images: [r0.image.clone(), r1.image.clone()],
            cameras: [r0.camera.clone(), r1.camera.clone()],
            near: scene.near,
            far: scene.far,
        };
        let targets: Vec<Camera<f64>> = scene.targets().iter().map(|v| v.camera.clone()).collect();
        let mut per_mode: Vec<Vec<(f64, f64, f64)>> = Vec::new();
        for mode in [SampleMode::Sample, SampleMode::Argmax] {
            let t0 = Instant::now();
            let prepared = model.prepare(&pair, &targets)?;
            let tape = Tape::new();
            let params = store.bind(&tape);
            let images = [tape.constant(pair.images[0].clone()), tape.constant(pair.images[1].clone())];
            let pred = model.predict(&params, images, &prepared, mode, &mut rng)?;
            encode_seconds += t0.elapsed().as_secs_f64();
            if mode == SampleMode::Sample {
                for v in &pred.views {
                    let a = v.opacity.value();
                    opacity_sum += a.sum();
                    opacity_count += a.len();
                }
                let (o, n) = depth_outliers(scene, &prepared, &pred)?;
                outliers += o;
                rays += n;
            }
            let mut metrics = Vec::new();
            for (ti, target) in scene.targets().iter().enumerate() {
                let t1 = Instant::now();
                let out = model.render(&pred.views, &prepared.targets[ti])?;
                render_seconds += t1.elapsed().as_secs_f64();
                let value = out.value();
                let (rgb, depth) = split_render(&value, &target.image)?;
                metrics.push((
                    psnr(&rgb, &target.image)?,
                    ssim(&rgb, &target.image)?,
                    tv_energy(&depth, &target.image, edge_sharpness)?,
                ));
            }
            per_mode.push(metrics);
        }
        for ti in 0..scene.targets().len() {
            let (ps, ss, tv) = per_mode[0][ti];
            let (pa, sa, _) = per_mode[1][ti];
            views.push(ViewMetrics {
                scene: si,
                target: ti,
                psnr_sample: ps,
                ssim_sample: ss,
                psnr_argmax: pa,
                ssim_argmax: sa,
                depth_tv: tv,
            });
        }
    }
    if views.is_empty() {
        return Err(HarnessError::validation("evaluation needs at least one target view"));
    }
    let mean = |f: &dyn Fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / views.len() as f64;
    Ok(EvalReport {
        mean_psnr_sample: mean(&|v| v.psnr_sample),
        mean_ssim_sample: mean(&|v| v.ssim_sample),
        mean_psnr_argmax: mean(&|v| v.psnr_argmax),
        mean_ssim_argmax: mean(&|v| v.ssim_argmax),
        mean_depth_tv: mean(&|v| v.depth_tv),
        depth_outlier_fraction: if rays > 0 { outliers as f64 / rays as f64 } else { 0.0 },
        mean_opacity: opacity_sum / opacity_count.max(1) as f64,
        views,
        encode_seconds,
        render_seconds,
    })
}

/// `[H·W, 4]` render to an `[H, W, 3]` image and a depth map.
pub fn split_render(value: &Tensor, like: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let rgb: Vec<f64> = value.data().chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect();
    let depth: Vec<f64> = value.data().chunks_exact(4).map(|c| c[3]).collect();
    Ok((Tensor::new(like.shape(), rgb)?, depth))
}

/// Counts reference feature pixels whose predicted ray depth misses the
/// surface by more than 25% in disparity. Diagnostic only.
fn depth_outliers(scene: &Scene, prepared: &PreparedPair, pred: &Prediction<'_>) -> Result<(usize, usize)> {
    let renderer = SceneRenderer::new(&scene.spec, scene.seed)?;
    let positions = [-0.5, 0.5];
    let to_unit = prepared.canonical.unit / scene.spec.scale;
    let mut outliers = 0;
    let mut total = 0;
    for v in 0..2 {
        let depth = pred.views[v].depth.value();
        for (p, ray) in prepared.rays[v].iter().enumerate() {
            let origin = pairsplat::Vec3f::new(positions[v] * scene.spec.baseline, 0.0, 0.0);
            if let Some(t) = renderer.hit_distance(origin, ray.direction) {
                let d = depth.data()[p] * to_unit;
                total += 1;
                if (1.0 / d - 1.0 / t).abs() > 0.25 / t {
                    outliers += 1;
                }
            }
        }
    }
    Ok((outliers, total))
}
