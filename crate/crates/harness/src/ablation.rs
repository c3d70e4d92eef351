//! The full model and its four ablations, trained on identical seeds and
//! scenes and evaluated on the same held-out views.

use std::fmt::Write as _;
use std::path::Path;

use pairsplat::model::DepthMode;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::scene::SceneSpec;
use crate::train::{eval_scenes, evaluate, train, train_from, EvalReport, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoEpipolarEncoder,
    NoDepthEncoding,
    NoProbabilisticSampling,
    PlusDepthRegularization,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::Full,
        Arm::NoEpipolarEncoder,
        Arm::NoDepthEncoding,
        Arm::NoProbabilisticSampling,
        Arm::PlusDepthRegularization,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Full => "Ours",
            Arm::NoEpipolarEncoder => "No Epipolar Encoder",
            Arm::NoDepthEncoding => "No Depth Encoding",
            Arm::NoProbabilisticSampling => "No Probabilistic Sampling",
            Arm::PlusDepthRegularization => "Plus Depth Regularization",
        }
    }

    /// `base` with this arm's single flag changed. The regularization arm
    /// trains like the full model and is fine-tuned afterwards.
    pub fn config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Arm::Full | Arm::PlusDepthRegularization => {}
            Arm::NoEpipolarEncoder => c.model.encoder.no_epipolar = true,
            Arm::NoDepthEncoding => c.model.encoder.no_depth_encoding = true,
            Arm::NoProbabilisticSampling => c.model.depth_mode = DepthMode::Regression,
        }
        c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub base: TrainConfig,
    /// TV fine-tuning after the base schedule.
    pub tv_steps: usize,
    pub tv_weight: f64,
    /// Held-out scenes, each drawn at its own scale when `base.scale_range`
    /// is set.
    pub eval_scenes: usize,
    pub arms: Vec<Arm>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            tv_steps: 2000,
            tv_weight: 1e-4,
            eval_scenes: 4,
            arms: Arm::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_argmax: f64,
    pub ssim_argmax: f64,
    pub depth_tv: f64,
    pub train_seconds: f64,
}

impl AblationRow {
    fn new(arm: Arm, r: &EvalReport, train_seconds: f64) -> Self {
        Self {
            arm,
            psnr: r.mean_psnr_sample,
            ssim: r.mean_ssim_sample,
            psnr_argmax: r.mean_psnr_argmax,
            ssim_argmax: r.mean_ssim_argmax,
            depth_tv: r.mean_depth_tv,
            train_seconds,
        }
    }
}

pub fn run_ablations(config: &AblationConfig, spec: &SceneSpec, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    if config.arms.is_empty() {
        return Err(HarnessError::validation("no ablation arms selected"));
    }
    let base = &config.base;
    let scenes = eval_scenes(spec, base.scene_seed, config.eval_scenes, base.scale_range, base.seed)?;
    let mut rows = Vec::new();
    // The regularization arm fine-tunes the full model, so train that once.
    let mut full = None;
    for &arm in &config.arms {
        let dir = out_dir.map(|d| d.join(format!("{arm:?}").to_lowercase()));
        let t = std::time::Instant::now();
        match arm {
            Arm::Full | Arm::PlusDepthRegularization => {
                if full.is_none() {
                    let dir = out_dir.map(|d| d.join("full"));
                    full = Some((train(&Arm::Full.config(base), spec, dir.as_deref())?, t.elapsed().as_secs_f64()));
                }
                let (outcome, secs) = full.as_ref().expect("trained above");
                if arm == Arm::Full {
                    let report = evaluate(&outcome.model, &outcome.store, &scenes, base.seed, base.edge_sharpness)?;
                    rows.push(AblationRow::new(arm, &report, *secs));
                } else {
                    let t = std::time::Instant::now();
                    let mut store = outcome.store.clone();
                    let tune = tv_config(base, config.tv_steps, config.tv_weight);
                    train_from(&tune, spec, &outcome.model, &mut store, dir.as_deref())?;
                    let report = evaluate(&outcome.model, &store, &scenes, base.seed, base.edge_sharpness)?;
                    rows.push(AblationRow::new(arm, &report, secs + t.elapsed().as_secs_f64()));
                }
            }
            _ => {
                let outcome = train(&arm.config(base), spec, dir.as_deref())?;
                let secs = t.elapsed().as_secs_f64();
                let report = evaluate(&outcome.model, &outcome.store, &scenes, base.seed, base.edge_sharpness)?;
                rows.push(AblationRow::new(arm, &report, secs));
            }
        }
    }
    if let Some(dir) = out_dir {
        write_csv(&rows, &dir.join("ablations.csv"))?;
        let path = dir.join("ablations.md");
        std::fs::write(&path, markdown_table(&rows)).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(rows)
}

/// Fine-tuning schedule: full baseline, TV weight on, a fresh data stream.
pub fn tv_config(base: &TrainConfig, steps: usize, weight: f64) -> TrainConfig {
    let mut c = base.clone();
    c.steps = steps;
    c.seed = base.seed.wrapping_add(0x7f4a_7c15);
    c.loss.tv_depth = weight;
    c.curriculum.start = c.curriculum.end;
    c
}

pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "psnr", "ssim", "psnr_argmax", "ssim_argmax", "depth_tv", "train_seconds"])?;
    for r in rows {
        w.write_record([
            r.arm.label().to_string(),
            format!("{:.4}", r.psnr),
            format!("{:.4}", r.ssim),
            format!("{:.4}", r.psnr_argmax),
            format!("{:.4}", r.ssim_argmax),
            format!("{:.4}", r.depth_tv),
            format!("{:.1}", r.train_seconds),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn markdown_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Method | PSNR ↑ | SSIM ↑ | PSNR (argmax) | SSIM (argmax) | Depth TV |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.3} | {:.2} | {:.3} | {:.2} |",
            r.arm.label(),
            r.psnr,
            r.ssim,
            r.psnr_argmax,
            r.ssim_argmax,
            r.depth_tv
        );
    }
    s
}
