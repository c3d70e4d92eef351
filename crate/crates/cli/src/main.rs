use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pairsplat::autodiff::check::op_gradient_suite;
use pairsplat::autodiff::Tape;
use pairsplat::gradcheck::{render_gradient_suite, GradTolerance};
use pairsplat::head::SampleMode;
use pairsplat::model::{to_world, Model};
use pairsplat_harness::ablation::{markdown_table, run_ablations, AblationConfig};
use pairsplat_harness::attention::dump_attention;
use pairsplat_harness::io::{load_checkpoint, write_scene_dir};
use pairsplat_harness::ply::export_ply;
use pairsplat_harness::scene::{gen_scene, SceneRenderer, SceneSpec};
use pairsplat_harness::train::{build_model, eval_scenes, evaluate, pair_input, stream_rng, train, TrainConfig, SAMPLE_STREAM};
use pairsplat_harness::{HarnessError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "pairsplat", version, about = "Two-view Gaussian splat reconstruction on synthetic scenes")]
struct Cli {
    /// Seed for every random stream (scene textures, init, sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene to a posed-image directory.
    GenScene,
    /// Train a model; writes checkpoints, the config and a loss log.
    Train,
    /// Evaluate a checkpoint on held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        scenes: usize,
    },
    /// Train every ablation arm and write the results table.
    Ablate,
    /// Finite-difference checks of the rasterizer and every autodiff op.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Predict Gaussians for a reference pair and write them as PLY.
    ExportPly {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Argmax)]
        mode: Mode,
    },
    /// Visualize epipolar attention for query pixels of the first view.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature-grid pixel `x,y`; repeatable.
        #[arg(long = "query", value_parser = parse_query, required = true)]
        queries: Vec<[usize; 2]>,
        #[arg(long, default_value_t = 0)]
        round: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sample,
    Argmax,
}

fn parse_query(s: &str) -> std::result::Result<[usize; 2], String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok([p(x)?, p(y)?])
}

#[derive(Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    #[default]
    Default,
    Clusters,
    Planted,
}

/// Everything a `--config` file may set; missing sections take defaults.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    preset: Preset,
    /// Full scene spec; overrides `preset`.
    scene: Option<SceneSpec>,
    train: TrainConfig,
    ablation: Option<AblationConfig>,
}

impl RunConfig {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| HarnessError::validation(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| HarnessError::validation(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.train.seed = s;
            cfg.train.scene_seed = s;
            if let Some(a) = cfg.ablation.as_mut() {
                a.base.seed = s;
                a.base.scene_seed = s;
            }
        }
        Ok(cfg)
    }

    fn spec(&self) -> SceneSpec {
        self.scene.clone().unwrap_or_else(|| match self.preset {
            Preset::Default => SceneSpec::default(),
            Preset::Clusters => SceneSpec::two_depth_clusters(),
            Preset::Planted => SceneSpec::planted(),
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

/// Model architecture from the config with parameters from `path`.
fn restore(cfg: &RunConfig, spec: &SceneSpec, path: &Path) -> Result<(Model, pairsplat::autodiff::ParamStore)> {
    if !path.is_file() {
        return Err(HarnessError::validation(format!("no checkpoint at {}", path.display())));
    }
    let (model, mut store) = build_model(&cfg.train.model, spec, cfg.train.seed)?;
    let saved = load_checkpoint(path)?;
    store
        .load_from(&saved)
        .map_err(|e| HarnessError::validation(format!("checkpoint does not match the configured model: {e}")))?;
    Ok((model, store))
}

/// `Ok(false)` is a completed run whose checks failed.
fn run(cli: Cli) -> Result<bool> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let spec = cfg.spec();
    spec.validate()?;
    let out = cli.out.as_path();
    match cli.command {
        Command::GenScene => {
            create_dir(out)?;
            let scene = gen_scene(&spec, cfg.train.scene_seed)?;
            let json = write_scene_dir(&scene, out)?;
            println!("wrote {} views to {}", scene.views.len(), json.display());
        }
        Command::Train => {
            let outcome = train(&cfg.train, &spec, Some(out))?;
            let last = outcome.log.last().expect("at least one step");
            println!(
                "trained {} steps: loss {:.5}, psnr {:.2} dB; run directory {}",
                last.step + 1,
                last.loss,
                last.psnr,
                out.display()
            );
        }
        Command::Eval { checkpoint, scenes } => {
            let (model, store) = restore(&cfg, &spec, &checkpoint)?;
            let held_out = eval_scenes(&spec, cfg.train.scene_seed, scenes, cfg.train.scale_range, cfg.train.seed)?;
            let report = evaluate(&model, &store, &held_out, cfg.train.seed, cfg.train.edge_sharpness)?;
            create_dir(out)?;
            let path = out.join("eval.json");
            fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| HarnessError::io(&path, e))?;
            println!(
                "sample: psnr {:.2} dB, ssim {:.4}; argmax: psnr {:.2} dB, ssim {:.4}; depth tv {:.4}; outliers {:.3}",
                report.mean_psnr_sample,
                report.mean_ssim_sample,
                report.mean_psnr_argmax,
                report.mean_ssim_argmax,
                report.mean_depth_tv,
                report.depth_outlier_fraction
            );
        }
        Command::Ablate => {
            let ablation = cfg.ablation.clone().unwrap_or_else(|| AblationConfig {
                base: cfg.train.clone(),
                ..AblationConfig::default()
            });
            create_dir(out)?;
            let rows = run_ablations(&ablation, &spec, Some(out))?;
            print!("{}", markdown_table(&rows));
        }
        Command::GradCheck { scenes, trials } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let mut ok = true;
            println!("rasterizer, {scenes} scenes");
            for r in render_gradient_suite(&mut rng, scenes, &GradTolerance::default())? {
                ok &= r.passed();
                println!(
                    "  {:<12} max rel err {:.3e}  checked {:>6}  failures {}",
                    r.class.name(),
                    r.max_rel_err,
                    r.checked,
                    r.failures
                );
            }
            println!("autodiff ops, {trials} trials");
            for r in op_gradient_suite(&mut rng, trials)? {
                ok &= r.passed();
                println!("  {:<22} max rel err {:.3e}", r.name, r.max_rel_err);
            }
            if !ok {
                println!("gradient check FAILED");
                return Ok(false);
            }
        }
        Command::ExportPly { checkpoint, mode } => {
            let (model, store) = restore(&cfg, &spec, &checkpoint)?;
            let renderer = SceneRenderer::new(&spec, cfg.train.scene_seed)?;
            let pair = pair_input(&spec, &renderer, [-0.5, 0.5])?;
            let prepared = model.prepare(&pair, &[])?;
            let tape = Tape::new();
            let params = store.bind(&tape);
            let images = [tape.constant(pair.images[0].clone()), tape.constant(pair.images[1].clone())];
            let mode = match mode {
                Mode::Sample => SampleMode::Sample,
                Mode::Argmax => SampleMode::Argmax,
            };
            let mut rng = stream_rng(cfg.train.seed, SAMPLE_STREAM);
            let pred = model.predict(&params, images, &prepared, mode, &mut rng)?;
            let gaussians = to_world(&model.gaussians(&pred.views)?, prepared.canonical.unit);
            create_dir(out)?;
            let path = out.join("splats.ply");
            export_ply(&gaussians, &path)?;
            println!("wrote {} Gaussians to {}", gaussians.len(), path.display());
        }
        Command::DumpAttention { checkpoint, queries, round } => {
            let (model, store) = restore(&cfg, &spec, &checkpoint)?;
            let renderer = SceneRenderer::new(&spec, cfg.train.scene_seed)?;
            let pair = pair_input(&spec, &renderer, [-0.5, 0.5])?;
            create_dir(out)?;
            let dump = dump_attention(&model, &store, &pair, &queries, round, out)?;
            for q in &dump.queries {
                match &q.skipped {
                    Some(why) => println!("query {:?}: skipped ({why})", q.query),
                    None => println!("query {:?}: {} samples, peak weight {:.3}", q.query, q.samples.len(), q.scale),
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
