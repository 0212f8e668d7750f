//! Command-line front end. Every pipeline stage is a subcommand reading and
//! writing artifacts in `--out`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::Error;
use crate::io;
use crate::model::{CameraModel, GaussianSet};
use crate::pipeline::{self, Artifacts, PipelineConfig, RefineMode, StageContext, StageError};
use crate::sampler::sample_indices;
use crate::synth::SceneSpec;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_STAGE: u8 = 3;
pub const EXIT_UNDEFINED_METRIC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "splatocc", version, about = "Semantic occupancy from pixel-aligned 3D Gaussians")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON pipeline config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sampling grid size in meters.
    #[arg(long, global = true)]
    pub grid_size: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub refine: Option<RefineMode>,
    #[arg(long, global = true)]
    pub ray_stride: Option<usize>,
    /// Comma-separated RayIoU distance thresholds in meters.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ray_thresholds: Option<Vec<f64>>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Also write the full per-voxel probability field.
    #[arg(long, global = true)]
    pub dump_probs: bool,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Camera rig preset.
    #[arg(long, global = true)]
    pub rig: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scene.json, cameras.json and gt.occ.
    GenScene,
    /// Render depth_<i>.dpm and gt_depth_<i>.dpm from scene.json.
    RenderDepth,
    /// Unproject depth maps into gaussians_init.gsb.
    Init,
    /// Keep one Gaussian per occupied voxel.
    Sample {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Only count distinct occupied voxels.
        #[arg(long)]
        dry_run: bool,
    },
    /// Apply basis-constrained positional offsets.
    Refine {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Render a Gaussian set into an OCC1 grid.
    Render {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare pred.occ against gt.occ and write metrics.json.
    Metrics {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Gaussian set scored for Perc./Dist.
        #[arg(long)]
        gaussians: Option<PathBuf>,
    },
    /// Evaluate the training objectives and write losses.json.
    EvalLoss {
        #[arg(long)]
        gaussians: Option<PathBuf>,
    },
    /// Run every stage in order.
    Pipeline,
    /// Time voxelize + sort + sample on one thread.
    Bench {
        #[arg(long, default_value_t = 1_000_000)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

/// Config file (if any) with flag overrides applied.
pub fn resolve_config(g: &GlobalArgs) -> Result<PipelineConfig, Error> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    if let Some(v) = g.grid_size {
        cfg.grid_size = v;
    }
    if let Some(v) = g.refine {
        cfg.refine = v;
    }
    if let Some(v) = g.ray_stride {
        cfg.ray_stride = v;
    }
    if let Some(v) = &g.ray_thresholds {
        cfg.ray_thresholds = v.clone();
    }
    if g.dump_probs {
        cfg.dump_probs = true;
    }
    if let Some(v) = &g.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &g.rig {
        cfg.rig = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::UndefinedMetric(_) => EXIT_UNDEFINED_METRIC,
        _ => EXIT_STAGE,
    }
}

fn load_scene(art: &Artifacts) -> crate::Result<(SceneSpec, Vec<CameraModel>)> {
    Ok((io::read_json(&art.scene())?, io::read_json(&art.cameras())?))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn bench(count: usize, repeats: usize, seed: u64, cfg: &PipelineConfig) -> crate::Result<serde_json::Value> {
    let spec = cfg.sampling_spec()?;
    let ext = *spec.extents();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vector3<f64>> = (0..count)
        .map(|_| {
            Vector3::new(
                rng.random_range(ext.min.x..ext.max.x),
                rng.random_range(ext.min.y..ext.max.y),
                rng.random_range(ext.min.z..ext.max.z),
            )
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut best = f64::INFINITY;
    let mut kept = 0;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        kept = pool.install(|| sample_indices(&means, &spec, seed)).len();
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(json!({
        "gaussians": count,
        "occupied_voxels": kept,
        "threads": 1,
        "best_seconds": best,
        "gaussians_per_second": count as f64 / best,
    }))
}

fn dispatch(cli: &Cli, cfg: &PipelineConfig) -> Result<(), StageError> {
    let art = Artifacts::new(&cfg.out);
    let read_only = matches!(cli.command, Command::Bench { .. } | Command::Sample { dry_run: true, .. });
    if !read_only {
        std::fs::create_dir_all(&art.dir).map_err(Error::from).stage("config")?;
    }
    match &cli.command {
        Command::GenScene => {
            pipeline::gen_scene(cfg, &art).stage("gen-scene")?;
        }
        Command::RenderDepth => {
            let (scene, cams) = load_scene(&art).stage("render-depth")?;
            pipeline::render_depth(cfg, &art, &scene, &cams).stage("render-depth")?;
        }
        Command::Init => {
            let (scene, cams) = load_scene(&art).stage("init")?;
            let depths = pipeline::read_depths(&art, cams.len(), false).stage("init")?;
            pipeline::initialize(cfg, &art, &scene, &cams, &depths).stage("init")?;
        }
        Command::Sample { input, dry_run } => {
            let g = io::read_gsb(input.as_ref().unwrap_or(&art.init())).stage("sample")?;
            if *dry_run {
                let n = pipeline::sample_dry_run(cfg, &g).stage("sample")?;
                print_json(&json!({ "input": g.len(), "occupied_voxels": n }));
            } else {
                pipeline::sample(cfg, &art, &g).stage("sample")?;
            }
        }
        Command::Refine { input } => {
            let g = io::read_gsb(input.as_ref().unwrap_or(&art.sampled())).stage("refine")?;
            let scene: Option<SceneSpec> = match cfg.refine {
                RefineMode::OracleSnap => Some(io::read_json(&art.scene()).stage("refine")?),
                _ => None,
            };
            pipeline::refine(cfg, &art, scene.as_ref(), &g).stage("refine")?;
        }
        Command::Render { input, output } => {
            let g = io::read_gsb(input.as_ref().unwrap_or(&art.refined())).stage("render")?;
            let field = pipeline::render(cfg, &art, &g).stage("render")?;
            if let Some(o) = output {
                io::write_occ(o, &field.to_grid()).stage("render")?;
            }
        }
        Command::Metrics { pred, gt, gaussians } => {
            let p = io::read_occ(pred.as_ref().unwrap_or(&art.pred())).stage("metrics")?;
            let t = io::read_occ(gt.as_ref().unwrap_or(&art.gt())).stage("metrics")?;
            let g = io::read_gsb(gaussians.as_ref().unwrap_or(&art.refined())).stage("metrics")?;
            let cams: Vec<CameraModel> = io::read_json(&art.cameras()).stage("metrics")?;
            let report = pipeline::evaluate(cfg, &p, &t, &cams, &g).stage("metrics")?;
            io::write_json(&art.metrics(), &report).stage("metrics")?;
            print_json(&serde_json::to_value(&report).map_err(Error::from).stage("metrics")?);
        }
        Command::EvalLoss { gaussians } => {
            let g: GaussianSet = io::read_gsb(gaussians.as_ref().unwrap_or(&art.refined())).stage("eval-loss")?;
            let gt = io::read_occ(&art.gt()).stage("eval-loss")?;
            let cams: Vec<CameraModel> = io::read_json(&art.cameras()).stage("eval-loss")?;
            let pred_depth = pipeline::read_depths(&art, cams.len(), false).stage("eval-loss")?;
            let gt_depth = pipeline::read_depths(&art, cams.len(), true).stage("eval-loss")?;
            let field = crate::render::render_grid(&g, &cfg.grid).stage("eval-loss")?;
            let report = pipeline::losses(cfg, &field, &gt, &pred_depth, &gt_depth).stage("eval-loss")?;
            io::write_json(&art.losses(), &report).stage("eval-loss")?;
            print_json(&serde_json::to_value(report).map_err(Error::from).stage("eval-loss")?);
        }
        Command::Pipeline => {
            let summary = pipeline::run_pipeline(cfg)?;
            print_json(&serde_json::to_value(summary).map_err(Error::from).stage("summary")?);
        }
        Command::Bench { count, repeats } => {
            let report = bench(*count, *repeats, cfg.seed, cfg).stage("bench")?;
            print_json(&report);
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and maps failures to exit codes.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    let cfg = match resolve_config(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: stage config: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: stage config: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match dispatch(&cli, &cfg) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e.source))
        }
    }
}
