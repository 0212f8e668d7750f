//! End-to-end orchestration: scene → depth → initialize → sample → refine →
//! render → evaluate, with every stage reading and writing its artifacts.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::init_gaussians;
use crate::io;
use crate::loss::{cross_entropy_loss, depth_uncertainty_loss, lovasz_softmax_loss, LossReport, LossWeights};
use crate::metrics::{init_quality, iou_miou_grids, ray_iou, MetricReport, DEFAULT_RAY_STRIDE, DEFAULT_RAY_THRESHOLDS};
use crate::model::{CameraModel, DepthMap, GaussianSet, GridGeometry, OccupancyGrid, VoxelGridSpec};
use crate::refine::{refine_positions, OffsetBasis, SurfaceSnapWeights, WeightProvider, ZeroWeights};
use crate::render::{label_to_channel, render_grid, SemanticOccupancyField, MAHALANOBIS_CUTOFF};
use crate::sampler::{count_occupied_voxels, sample_representatives};
use crate::synth::{generate_scene, rasterize_gt_grid, render_depth_maps, rig, rig_preset, SceneClassAttributes, SceneConfig, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RefineMode {
    /// Pass sampled Gaussians through unchanged.
    Off,
    /// All-zero weights on the default basis.
    #[default]
    Zero,
    /// Weights that move each mean toward the nearest synthetic surface.
    OracleSnap,
}

/// Attributes assigned to every initialized Gaussian, with one-hot logits
/// taken from the ground-truth class hit by the pixel ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeConfig {
    pub scale: f64,
    pub opacity: f64,
    pub logit: f64,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            scale: 0.3,
            opacity: 0.9,
            logit: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub rig: String,
    pub downsample: usize,
    pub depth_noise: f64,
    pub grid: GridGeometry,
    /// Sampling grid size `s_g`, meters.
    pub grid_size: f64,
    pub refine: RefineMode,
    /// JSON list of basis rows; the axis-aligned `±s_g/2` basis when absent.
    pub basis: Option<PathBuf>,
    pub render_cutoff: f64,
    pub attributes: AttributeConfig,
    pub loss: LossWeights,
    pub ray_stride: usize,
    pub ray_thresholds: Vec<f64>,
    pub unknown_id: Option<u8>,
    pub dump_probs: bool,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            rig: "surround6".into(),
            downsample: 2,
            depth_noise: 0.0,
            grid: GridGeometry::new([64, 64, 16], Vector3::new(-16.0, -16.0, -5.0), 0.5).expect("valid default grid"),
            grid_size: 0.5,
            refine: RefineMode::Zero,
            basis: None,
            render_cutoff: MAHALANOBIS_CUTOFF,
            attributes: AttributeConfig::default(),
            loss: LossWeights::default(),
            ray_stride: DEFAULT_RAY_STRIDE,
            ray_thresholds: DEFAULT_RAY_THRESHOLDS.to_vec(),
            unknown_id: None,
            dump_probs: false,
            out: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        rig_preset(&self.rig)?;
        if self.downsample == 0 {
            return Err(Error::Config("downsample must be >= 1".into()));
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            return Err(Error::Config("depth_noise must be finite and >= 0".into()));
        }
        if !(self.grid_size > 0.0 && self.grid_size.is_finite()) {
            return Err(Error::Config("grid_size must be positive".into()));
        }
        if self.render_cutoff != MAHALANOBIS_CUTOFF {
            return Err(Error::Config(format!(
                "render_cutoff is fixed at {MAHALANOBIS_CUTOFF}, got {}",
                self.render_cutoff
            )));
        }
        if self.ray_stride == 0 {
            return Err(Error::Config("ray_stride must be >= 1".into()));
        }
        if self.ray_thresholds.is_empty() || self.ray_thresholds.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("ray_thresholds must be a nonempty list of nonnegative values".into()));
        }
        if self.unknown_id.is_some_and(|u| (u as usize) <= self.scene.num_classes) {
            return Err(Error::Config("unknown_id must differ from every class id and the empty id".into()));
        }
        if let Some(b) = &self.basis {
            if !b.is_file() {
                return Err(Error::Config(format!("basis file {} not found", b.display())));
            }
        }
        GridGeometry::new(self.grid.dims, self.grid.origin, self.grid.voxel_size)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn sampling_spec(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(self.grid.extents(), self.grid_size)
    }

    pub fn offset_basis(&self) -> Result<OffsetBasis> {
        match &self.basis {
            Some(p) => io::read_json(p),
            None => Ok(OffsetBasis::for_grid_size(self.grid_size)),
        }
    }
}

/// A failed stage and its cause.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub trait StageContext<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage: name, source })
    }
}

/// Artifact file names inside an output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn scene(&self) -> PathBuf {
        self.path("scene.json")
    }

    pub fn cameras(&self) -> PathBuf {
        self.path("cameras.json")
    }

    pub fn depth(&self, view: usize) -> PathBuf {
        self.path(&format!("depth_{view}.dpm"))
    }

    pub fn gt_depth(&self, view: usize) -> PathBuf {
        self.path(&format!("gt_depth_{view}.dpm"))
    }

    pub fn gt(&self) -> PathBuf {
        self.path("gt.occ")
    }

    pub fn init(&self) -> PathBuf {
        self.path("gaussians_init.gsb")
    }

    pub fn sampled(&self) -> PathBuf {
        self.path("gaussians_sampled.gsb")
    }

    pub fn refined(&self) -> PathBuf {
        self.path("gaussians_refined.gsb")
    }

    pub fn pred(&self) -> PathBuf {
        self.path("pred.occ")
    }

    pub fn probs(&self) -> PathBuf {
        self.path("pred_probs.bin")
    }

    pub fn metrics(&self) -> PathBuf {
        self.path("metrics.json")
    }

    pub fn losses(&self) -> PathBuf {
        self.path("losses.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.path("summary.json")
    }
}

/// Counts recorded after a full run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub views: usize,
    pub initialized: usize,
    pub sampled: usize,
    pub refined: usize,
    pub predicted_occupied: usize,
    pub gt_occupied: usize,
}

pub fn gen_scene(cfg: &PipelineConfig, art: &Artifacts) -> Result<(SceneSpec, Vec<CameraModel>, OccupancyGrid)> {
    let scene = generate_scene(cfg.seed, &cfg.scene)?;
    let cams = rig(&rig_preset(&cfg.rig)?)?;
    let gt = rasterize_gt_grid(&scene, &cfg.grid)?;
    io::write_json(&art.scene(), &scene)?;
    io::write_json(&art.cameras(), &cams)?;
    io::write_occ(&art.gt(), &gt)?;
    Ok((scene, cams, gt))
}

/// Predicted (possibly noisy) and noiseless depth maps, reloaded from disk form.
pub fn render_depth(
    cfg: &PipelineConfig,
    art: &Artifacts,
    scene: &SceneSpec,
    cams: &[CameraModel],
) -> Result<(Vec<DepthMap>, Vec<DepthMap>)> {
    let gt = render_depth_maps(scene, cams, cfg.downsample, 0.0, cfg.seed)?;
    let pred = if cfg.depth_noise > 0.0 {
        render_depth_maps(scene, cams, cfg.downsample, cfg.depth_noise, cfg.seed)?
    } else {
        gt.clone()
    };
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (i, (p, g)) in pred.depths.iter().zip(&gt.depths).enumerate() {
        io::write_dpm(&art.depth(i), p)?;
        io::write_dpm(&art.gt_depth(i), g)?;
        preds.push(io::quantize_dpm(p)?);
        gts.push(io::quantize_dpm(g)?);
    }
    Ok((preds, gts))
}

pub fn read_depths(art: &Artifacts, views: usize, gt: bool) -> Result<Vec<DepthMap>> {
    (0..views)
        .map(|i| io::read_dpm(&if gt { art.gt_depth(i) } else { art.depth(i) }))
        .collect()
}

pub fn initialize(
    cfg: &PipelineConfig,
    art: &Artifacts,
    scene: &SceneSpec,
    cams: &[CameraModel],
    depths: &[DepthMap],
) -> Result<GaussianSet> {
    let classes = render_depth_maps(scene, cams, cfg.downsample, 0.0, cfg.seed)?;
    let mut attrs = SceneClassAttributes::new(&classes, scene.num_classes);
    attrs.scale = cfg.attributes.scale;
    attrs.opacity = cfg.attributes.opacity;
    attrs.logit = cfg.attributes.logit;
    let g = init_gaussians(&classes.cameras, depths, &attrs)?;
    io::write_gsb(&art.init(), &g)?;
    io::quantize_gsb(&g)
}

pub fn sample(cfg: &PipelineConfig, art: &Artifacts, g: &GaussianSet) -> Result<GaussianSet> {
    let s = sample_representatives(g, &cfg.sampling_spec()?, cfg.seed);
    io::write_gsb(&art.sampled(), &s)?;
    Ok(s)
}

/// Distinct occupied sampling voxels, counted independently of the sampler.
pub fn sample_dry_run(cfg: &PipelineConfig, g: &GaussianSet) -> Result<usize> {
    Ok(count_occupied_voxels(&g.means(), &cfg.sampling_spec()?))
}

pub fn refine(cfg: &PipelineConfig, art: &Artifacts, scene: Option<&SceneSpec>, g: &GaussianSet) -> Result<GaussianSet> {
    let out = match cfg.refine {
        RefineMode::Off => g.clone(),
        RefineMode::Zero => {
            let basis = cfg.offset_basis()?;
            refine_positions(g, &basis, &ZeroWeights.weights(g, &basis)?)?
        }
        RefineMode::OracleSnap => {
            let scene = scene.ok_or_else(|| Error::Config("oracle-snap refinement needs the scene".into()))?;
            let basis = cfg.offset_basis()?;
            let provider = SurfaceSnapWeights {
                nearest: |p: &Vector3<f64>| scene.nearest_surface_point(p).unwrap_or(*p),
            };
            refine_positions(g, &basis, &provider.weights(g, &basis)?)?
        }
    };
    io::write_gsb(&art.refined(), &out)?;
    io::quantize_gsb(&out)
}

pub fn render(cfg: &PipelineConfig, art: &Artifacts, g: &GaussianSet) -> Result<SemanticOccupancyField> {
    let field = render_grid(g, &cfg.grid)?;
    io::write_occ(&art.pred(), &field.to_grid())?;
    if cfg.dump_probs {
        io::write_probs(&art.probs(), &field)?;
    }
    Ok(field)
}

pub fn evaluate(
    cfg: &PipelineConfig,
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    cams: &[CameraModel],
    g: &GaussianSet,
) -> Result<MetricReport> {
    let iou = iou_miou_grids(pred, gt, cfg.unknown_id)?;
    let ray = ray_iou(pred, gt, cams, cfg.ray_stride, &cfg.ray_thresholds, cfg.unknown_id)?;
    let quality = init_quality(g, gt, cfg.unknown_id)?;
    Ok(MetricReport::new(iou, ray, quality))
}

pub fn losses(
    cfg: &PipelineConfig,
    field: &SemanticOccupancyField,
    gt: &OccupancyGrid,
    pred_depth: &[DepthMap],
    gt_depth: &[DepthMap],
) -> Result<LossReport> {
    if field.geometry != gt.geometry || field.num_classes != gt.num_classes {
        return Err(Error::Shape("rendered field and gt grid differ".into()));
    }
    let ch = field.channels();
    let mut probs = Vec::with_capacity(field.probs.len());
    let mut labels = Vec::with_capacity(gt.labels.len());
    for (i, &l) in gt.labels.iter().enumerate() {
        if Some(l) == cfg.unknown_id {
            continue;
        }
        probs.extend_from_slice(field.voxel_probs(i));
        labels.push(label_to_channel(l, gt.num_classes));
    }
    let ce = cross_entropy_loss(&probs, ch, &labels, None)?;
    let lov = lovasz_softmax_loss(&probs, ch, &labels)?;
    let depth = depth_uncertainty_loss(pred_depth, gt_depth, cfg.loss.alpha_unc)?;
    Ok(LossReport::new(ce, lov, depth, cfg.loss))
}

/// Runs every stage in order and writes all artifacts into `cfg.out`.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<RunSummary, StageError> {
    cfg.validate().stage("config")?;
    std::fs::create_dir_all(&cfg.out).map_err(Error::from).stage("config")?;
    let art = Artifacts::new(&cfg.out);

    let (scene, cams, gt) = gen_scene(cfg, &art).stage("gen-scene")?;
    let (pred_depth, gt_depth) = render_depth(cfg, &art, &scene, &cams).stage("render-depth")?;
    let init = initialize(cfg, &art, &scene, &cams, &pred_depth).stage("init")?;
    let sampled = sample(cfg, &art, &init).stage("sample")?;
    let refined = refine(cfg, &art, Some(&scene), &sampled).stage("refine")?;
    let field = render(cfg, &art, &refined).stage("render")?;
    let pred = field.to_grid();

    let report = evaluate(cfg, &pred, &gt, &cams, &refined).stage("metrics")?;
    io::write_json(&art.metrics(), &report).stage("metrics")?;
    let loss = losses(cfg, &field, &gt, &pred_depth, &gt_depth).stage("eval-loss")?;
    io::write_json(&art.losses(), &loss).stage("eval-loss")?;

    let summary = RunSummary {
        views: cams.len(),
        initialized: init.len(),
        sampled: sampled.len(),
        refined: refined.len(),
        predicted_occupied: pred.occupied_count(),
        gt_occupied: gt.occupied_count(),
    };
    io::write_json(&art.summary(), &summary).stage("summary")?;
    Ok(summary)
}
