//! End-to-end runs: configuration, the capture/train/plan loop, evaluation,
//! experiment drivers and artifact export.

use crate::camera::{CameraIntrinsics, Viewpoint};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParams};
use crate::geom::Vec3;
use crate::io::{self, ManifestEntry};
use crate::metrics::{self, GeometryMetrics, LinearityReport};
use crate::planner::{self, CostCounter, PlannerConfig, PlanningRecord, SelectionRule};
use crate::render::{render_image, RenderSettings, RenderedView};
use crate::scene::{DepthNoiseModel, RgbdImage, SceneSdf};
use crate::train::{Formulation, Integration, KeyframePool, LossBreakdown, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path as FsPath, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Instant;

/// Derives an independent stream seed from the master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Nbv,
    FixedTrajectory,
    RandomSample,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Nbv, Variant::RandomSample, Variant::FixedTrajectory];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Nbv => "nbv",
            Variant::FixedTrajectory => "fixed_trajectory",
            Variant::RandomSample => "random_sample",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "nbv" => Ok(Variant::Nbv),
            "fixed_trajectory" | "fixed" => Ok(Variant::FixedTrajectory),
            "random_sample" | "random" => Ok(Variant::RandomSample),
            _ => Err(Error::InvalidConfig(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub train_width: usize,
    pub train_height: usize,
    pub test_width: usize,
    pub test_height: usize,
    pub vertical_fov_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            train_width: 50,
            train_height: 50,
            test_width: 40,
            test_height: 40,
            vertical_fov_deg: 50.0,
        }
    }
}

impl CameraConfig {
    pub fn train(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.train_width, self.train_height, self.vertical_fov_deg.to_radians())
    }

    pub fn test(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.test_width, self.test_height, self.vertical_fov_deg.to_radians())
    }
}

/// Test views on Fibonacci spheres at each radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestViewProtocol {
    pub per_radius: usize,
    pub radii: Vec<f64>,
}

impl Default for TestViewProtocol {
    fn default() -> Self {
        Self {
            per_radius: 12,
            radii: vec![3.0, 3.4],
        }
    }
}

/// `n` near-uniform unit directions (golden-angle spiral).
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), y, r * phi.sin())
        })
        .collect()
}

impl TestViewProtocol {
    pub fn views(&self, center: Vec3) -> Result<Vec<(f64, Viewpoint)>> {
        let dirs = fibonacci_sphere(self.per_radius);
        let mut out = Vec::new();
        for &r in &self.radii {
            for d in &dirs {
                out.push((r, Viewpoint::looking_at(center + *d * r, center)?));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub surface_points: usize,
    pub grid_resolution: usize,
    pub density_threshold: f64,
    /// Completion-ratio threshold in meters.
    pub completion_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            surface_points: 50_000,
            grid_resolution: 64,
            density_threshold: 10.0,
            completion_threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearityMode {
    /// Fixed dataset of views, all in the training pool at once.
    Offline,
    /// Checkpoints taken during an ordinary reconstruction run.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearityConfig {
    pub mode: LinearityMode,
    /// Total training iterations at which test views are evaluated.
    pub checkpoints: Vec<usize>,
    pub dataset_views: usize,
    pub dataset_radius: f64,
}

impl Default for LinearityConfig {
    fn default() -> Self {
        Self {
            mode: LinearityMode::Offline,
            checkpoints: vec![100, 200, 400, 800, 1600, 3200, 6400, 12800],
            dataset_views: 32,
            dataset_radius: 3.5,
        }
    }
}

pub const MIN_CHECKPOINTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Canned scene name or path to a scene TOML file.
    pub scene: String,
    pub variant: Variant,
    pub seed: u64,
    /// Depth-noise multiplier; 0 disables noise.
    pub noise_scale: f64,
    /// Run trainer and planner on separate threads.
    pub concurrent: bool,
    /// Radius of the fixed circular trajectory and of the start pose.
    pub ring_radius: f64,
    pub camera: CameraConfig,
    pub field: FieldConfig,
    pub render: RenderSettings,
    pub train: TrainConfig,
    pub planner: PlannerConfig,
    pub test_views: TestViewProtocol,
    pub eval: EvalConfig,
    pub linearity: LinearityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: "blobs".into(),
            variant: Variant::Nbv,
            seed: 0,
            noise_scale: 1.0,
            concurrent: false,
            ring_radius: 3.5,
            camera: CameraConfig::default(),
            field: FieldConfig::default(),
            render: RenderSettings::default(),
            train: TrainConfig::default(),
            planner: PlannerConfig::default(),
            test_views: TestViewProtocol::default(),
            eval: EvalConfig::default(),
            linearity: LinearityConfig::default(),
        }
    }
}

impl RunConfig {
    /// A reduced configuration that finishes in seconds on one core.
    pub fn quick() -> Self {
        Self {
            camera: CameraConfig {
                train_width: 24,
                train_height: 24,
                test_width: 20,
                test_height: 20,
                vertical_fov_deg: 50.0,
            },
            field: FieldConfig {
                pe_frequencies_position: 4,
                pe_frequencies_direction: 2,
                trunk_layers: 3,
                trunk_width: 32,
                uncertainty_branch_width: 16,
                skip_connection_layer: Some(2),
                position_scale: 0.4,
            },
            render: RenderSettings {
                n_samples: 32,
                ..RenderSettings::default()
            },
            train: TrainConfig {
                batch_rays: 128,
                iters_per_step: 80,
                depth_switch_iteration: 300,
                free_space_misses: true,
                ..TrainConfig::default()
            },
            planner: PlannerConfig {
                n_candidates: 12,
                max_views: 14,
                ..PlannerConfig::default()
            },
            eval: EvalConfig {
                surface_points: 4000,
                grid_resolution: 40,
                ..EvalConfig::default()
            },
            linearity: LinearityConfig {
                checkpoints: vec![20, 40, 80, 160, 320, 480, 640, 800],
                dataset_views: 16,
                ..LinearityConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml_str(&text)?;
        // Relative scene paths resolve against the config file.
        if c.scene.ends_with(".toml") && FsPath::new(&c.scene).is_relative() {
            if let Some(dir) = path.parent() {
                c.scene = dir.join(&c.scene).display().to_string();
            }
        }
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.train.validate()?;
        self.planner.validate()?;
        self.camera.train()?;
        self.camera.test()?;
        if self.render.n_samples < 2 {
            return Err(Error::InvalidConfig("render.n_samples must be >= 2".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig("noise_scale must be >= 0".into()));
        }
        if self.planner.max_views < 1 {
            return Err(Error::InvalidConfig("planner.max_views must be >= 1".into()));
        }
        if self.test_views.per_radius < 1 || self.test_views.radii.is_empty() {
            return Err(Error::InvalidConfig("test view protocol is empty".into()));
        }
        Ok(())
    }

    pub fn load_scene(&self) -> Result<SceneSdf> {
        match SceneSdf::canned(&self.scene) {
            Some(s) => Ok(s),
            None => SceneSdf::load(&self.scene),
        }
    }

    pub fn render_settings(&self, scene: &SceneSdf) -> RenderSettings {
        RenderSettings {
            bounds: scene.bounds,
            background: scene.background,
            ..self.render
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train-batches"),
            ..self.train
        }
    }
}

pub fn scene_hash(scene: &SceneSdf) -> String {
    io::sha256_hex(scene.to_toml_string().as_bytes())
}

/// Ring pose `index` of `count` at `radius`, at scene-center height.
pub fn ring_pose(center: Vec3, radius: f64, index: usize, count: usize) -> Result<Viewpoint> {
    let a = std::f64::consts::TAU * index as f64 / count.max(1) as f64;
    Viewpoint::looking_at(center + Vec3::new(radius * a.cos(), 0.0, radius * a.sin()), center)
}

/// Oracle RGBD capture with optional depth noise.
pub fn capture(
    scene: &SceneSdf,
    pose: &Viewpoint,
    intrinsics: &CameraIntrinsics,
    noise_scale: f64,
    seed: u64,
) -> RgbdImage {
    let mut img = scene.trace_rgbd(pose, intrinsics);
    if noise_scale > 0.0 {
        img.depth = DepthNoiseModel::with_scale(noise_scale).apply(&img.depth, seed);
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub step: usize,
    pub capture: usize,
    pub pose: Viewpoint,
    pub integration: Integration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub step: usize,
    #[serde(flatten)]
    pub plan: PlanningRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEval {
    pub index: usize,
    pub radius: f64,
    pub pose: Viewpoint,
    #[serde(with = "crate::metrics::finite_or_null")]
    pub psnr: f64,
    pub ssim: f64,
    /// Mean rendered variance of the view.
    pub sigma_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub psnr_mean: f64,
    /// Population variance of the per-view PSNR.
    pub psnr_variance: f64,
    pub ssim_mean: f64,
}

impl ImageSummary {
    pub fn from_views(views: &[ViewEval]) -> Self {
        let psnr: Vec<f64> = views.iter().map(|v| v.psnr.min(100.0)).collect();
        let ssim: Vec<f64> = views.iter().map(|v| v.ssim).collect();
        let (psnr_mean, psnr_variance) = metrics::mean_variance(&psnr);
        Self {
            psnr_mean,
            psnr_variance,
            ssim_mean: metrics::mean_variance(&ssim).0,
        }
    }
}

/// Everything a reconstruction run produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: RunConfig,
    pub scene_hash: String,
    pub train: Vec<TrainRecord>,
    pub captures: Vec<CaptureRecord>,
    pub plans: Vec<PlanRecord>,
    pub test_views: Vec<ViewEval>,
    pub image: ImageSummary,
    pub geometry: Option<GeometryMetrics>,
    pub linearity: Option<LinearityReport>,
    pub path_length: f64,
    pub cost_evaluations: usize,
    pub skipped_updates: usize,
    pub wall_clock_s: f64,
    pub final_params: Arc<FieldParams>,
    /// Iteration-tagged parameter snapshots requested by the caller.
    pub checkpoints: Vec<(usize, Arc<FieldParams>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scene: String,
    pub scene_hash: String,
    pub variant: Variant,
    pub formulation: Formulation,
    pub seed: u64,
    pub views: usize,
    pub iterations: usize,
    pub image: ImageSummary,
    pub geometry: Option<GeometryMetrics>,
    pub linearity_pcc: Option<f64>,
    pub path_length: f64,
    pub cost_evaluations: usize,
    pub skipped_updates: usize,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ResultLine<'a> {
    Config { config: &'a RunConfig },
    Capture(&'a CaptureRecord),
    Plan(&'a PlanRecord),
    Train(&'a TrainRecord),
    TestView(&'a ViewEval),
    Geometry(&'a GeometryMetrics),
    Summary(&'a RunSummary),
}

impl RunReport {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            scene: self.config.scene.clone(),
            scene_hash: self.scene_hash.clone(),
            variant: self.config.variant,
            formulation: self.config.train.formulation,
            seed: self.config.seed,
            views: self.captures.len(),
            iterations: self.train.len(),
            image: self.image,
            geometry: self.geometry,
            linearity_pcc: self.linearity.as_ref().map(|l| l.pcc),
            path_length: self.path_length,
            cost_evaluations: self.cost_evaluations,
            skipped_updates: self.skipped_updates,
        }
    }

    /// Line-delimited results: config echo, step records in execution
    /// order, evaluations, then one summary object. Wall-clock time is
    /// deliberately absent so identical runs produce identical bytes.
    pub fn results_jsonl(&self) -> Result<String> {
        let mut lines = vec![serde_json::to_string(&ResultLine::Config { config: &self.config })?];
        let max_step = self.captures.iter().map(|c| c.step).max().unwrap_or(0);
        for step in 0..=max_step {
            for p in self.plans.iter().filter(|p| p.step == step) {
                lines.push(serde_json::to_string(&ResultLine::Plan(p))?);
            }
            for c in self.captures.iter().filter(|c| c.step == step) {
                lines.push(serde_json::to_string(&ResultLine::Capture(c))?);
            }
            for t in self.train.iter().filter(|t| t.step == step) {
                lines.push(serde_json::to_string(&ResultLine::Train(t))?);
            }
        }
        for v in &self.test_views {
            lines.push(serde_json::to_string(&ResultLine::TestView(v))?);
        }
        if let Some(g) = &self.geometry {
            lines.push(serde_json::to_string(&ResultLine::Geometry(g))?);
        }
        lines.push(serde_json::to_string(&ResultLine::Summary(&self.summary()))?);
        let mut out = lines.join("\n");
        out.push('\n');
        Ok(out)
    }

    /// Polyline through every planned path (or capture positions for
    /// unplanned runs).
    pub fn trajectory(&self) -> Vec<Vec3> {
        let mut pts = vec![];
        if let Some(first) = self.captures.first() {
            pts.push(first.pose.position);
        }
        for p in &self.plans {
            for w in p.plan.path.waypoints.iter().skip(1) {
                pts.push(*w);
            }
        }
        pts
    }
}

struct StepOutput {
    integrations: Vec<Integration>,
    losses: Vec<LossBreakdown>,
    snapshot: Arc<FieldParams>,
    checkpoints: Vec<(usize, Arc<FieldParams>)>,
    skipped_updates: usize,
}

fn train_block(
    trainer: &mut Trainer,
    images: Vec<RgbdImage>,
    iters: usize,
    checkpoints: &[usize],
) -> Result<StepOutput> {
    let integrations = images.into_iter().map(|img| trainer.integrate_image(img)).collect();
    let mut losses = Vec::with_capacity(iters);
    let mut snaps = Vec::new();
    for _ in 0..iters {
        losses.push(trainer.train_step()?);
        if checkpoints.contains(&trainer.iteration()) {
            snaps.push((trainer.iteration(), trainer.snapshot()));
        }
    }
    Ok(StepOutput {
        integrations,
        losses,
        snapshot: trainer.snapshot(),
        checkpoints: snaps,
        skipped_updates: trainer.skipped_updates(),
    })
}

/// Trainer either inline or on a worker thread. The worker is driven in
/// lockstep (one image batch in, one snapshot out), so both backends see
/// identical sequences of random draws.
enum Backend {
    Local(Box<Trainer>),
    Worker {
        tx: mpsc::Sender<Vec<RgbdImage>>,
        rx: mpsc::Receiver<Result<StepOutput>>,
        handle: std::thread::JoinHandle<()>,
    },
}

impl Backend {
    fn new(trainer: Trainer, concurrent: bool, iters: usize, checkpoints: Vec<usize>) -> Self {
        if !concurrent {
            return Backend::Local(Box::new(trainer));
        }
        let (img_tx, img_rx) = mpsc::channel::<Vec<RgbdImage>>();
        let (out_tx, out_rx) = mpsc::channel();
        let handle = std::thread::spawn(move || {
            let mut trainer = trainer;
            while let Ok(images) = img_rx.recv() {
                let out = train_block(&mut trainer, images, iters, &checkpoints);
                let failed = out.is_err();
                if out_tx.send(out).is_err() || failed {
                    break;
                }
            }
        });
        Backend::Worker {
            tx: img_tx,
            rx: out_rx,
            handle,
        }
    }

    fn submit(&mut self, images: Vec<RgbdImage>, iters: usize, checkpoints: &[usize]) -> Result<StepOutput> {
        match self {
            Backend::Local(t) => train_block(t, images, iters, checkpoints),
            Backend::Worker { tx, rx, .. } => {
                tx.send(images)
                    .map_err(|_| Error::Worker("trainer thread stopped".into()))?;
                rx.recv()
                    .map_err(|_| Error::Worker("trainer thread stopped".into()))?
            }
        }
    }

    fn finish(self) -> Result<()> {
        if let Backend::Worker { tx, handle, .. } = self {
            drop(tx);
            handle
                .join()
                .map_err(|_| Error::Worker("trainer thread panicked".into()))?;
        }
        Ok(())
    }
}

/// Renders and scores every test view against the noise-free oracle.
pub fn evaluate_test_views(
    params: &FieldParams,
    scene: &SceneSdf,
    config: &RunConfig,
) -> Result<Vec<ViewEval>> {
    let intr = config.camera.test()?;
    let settings = config.render_settings(scene);
    config
        .test_views
        .views(scene.center())?
        .into_iter()
        .enumerate()
        .map(|(index, (radius, pose))| {
            let truth = scene.trace_rgbd(&pose, &intr);
            let pred = render_image(params, &pose, &intr, 1, &settings)?;
            Ok(ViewEval {
                index,
                radius,
                pose,
                psnr: metrics::psnr(&pred.color, &truth.color, 1.0)?,
                ssim: metrics::ssim(&pred.color, &truth.color, intr.width, intr.height)?,
                sigma_sq: pred.mean_variance(),
            })
        })
        .collect()
}

/// Geometry metrics of the density surface proxy, `None` if the field has
/// no crossing of the density threshold.
pub fn evaluate_geometry(
    params: &FieldParams,
    scene: &SceneSdf,
    config: &RunConfig,
) -> Result<Option<GeometryMetrics>> {
    let recon = match metrics::extract_recon_points(
        params,
        &scene.bounds,
        config.eval.grid_resolution,
        config.eval.density_threshold,
    ) {
        Ok(p) => p,
        Err(Error::NoCrossings) => return Ok(None),
        Err(e) => return Err(e),
    };
    let truth = scene.sample_surface(config.eval.surface_points, derive_seed(config.seed, "surface"));
    if truth.is_empty() {
        return Ok(None);
    }
    Ok(Some(metrics::geometry_metrics(&recon, &truth, config.eval.completion_threshold)?))
}

fn linearity_from_views(views: &[ViewEval]) -> Option<LinearityReport> {
    let pairs: Vec<(f64, f64)> = views
        .iter()
        .filter(|v| v.psnr.is_finite() && v.sigma_sq > 0.0)
        .map(|v| (v.psnr, v.sigma_sq.ln()))
        .collect();
    LinearityReport::from_pairs(pairs).ok()
}

/// The interleaved capture -> integrate -> train -> plan loop, then
/// evaluation. Fully determined by the config (including its seed).
pub fn run_reconstruction(config: &RunConfig) -> Result<RunReport> {
    run_reconstruction_with_checkpoints(config, &[])
}

pub fn run_reconstruction_with_checkpoints(config: &RunConfig, checkpoints: &[usize]) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let scene = config.load_scene()?;
    let center = scene.center();
    let train_intr = config.camera.train()?;
    let settings = config.render_settings(&scene);
    let params = FieldParams::init(config.field, derive_seed(config.seed, "field-init"))?;
    let trainer = Trainer::new(params, config.train_config(), settings)?;
    let iters = config.train.iters_per_step;
    let mut backend = Backend::new(trainer, config.concurrent, iters, checkpoints.to_vec());

    let mut candidate_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "candidates"));
    let mut rrt_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "rrt"));
    let noise_seed = derive_seed(config.seed, "depth-noise");
    let mut counter = CostCounter::default();

    let mut report = RunReport {
        config: config.clone(),
        scene_hash: scene_hash(&scene),
        train: vec![],
        captures: vec![],
        plans: vec![],
        test_views: vec![],
        image: ImageSummary {
            psnr_mean: f64::NAN,
            psnr_variance: f64::NAN,
            ssim_mean: f64::NAN,
        },
        geometry: None,
        linearity: None,
        path_length: 0.0,
        cost_evaluations: 0,
        skipped_updates: 0,
        wall_clock_s: 0.0,
        final_params: Arc::new(FieldParams::init(config.field, 0)?),
        checkpoints: vec![],
    };

    let mut current = ring_pose(center, config.ring_radius, 0, config.planner.max_views)?;
    let mut snapshot: Option<Arc<FieldParams>> = None;
    let mut capture_count = 0;
    for step in 0..config.planner.max_views {
        let mut poses = vec![];
        if step == 0 {
            poses.push(current);
        } else {
            let snap = snapshot.as_ref().expect("trainer published a snapshot");
            let plan = match config.variant {
                Variant::FixedTrajectory => {
                    let goal = ring_pose(center, config.ring_radius, step, config.planner.max_views)?;
                    let path = planner::plan_path_rrt(
                        &scene,
                        current.position,
                        goal.position,
                        config.planner.clearance,
                        &config.planner.rrt,
                        &mut rrt_rng,
                    )?;
                    PlanningRecord {
                        current,
                        candidates: vec![],
                        chosen: 0,
                        nbv: goal,
                        path,
                    }
                }
                Variant::Nbv | Variant::RandomSample => planner::planner_step(
                    &scene,
                    snap,
                    &current,
                    &config.planner,
                    &train_intr,
                    &settings,
                    if config.variant == Variant::Nbv {
                        SelectionRule::MaxCost
                    } else {
                        SelectionRule::Uniform
                    },
                    &mut candidate_rng,
                    &mut rrt_rng,
                    &mut counter,
                )?,
            };
            if config.planner.capture_midpoint && plan.path.waypoints.len() > 1 {
                let mid = plan.path.point_at_fraction(0.5);
                if mid.distance(center) > 1e-9 {
                    poses.push(Viewpoint::looking_at(mid, center)?);
                }
            }
            poses.push(plan.nbv);
            report.path_length += plan.path.length;
            current = plan.nbv;
            report.plans.push(PlanRecord { step, plan });
        }
        let images: Vec<RgbdImage> = poses
            .iter()
            .enumerate()
            .map(|(k, pose)| {
                capture(
                    &scene,
                    pose,
                    &train_intr,
                    config.noise_scale,
                    noise_seed.wrapping_add((capture_count + k) as u64),
                )
            })
            .collect();
        let out = backend.submit(images, iters, checkpoints)?;
        for (pose, integration) in poses.iter().zip(out.integrations) {
            report.captures.push(CaptureRecord {
                step,
                capture: capture_count,
                pose: *pose,
                integration,
            });
            capture_count += 1;
        }
        report
            .train
            .extend(out.losses.into_iter().map(|loss| TrainRecord { step, loss }));
        report.checkpoints.extend(out.checkpoints);
        report.skipped_updates = out.skipped_updates;
        snapshot = Some(out.snapshot);
    }
    backend.finish()?;

    let params = snapshot.expect("at least one step ran");
    report.test_views = evaluate_test_views(&params, &scene, config)?;
    report.image = ImageSummary::from_views(&report.test_views);
    report.linearity = linearity_from_views(&report.test_views);
    report.geometry = evaluate_geometry(&params, &scene, config)?;
    report.cost_evaluations = counter.0;
    report.final_params = params;
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub iteration: usize,
    pub psnr_mean: f64,
    pub views: Vec<ViewEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityStudy {
    pub formulation: Formulation,
    pub mode: LinearityMode,
    pub checkpoints: Vec<CheckpointEval>,
    pub report: LinearityReport,
}

impl LinearityStudy {
    pub fn final_psnr(&self) -> f64 {
        self.checkpoints.last().map(|c| c.psnr_mean).unwrap_or(f64::NAN)
    }
}

/// Trains on a fixed set of views and snapshots at the given iterations.
pub fn train_offline(
    config: &RunConfig,
    scene: &SceneSdf,
    poses: &[Viewpoint],
    checkpoints: &[usize],
) -> Result<(Trainer, Vec<(usize, Arc<FieldParams>)>)> {
    let intr = config.camera.train()?;
    let settings = config.render_settings(scene);
    let params = FieldParams::init(config.field, derive_seed(config.seed, "field-init"))?;
    let pool = KeyframePool::new(poses.len().max(1), 0);
    let mut trainer = Trainer::with_pool(params, config.train_config(), settings, pool)?;
    let noise_seed = derive_seed(config.seed, "depth-noise");
    let images = poses
        .iter()
        .enumerate()
        .map(|(k, p)| capture(scene, p, &intr, config.noise_scale, noise_seed.wrapping_add(k as u64)))
        .collect();
    let total = checkpoints.iter().copied().max().unwrap_or(0);
    let out = train_block(&mut trainer, images, total, checkpoints)?;
    Ok((trainer, out.checkpoints))
}

/// Pairs (PSNR, ln sigma_I^2) over test views at several checkpoints.
pub fn run_linearity_study(config: &RunConfig) -> Result<LinearityStudy> {
    config.validate()?;
    let mut cps = config.linearity.checkpoints.clone();
    cps.sort_unstable();
    cps.dedup();
    if cps.len() < MIN_CHECKPOINTS {
        return Err(Error::InsufficientCheckpoints {
            needed: MIN_CHECKPOINTS,
            got: cps.len(),
        });
    }
    let scene = config.load_scene()?;
    let snaps = match config.linearity.mode {
        LinearityMode::Offline => {
            let poses: Vec<Viewpoint> = fibonacci_sphere(config.linearity.dataset_views)
                .into_iter()
                .map(|d| Viewpoint::looking_at(scene.center() + d * config.linearity.dataset_radius, scene.center()))
                .collect::<Result<_>>()?;
            train_offline(config, &scene, &poses, &cps)?.1
        }
        LinearityMode::Online => run_reconstruction_with_checkpoints(config, &cps)?.checkpoints,
    };
    if snaps.len() < MIN_CHECKPOINTS {
        return Err(Error::InsufficientCheckpoints {
            needed: MIN_CHECKPOINTS,
            got: snaps.len(),
        });
    }
    let mut checkpoints = Vec::with_capacity(snaps.len());
    let mut pairs = Vec::new();
    for (iteration, params) in snaps {
        let views = evaluate_test_views(&params, &scene, config)?;
        for v in &views {
            if v.psnr.is_finite() && v.sigma_sq > 0.0 {
                pairs.push((v.psnr, v.sigma_sq.ln()));
            }
        }
        checkpoints.push(CheckpointEval {
            iteration,
            psnr_mean: ImageSummary::from_views(&views).psnr_mean,
            views,
        });
    }
    Ok(LinearityStudy {
        formulation: config.train.formulation,
        mode: config.linearity.mode,
        checkpoints,
        report: LinearityReport::from_pairs(pairs)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scene: String,
    pub variant: Variant,
    pub seed: u64,
    pub psnr: f64,
    pub psnr_variance: f64,
    pub ssim: f64,
    pub accuracy_cm: Option<f64>,
    pub completion_cm: Option<f64>,
    pub completion_ratio: Option<f64>,
    pub path_length: f64,
}

impl ComparisonRow {
    pub fn from_report(r: &RunReport) -> Self {
        Self {
            scene: r.config.scene.clone(),
            variant: r.config.variant,
            seed: r.config.seed,
            psnr: r.image.psnr_mean,
            psnr_variance: r.image.psnr_variance,
            ssim: r.image.ssim_mean,
            accuracy_cm: r.geometry.map(|g| g.accuracy_cm),
            completion_cm: r.geometry.map(|g| g.completion_cm),
            completion_ratio: r.geometry.map(|g| g.completion_ratio),
            path_length: r.path_length,
        }
    }
}

/// One run per config; rows in input order.
pub fn run_variant_comparison(configs: &[RunConfig]) -> Result<Vec<ComparisonRow>> {
    configs
        .iter()
        .map(|c| run_reconstruction(c).map(|r| ComparisonRow::from_report(&r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `iters_per_step` or noise scale, depending on the ablation.
    pub value: f64,
    pub psnr: f64,
    pub psnr_variance: f64,
    pub ssim: f64,
    pub geometry: Option<GeometryMetrics>,
    pub scene_hash: String,
}

fn ablation_row(value: f64, r: &RunReport) -> AblationRow {
    AblationRow {
        value,
        psnr: r.image.psnr_mean,
        psnr_variance: r.image.psnr_variance,
        ssim: r.image.ssim_mean,
        geometry: r.geometry,
        scene_hash: r.scene_hash.clone(),
    }
}

pub fn run_ablation_iters(config: &RunConfig, grid: &[usize]) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("iteration grid is empty".into()));
    }
    grid.iter()
        .map(|&n| {
            let mut c = config.clone();
            c.train.iters_per_step = n;
            Ok(ablation_row(n as f64, &run_reconstruction(&c)?))
        })
        .collect()
}

pub fn run_ablation_noise(config: &RunConfig, grid: &[f64]) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("noise grid is empty".into()));
    }
    grid.iter()
        .map(|&s| {
            let mut c = config.clone();
            c.noise_scale = s;
            Ok(ablation_row(s, &run_reconstruction(&c)?))
        })
        .collect()
}

/// Renders all test views of `params` (used by export and eval).
pub fn render_test_views(params: &FieldParams, scene: &SceneSdf, config: &RunConfig) -> Result<Vec<RenderedView>> {
    let intr = config.camera.test()?;
    let settings = config.render_settings(scene);
    config
        .test_views
        .views(scene.center())?
        .iter()
        .map(|(_, pose)| render_image(params, pose, &intr, 1, &settings))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMetrics {
    pub summary: RunSummary,
    pub test_views: Vec<ViewEval>,
}

/// Writes renders, uncertainty maps, variance rasters, the trajectory and
/// reconstructed points, metrics, the checkpoint and a hash manifest.
pub fn export_run_artifacts(report: &RunReport, dir: impl AsRef<FsPath>) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scene = report.config.load_scene()?;
    let params = &report.final_params;
    let mut manifest = Vec::new();
    for (i, view) in render_test_views(params, &scene, &report.config)?.iter().enumerate() {
        let (w, h) = (view.width, view.height);
        manifest.push(io::write_artifact(dir, &format!("views/{i:03}_color.png"), &io::rgb_png(&view.color, w, h)?)?);
        manifest.push(io::write_artifact(
            dir,
            &format!("views/{i:03}_uncertainty.png"),
            &io::gray_png(&view.uncertainty_map(), w, h)?,
        )?);
        manifest.push(io::write_artifact(
            dir,
            &format!("views/{i:03}_variance.vrst"),
            &io::encode_variance_raster(&view.variance, w, h)?,
        )?);
    }
    manifest.push(io::write_artifact(dir, "trajectory.ply", io::ply_polyline(&report.trajectory()).as_bytes())?);
    if let Ok(points) = metrics::extract_recon_points(
        params,
        &scene.bounds,
        report.config.eval.grid_resolution,
        report.config.eval.density_threshold,
    ) {
        manifest.push(io::write_artifact(dir, "recon_points.ply", io::ply_points(&points).as_bytes())?);
    }
    let metrics = ExportMetrics {
        summary: report.summary(),
        test_views: report.test_views.clone(),
    };
    manifest.push(io::write_artifact(dir, "metrics.json", serde_json::to_string_pretty(&metrics)?.as_bytes())?);
    let mut ckpt = Vec::new();
    params
        .write_checkpoint(&mut ckpt)
        .map_err(|e| Error::io(dir.join("checkpoint.nbvf"), e))?;
    manifest.push(io::write_artifact(dir, "checkpoint.nbvf", &ckpt)?);
    io::write_artifact(dir, "manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// Writes the results file, effective config and timing side file.
pub fn write_run_outputs(report: &RunReport, dir: impl AsRef<FsPath>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let results = dir.join("results.jsonl");
    std::fs::write(&results, report.results_jsonl()?).map_err(|e| Error::io(&results, e))?;
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, report.config.to_toml_string()).map_err(|e| Error::io(&cfg, e))?;
    let timing = dir.join("timing.json");
    let t = serde_json::json!({ "wall_clock_s": report.wall_clock_s });
    std::fs::write(&timing, t.to_string()).map_err(|e| Error::io(&timing, e))?;
    report.final_params.save(dir.join(CHECKPOINT_FILE))?;
    Ok(results)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.nbvf";

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ResultRecord {
    Config { config: Box<RunConfig> },
    Capture(CaptureRecord),
    Plan(PlanRecord),
    Train(TrainRecord),
    TestView(ViewEval),
    Geometry(GeometryMetrics),
    Summary(Box<RunSummary>),
}

impl RunReport {
    /// Rebuilds a report from a directory written by [`write_run_outputs`].
    /// Final parameters come from the (f32) checkpoint; intermediate
    /// checkpoints are not restored.
    pub fn load_run_dir(dir: impl AsRef<FsPath>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("results.jsonl");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut config = None;
        let mut summary = None;
        let (mut captures, mut plans, mut train, mut test_views) = (vec![], vec![], vec![], vec![]);
        let mut geometry = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<ResultRecord>(line)? {
                ResultRecord::Config { config: c } => config = Some(*c),
                ResultRecord::Capture(c) => captures.push(c),
                ResultRecord::Plan(p) => plans.push(p),
                ResultRecord::Train(t) => train.push(t),
                ResultRecord::TestView(v) => test_views.push(v),
                ResultRecord::Geometry(g) => geometry = Some(g),
                ResultRecord::Summary(s) => summary = Some(*s),
            }
        }
        let missing = |what: &str| Error::InvalidConfig(format!("{}: no {what} record", path.display()));
        let config = config.ok_or_else(|| missing("config"))?;
        let summary = summary.ok_or_else(|| missing("summary"))?;
        let final_params = Arc::new(FieldParams::load(dir.join(CHECKPOINT_FILE))?);
        let wall_clock_s = std::fs::read_to_string(dir.join("timing.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| v["wall_clock_s"].as_f64())
            .unwrap_or(f64::NAN);
        Ok(Self {
            config,
            scene_hash: summary.scene_hash,
            linearity: linearity_from_views(&test_views),
            train,
            captures,
            plans,
            test_views,
            image: summary.image,
            geometry,
            path_length: summary.path_length,
            cost_evaluations: summary.cost_evaluations,
            skipped_updates: summary.skipped_updates,
            wall_clock_s,
            final_params,
            checkpoints: vec![],
        })
    }
}

/// Re-evaluates a saved checkpoint with the given config.
pub fn evaluate_checkpoint(config: &RunConfig, params: &FieldParams) -> Result<(Vec<ViewEval>, ImageSummary, Option<GeometryMetrics>)> {
    let scene = config.load_scene()?;
    let views = evaluate_test_views(params, &scene, config)?;
    let summary = ImageSummary::from_views(&views);
    let geometry = evaluate_geometry(params, &scene, config)?;
    Ok((views, summary, geometry))
}
