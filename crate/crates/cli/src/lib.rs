//! Command-line harness: phantom generation, DRR rendering, iterative
//! registration and the single-update evaluation experiment.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{Rotation3, Vector3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use ppcreg::correspondence::{select_contour_points, WeightStrategy};
use ppcreg::geometry::{ProjectionGeometry, RigidTransform};
use ppcreg::io::{self, fmt_f64, pose_to_json, SampleKey};
use ppcreg::pipeline::{
    summarize, EvaluationSample, MtrePoints, Registration, RegistrationConfig, DEFAULT_ROTATION_LEVER_MM,
};
use ppcreg::ppc::Matcher;
use ppcreg::projector::{default_step, image_gradient_with, render_drr, simulate_fluoro, Image2D};
use ppcreg::volume::{extract_surface_points, make_phantom, PhantomSpec, Volume};

/// Exit code 1 for runtime and data errors, 2 for usage and config errors.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] ppcreg::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// One of the built-in presets, used when `spec` and `volume` are unset.
    pub preset: String,
    pub spec: Option<PhantomSpec>,
    pub seed: u64,
    /// Existing volume file; takes precedence over the phantom.
    pub volume: Option<PathBuf>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            preset: "vertebra".into(),
            spec: None,
            seed: 7,
            volume: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub sdd: f64,
    /// Square detector side, pixels.
    pub detector_size: usize,
    pub pixel_spacing: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            sdd: 1000.0,
            detector_size: 256,
            pixel_spacing: 1.0,
        }
    }
}

/// Ground-truth poses: rotation `rotations[k]` (axis-angle, rad) with the
/// volume origin placed on the optical axis at `depth` mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewsConfig {
    pub depth: f64,
    pub rotations: Vec<[f64; 3]>,
}

fn view_rotation(about_axial: f64) -> [f64; 3] {
    // Volume y (antero-posterior) onto the optical axis, then spin about
    // the cranio-caudal axis.
    let r = Rotation3::from_scaled_axis(Vector3::new(-std::f64::consts::FRAC_PI_2, 0.0, 0.0))
        * Rotation3::from_scaled_axis(Vector3::new(0.0, 0.0, about_axial));
    r.scaled_axis().into()
}

impl Default for ViewsConfig {
    fn default() -> Self {
        Self {
            depth: 700.0,
            rotations: [0.0f64, 30.0, 60.0, 90.0]
                .iter()
                .map(|deg| view_rotation(deg.to_radians()))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub count: usize,
    /// Initial mTRE range, mm; targets are uniform on it.
    pub mtre_range: [f64; 2],
    pub seed: u64,
    /// Rotation lever of the perturbation sampler, mm.
    pub lever_mm: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            count: 200,
            mtre_range: [0.0, 45.0],
            seed: 1,
            lever_mm: DEFAULT_ROTATION_LEVER_MM,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluoroConfig {
    /// Existing image file; otherwise a DRR is rendered at the ground truth.
    pub path: Option<PathBuf>,
    /// Ray-marching step, mm; defaults to half the smallest voxel spacing.
    pub drr_step: Option<f64>,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MatcherMode {
    #[default]
    Image,
    Oracle,
}

impl MatcherMode {
    pub fn matcher(self, t_gt: &RigidTransform) -> Matcher {
        match self {
            MatcherMode::Image => Matcher::Image,
            MatcherMode::Oracle => Matcher::Oracle { t_gt: *t_gt },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum WeightsArg {
    Uniform,
    Score,
    ScoreIrls,
}

impl From<WeightsArg> for WeightStrategy {
    fn from(w: WeightsArg) -> Self {
        match w {
            WeightsArg::Uniform => WeightStrategy::Uniform,
            WeightsArg::Score => WeightStrategy::Score,
            WeightsArg::ScoreIrls => WeightStrategy::ScoreIrls,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub geometry: GeometryConfig,
    pub views: ViewsConfig,
    pub sampling: SamplingConfig,
    pub fluoro: FluoroConfig,
    pub registration: RegistrationConfig,
    pub matcher: MatcherMode,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            geometry: GeometryConfig::default(),
            views: ViewsConfig::default(),
            sampling: SamplingConfig::default(),
            fluoro: FluoroConfig::default(),
            registration: RegistrationConfig::default(),
            matcher: MatcherMode::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML. Relative paths inside the file, `out_dir` included,
    /// resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out_dir);
        if let Some(p) = cfg.phantom.volume.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.fluoro.path.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.phantom.volume.is_none() && self.phantom.spec.is_none() && PhantomSpec::preset(&self.phantom.preset).is_none() {
            return Err(usage(format!(
                "unknown phantom preset '{}' (expected one of {})",
                self.phantom.preset,
                PhantomSpec::PRESETS.join(", ")
            )));
        }
        self.geometry().map_err(|e| usage(format!("geometry: {e}")))?;
        if !(self.views.depth > 0.0) || self.views.rotations.is_empty() {
            return Err(usage("views need a positive depth and at least one rotation"));
        }
        if self.views.rotations.iter().flatten().any(|x| !x.is_finite()) {
            return Err(usage("view rotations must be finite"));
        }
        let [lo, hi] = self.sampling.mtre_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(usage("sampling.mtre_range must satisfy 0 <= lo <= hi"));
        }
        if !(self.sampling.lever_mm > 0.0 && self.sampling.lever_mm.is_finite()) {
            return Err(usage("sampling.lever_mm must be positive"));
        }
        if self.fluoro.drr_step.is_some_and(|s| !(s > 0.0)) || !(self.fluoro.noise_sigma >= 0.0) {
            return Err(usage("fluoro.drr_step must be positive and noise_sigma non-negative"));
        }
        self.registration
            .validate()
            .map_err(|e| usage(format!("registration: {e}")))
    }

    pub fn geometry(&self) -> ppcreg::Result<ProjectionGeometry> {
        let g = &self.geometry;
        ProjectionGeometry::centered(g.sdd, g.detector_size, g.pixel_spacing)
    }

    pub fn view_pose(&self, view: usize) -> RigidTransform {
        let r = self.views.rotations[view % self.views.rotations.len()];
        RigidTransform::from_axis_angle(Vector3::from(r), Vector3::new(0.0, 0.0, self.views.depth))
    }

    pub fn phantom_spec(&self) -> CliResult<PhantomSpec> {
        match &self.phantom.spec {
            Some(spec) => Ok(spec.clone()),
            None => PhantomSpec::preset(&self.phantom.preset)
                .ok_or_else(|| usage(format!("unknown phantom preset '{}'", self.phantom.preset))),
        }
    }

    pub fn volume(&self) -> CliResult<Volume> {
        match &self.phantom.volume {
            Some(path) => Ok(io::load_volume(path)?),
            None => Ok(make_phantom(&self.phantom_spec()?, self.phantom.seed)?),
        }
    }

    fn drr_step(&self, v: &Volume) -> f64 {
        self.fluoro.drr_step.unwrap_or_else(|| default_step(v))
    }

    fn fluoro_for(&self, v: &Volume, t_gt: &RigidTransform, view: usize) -> CliResult<Image2D> {
        let geom = self.geometry()?;
        Ok(simulate_fluoro(
            v,
            t_gt,
            &geom,
            self.drr_step(v),
            self.fluoro.noise_sigma,
            self.fluoro.noise_seed.wrapping_add(view as u64),
        )?)
    }

    /// Per-sample seeds drawn from a generator seeded with `sampling.seed`.
    pub fn sample_seeds(&self, count: usize) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.sampling.seed);
        (0..count).map(|_| rng.next_u64()).collect()
    }
}

#[derive(Debug, Parser)]
#[command(name = "ppcreg", version, about = "Single-view rigid 2D/3D registration harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML); built-in defaults otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Phantom seed for `phantom`, sampling seed for every other command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub matcher: Option<MatcherMode>,
    #[arg(long, global = true)]
    pub weights: Option<WeightsArg>,
    #[arg(long, global = true)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize a phantom and save it as a volume file.
    Phantom {
        #[arg(long)]
        preset: Option<String>,
    },
    /// Render a DRR at a view pose (or a pose file).
    Render {
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long)]
        pose: Option<PathBuf>,
    },
    /// Iterative registration from an initial pose.
    Register {
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Fluoroscopy image file; rendered at the ground truth otherwise.
        #[arg(long)]
        fluoro: Option<PathBuf>,
        #[arg(long)]
        t_gt: Option<PathBuf>,
        #[arg(long)]
        t_init: Option<PathBuf>,
        /// Initial mTRE, mm, used to sample `t_init` when no file is given.
        #[arg(long, default_value_t = 20.0)]
        initial_mtre: f64,
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Also write |DRR(final) - fluoro| as a PGM.
        #[arg(long)]
        overlay: bool,
    },
    /// One update per sampled pose; writes summary and per-sample CSVs.
    EvalUpdate {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Write sampled (ground truth, initial) pose pairs as JSON lines.
    SamplePoses {
        #[arg(long)]
        count: Option<usize>,
    },
}

/// Loads the config and applies the flag overrides shared by all commands.
pub fn resolve_config(common: &CommonArgs, phantom_cmd: bool) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        if phantom_cmd {
            cfg.phantom.seed = seed;
        } else {
            cfg.sampling.seed = seed;
        }
    }
    if let Some(m) = common.matcher {
        cfg.matcher = m;
    }
    if let Some(w) = common.weights {
        cfg.registration.update.weights.strategy = w.into();
    }
    if let Some(n) = common.max_iterations {
        cfg.registration.max_iterations = n;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Run(ppcreg::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Run(ppcreg::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let phantom_cmd = matches!(cli.command, Command::Phantom { .. });
    let mut cfg = resolve_config(&cli.common, phantom_cmd)?;
    if let Command::Phantom { preset: Some(p) } = &cli.command {
        cfg.phantom.preset = p.clone();
        cfg.phantom.spec = None;
        cfg.phantom.volume = None;
    }
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    match &cli.command {
        Command::Phantom { .. } => cmd_phantom(&cfg),
        Command::Render { view, pose } => cmd_render(&cfg, *view, pose.as_deref()),
        Command::Register {
            volume,
            fluoro,
            t_gt,
            t_init,
            initial_mtre,
            view,
            overlay,
        } => cmd_register(
            &cfg,
            &RegisterInputs {
                volume: volume.clone(),
                fluoro: fluoro.clone(),
                t_gt: t_gt.clone(),
                t_init: t_init.clone(),
                initial_mtre: *initial_mtre,
                view: *view,
                overlay: *overlay,
            },
        )
        .map(|_| ()),
        Command::EvalUpdate { count } => cmd_eval_update(&cfg, *count).map(|_| ()),
        Command::SamplePoses { count } => cmd_sample_poses(&cfg, *count).map(|_| ()),
    }
}

/// Writes `phantom.json` and `phantom.raw` to the output directory.
pub fn cmd_phantom(cfg: &ExperimentConfig) -> CliResult<()> {
    let v = make_phantom(&cfg.phantom_spec()?, cfg.phantom.seed)?;
    io::save_volume(&cfg.out_dir.join("phantom.json"), &v)?;
    Ok(())
}

/// Writes the DRR as `drr.json`/`drr.raw`, a PGM preview and the pose used.
pub fn cmd_render(cfg: &ExperimentConfig, view: usize, pose: Option<&Path>) -> CliResult<()> {
    let v = cfg.volume()?;
    let t = match pose {
        Some(p) => io::read_pose(p)?,
        None => cfg.view_pose(view),
    };
    let img = render_drr(&v, &t, &cfg.geometry()?, cfg.drr_step(&v))?;
    io::save_image(&cfg.out_dir.join("drr.json"), &img)?;
    io::export_image_pgm(&img, &cfg.out_dir.join("drr.pgm"))?;
    io::write_pose(&cfg.out_dir.join("pose.json"), &t)?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct RegisterInputs {
    pub volume: Option<PathBuf>,
    pub fluoro: Option<PathBuf>,
    pub t_gt: Option<PathBuf>,
    pub t_init: Option<PathBuf>,
    pub initial_mtre: f64,
    pub view: usize,
    pub overlay: bool,
}

/// Writes `report.json`, `final_pose.json`, `initial_pose.json` and
/// optionally `overlay.pgm`.
pub fn cmd_register(cfg: &ExperimentConfig, inputs: &RegisterInputs) -> CliResult<ppcreg::pipeline::RegistrationReport> {
    let volume = match &inputs.volume {
        Some(path) => io::load_volume(path)?,
        None => cfg.volume()?,
    };
    let geom = cfg.geometry()?;
    let fluoro_path = inputs.fluoro.as_ref().or(cfg.fluoro.path.as_ref());
    let t_gt = match (&inputs.t_gt, fluoro_path) {
        (Some(p), _) => Some(io::read_pose(p)?),
        (None, None) => Some(cfg.view_pose(inputs.view)),
        (None, Some(_)) => None,
    };
    let fluoro = match (fluoro_path, &t_gt) {
        (Some(p), _) => io::load_image(p)?,
        (None, Some(t)) => cfg.fluoro_for(&volume, t, inputs.view)?,
        (None, None) => unreachable!("ground truth is set when no fluoro file is given"),
    };
    let grad = image_gradient_with(&fluoro, cfg.registration.update.gradient_kernel)?;
    let reg = Registration::new(&volume, &grad, &geom, &cfg.registration)?;
    let t_init = match (&inputs.t_init, &t_gt) {
        (Some(p), _) => io::read_pose(p)?,
        (None, Some(t)) => {
            if !(inputs.initial_mtre >= 0.0 && inputs.initial_mtre.is_finite()) {
                return Err(usage("--initial-mtre must be finite and non-negative"));
            }
            let points = reg.mtre_points(t)?;
            let range = (inputs.initial_mtre, inputs.initial_mtre);
            EvaluationSample::draw_with(0, inputs.view, cfg.sampling.seed, t, &points, range, cfg.sampling.lever_mm)?.t_init
        }
        (None, None) => return Err(usage("--t-init is required when the ground truth is unknown")),
    };
    let matcher = match (cfg.matcher, &t_gt) {
        (MatcherMode::Oracle, None) => return Err(usage("the oracle matcher needs a ground-truth pose")),
        (mode, Some(t)) => mode.matcher(t),
        (MatcherMode::Image, None) => Matcher::Image,
    };
    let report = reg.run(&t_init, &matcher, t_gt.as_ref())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&cfg.out_dir.join("report.json"), &(json + "\n"))?;
    io::write_pose(&cfg.out_dir.join("initial_pose.json"), &t_init)?;
    io::write_pose(&cfg.out_dir.join("final_pose.json"), report.final_pose())?;
    if inputs.overlay {
        let drr = render_drr(&volume, report.final_pose(), &geom, cfg.drr_step(&volume))?;
        if (drr.width(), drr.height()) != (fluoro.width(), fluoro.height()) {
            return Err(usage("fluoro size differs from the detector size"));
        }
        let diff: Vec<f64> = drr.data().iter().zip(fluoro.data()).map(|(a, b)| (a - b).abs()).collect();
        let img = Image2D::new(drr.width(), drr.height(), diff)?;
        io::export_image_pgm(&img, &cfg.out_dir.join("overlay.pgm"))?;
    }
    Ok(report)
}

/// One evaluated sample of the single-update experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub sample: EvaluationSample,
    pub mtre_after: f64,
}

fn mtre_points_for(
    surface: &ppcreg::volume::SurfacePointSet,
    t_gt: &RigidTransform,
    geom: &ProjectionGeometry,
    cfg: &RegistrationConfig,
) -> ppcreg::Result<Vec<Vector3<f64>>> {
    match cfg.mtre_points {
        MtrePoints::Surface => Ok(surface.points().to_vec()),
        MtrePoints::Contour => {
            let c = select_contour_points(surface, t_gt, geom, cfg.update.contour_eps)?;
            if c.is_empty() {
                return Err(ppcreg::Error::EmptyPointSet);
            }
            Ok(c.points().iter().map(|p| p.w).collect())
        }
    }
}

fn draw_samples(
    cfg: &ExperimentConfig,
    count: usize,
    points: &[Vec<Vector3<f64>>],
) -> CliResult<Vec<EvaluationSample>> {
    let seeds = cfg.sample_seeds(count);
    let [lo, hi] = cfg.sampling.mtre_range;
    let n_views = cfg.views.rotations.len();
    let samples: ppcreg::Result<Vec<_>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let view = i % n_views;
            EvaluationSample::draw_with(i, view, seeds[i], &cfg.view_pose(view), &points[view], (lo, hi), cfg.sampling.lever_mm)
        })
        .collect();
    Ok(samples?)
}

/// Runs exactly one update per sample and writes `summary.csv` and
/// `samples.csv`. Rows follow the sample id.
pub fn cmd_eval_update(cfg: &ExperimentConfig, count: Option<usize>) -> CliResult<Vec<EvalRecord>> {
    let count = count.unwrap_or(cfg.sampling.count);
    if count == 0 {
        return Err(usage("eval-update needs at least one sample"));
    }
    let volume = cfg.volume()?;
    let geom = cfg.geometry()?;
    let mut reg_cfg = cfg.registration;
    reg_cfg.max_iterations = 1;
    let n_views = cfg.views.rotations.len().min(count);
    let grads = (0..n_views)
        .map(|v| {
            let img = cfg.fluoro_for(&volume, &cfg.view_pose(v), v)?;
            Ok(image_gradient_with(&img, reg_cfg.update.gradient_kernel)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let regs = grads
        .iter()
        .map(|g| Registration::new(&volume, g, &geom, &reg_cfg))
        .collect::<ppcreg::Result<Vec<_>>>()?;
    let points = (0..n_views)
        .map(|v| regs[v].mtre_points(&cfg.view_pose(v)))
        .collect::<ppcreg::Result<Vec<_>>>()?;
    let samples = draw_samples(cfg, count, &points)?;
    let records: ppcreg::Result<Vec<EvalRecord>> = samples
        .par_iter()
        .map(|s| {
            let report = regs[s.view_id].run(&s.t_init, &cfg.matcher.matcher(&s.t_gt), Some(&s.t_gt))?;
            Ok(EvalRecord {
                sample: *s,
                mtre_after: report.mtre_trace[1],
            })
        })
        .collect();
    let records = records?;
    let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.sample.initial_mtre, r.mtre_after)).collect();
    let keys: Vec<SampleKey> = records
        .iter()
        .map(|r| SampleKey {
            sample_id: r.sample.sample_id,
            view_id: r.sample.view_id,
            seed: r.sample.seed,
        })
        .collect();
    let name = match cfg.matcher {
        MatcherMode::Image => "ppc_image",
        MatcherMode::Oracle => "ppc_oracle",
    };
    io::export_results_csv(
        name,
        &summarize(&pairs)?,
        &keys,
        &cfg.out_dir.join("summary.csv"),
        &cfg.out_dir.join("samples.csv"),
    )?;
    Ok(records)
}

/// Writes `poses.jsonl`, one sampled pair per line.
pub fn cmd_sample_poses(cfg: &ExperimentConfig, count: Option<usize>) -> CliResult<Vec<EvaluationSample>> {
    let count = count.unwrap_or(cfg.sampling.count);
    let samples = if count == 0 {
        Vec::new()
    } else {
        let volume = cfg.volume()?;
        let geom = cfg.geometry()?;
        let surface = extract_surface_points(&volume, &cfg.registration.canny)?;
        let n_views = cfg.views.rotations.len().min(count);
        let points = (0..n_views)
            .map(|v| mtre_points_for(&surface, &cfg.view_pose(v), &geom, &cfg.registration))
            .collect::<ppcreg::Result<Vec<_>>>()?;
        draw_samples(cfg, count, &points)?
    };
    let mut text = String::new();
    for s in &samples {
        text.push_str(&format!(
            "{{\"sample_id\":{},\"view_id\":{},\"seed\":{},\"target_mtre\":{},\"initial_mtre\":{},\"t_gt\":{},\"t_init\":{}}}\n",
            s.sample_id,
            s.view_id,
            s.seed,
            fmt_f64(s.target_mtre),
            fmt_f64(s.initial_mtre),
            pose_to_json(&s.t_gt),
            pose_to_json(&s.t_init),
        ));
    }
    write_text(&cfg.out_dir.join("poses.jsonl"), &text)?;
    Ok(samples)
}
