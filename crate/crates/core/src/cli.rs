//! Command-line driver. Each subcommand reads and writes plain files, so
//! `simulate | solve | pa | reconstruct | eval` compose without hidden state.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure. The
//! error name is printed first on stderr.
//!
//! `POSEONLY_THREADS` caps the worker pool. `0` selects the deterministic
//! single-task mode, which also keeps wall-clock runtimes out of every
//! output so that repeated runs are byte-identical.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use crate::baseline::{directions_from_poses, govindu_translations, BaselineError};
use crate::eval::{evaluate, EvalError};
use crate::geometry::{tracks_from_observations, CameraPose, GeometryError, Track};
use crate::io::{self, IoError, PosesFile, ProblemFile};
use crate::ligt::{assemble_system, solve_translations, LigtConfig, LigtError, NullSpaceBackend, DEFAULT_RANK_GAP_THRESHOLD};
use crate::pa::{pa_optimize, PaConfig, PaError};
use crate::reconstruct::reconstruct_all;
use crate::sim::{generate_scene, MotionMode, PointCloud, SceneConfig, SimError};

pub const THREADS_ENV: &str = "POSEONLY_THREADS";

#[derive(Parser, Debug)]
#[command(name = "poseonly", version, about = "Pose-only global translation, pose adjustment and reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic problem file.
    Simulate(SimulateArgs),
    /// Linear global translation from the problem's rotations and tracks.
    Solve(SolveArgs),
    /// Refine poses by pose adjustment.
    Pa(PaArgs),
    /// Rebuild points from poses and write a PLY file.
    Reconstruct(ReconstructArgs),
    /// Cross-product translation baseline on ground-truth directions.
    Baseline(BaselineArgs),
    /// Score poses against the problem's ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Motion {
    GenericRing,
    Collinear,
    LocalPureRotation,
    LoopClosure,
}

impl From<Motion> for MotionMode {
    fn from(m: Motion) -> Self {
        match m {
            Motion::GenericRing => MotionMode::GenericRing,
            Motion::Collinear => MotionMode::Collinear,
            Motion::LocalPureRotation => MotionMode::LocalPureRotation,
            Motion::LoopClosure => MotionMode::LoopClosure,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cloud {
    Box,
    Shell,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    Auto,
    Dense,
    Normal,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum Format {
    Both,
    Table,
    Kv,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "generic-ring")]
    motion: Motion,
    #[arg(long, default_value_t = 10)]
    views: usize,
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Observation noise in normalized image units.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Rotation perturbation in degrees.
    #[arg(long, default_value_t = 0.0)]
    rot_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    min_track_len: usize,
    /// Point cloud shape; defaults to a shell for loops and a box otherwise.
    #[arg(long, value_enum)]
    cloud: Option<Cloud>,
    /// Box half-extent or shell radius.
    #[arg(long)]
    cloud_size: Option<f64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[arg(long, default_value_t = 2)]
    min_track_len: usize,
    /// Pairs with parallax θ at or below this are treated as degenerate.
    #[arg(long, default_value_t = 0.0)]
    theta_min: f64,
}

#[derive(Args, Debug)]
struct SolveArgs {
    problem: PathBuf,
    /// Pose file to write; `-` for stdout.
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    #[command(flatten)]
    tracks: TrackArgs,
    /// Minimum accepted σ_2/σ_1 of the reduced system.
    #[arg(long, default_value_t = DEFAULT_RANK_GAP_THRESHOLD)]
    rank_gap: f64,
    #[arg(long, value_enum, default_value = "auto")]
    backend: Backend,
    /// Divide each row block by its base-pair θ².
    #[arg(long)]
    normalize_blocks: bool,
}

#[derive(Args, Debug)]
struct PaArgs {
    problem: PathBuf,
    poses: PathBuf,
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    #[command(flatten)]
    tracks: TrackArgs,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long)]
    freeze_rotations: bool,
    #[arg(long, default_value_t = 1e-10)]
    gradient_tol: f64,
    #[arg(long, default_value_t = 1e-12)]
    step_tol: f64,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    problem: PathBuf,
    poses: PathBuf,
    /// PLY file to write.
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    tracks: TrackArgs,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    problem: PathBuf,
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    #[arg(long, default_value_t = 2)]
    min_track_len: usize,
    #[arg(long, default_value_t = DEFAULT_RANK_GAP_THRESHOLD)]
    rank_gap: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    problem: PathBuf,
    poses: PathBuf,
    #[arg(short, long, default_value = "-")]
    output: PathBuf,
    #[command(flatten)]
    tracks: TrackArgs,
    #[arg(long, value_enum, default_value = "both")]
    format: Format,
}

#[derive(Debug)]
enum CliError {
    Usage { name: &'static str, message: String },
    Numerical { name: &'static str, message: String },
}

impl CliError {
    fn usage(name: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Usage { name, message: e.to_string() }
    }

    fn numerical(name: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Numerical { name, message: e.to_string() }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::usage(e.name(), e)
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        let name = match e {
            GeometryError::DuplicateObservation { .. } => "DuplicateObservation",
            GeometryError::InvalidTrack { .. } => "InvalidTrack",
            _ => "GeometryError",
        };
        CliError::usage(name, e)
    }
}

impl From<LigtError> for CliError {
    fn from(e: LigtError) -> Self {
        let name = match e {
            LigtError::AllPairsDegenerate { .. } => "AllPairsDegenerate",
            LigtError::InsufficientParallax { .. } => "InsufficientParallax",
            LigtError::RankDeficient { .. } => "RankDeficient",
            LigtError::ViewOutOfRange { .. } => return CliError::usage("ViewOutOfRange", e),
        };
        CliError::numerical(name, e)
    }
}

impl From<PaError> for CliError {
    fn from(e: PaError) -> Self {
        let name = match e {
            PaError::DivergedNumerically { .. } => "DivergedNumerically",
            PaError::NoScaleAnchor { .. } => "NoScaleAnchor",
            PaError::NoUsableTracks => "NoUsableTracks",
            PaError::ViewOutOfRange { .. } => return CliError::usage("ViewOutOfRange", e),
        };
        CliError::numerical(name, e)
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        let name = match e {
            BaselineError::Disconnected { .. } => "Disconnected",
            BaselineError::RankDeficient { .. } => "RankDeficient",
            BaselineError::ViewOutOfRange { .. } => return CliError::usage("ViewOutOfRange", e),
            BaselineError::InvalidDirection { .. } => "InvalidDirection",
        };
        CliError::numerical(name, e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ConfigInvalid(_) => CliError::usage("ConfigInvalid", e),
            SimError::GeometryInfeasible { .. } => CliError::numerical("GeometryInfeasible", e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Geometry(g) => g.into(),
            EvalError::ViewCountMismatch { .. } => CliError::usage("ViewCountMismatch", e),
            EvalError::Align(_) => CliError::usage("TooFewPoints", e),
        }
    }
}

/// Parallelism requested through the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadMode {
    Default,
    Fixed(usize),
    /// Single task, no runtimes in outputs.
    Deterministic,
}

impl ThreadMode {
    pub fn parse(value: Option<&str>) -> Result<Self, String> {
        match value.map(str::trim) {
            None | Some("") => Ok(ThreadMode::Default),
            Some(s) => match s.parse::<usize>() {
                Ok(0) => Ok(ThreadMode::Deterministic),
                Ok(n) => Ok(ThreadMode::Fixed(n)),
                Err(_) => Err(format!("{THREADS_ENV} must be a non-negative integer, got '{s}'")),
            },
        }
    }

    fn parallel(self) -> bool {
        self != ThreadMode::Deterministic
    }

    fn timed(self) -> bool {
        self != ThreadMode::Deterministic
    }
}

/// Stage output is buffered so that the stage can run inside the pool.
struct Ctx {
    mode: ThreadMode,
    out: String,
    err: String,
}

impl Ctx {
    fn emit(&mut self, path: &Path, text: &str) -> Result<(), CliError> {
        if path == Path::new("-") {
            self.out.push_str(text);
            Ok(())
        } else {
            std::fs::write(path, text).map_err(|e| CliError::usage("IoError", format!("{}: {e}", path.display())))
        }
    }

    fn note(&mut self, msg: std::fmt::Arguments<'_>) {
        self.err.push_str(&msg.to_string());
        self.err.push('\n');
    }

    fn record(&self, poses: &mut PosesFile, stage: &str, start: Instant) {
        if self.mode.timed() {
            poses.runtimes.push((stage.to_string(), start.elapsed().as_secs_f64() * 1e3));
        }
    }
}

/// Runs the CLI with the thread mode taken from `POSEONLY_THREADS`.
pub fn run_cli<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match ThreadMode::parse(std::env::var(THREADS_ENV).ok().as_deref()) {
        Ok(mode) => run_cli_with(argv, mode, out, err),
        Err(msg) => {
            let _ = writeln!(err, "error: ConfigInvalid: {msg}");
            1
        }
    }
}

pub fn run_cli_with<I, S>(argv: I, mode: ThreadMode, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(rendered.as_bytes());
                    0
                }
                _ => {
                    let _ = write!(err, "error: UsageError\n{rendered}");
                    1
                }
            };
        }
    };
    let threads = match mode {
        ThreadMode::Default => None,
        ThreadMode::Fixed(n) => Some(n),
        ThreadMode::Deterministic => Some(1),
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: ThreadPool: {e}");
            return 2;
        }
    };
    let mut ctx = Ctx { mode, out: String::new(), err: String::new() };
    let result = pool.install(|| dispatch(cli.command, &mut ctx));
    let _ = out.write_all(ctx.out.as_bytes());
    let _ = err.write_all(ctx.err.as_bytes());
    let (code, name, message) = match result {
        Ok(()) => return 0,
        Err(CliError::Usage { name, message }) => (1, name, message),
        Err(CliError::Numerical { name, message }) => (2, name, message),
    };
    let _ = writeln!(err, "error: {name}: {message}");
    code
}

fn dispatch(command: Command, ctx: &mut Ctx) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => simulate(a, ctx),
        Command::Solve(a) => solve(a, ctx),
        Command::Pa(a) => pa(a, ctx),
        Command::Reconstruct(a) => reconstruct(a, ctx),
        Command::Baseline(a) => baseline(a, ctx),
        Command::Eval(a) => eval(a, ctx),
    }
}

fn load_tracks(problem: &ProblemFile, min_track_len: usize) -> Result<Vec<Track>, CliError> {
    Ok(tracks_from_observations(&problem.observations, min_track_len)?)
}

fn check_pose_count(problem: &ProblemFile, poses: &PosesFile) -> Result<(), CliError> {
    if problem.n_views() == poses.poses.len() {
        Ok(())
    } else {
        Err(CliError::usage(
            "ViewCountMismatch",
            format!("problem has {} views but the pose file has {}", problem.n_views(), poses.poses.len()),
        ))
    }
}

fn simulate(a: SimulateArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let motion = MotionMode::from(a.motion);
    let mut cfg = SceneConfig::new(motion, a.views, a.points, a.seed);
    cfg.obs_noise_sigma = a.sigma;
    cfg.rotation_noise_deg = a.rot_noise;
    cfg.min_track_len = a.min_track_len;
    let shape = a.cloud.unwrap_or(match cfg.point_cloud {
        PointCloud::Box { .. } => Cloud::Box,
        PointCloud::Shell { .. } => Cloud::Shell,
    });
    cfg.point_cloud = match (shape, cfg.point_cloud) {
        (Cloud::Box, PointCloud::Box { center, extent }) => PointCloud::Box { center, extent: a.cloud_size.unwrap_or(extent) },
        (Cloud::Box, PointCloud::Shell { .. }) => {
            PointCloud::Box { center: Vector3::zeros(), extent: a.cloud_size.unwrap_or(4.0) }
        }
        (Cloud::Shell, PointCloud::Shell { radius }) => PointCloud::Shell { radius: a.cloud_size.unwrap_or(radius) },
        (Cloud::Shell, PointCloud::Box { .. }) => PointCloud::Shell { radius: a.cloud_size.unwrap_or(1.0) },
    };
    let scene = generate_scene(&cfg)?;
    let problem = ProblemFile::from_scene(&scene);
    io::write_problem(&a.output, &problem)?;
    ctx.note(format_args!(
        "{}: {} views, {} tracks, {} observations",
        a.output.display(),
        problem.n_views(),
        problem.n_tracks,
        problem.observations.len()
    ));
    Ok(())
}

fn solve(a: SolveArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let problem = io::read_problem(&a.problem)?;
    let start = Instant::now();
    let tracks = load_tracks(&problem, a.tracks.min_track_len)?;
    let rotations = problem.rotation_matrices();
    let config = LigtConfig {
        theta_min: a.tracks.theta_min,
        normalize_blocks: a.normalize_blocks,
        backend: match a.backend {
            Backend::Auto => NullSpaceBackend::Auto,
            Backend::Dense => NullSpaceBackend::Dense,
            Backend::Normal => NullSpaceBackend::Normal,
        },
        rank_gap_threshold: a.rank_gap,
        parallel: ctx.mode.parallel(),
    };
    let system = assemble_system(&tracks, &rotations, problem.reference_view, &config)?;
    let sol = solve_translations(&system, config.backend)?;
    let poses = rotations.iter().zip(&sol.translations).map(|(r, t)| CameraPose::new(*r, *t)).collect();
    let mut file = PosesFile::new(poses);
    file.singular_gap = Some(sol.singular_gap);
    ctx.record(&mut file, "solve", start);
    ctx.emit(&a.output, &io::format_poses(&file))?;
    ctx.note(format_args!(
        "solve: {} tracks ({} excluded), {} rows, sigma_2/sigma_1 = {:.3e}",
        system.bases.len(),
        system.excluded_tracks.len(),
        system.n_rows(),
        sol.singular_gap
    ));
    Ok(())
}

fn pa(a: PaArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let problem = io::read_problem(&a.problem)?;
    let mut input = io::read_poses(&a.poses)?;
    check_pose_count(&problem, &input)?;
    let start = Instant::now();
    let tracks = load_tracks(&problem, a.tracks.min_track_len)?;
    let config = PaConfig {
        max_iter: a.max_iter,
        gradient_tol: a.gradient_tol,
        step_tol: a.step_tol,
        theta_min: a.tracks.theta_min,
        freeze_rotations: a.freeze_rotations,
        parallel: ctx.mode.parallel(),
        ..PaConfig::default()
    };
    let (poses, report) = pa_optimize(&input.poses, &tracks, problem.reference_view, &config)?;
    input.poses = poses;
    ctx.record(&mut input, "pa", start);
    ctx.emit(&a.output, &io::format_poses(&input))?;
    ctx.note(format_args!(
        "pa: {} iterations, cost {:.6e} -> {:.6e}, termination {}",
        report.iterations,
        report.initial_cost,
        report.final_cost,
        report.termination.as_str()
    ));
    Ok(())
}

fn reconstruct(a: ReconstructArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let problem = io::read_problem(&a.problem)?;
    let poses = io::read_poses(&a.poses)?;
    check_pose_count(&problem, &poses)?;
    let tracks = load_tracks(&problem, a.tracks.min_track_len)?;
    let rec = reconstruct_all(&tracks, &poses.poses, a.tracks.theta_min, ctx.mode.parallel());
    let centers: Vec<Vector3<f64>> = poses.poses.iter().map(|p| p.center).collect();
    io::export_ply(&rec.points, &centers, &a.output)?;
    ctx.note(format_args!(
        "reconstruct: {} points, {} rejected ({} degenerate, {} behind camera)",
        rec.points.len(),
        rec.rejected.total(),
        rec.rejected.all_pairs_degenerate,
        rec.rejected.negative_depth
    ));
    Ok(())
}

fn baseline(a: BaselineArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let problem = io::read_problem(&a.problem)?;
    let gt = problem
        .gt_camera_poses()
        .ok_or_else(|| CliError::usage("MissingGroundTruth", "the baseline takes directions from 'G' lines"))?;
    let start = Instant::now();
    let tracks = load_tracks(&problem, a.min_track_len)?;
    let rotations = problem.rotation_matrices();
    let directions = directions_from_poses(&gt, &tracks);
    let sol = govindu_translations(&directions, &rotations, problem.reference_view, a.rank_gap)?;
    let poses = rotations.iter().zip(&sol.translations).map(|(r, t)| CameraPose::new(*r, *t)).collect();
    let mut file = PosesFile::new(poses);
    file.singular_gap = Some(sol.singular_gap);
    ctx.record(&mut file, "baseline", start);
    ctx.emit(&a.output, &io::format_poses(&file))?;
    ctx.note(format_args!("baseline: {} directions, sigma_2/sigma_1 = {:.3e}", directions.len(), sol.singular_gap));
    Ok(())
}

fn eval(a: EvalArgs, ctx: &mut Ctx) -> Result<(), CliError> {
    let problem = io::read_problem(&a.problem)?;
    let poses = io::read_poses(&a.poses)?;
    let report = evaluate(&problem, &poses, a.tracks.min_track_len, a.tracks.theta_min, ctx.mode.parallel())?;
    let timed = ctx.mode.timed();
    let text = match a.format {
        Format::Table => report.to_table(timed),
        Format::Kv => report.to_key_values(timed),
        Format::Both => format!("{}\n{}", report.to_table(timed), report.to_key_values(timed)),
    };
    ctx.emit(&a.output, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_cli_with(
            std::iter::once("poseonly").chain(args.iter().copied()),
            ThreadMode::Deterministic,
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn thread_mode_parsing() {
        assert_eq!(ThreadMode::parse(None), Ok(ThreadMode::Default));
        assert_eq!(ThreadMode::parse(Some("0")), Ok(ThreadMode::Deterministic));
        assert_eq!(ThreadMode::parse(Some("4")), Ok(ThreadMode::Fixed(4)));
        assert!(ThreadMode::parse(Some("many")).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let (code, _, err) = run(&["solve", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"));
        let (code, _, err) = run(&["solve", "/nonexistent/problem.po"]);
        assert_eq!(code, 1);
        assert!(err.starts_with("error: IoError"));
        assert_eq!(run(&["--help"]).0, 0);
    }
}
