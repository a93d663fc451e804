//! Deterministic synthetic scenes for the motion regimes the solver must
//! survive: generic rings, collinear tracks, local pure rotation, and loops.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`),
//! with separate ChaCha streams for the scene layout (stream 0), observation
//! noise (stream 1) and rotation perturbation (stream 2). Gaussian samples use
//! the Box-Muller transform on that stream. Noise is in normalized image
//! coordinates: sigma 1e-3 is about one pixel at a focal length of 1000.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{
    project, tracks_from_observations, CameraPose, GeometryError, NormalizedImagePoint, Observation, RotationMatrix,
    Track,
};

/// Attempts per point before giving up on a layout.
pub const MAX_POINT_RETRIES: usize = 1000;
/// Half field of view, applied to both image axes.
pub const FOV_HALF_ANGLE_DEG: f64 = 45.0;
/// Random tilt of every camera away from its nominal aim.
const AIM_JITTER_DEG: f64 = 2.0;

/// Below this a loop leaves some camera triples without shared points.
pub const LOOP_POINTS_PER_VIEW: usize = 3;

const STREAM_LAYOUT: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_ROTATION: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scene config: {0}")]
    ConfigInvalid(String),
    #[error("point {point} was visible in fewer than {needed} views after {attempts} attempts")]
    GeometryInfeasible { point: usize, needed: usize, attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionMode {
    /// Cameras on a jittered ring around the cloud, looking inward.
    GenericRing,
    /// Distinct centers on one line, all aimed at the cloud.
    Collinear,
    /// A generic ring where views 0 and 1 share a center.
    LocalPureRotation,
    /// Cameras on a small circle looking outward at a surrounding cloud.
    /// Points are spread evenly over the gaps between neighbouring cameras
    /// and must be seen by at least three views, so that scale propagates
    /// around the loop.
    LoopClosure,
}

impl MotionMode {
    pub fn name(&self) -> &'static str {
        match self {
            MotionMode::GenericRing => "generic_ring",
            MotionMode::Collinear => "collinear",
            MotionMode::LocalPureRotation => "local_pure_rotation",
            MotionMode::LoopClosure => "loop_closure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::GenericRing, Self::Collinear, Self::LocalPureRotation, Self::LoopClosure]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointCloud {
    /// Uniform in the axis-aligned cube `center ± extent`.
    Box { center: Vector3<f64>, extent: f64 },
    /// Uniform on the sphere of the given radius about the origin.
    Shell { radius: f64 },
}

impl PointCloud {
    fn centroid(&self) -> Vector3<f64> {
        match self {
            PointCloud::Box { center, .. } => *center,
            PointCloud::Shell { .. } => Vector3::zeros(),
        }
    }

    fn radius(&self) -> f64 {
        match self {
            PointCloud::Box { extent, .. } => extent * 3f64.sqrt(),
            PointCloud::Shell { radius } => *radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub n_views: usize,
    pub n_points: usize,
    pub motion: MotionMode,
    pub point_cloud: PointCloud,
    pub obs_noise_sigma: f64,
    pub rotation_noise_deg: f64,
    pub min_track_len: usize,
    pub seed: u64,
}

impl SceneConfig {
    /// Noiseless scene with the mode's default cloud.
    pub fn new(motion: MotionMode, n_views: usize, n_points: usize, seed: u64) -> Self {
        let point_cloud = match motion {
            MotionMode::LoopClosure => PointCloud::Shell { radius: 4.0 },
            _ => PointCloud::Box { center: Vector3::zeros(), extent: 1.0 },
        };
        Self {
            n_views,
            n_points,
            motion,
            point_cloud,
            obs_noise_sigma: 0.0,
            rotation_noise_deg: 0.0,
            min_track_len: 2,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let min_views = if self.motion == MotionMode::LocalPureRotation { 3 } else { 2 };
        let bad = |msg: String| Err(SimError::ConfigInvalid(msg));
        if self.n_views < min_views {
            return bad(format!("{} needs at least {min_views} views, got {}", self.motion.name(), self.n_views));
        }
        if self.n_points < 2 {
            return bad(format!("at least 2 points are required, got {}", self.n_points));
        }
        if self.motion == MotionMode::LoopClosure && self.n_points < LOOP_POINTS_PER_VIEW * self.n_views {
            return bad(format!("loop_closure needs at least {LOOP_POINTS_PER_VIEW} points per view"));
        }
        if !(self.obs_noise_sigma >= 0.0) || !(self.rotation_noise_deg >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if self.min_track_len > self.n_views {
            return bad(format!("min_track_len {} exceeds the {} views", self.min_track_len, self.n_views));
        }
        let size = match self.point_cloud {
            PointCloud::Box { extent, .. } => extent,
            PointCloud::Shell { radius } => radius,
        };
        if !(size > 0.0) || !size.is_finite() {
            return bad("point cloud size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneProblem {
    /// Solver input rotations, possibly perturbed.
    pub rotations: Vec<RotationMatrix>,
    /// Ordered by `(track_id, view_id)`.
    pub observations: Vec<Observation>,
    pub gt_poses: Vec<CameraPose>,
    /// Indexed by track id.
    pub gt_points: Vec<Vector3<f64>>,
    pub reference_view: usize,
}

impl SceneProblem {
    pub fn n_views(&self) -> usize {
        self.rotations.len()
    }

    pub fn tracks(&self, min_track_len: usize) -> Result<Vec<Track>, GeometryError> {
        tracks_from_observations(&self.observations, min_track_len)
    }

    pub fn gt_centers(&self) -> Vec<Vector3<f64>> {
        self.gt_poses.iter().map(|p| p.center).collect()
    }
}

/// Normal deviates by Box-Muller, caching the second value of each pair.
pub struct Gaussian {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Gaussian {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping the log finite.
        let u1: f64 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = std::f64::consts::TAU * u2;
        self.spare = Some(r * phi.sin());
        r * phi.cos()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    fn unit_vector(&mut self) -> Vector3<f64> {
        loop {
            let v = Vector3::new(self.sample(), self.sample(), self.sample());
            let n = v.norm();
            if n > 1e-12 {
                return v / n;
            }
        }
    }
}

/// World-to-camera rotation whose optical axis points along `dir`, with the
/// image y axis roughly along world +y.
fn look_along(dir: &Vector3<f64>) -> Matrix3<f64> {
    let z = dir.normalize();
    let up = if z.y.abs() > 0.99 { Vector3::x() } else { Vector3::y() };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

fn jittered_look(rng: &mut Gaussian, dir: &Vector3<f64>) -> RotationMatrix {
    let tilt = rng.unit_vector() * (AIM_JITTER_DEG.to_radians() * rng.uniform());
    RotationMatrix::from_scaled_axis(tilt) * RotationMatrix::from_matrix_unchecked(look_along(dir))
}

fn camera_layout(config: &SceneConfig, rng: &mut Gaussian) -> Vec<CameraPose> {
    let n = config.n_views;
    let target = config.point_cloud.centroid();
    let radius = config.point_cloud.radius();
    let ring = |rng: &mut Gaussian, k: usize| -> Vector3<f64> {
        let phi = std::f64::consts::TAU * (k as f64 + 0.3 * rng.uniform()) / n as f64;
        let r = 3.0 * radius * (1.0 + 0.1 * (rng.uniform() - 0.5));
        let h = 0.5 * radius * (rng.uniform() - 0.5);
        target + Vector3::new(r * phi.cos(), h, r * phi.sin())
    };
    match config.motion {
        MotionMode::GenericRing => (0..n)
            .map(|k| {
                let c = ring(rng, k);
                CameraPose::new(jittered_look(rng, &(target - c)), c)
            })
            .collect(),
        MotionMode::LocalPureRotation => {
            let mut poses: Vec<CameraPose> = (0..n)
                .map(|k| {
                    let c = ring(rng, k);
                    CameraPose::new(jittered_look(rng, &(target - c)), c)
                })
                .collect();
            // View 1 sits on view 0's center with its own orientation.
            let c = poses[0].center;
            poses[1] = CameraPose::new(jittered_look(rng, &(target - c)), c);
            poses
        }
        MotionMode::Collinear => {
            let dir = rng.unit_vector();
            let axis = Vector3::new(dir.x, 0.2 * dir.y, dir.z).normalize();
            let side = axis.cross(&Vector3::y()).normalize();
            let base = target - side * (3.0 * radius);
            let span = 2.0 * radius;
            (0..n)
                .map(|k| {
                    let s = span * ((k as f64 + 0.4 * (rng.uniform() - 0.5)) / (n - 1) as f64 - 0.5);
                    let c = base + axis * s;
                    CameraPose::new(jittered_look(rng, &(target - c)), c)
                })
                .collect()
        }
        MotionMode::LoopClosure => {
            let r = 0.25 * radius;
            (0..n)
                .map(|k| {
                    let phi = std::f64::consts::TAU * (k as f64 + 0.1 * (rng.uniform() - 0.5)) / n as f64;
                    let out = Vector3::new(phi.cos(), 0.0, phi.sin());
                    let c = target + out * r + Vector3::y() * (0.05 * radius * (rng.uniform() - 0.5));
                    CameraPose::new(jittered_look(rng, &out), c)
                })
                .collect()
        }
    }
}

fn sample_point(cloud: &PointCloud, rng: &mut Gaussian) -> Vector3<f64> {
    match cloud {
        PointCloud::Box { center, extent } => {
            center + Vector3::new(rng.uniform(), rng.uniform(), rng.uniform()).map(|u| (2.0 * u - 1.0) * extent)
        }
        PointCloud::Shell { radius } => rng.unit_vector() * *radius,
    }
}

/// Azimuth about the vertical axis through the cloud centroid, in `[0, 2π)`.
fn azimuth(cloud: &PointCloud, p: &Vector3<f64>) -> f64 {
    let d = p - cloud.centroid();
    d.z.atan2(d.x).rem_euclid(std::f64::consts::TAU)
}

/// A point whose azimuth lies between the nominal headings of cameras
/// `sector` and `sector + 1` of the loop.
fn sample_loop_point(cloud: &PointCloud, rng: &mut Gaussian, sector: usize, n_views: usize) -> Vector3<f64> {
    let width = std::f64::consts::TAU / n_views as f64;
    let lo = sector as f64 * width;
    match cloud {
        PointCloud::Shell { radius } => {
            // Uniform in area on the band |y| ≤ 0.4 r of the sphere.
            let psi = lo + width * rng.uniform();
            let h = 0.8 * rng.uniform() - 0.4;
            let ring = (1.0 - h * h).sqrt();
            Vector3::new(ring * psi.cos(), h, ring * psi.sin()) * *radius
        }
        PointCloud::Box { .. } => loop {
            let p = sample_point(cloud, rng);
            if (azimuth(cloud, &p) - lo).rem_euclid(std::f64::consts::TAU) < width {
                return p;
            }
        },
    }
}

fn visible(pose: &CameraPose, p: &Vector3<f64>, min_depth: f64) -> Option<NormalizedImagePoint> {
    let limit = FOV_HALF_ANGLE_DEG.to_radians().tan();
    let pc = pose.to_camera(p);
    if pc.z <= min_depth {
        return None;
    }
    let x = project(pose, p).ok()?;
    (x.x.abs() <= limit && x.y.abs() <= limit).then_some(x)
}

/// Builds a scene from the config. Points are resampled until they are
/// visible in at least `max(min_track_len, 2)` views.
pub fn generate_scene(config: &SceneConfig) -> Result<SceneProblem, SimError> {
    config.validate()?;
    let mut rng = Gaussian::new(config.seed, STREAM_LAYOUT);
    let gt_poses = camera_layout(config, &mut rng);
    let needed = match config.motion {
        MotionMode::LoopClosure => config.min_track_len.max(3),
        _ => config.min_track_len.max(2),
    };
    let min_depth = 1e-3 * config.point_cloud.radius();

    let mut gt_points = Vec::with_capacity(config.n_points);
    let mut observations = Vec::new();
    for point in 0..config.n_points {
        let mut found = None;
        for _ in 0..MAX_POINT_RETRIES {
            let p = match config.motion {
                MotionMode::LoopClosure => {
                    sample_loop_point(&config.point_cloud, &mut rng, point % config.n_views, config.n_views)
                }
                _ => sample_point(&config.point_cloud, &mut rng),
            };
            let seen: Vec<(usize, NormalizedImagePoint)> = gt_poses
                .iter()
                .enumerate()
                .filter_map(|(v, pose)| visible(pose, &p, min_depth).map(|x| (v, x)))
                .collect();
            if seen.len() >= needed {
                found = Some((p, seen));
                break;
            }
        }
        let (p, seen) =
            found.ok_or(SimError::GeometryInfeasible { point, needed, attempts: MAX_POINT_RETRIES })?;
        gt_points.push(p);
        observations.extend(seen.into_iter().map(|(view_id, x)| Observation { track_id: point, view_id, point: x }));
    }

    let problem = SceneProblem {
        rotations: gt_poses.iter().map(|p| p.rotation).collect(),
        observations,
        gt_poses,
        gt_points,
        reference_view: 0,
    };
    let problem = add_observation_noise(&problem, config.obs_noise_sigma, config.seed);
    Ok(perturb_rotations(&problem, config.rotation_noise_deg, config.seed))
}

/// Adds i.i.d. `N(0, sigma²)` to both coordinates of every observation.
pub fn add_observation_noise(problem: &SceneProblem, sigma: f64, seed: u64) -> SceneProblem {
    let mut out = problem.clone();
    if sigma == 0.0 {
        return out;
    }
    let mut rng = Gaussian::new(seed, STREAM_NOISE);
    for o in &mut out.observations {
        o.point.x += sigma * rng.sample();
        o.point.y += sigma * rng.sample();
    }
    out
}

/// Right-multiplies every solver-input rotation by a rotation of exactly
/// `degrees` about a uniformly random axis.
pub fn perturb_rotations(problem: &SceneProblem, degrees: f64, seed: u64) -> SceneProblem {
    let mut out = problem.clone();
    if degrees == 0.0 {
        return out;
    }
    let mut rng = Gaussian::new(seed, STREAM_ROTATION);
    let angle = degrees.to_radians();
    for r in &mut out.rotations {
        *r = *r * RotationMatrix::from_scaled_axis(rng.unit_vector() * angle);
    }
    out
}

/// Three identity-rotation cameras on the x axis at 0, -1 and 1 observing
/// the points (0, 0, 5) and (1, 1, 6).
pub fn scene_s1() -> SceneProblem {
    let gt_poses: Vec<CameraPose> = [0.0, -1.0, 1.0]
        .iter()
        .map(|&x| CameraPose::new(RotationMatrix::identity(), Vector3::new(x, 0.0, 0.0)))
        .collect();
    let gt_points = vec![Vector3::new(0.0, 0.0, 5.0), Vector3::new(1.0, 1.0, 6.0)];
    let mut observations = Vec::new();
    for (track_id, p) in gt_points.iter().enumerate() {
        for (view_id, pose) in gt_poses.iter().enumerate() {
            let point = project(pose, p).expect("fixture points are in front of every camera");
            observations.push(Observation { track_id, view_id, point });
        }
    }
    SceneProblem {
        rotations: gt_poses.iter().map(|p| p.rotation).collect(),
        observations,
        gt_poses,
        gt_points,
        reference_view: 0,
    }
}
