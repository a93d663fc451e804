//! Text problem and pose files, PLY export, and similarity alignment.
//!
//! Problem file (`POSEONLY 1`), one record per line, `#` starts a comment:
//!
//! ```text
//! POSEONLY 1
//! <n_views> <n_tracks> <n_obs>
//! V <view> <qw> <qx> <qy> <qz>                     solver input rotation
//! G <view> <qw> <qx> <qy> <qz> <cx> <cy> <cz>      ground-truth pose (optional)
//! P <track> <x> <y> <z>                            ground-truth point (optional)
//! O <track> <view> <x> <y>                         normalized observation
//! R <view>                                         reference view
//! ```
//!
//! Record order is free. Every view has exactly one `V` line; `G` and `P`
//! lines are either absent or complete. Floats are written in their shortest
//! round-trip form, so write followed by read is exact.
//!
//! Pose file (`POSEONLY-POSES 1`): a view count, then `T <view> <qw> <qx>
//! <qy> <qz> <cx> <cy> <cz>` per view, an optional `S <singular_gap>`, and
//! `M <stage> <runtime_ms>` lines carried from stage to stage.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{CameraPose, NormalizedImagePoint, Observation, RotationMatrix};
use crate::reconstruct::ReconstructedPoint;
use crate::sim::SceneProblem;

pub const PROBLEM_MAGIC: &str = "POSEONLY";
pub const POSES_MAGIC: &str = "POSEONLY-POSES";
pub const FORMAT_VERSION: u32 = 1;
/// Allowed deviation of a quaternion norm from one.
pub const QUATERNION_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    VersionUnsupported { found: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl IoError {
    pub fn name(&self) -> &'static str {
        match self {
            IoError::ParseError { .. } => "ParseError",
            IoError::VersionUnsupported { .. } => "VersionUnsupported",
            IoError::Io { .. } => "IoError",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("need at least 2 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("got {0} estimated and {1} reference points")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemFile {
    /// Solver input rotations as scalar-first unit quaternions.
    pub rotations: Vec<[f64; 4]>,
    pub gt_poses: Option<Vec<([f64; 4], Vector3<f64>)>>,
    pub gt_points: Option<Vec<Vector3<f64>>>,
    pub n_tracks: usize,
    pub observations: Vec<Observation>,
    pub reference_view: usize,
}

impl ProblemFile {
    pub fn from_scene(scene: &SceneProblem) -> Self {
        Self {
            rotations: scene.rotations.iter().map(|r| r.to_quaternion()).collect(),
            gt_poses: Some(scene.gt_poses.iter().map(|p| (p.rotation.to_quaternion(), p.center)).collect()),
            gt_points: Some(scene.gt_points.clone()),
            n_tracks: scene.gt_points.len(),
            observations: scene.observations.clone(),
            reference_view: scene.reference_view,
        }
    }

    pub fn n_views(&self) -> usize {
        self.rotations.len()
    }

    pub fn rotation_matrices(&self) -> Vec<RotationMatrix> {
        self.rotations.iter().map(|q| RotationMatrix::from_quaternion(*q)).collect()
    }

    pub fn gt_camera_poses(&self) -> Option<Vec<CameraPose>> {
        self.gt_poses
            .as_ref()
            .map(|g| g.iter().map(|(q, c)| CameraPose::new(RotationMatrix::from_quaternion(*q), *c)).collect())
    }
}

/// Camera poses produced by a stage, plus what later stages report.
#[derive(Debug, Clone, PartialEq)]
pub struct PosesFile {
    pub poses: Vec<CameraPose>,
    pub singular_gap: Option<f64>,
    /// `(stage, runtime_ms)` in execution order.
    pub runtimes: Vec<(String, f64)>,
}

impl PosesFile {
    pub fn new(poses: Vec<CameraPose>) -> Self {
        Self { poses, singular_gap: None, runtimes: Vec::new() }
    }
}

fn fmt_f(out: &mut String, v: f64) {
    // Debug prints the shortest string that parses back to the same value.
    let _ = write!(out, " {v:?}");
}

fn fmt_q(out: &mut String, q: &[f64; 4]) {
    q.iter().for_each(|v| fmt_f(out, *v));
}

fn fmt_v(out: &mut String, v: &Vector3<f64>) {
    v.iter().for_each(|x| fmt_f(out, *x));
}

pub fn format_problem(p: &ProblemFile) -> String {
    let mut s = format!("{PROBLEM_MAGIC} {FORMAT_VERSION}\n{} {} {}\n", p.n_views(), p.n_tracks, p.observations.len());
    for (i, q) in p.rotations.iter().enumerate() {
        let _ = write!(s, "V {i}");
        fmt_q(&mut s, q);
        s.push('\n');
    }
    if let Some(gt) = &p.gt_poses {
        for (i, (q, c)) in gt.iter().enumerate() {
            let _ = write!(s, "G {i}");
            fmt_q(&mut s, q);
            fmt_v(&mut s, c);
            s.push('\n');
        }
    }
    if let Some(points) = &p.gt_points {
        for (k, x) in points.iter().enumerate() {
            let _ = write!(s, "P {k}");
            fmt_v(&mut s, x);
            s.push('\n');
        }
    }
    for o in &p.observations {
        let _ = write!(s, "O {} {}", o.track_id, o.view_id);
        fmt_f(&mut s, o.point.x);
        fmt_f(&mut s, o.point.y);
        s.push('\n');
    }
    let _ = writeln!(s, "R {}", p.reference_view);
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { inner: text.lines().enumerate() }
    }

    /// Next non-blank, non-comment line as `(line_number, fields)`.
    fn next_record(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, raw) in self.inner.by_ref() {
            let body = raw.split('#').next().unwrap_or("");
            let fields: Vec<&str> = body.split_whitespace().collect();
            if !fields.is_empty() {
                return Some((i + 1, fields));
            }
        }
        None
    }
}

fn bad(line: usize, reason: impl Into<String>) -> IoError {
    IoError::ParseError { line, reason: reason.into() }
}

fn parse_f(line: usize, s: &str) -> Result<f64, IoError> {
    let v: f64 = s.parse().map_err(|_| bad(line, format!("invalid number '{s}'")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad(line, format!("non-finite number '{s}'")))
    }
}

fn parse_u(line: usize, s: &str) -> Result<usize, IoError> {
    s.parse().map_err(|_| bad(line, format!("invalid index '{s}'")))
}

fn parse_q(line: usize, f: &[&str]) -> Result<[f64; 4], IoError> {
    let q = [parse_f(line, f[0])?, parse_f(line, f[1])?, parse_f(line, f[2])?, parse_f(line, f[3])?];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() <= QUATERNION_NORM_TOL) {
        return Err(bad(line, format!("quaternion norm {norm} is not 1")));
    }
    Ok(q)
}

fn parse_v(line: usize, f: &[&str]) -> Result<Vector3<f64>, IoError> {
    Ok(Vector3::new(parse_f(line, f[0])?, parse_f(line, f[1])?, parse_f(line, f[2])?))
}

fn expect_arity(line: usize, fields: &[&str], n: usize) -> Result<(), IoError> {
    if fields.len() == n {
        Ok(())
    } else {
        Err(bad(line, format!("'{}' record needs {} fields, got {}", fields[0], n - 1, fields.len() - 1)))
    }
}

fn header(lines: &mut Lines<'_>, magic: &str) -> Result<(), IoError> {
    let (line, f) = lines.next_record().ok_or_else(|| bad(1, "empty file"))?;
    if f[0] != magic {
        return Err(bad(line, format!("expected '{magic}' header, got '{}'", f[0])));
    }
    match f.get(1) {
        Some(v) if *v == FORMAT_VERSION.to_string() && f.len() == 2 => Ok(()),
        Some(v) if f.len() == 2 => Err(IoError::VersionUnsupported { found: v.to_string() }),
        _ => Err(bad(line, "header must be '<magic> <version>'")),
    }
}

/// Fills `slot` once, rejecting duplicates.
fn put<T>(slots: &mut [Option<T>], idx: usize, value: T, line: usize, what: &str) -> Result<(), IoError> {
    let n = slots.len();
    let slot = slots.get_mut(idx).ok_or_else(|| bad(line, format!("{what} {idx} out of range (count {n})")))?;
    if slot.is_some() {
        return Err(bad(line, format!("duplicate {what} {idx}")));
    }
    *slot = Some(value);
    Ok(())
}

pub fn parse_problem(text: &str) -> Result<ProblemFile, IoError> {
    let mut lines = Lines::new(text);
    header(&mut lines, PROBLEM_MAGIC)?;
    let (count_line, counts) = lines.next_record().ok_or_else(|| bad(2, "missing counts line"))?;
    if counts.len() != 3 {
        return Err(bad(count_line, "counts line must be '<n_views> <n_tracks> <n_obs>'"));
    }
    let n_views = parse_u(count_line, counts[0])?;
    let n_tracks = parse_u(count_line, counts[1])?;
    let n_obs = parse_u(count_line, counts[2])?;

    let mut rotations: Vec<Option<[f64; 4]>> = vec![None; n_views];
    let mut gt_poses: Vec<Option<([f64; 4], Vector3<f64>)>> = vec![None; n_views];
    let mut gt_points: Vec<Option<Vector3<f64>>> = vec![None; n_tracks];
    let mut observations = Vec::with_capacity(n_obs);
    let mut reference = None;
    let mut last_line = count_line;
    while let Some((line, f)) = lines.next_record() {
        last_line = line;
        match f[0] {
            "V" => {
                expect_arity(line, &f, 6)?;
                put(&mut rotations, parse_u(line, f[1])?, parse_q(line, &f[2..6])?, line, "view")?;
            }
            "G" => {
                expect_arity(line, &f, 9)?;
                let pose = (parse_q(line, &f[2..6])?, parse_v(line, &f[6..9])?);
                put(&mut gt_poses, parse_u(line, f[1])?, pose, line, "ground-truth view")?;
            }
            "P" => {
                expect_arity(line, &f, 5)?;
                put(&mut gt_points, parse_u(line, f[1])?, parse_v(line, &f[2..5])?, line, "ground-truth point")?;
            }
            "O" => {
                expect_arity(line, &f, 5)?;
                let (track_id, view_id) = (parse_u(line, f[1])?, parse_u(line, f[2])?);
                if track_id >= n_tracks {
                    return Err(bad(line, format!("track {track_id} out of range (count {n_tracks})")));
                }
                if view_id >= n_views {
                    return Err(bad(line, format!("view {view_id} out of range (count {n_views})")));
                }
                if observations.len() == n_obs {
                    return Err(bad(line, format!("more than the declared {n_obs} observations")));
                }
                let point = NormalizedImagePoint::new(parse_f(line, f[3])?, parse_f(line, f[4])?);
                observations.push(Observation { track_id, view_id, point });
            }
            "R" => {
                expect_arity(line, &f, 2)?;
                if reference.is_some() {
                    return Err(bad(line, "duplicate reference line"));
                }
                let r = parse_u(line, f[1])?;
                if r >= n_views {
                    return Err(bad(line, format!("reference view {r} out of range (count {n_views})")));
                }
                reference = Some(r);
            }
            other => return Err(bad(line, format!("unknown record '{other}'"))),
        }
    }

    let end = last_line + 1;
    if let Some(v) = rotations.iter().position(Option::is_none) {
        return Err(bad(end, format!("missing 'V' line for view {v}")));
    }
    if observations.len() != n_obs {
        return Err(bad(end, format!("expected {n_obs} observations, found {}", observations.len())));
    }
    let reference_view = reference.ok_or_else(|| bad(end, "missing 'R' line"))?;
    Ok(ProblemFile {
        rotations: rotations.into_iter().flatten().collect(),
        gt_poses: all_or_none(gt_poses, end, "G")?,
        gt_points: all_or_none(gt_points, end, "P")?,
        n_tracks,
        observations,
        reference_view,
    })
}

fn all_or_none<T>(slots: Vec<Option<T>>, line: usize, tag: &str) -> Result<Option<Vec<T>>, IoError> {
    let present = slots.iter().filter(|s| s.is_some()).count();
    if present == 0 {
        Ok(None)
    } else if present == slots.len() {
        Ok(Some(slots.into_iter().flatten().collect()))
    } else {
        Err(bad(line, format!("'{tag}' lines cover {present} of {} entries", slots.len())))
    }
}

pub fn format_poses(p: &PosesFile) -> String {
    let mut s = format!("{POSES_MAGIC} {FORMAT_VERSION}\n{}\n", p.poses.len());
    for (i, pose) in p.poses.iter().enumerate() {
        let _ = write!(s, "T {i}");
        fmt_q(&mut s, &pose.rotation.to_quaternion());
        fmt_v(&mut s, &pose.center);
        s.push('\n');
    }
    if let Some(g) = p.singular_gap {
        let _ = write!(s, "S");
        fmt_f(&mut s, g);
        s.push('\n');
    }
    for (stage, ms) in &p.runtimes {
        let _ = write!(s, "M {stage}");
        fmt_f(&mut s, *ms);
        s.push('\n');
    }
    s
}

pub fn parse_poses(text: &str) -> Result<PosesFile, IoError> {
    let mut lines = Lines::new(text);
    header(&mut lines, POSES_MAGIC)?;
    let (count_line, f) = lines.next_record().ok_or_else(|| bad(2, "missing view count"))?;
    if f.len() != 1 {
        return Err(bad(count_line, "count line must hold the number of views"));
    }
    let n = parse_u(count_line, f[0])?;
    let mut poses: Vec<Option<CameraPose>> = vec![None; n];
    let mut out = PosesFile::new(Vec::new());
    let mut last_line = count_line;
    while let Some((line, f)) = lines.next_record() {
        last_line = line;
        match f[0] {
            "T" => {
                expect_arity(line, &f, 9)?;
                let q = parse_q(line, &f[2..6])?;
                let pose = CameraPose::new(RotationMatrix::from_quaternion(q), parse_v(line, &f[6..9])?);
                put(&mut poses, parse_u(line, f[1])?, pose, line, "view")?;
            }
            "S" => {
                expect_arity(line, &f, 2)?;
                out.singular_gap = Some(parse_f(line, f[1])?);
            }
            "M" => {
                expect_arity(line, &f, 3)?;
                out.runtimes.push((f[1].to_string(), parse_f(line, f[2])?));
            }
            other => return Err(bad(line, format!("unknown record '{other}'"))),
        }
    }
    if let Some(v) = poses.iter().position(Option::is_none) {
        return Err(bad(last_line + 1, format!("missing 'T' line for view {v}")));
    }
    out.poses = poses.into_iter().flatten().collect();
    Ok(out)
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::Io { path: path.display().to_string(), source })
}

pub fn read_problem(path: &Path) -> Result<ProblemFile, IoError> {
    parse_problem(&read_text(path)?)
}

pub fn write_problem(path: &Path, problem: &ProblemFile) -> Result<(), IoError> {
    write_text(path, &format_problem(problem))
}

pub fn read_poses(path: &Path) -> Result<PosesFile, IoError> {
    parse_poses(&read_text(path)?)
}

pub fn write_poses(path: &Path, poses: &PosesFile) -> Result<(), IoError> {
    write_text(path, &format_poses(poses))
}

pub fn format_ply(points: &[ReconstructedPoint], camera_centers: &[Vector3<f64>]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len() + camera_centers.len()
    );
    let vertices = points
        .iter()
        .map(|p| (p.position_w, "255 255 255"))
        .chain(camera_centers.iter().map(|c| (*c, "255 0 0")));
    for (v, rgb) in vertices {
        let _ = writeln!(s, "{} {} {} {rgb}", v.x as f32, v.y as f32, v.z as f32);
    }
    s
}

/// ASCII PLY: reconstructed points in white, camera centers in red.
pub fn export_ply(points: &[ReconstructedPoint], camera_centers: &[Vector3<f64>], path: &Path) -> Result<(), IoError> {
    write_text(path, &format_ply(points, camera_centers))
}

/// `gt ≈ scale · rotation · est + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
    pub rms: f64,
    /// The estimated points are collinear (or coincident), so the rotation
    /// about their line is arbitrary.
    pub degenerate: bool,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p * self.scale + self.translation
    }
}

/// Least-squares similarity (Umeyama) minimizing `Σ ‖s R est + t - gt‖²`.
pub fn align_similarity(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Similarity, AlignError> {
    if est.len() != gt.len() {
        return Err(AlignError::LengthMismatch(est.len(), gt.len()));
    }
    let n = est.len();
    if n < 2 {
        return Err(AlignError::TooFewPoints(n));
    }
    let nf = n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / nf;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        spread += de * de.transpose();
    }
    cov /= nf;
    spread /= nf;
    let var_e = spread.trace();

    let mut spread_eig = spread.symmetric_eigenvalues().as_slice().to_vec();
    spread_eig.sort_by(|a, b| b.total_cmp(a));
    let degenerate = !(spread_eig[1] > 1e-12 * spread_eig[0]);

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // Singular values come unsorted from nalgebra; the reflection must hit
    // the smallest one.
    let (u, sv, v_t) = {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let pick = |m: &Matrix3<f64>, by_col: bool| {
            Matrix3::from_fn(|r, c| if by_col { m[(r, order[c])] } else { m[(order[r], c)] })
        };
        (pick(&u, true), Vector3::from_fn(|i, _| svd.singular_values[order[i]]), pick(&v_t, false))
    };
    let rotation = u * d * v_t;
    let scale = if var_e > 0.0 { (sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)]) / var_e } else { 0.0 };
    let translation = mu_g - rotation * mu_e * scale;
    let rms = (est.iter().zip(gt).map(|(e, g)| (rotation * e * scale + translation - g).norm_squared()).sum::<f64>() / nf)
        .sqrt();
    Ok(Similarity { scale, rotation: RotationMatrix::from_matrix_unchecked(rotation), translation, rms, degenerate })
}
