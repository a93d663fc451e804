//! Two-view and multi-view pose-only primitives.
//!
//! Conventions: a camera pose stores the world-to-camera rotation `R` and the
//! camera center `t` in world coordinates, so a world point maps into the
//! camera frame as `X^C = R (X^w - t)`. Image points are normalized
//! coordinates on the `z = 1` plane.
//!
//! All cross-product matrices are expanded as explicit cross products.

use std::collections::BTreeMap;
use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Hard lower bound on θ below which depths are never divided out.
pub const THETA_FLOOR: f64 = 1e-12;

/// Depths at or below this value are treated as behind the camera plane.
const MIN_PROJECTION_DEPTH: f64 = 1e-12;

const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0:e} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("view pair is degenerate (theta = {theta:e})")]
    DegeneratePair { theta: f64 },
    #[error("matrix is not a proper rotation (|R^T R - I|_F = {orthogonality:e}, det = {det})")]
    InvalidRotation { orthogonality: f64, det: f64 },
    #[error("pair geometries do not share the same left view")]
    MismatchedBase,
    #[error("track {track_id}: {reason}")]
    InvalidTrack { track_id: usize, reason: String },
    #[error("duplicate observation of track {track_id} in view {view_id}")]
    DuplicateObservation { track_id: usize, view_id: usize },
}

/// A proper 3x3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and determinant before wrapping.
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let orthogonality = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if !(orthogonality < ROTATION_TOLERANCE) || !((det - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(GeometryError::InvalidRotation { orthogonality, det });
        }
        Ok(Self(m))
    }

    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Exponential map of an axis-angle vector (radians).
    pub fn from_scaled_axis(v: Vector3<f64>) -> Self {
        Self(*Rotation3::new(v).matrix())
    }

    /// Builds the rotation from a scalar-first unit quaternion. The caller is
    /// responsible for the unit norm.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        Self(*uq.to_rotation_matrix().matrix())
    }

    /// Scalar-first unit quaternion with non-negative scalar part.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let uq = UnitQuaternion::from_matrix(&self.0);
        let q = uq.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Geodesic distance in radians.
    pub fn angle_to(&self, other: &RotationMatrix) -> f64 {
        let rel = self.0 * other.0.transpose();
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos loses precision near zero; use the skew part there.
        let s = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]).norm()
            * 0.5;
        s.atan2(c)
    }
}

impl Mul for RotationMatrix {
    type Output = RotationMatrix;
    fn mul(self, rhs: RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for &RotationMatrix {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<Vector3<f64>> for RotationMatrix {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// World-to-camera rotation plus camera center in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: RotationMatrix,
    pub center: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: RotationMatrix, center: Vector3<f64>) -> Self {
        Self { rotation, center }
    }

    pub fn identity() -> Self {
        Self::new(RotationMatrix::identity(), Vector3::zeros())
    }

    /// `R (X^w - t)`.
    pub fn to_camera(&self, point_w: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0 * (point_w - self.center)
    }
}

/// Normalized image coordinate `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedImagePoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedImagePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn ray(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub track_id: usize,
    pub view_id: usize,
    pub point: NormalizedImagePoint,
}

/// Observations of a single 3D feature, ordered by strictly increasing view id.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: usize,
    observations: Vec<(usize, NormalizedImagePoint)>,
}

impl Track {
    pub fn new(
        track_id: usize,
        observations: Vec<(usize, NormalizedImagePoint)>,
    ) -> Result<Self, GeometryError> {
        if observations.len() < 2 {
            return Err(GeometryError::InvalidTrack {
                track_id,
                reason: format!("needs at least 2 observations, got {}", observations.len()),
            });
        }
        if observations.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(GeometryError::InvalidTrack {
                track_id,
                reason: "view ids must be strictly increasing".into(),
            });
        }
        Ok(Self { track_id, observations })
    }

    pub fn observations(&self) -> &[(usize, NormalizedImagePoint)] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn views(&self) -> impl Iterator<Item = usize> + '_ {
        self.observations.iter().map(|(v, _)| *v)
    }

    /// Image point in `view`, if the track is observed there.
    pub fn point_in(&self, view: usize) -> Option<NormalizedImagePoint> {
        self.observations
            .binary_search_by_key(&view, |(v, _)| *v)
            .ok()
            .map(|i| self.observations[i].1)
    }
}

/// Groups observations into tracks ordered by track id.
///
/// Tracks with fewer than `max(min_track_len, 2)` observations are dropped.
pub fn tracks_from_observations(
    observations: &[Observation],
    min_track_len: usize,
) -> Result<Vec<Track>, GeometryError> {
    let mut grouped: BTreeMap<usize, Vec<(usize, NormalizedImagePoint)>> = BTreeMap::new();
    for o in observations {
        grouped.entry(o.track_id).or_default().push((o.view_id, o.point));
    }
    let min_len = min_track_len.max(2);
    let mut tracks = Vec::with_capacity(grouped.len());
    for (track_id, mut obs) in grouped {
        obs.sort_by_key(|(v, _)| *v);
        if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(GeometryError::DuplicateObservation { track_id, view_id: w[0].0 });
        }
        if obs.len() >= min_len {
            tracks.push(Track::new(track_id, obs)?);
        }
    }
    Ok(tracks)
}

/// Projects a world point, failing when it is not in front of the camera.
pub fn project(pose: &CameraPose, point_w: &Vector3<f64>) -> Result<NormalizedImagePoint, GeometryError> {
    let pc = pose.to_camera(point_w);
    if !(pc.z > MIN_PROJECTION_DEPTH) {
        return Err(GeometryError::NonPositiveDepth(pc.z));
    }
    Ok(NormalizedImagePoint::new(pc.x / pc.z, pc.y / pc.z))
}

/// Pose of view `i` expressed in view `j`: `X^{C_j} = R_{i,j} X^{C_i} + t_{i,j}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
}

/// Returns `(R_j R_i^T, R_j (t_i - t_j))`.
pub fn relative_pose(pose_i: &CameraPose, pose_j: &CameraPose) -> RelativePose {
    RelativePose {
        rotation: pose_j.rotation * pose_i.rotation.transpose(),
        translation: pose_j.rotation * (pose_i.center - pose_j.center),
    }
}

/// Derived quantities of one observation pair `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    pub rel_rotation: RotationMatrix,
    pub rel_translation: Vector3<f64>,
    pub theta: f64,
    pub a_vec: Vector3<f64>,
    pub b_vec: Vector3<f64>,
    /// `X_i`, the ray in the left view.
    pub left_ray: Vector3<f64>,
    /// `X_j`, the ray in the right view.
    pub right_ray: Vector3<f64>,
}

impl PairGeometry {
    /// `R_{i,j} X_i`.
    pub fn rotated_left(&self) -> Vector3<f64> {
        self.rel_rotation * self.left_ray
    }

    /// Linear depths `(a^T t / θ², b^T t / θ²)`. Signed; cheirality is the
    /// caller's concern.
    pub fn linear_depths(&self, theta_min: f64) -> Result<(f64, f64), GeometryError> {
        self.check_theta(theta_min)?;
        let th2 = self.theta * self.theta;
        Ok((
            self.a_vec.dot(&self.rel_translation) / th2,
            self.b_vec.dot(&self.rel_translation) / th2,
        ))
    }

    fn check_theta(&self, theta_min: f64) -> Result<(), GeometryError> {
        if self.theta <= theta_min.max(THETA_FLOOR) {
            Err(GeometryError::DegeneratePair { theta: self.theta })
        } else {
            Ok(())
        }
    }
}

pub fn compute_pair_geometry(
    rel: &RelativePose,
    x_i: &NormalizedImagePoint,
    x_j: &NormalizedImagePoint,
) -> PairGeometry {
    let left = x_i.ray();
    let right = x_j.ray();
    let rotated = rel.rotation * left;
    // c = [R X_i]_x X_j; a = [X_j]_x^T c, b = [R X_i]_x^T c.
    let c = rotated.cross(&right);
    PairGeometry {
        rel_rotation: rel.rotation,
        rel_translation: rel.translation,
        theta: c.norm(),
        a_vec: c.cross(&right),
        b_vec: c.cross(&rotated),
        left_ray: left,
        right_ray: right,
    }
}

/// Magnitude-form depths `(‖X_j × t‖ / θ, ‖R X_i × t‖ / θ)`.
pub fn pair_depths(pg: &PairGeometry, theta_min: f64) -> Result<(f64, f64), GeometryError> {
    pg.check_theta(theta_min)?;
    let t = pg.rel_translation;
    Ok((
        pg.right_ray.cross(&t).norm() / pg.theta,
        pg.rotated_left().cross(&t).norm() / pg.theta,
    ))
}

/// `d_j X_j - d_i R_{i,j} X_i - t_{i,j}` with linear depths.
pub fn ppo_residual(pg: &PairGeometry, theta_min: f64) -> Result<Vector3<f64>, GeometryError> {
    let (d_i, d_j) = pg.linear_depths(theta_min)?;
    Ok(pg.right_ray * d_j - pg.rotated_left() * d_i - pg.rel_translation)
}

/// Which linear relative-translation constraint to evaluate.
#[derive(Debug, Clone, Copy)]
pub enum LinearForm<'a> {
    /// `(X_j b^T - R X_i a^T - θ² I) t_{i,j}` for one pair.
    TwoView(&'a PairGeometry),
    /// Constraint of view `i` against the base pair `(ζ, η)`; both pairs
    /// must share the left view ζ.
    MultiView { base: &'a PairGeometry, row: &'a PairGeometry },
}

/// Evaluates a linear relative-translation constraint; zero on exact geometry.
///
/// The multi-view form follows from substituting the linear depths into
/// `d_i X_i = d_ζ R_{ζ,i} X_ζ + t_{ζ,i}` and clearing both denominators:
///
/// `θ²_{ζ,i} (a_{ζ,η}·t_{ζ,η}) R_{ζ,i} X_ζ + θ²_{ζ,η} θ²_{ζ,i} t_{ζ,i}
///   - θ²_{ζ,η} (b_{ζ,i}·t_{ζ,i}) X_i`
///
/// The first term's `a` vector belongs to the base pair, not the row pair.
pub fn linear_translation_residual(form: LinearForm<'_>) -> Result<Vector3<f64>, GeometryError> {
    match form {
        LinearForm::TwoView(pg) => {
            let t = pg.rel_translation;
            let th2 = pg.theta * pg.theta;
            Ok(pg.right_ray * pg.b_vec.dot(&t) - pg.rotated_left() * pg.a_vec.dot(&t) - t * th2)
        }
        LinearForm::MultiView { base, row } => {
            if base.left_ray != row.left_ray {
                return Err(GeometryError::MismatchedBase);
            }
            let base_th2 = base.theta * base.theta;
            let row_th2 = row.theta * row.theta;
            let t_row = row.rel_translation;
            Ok(row.rotated_left() * (row_th2 * base.a_vec.dot(&base.rel_translation))
                + t_row * (base_th2 * row_th2)
                - row.right_ray * (base_th2 * row.b_vec.dot(&t_row)))
        }
    }
}
