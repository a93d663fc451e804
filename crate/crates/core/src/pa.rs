//! Pose adjustment: reprojection refinement over camera poses only.
//!
//! Every track keeps the base pair chosen from the initial poses. With world
//! rays `w = R_ζᵀ X̃_ζ` and `u = R_ηᵀ X̃_η`, the left-base depth is
//!
//! ```text
//! d = ((w × u) × u)ᵀ (t_ζ - t_η) / ‖w × u‖²
//! ```
//!
//! the feature sits at `P = t_ζ + d w`, and each view `i ≠ ζ` predicts
//! `Y_i = R_i (P - t_i)`. The residual is the dehomogenized `Y_i` minus the
//! observed point. There are no per-point unknowns.
//!
//! Increments live in the camera frame, `R ← exp([δ]_x) R` and
//! `t ← t + Rᵀ δ`, so a global similarity of the input poses does not change
//! the optimizer's path. The reference pose is fixed and one anchor view keeps
//! its distance to the reference center.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{CameraPose, RotationMatrix, Track, THETA_FLOOR};
use crate::ligt::{select_base_views, BaseViewPair, LigtError};

/// Anchor candidates closer than this fraction of the largest center offset
/// count as sharing the reference center.
const COINCIDENT_CENTER_FRACTION: f64 = 1e-6;

/// Tracks are accumulated in at most this many fixed chunks, summed in order.
const ACCUMULATION_CHUNKS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PaError {
    #[error("cost became non-finite ({cost}) at iteration {iteration}")]
    DivergedNumerically { iteration: usize, cost: f64 },
    #[error("no view has a center distinct from reference view {reference_view}; scale cannot be anchored")]
    NoScaleAnchor { reference_view: usize },
    #[error("view {view} is out of range for {n_views} views")]
    ViewOutOfRange { view: usize, n_views: usize },
    #[error("no track has a non-degenerate base pair")]
    NoUsableTracks,
}

#[derive(Debug, Clone, Copy)]
pub struct PaConfig {
    pub max_iter: usize,
    /// Bound on `max_k |g_k| / sqrt(H_kk)`.
    pub gradient_tol: f64,
    /// Bound on the Marquardt-scaled step norm.
    pub step_tol: f64,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub theta_min: f64,
    /// Hold rotations at their input values and refine centers only.
    pub freeze_rotations: bool,
    pub parallel: bool,
}

impl Default for PaConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            theta_min: 0.0,
            freeze_rotations: false,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    Step,
    MaxIter,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Gradient => "gradient",
            Termination::Step => "step",
            Termination::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeReport {
    /// LM trials, accepted or not.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost before the first trial followed by the cost after each trial.
    pub cost_history: Vec<f64>,
    pub converged: bool,
    pub termination: Termination,
    pub n_params: usize,
    pub n_residuals: usize,
    pub reference_view: usize,
    pub anchor_view: usize,
    /// Tracks without a usable base pair at the initial poses.
    pub excluded_tracks: usize,
    /// Tracks whose base pair collapsed at the final poses.
    pub dropped_tracks: usize,
}

/// Free pose parameters: three rotation and three center parameters per
/// non-reference view, minus one for the anchor's frozen distance.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLayout {
    pub n_views: usize,
    pub reference_view: usize,
    pub anchor_view: usize,
    pub freeze_rotations: bool,
    rotation: Vec<Option<usize>>,
    center: Vec<Option<usize>>,
    n_params: usize,
}

impl PoseLayout {
    /// Picks the anchor as the view sharing the most tracks with the
    /// reference (smallest index on ties), skipping views whose center
    /// coincides with the reference center.
    pub fn new(
        poses: &[CameraPose],
        tracks: &[Track],
        reference_view: usize,
        freeze_rotations: bool,
    ) -> Result<Self, PaError> {
        let n_views = poses.len();
        if reference_view >= n_views {
            return Err(PaError::ViewOutOfRange { view: reference_view, n_views });
        }
        let mut shared = vec![0usize; n_views];
        for track in tracks {
            if track.point_in(reference_view).is_some() {
                for v in track.views() {
                    if v >= n_views {
                        return Err(PaError::ViewOutOfRange { view: v, n_views });
                    }
                    shared[v] += 1;
                }
            }
        }
        let c_ref = poses[reference_view].center;
        let spread = poses.iter().map(|p| (p.center - c_ref).norm()).fold(0.0, f64::max);
        let anchor_view = (0..n_views)
            .filter(|&v| v != reference_view)
            .filter(|&v| (poses[v].center - c_ref).norm() > COINCIDENT_CENTER_FRACTION * spread)
            .max_by(|&a, &b| shared[a].cmp(&shared[b]).then(b.cmp(&a)))
            .ok_or(PaError::NoScaleAnchor { reference_view })?;

        let mut rotation = vec![None; n_views];
        let mut center = vec![None; n_views];
        let mut next = 0;
        for v in 0..n_views {
            if v == reference_view {
                continue;
            }
            if !freeze_rotations {
                rotation[v] = Some(next);
                next += 3;
            }
            center[v] = Some(next);
            next += if v == anchor_view { 2 } else { 3 };
        }
        Ok(Self { n_views, reference_view, anchor_view, freeze_rotations, rotation, center, n_params: next })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn rotation_columns(&self, view: usize) -> Option<usize> {
        self.rotation[view]
    }

    /// First column and width of a view's center parameters.
    pub fn center_columns(&self, view: usize) -> Option<(usize, usize)> {
        self.center[view].map(|c| (c, if view == self.anchor_view { 2 } else { 3 }))
    }

    /// The anchor's offset from the reference center and the world-frame
    /// rotation axes of its two parameters.
    pub fn anchor_tangent(&self, poses: &[CameraPose]) -> (Vector3<f64>, [Vector3<f64>; 2]) {
        let pose = &poses[self.anchor_view];
        let offset = pose.center - poses[self.reference_view].center;
        let r = pose.rotation.matrix();
        let (e1, e2) = perpendicular_basis(&(r * offset).normalize());
        (offset, [r.tr_mul(&e1), r.tr_mul(&e2)])
    }

    /// `∂t_v / ∂δ` columns for the view's center parameters.
    fn center_basis(&self, poses: &[CameraPose], view: usize) -> Matrix3<f64> {
        if view == self.anchor_view {
            let (offset, e) = self.anchor_tangent(poses);
            Matrix3::from_columns(&[e[0].cross(&offset), e[1].cross(&offset), Vector3::zeros()])
        } else {
            poses[view].rotation.matrix().transpose()
        }
    }

    /// Applies an increment to every free parameter.
    pub fn retract(&self, poses: &[CameraPose], delta: &DVector<f64>) -> Vec<CameraPose> {
        assert_eq!(delta.len(), self.n_params, "increment length does not match the layout");
        let anchor = self.anchor_tangent(poses);
        (0..self.n_views)
            .map(|v| {
                let pose = poses[v];
                let mut out = pose;
                if let Some(c) = self.rotation[v] {
                    let step = Vector3::new(delta[c], delta[c + 1], delta[c + 2]);
                    out.rotation = RotationMatrix::from_scaled_axis(step) * pose.rotation;
                }
                if let Some(c) = self.center[v] {
                    if v == self.anchor_view {
                        let (offset, e) = anchor;
                        let axis = e[0] * delta[c] + e[1] * delta[c + 1];
                        let turned = RotationMatrix::from_scaled_axis(axis) * offset;
                        out.center = poses[self.reference_view].center + turned;
                    } else {
                        let step = Vector3::new(delta[c], delta[c + 1], delta[c + 2]);
                        out.center = pose.center + pose.rotation.matrix().tr_mul(&step);
                    }
                }
                out
            })
            .collect()
    }
}

fn perpendicular_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let e1 = n.cross(&helper).normalize();
    (e1, n.cross(&e1))
}

/// Residual vector plus the tracks whose base pair was degenerate.
#[derive(Debug, Clone)]
pub struct PaResiduals {
    pub values: DVector<f64>,
    pub dropped_tracks: Vec<usize>,
}

/// `rows × cols` Jacobian as `(row, col, value)` triplets.
#[derive(Debug, Clone)]
pub struct SparseJacobian {
    pub rows: usize,
    pub cols: usize,
    pub triplets: Vec<(usize, usize, f64)>,
}

impl SparseJacobian {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.triplets {
            m[(r, c)] += v;
        }
        m
    }
}

/// Residual slot count of a track: every view except the left base.
fn slot_count(track: &Track) -> usize {
    track.len() - 1
}

pub fn residual_len(tracks: &[Track]) -> usize {
    2 * tracks.iter().map(slot_count).sum::<usize>()
}

/// Per-track quantities shared by all of its residual slots.
struct TrackFrame {
    left: usize,
    right: usize,
    w: Vector3<f64>,
    depth: f64,
    point: Vector3<f64>,
    // Partial derivatives of the depth with respect to w, u and t_ζ - t_η.
    g_w: Vector3<f64>,
    g_u: Vector3<f64>,
    g_b: Vector3<f64>,
}

fn track_frame(track: &Track, base: &BaseViewPair, poses: &[CameraPose], floor: f64) -> Option<TrackFrame> {
    let pz = &poses[base.left];
    let pe = &poses[base.right];
    let w = pz.rotation.matrix().tr_mul(&track.point_in(base.left)?.ray());
    let u = pe.rotation.matrix().tr_mul(&track.point_in(base.right)?.ray());
    let b = pz.center - pe.center;
    let cross = w.cross(&u);
    let m = cross.norm_squared();
    if !(m.sqrt() > floor) {
        return None;
    }
    let (wu, ww, uu) = (w.dot(&u), w.norm_squared(), u.norm_squared());
    let (ub, wb) = (u.dot(&b), w.dot(&b));
    // a_w = (w × u) × u = u (u·w) - w |u|².
    let a_w = u * wu - w * uu;
    let n = a_w.dot(&b);
    let depth = n / m;
    let dn_dw = u * ub - b * uu;
    let dm_dw = (w * uu - u * wu) * 2.0;
    let dn_du = w * ub + b * wu - u * (2.0 * wb);
    let dm_du = (u * ww - w * wu) * 2.0;
    Some(TrackFrame {
        left: base.left,
        right: base.right,
        w,
        depth,
        point: pz.center + w * depth,
        g_w: (dn_dw - dm_dw * depth) / m,
        g_u: (dn_du - dm_du * depth) / m,
        g_b: a_w / m,
    })
}

/// Derivative of the prediction `Y` with respect to one view's rotation
/// increment and world center.
struct ViewPartial {
    view: usize,
    rot: Matrix3<f64>,
    center_world: Matrix3<f64>,
}

/// Layout-dependent data reused across all slots of one evaluation.
struct Linearization<'a> {
    layout: &'a PoseLayout,
    center_basis: Vec<Matrix3<f64>>,
}

impl<'a> Linearization<'a> {
    fn new(layout: &'a PoseLayout, poses: &[CameraPose]) -> Self {
        let center_basis = (0..layout.n_views)
            .map(|v| if layout.center[v].is_some() { layout.center_basis(poses, v) } else { Matrix3::zeros() })
            .collect();
        Self { layout, center_basis }
    }
}

/// Jacobian of one 2-vector residual slot: at most three views of six
/// parameters each.
struct SlotJacobian {
    cols: [usize; 18],
    vals: [Vector2<f64>; 18],
    len: usize,
}

impl SlotJacobian {
    fn new() -> Self {
        Self { cols: [0; 18], vals: [Vector2::zeros(); 18], len: 0 }
    }

    fn push(&mut self, col: usize, val: Vector2<f64>) {
        self.cols[self.len] = col;
        self.vals[self.len] = val;
        self.len += 1;
    }

    fn entries(&self) -> impl Iterator<Item = (usize, Vector2<f64>)> + '_ {
        self.cols[..self.len].iter().copied().zip(self.vals[..self.len].iter().copied())
    }
}

/// Walks the residual slots of one track in observation order. Returns
/// `false` when the base pair is degenerate, in which case every slot is
/// reported as zero with no Jacobian entries.
fn visit_track(
    track: &Track,
    base: &BaseViewPair,
    poses: &[CameraPose],
    floor: f64,
    lin: Option<&Linearization<'_>>,
    mut emit: impl FnMut(Vector2<f64>, Option<&SlotJacobian>),
) -> bool {
    let Some(frame) = track_frame(track, base, poses, floor) else {
        let empty = SlotJacobian::new();
        for _ in 0..slot_count(track) {
            emit(Vector2::zeros(), lin.map(|_| &empty));
        }
        return false;
    };

    // World-frame pieces of the left and right base partials.
    let shared = lin.map(|_| {
        let pz = &poses[frame.left];
        let pe = &poses[frame.right];
        let xz = track.point_in(frame.left).expect("left base observed").ray();
        let xe = track.point_in(frame.right).expect("right base observed").ray();
        let dp_dw = Matrix3::identity() * frame.depth + frame.w * frame.g_w.transpose();
        let rot_left = dp_dw * pz.rotation.matrix().transpose() * xz.cross_matrix();
        let rot_right = frame.w * (frame.g_u.transpose() * pe.rotation.matrix().transpose() * xe.cross_matrix());
        let center_left = Matrix3::identity() + frame.w * frame.g_b.transpose();
        let center_right = -(frame.w * frame.g_b.transpose());
        (rot_left, rot_right, center_left, center_right)
    });

    for (view, x) in track.observations() {
        if *view == frame.left {
            continue;
        }
        let pose = &poses[*view];
        let r_i = pose.rotation.matrix();
        let y = r_i * (frame.point - pose.center);
        let residual = Vector2::new(y.x / y.z - x.x, y.y / y.z - x.y);
        let (Some(lin), Some((rot_left, rot_right, center_left, center_right))) = (lin, shared.as_ref()) else {
            emit(residual, None);
            continue;
        };

        let mut partials = [
            ViewPartial { view: frame.left, rot: r_i * rot_left, center_world: r_i * center_left },
            ViewPartial { view: frame.right, rot: r_i * rot_right, center_world: r_i * center_right },
            ViewPartial { view: *view, rot: -y.cross_matrix(), center_world: -r_i },
        ];
        let mut used = 3;
        if *view == frame.right {
            let own = ViewPartial { view: *view, rot: -y.cross_matrix(), center_world: -r_i };
            partials[1].rot += own.rot;
            partials[1].center_world += own.center_world;
            used = 2;
        }

        let iz = 1.0 / y.z;
        let proj = Matrix2x3::new(iz, 0.0, -y.x * iz * iz, 0.0, iz, -y.y * iz * iz);
        let mut jac = SlotJacobian::new();
        for p in &partials[..used] {
            if let Some(c) = lin.layout.rotation[p.view] {
                let block = proj * p.rot;
                for k in 0..3 {
                    jac.push(c + k, block.column(k).into_owned());
                }
            }
            if let Some((c, width)) = lin.layout.center_columns(p.view) {
                let block = proj * p.center_world * lin.center_basis[p.view];
                for k in 0..width {
                    jac.push(c + k, block.column(k).into_owned());
                }
            }
        }
        emit(residual, Some(&jac));
    }
    true
}

fn base_floor(theta_min: f64) -> f64 {
    theta_min.max(THETA_FLOOR)
}

/// Stacked residuals over `tracks`, each paired with its frozen base pair.
pub fn pa_residuals(poses: &[CameraPose], tracks: &[Track], bases: &[BaseViewPair], theta_min: f64) -> PaResiduals {
    assert_eq!(tracks.len(), bases.len(), "one base pair per track");
    let floor = base_floor(theta_min);
    let mut values = Vec::with_capacity(residual_len(tracks));
    let mut dropped_tracks = Vec::new();
    for (track, base) in tracks.iter().zip(bases) {
        let ok = visit_track(track, base, poses, floor, None, |r, _| values.extend_from_slice(&[r.x, r.y]));
        if !ok {
            dropped_tracks.push(track.track_id);
        }
    }
    PaResiduals { values: DVector::from_vec(values), dropped_tracks }
}

/// Analytic Jacobian of [`pa_residuals`] with respect to `layout`.
pub fn pa_jacobian(
    poses: &[CameraPose],
    tracks: &[Track],
    bases: &[BaseViewPair],
    layout: &PoseLayout,
    theta_min: f64,
) -> SparseJacobian {
    assert_eq!(tracks.len(), bases.len(), "one base pair per track");
    let floor = base_floor(theta_min);
    let lin = Linearization::new(layout, poses);
    let mut triplets = Vec::new();
    let mut row = 0;
    for (track, base) in tracks.iter().zip(bases) {
        visit_track(track, base, poses, floor, Some(&lin), |_, jac| {
            for (c, v) in jac.expect("linearization requested").entries() {
                triplets.push((row, c, v.x));
                triplets.push((row + 1, c, v.y));
            }
            row += 2;
        });
    }
    SparseJacobian { rows: row, cols: layout.n_params(), triplets }
}

/// Gauss-Newton normal equations `JᵀJ`, `Jᵀr` and the cost `rᵀr`.
struct NormalEquations {
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
    cost: f64,
    dropped: usize,
}

impl NormalEquations {
    fn zeros(n: usize) -> Self {
        Self { hessian: DMatrix::zeros(n, n), gradient: DVector::zeros(n), cost: 0.0, dropped: 0 }
    }

    fn add(&mut self, other: &NormalEquations) {
        self.hessian += &other.hessian;
        self.gradient += &other.gradient;
        self.cost += other.cost;
        self.dropped += other.dropped;
    }
}

/// Fixed chunking of the track list so sequential and parallel runs add
/// the same partial sums in the same order.
fn chunk_len(n_tracks: usize) -> usize {
    n_tracks.div_ceil(ACCUMULATION_CHUNKS).max(1)
}

struct Problem<'a> {
    tracks: Vec<&'a Track>,
    bases: Vec<BaseViewPair>,
    floor: f64,
    parallel: bool,
}

impl Problem<'_> {
    fn cost(&self, poses: &[CameraPose]) -> (f64, usize) {
        let one = |chunk: &[(&Track, &BaseViewPair)]| -> (f64, usize) {
            let (mut cost, mut dropped) = (0.0, 0);
            for (track, base) in chunk {
                if !visit_track(track, base, poses, self.floor, None, |r, _| cost += r.norm_squared()) {
                    dropped += 1;
                }
            }
            (cost, dropped)
        };
        let pairs: Vec<(&Track, &BaseViewPair)> = self.tracks.iter().copied().zip(&self.bases).collect();
        let size = chunk_len(pairs.len());
        let parts: Vec<(f64, usize)> = if self.parallel {
            pairs.par_chunks(size).map(one).collect()
        } else {
            pairs.chunks(size).map(one).collect()
        };
        parts.iter().fold((0.0, 0), |(c, d), (pc, pd)| (c + pc, d + pd))
    }

    fn normal_equations(&self, poses: &[CameraPose], layout: &PoseLayout) -> NormalEquations {
        let lin = Linearization::new(layout, poses);
        let n = layout.n_params();
        let one = |chunk: &[(&Track, &BaseViewPair)]| -> NormalEquations {
            let mut acc = NormalEquations::zeros(n);
            for (track, base) in chunk {
                let ok = visit_track(track, base, poses, self.floor, Some(&lin), |r, jac| {
                    acc.cost += r.norm_squared();
                    let jac = jac.expect("linearization requested");
                    for (ca, va) in jac.entries() {
                        acc.gradient[ca] += va.dot(&r);
                        for (cb, vb) in jac.entries() {
                            acc.hessian[(ca, cb)] += va.dot(&vb);
                        }
                    }
                });
                if !ok {
                    acc.dropped += 1;
                }
            }
            acc
        };
        let pairs: Vec<(&Track, &BaseViewPair)> = self.tracks.iter().copied().zip(&self.bases).collect();
        let size = chunk_len(pairs.len());
        let parts: Vec<NormalEquations> = if self.parallel {
            pairs.par_chunks(size).map(one).collect()
        } else {
            pairs.chunks(size).map(one).collect()
        };
        let mut total = NormalEquations::zeros(n);
        for p in &parts {
            total.add(p);
        }
        total
    }
}

/// Frozen base pairs from the given rotations; tracks without one are left
/// out and counted.
pub fn select_bases<'a>(
    tracks: &'a [Track],
    rotations: &[RotationMatrix],
    theta_min: f64,
) -> Result<(Vec<&'a Track>, Vec<BaseViewPair>, usize), PaError> {
    let mut kept = Vec::new();
    let mut bases = Vec::new();
    let mut excluded = 0;
    for track in tracks {
        match select_base_views(track, rotations, theta_min) {
            Ok(b) => {
                kept.push(track);
                bases.push(b);
            }
            Err(LigtError::AllPairsDegenerate { .. }) => excluded += 1,
            Err(LigtError::ViewOutOfRange { view, n_views }) => return Err(PaError::ViewOutOfRange { view, n_views }),
            Err(_) => unreachable!("base selection only fails per track"),
        }
    }
    Ok((kept, bases, excluded))
}

/// Levenberg-Marquardt over poses with Marquardt damping `λ diag(JᵀJ)`.
pub fn pa_optimize(
    initial_poses: &[CameraPose],
    tracks: &[Track],
    reference_view: usize,
    config: &PaConfig,
) -> Result<(Vec<CameraPose>, OptimizeReport), PaError> {
    let rotations: Vec<RotationMatrix> = initial_poses.iter().map(|p| p.rotation).collect();
    let (kept, bases, excluded) = select_bases(tracks, &rotations, config.theta_min)?;
    if kept.is_empty() {
        return Err(PaError::NoUsableTracks);
    }
    let layout = PoseLayout::new(initial_poses, tracks, reference_view, config.freeze_rotations)?;
    let problem = Problem { tracks: kept, bases, floor: base_floor(config.theta_min), parallel: config.parallel };
    let n_residuals = 2 * problem.tracks.iter().map(|t| slot_count(t)).sum::<usize>();

    let mut poses = initial_poses.to_vec();
    let (mut cost, mut dropped) = problem.cost(&poses);
    if !cost.is_finite() {
        return Err(PaError::DivergedNumerically { iteration: 0, cost });
    }
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = config.lambda0;
    let mut iterations = 0;
    let mut normal: Option<NormalEquations> = None;

    let termination = loop {
        if normal.is_none() {
            let ne = problem.normal_equations(&poses, &layout);
            if !ne.cost.is_finite() || ne.gradient.iter().any(|g| !g.is_finite()) {
                return Err(PaError::DivergedNumerically { iteration: iterations, cost: ne.cost });
            }
            normal = Some(ne);
        }
        let ne = normal.as_ref().expect("normal equations available");
        let n = layout.n_params();
        let max_diag = (0..n).map(|k| ne.hessian[(k, k)]).fold(0.0, f64::max);
        let scale: Vec<f64> =
            (0..n).map(|k| ne.hessian[(k, k)].max(1e-12 * max_diag).max(f64::MIN_POSITIVE)).collect();
        let scaled_gradient = (0..n).map(|k| ne.gradient[k].abs() / scale[k].sqrt()).fold(0.0, f64::max);
        if iterations >= config.max_iter {
            break Termination::MaxIter;
        }
        if scaled_gradient < config.gradient_tol {
            break Termination::Gradient;
        }
        iterations += 1;

        let mut damped = ne.hessian.clone();
        for k in 0..n {
            damped[(k, k)] += lambda * scale[k];
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= config.lambda_up;
            history.push(cost);
            continue;
        };
        let delta = -chol.solve(&ne.gradient);
        let step_norm = (0..n).map(|k| scale[k] * delta[k] * delta[k]).sum::<f64>().sqrt();
        if step_norm < config.step_tol {
            history.push(cost);
            break Termination::Step;
        }
        let trial = layout.retract(&poses, &delta);
        let (trial_cost, trial_dropped) = problem.cost(&trial);
        if trial_cost.is_finite() && trial_cost < cost {
            poses = trial;
            cost = trial_cost;
            dropped = trial_dropped;
            lambda /= config.lambda_down;
            normal = None;
        } else {
            lambda *= config.lambda_up;
        }
        history.push(cost);
    };

    let report = OptimizeReport {
        iterations,
        initial_cost,
        final_cost: cost,
        cost_history: history,
        converged: termination != Termination::MaxIter,
        termination,
        n_params: layout.n_params(),
        n_residuals,
        reference_view,
        anchor_view: layout.anchor_view,
        excluded_tracks: excluded,
        dropped_tracks: dropped,
    };
    Ok((poses, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprojectionStats {
    pub rms: f64,
    /// Observations that entered the mean.
    pub observations: usize,
    /// Observations whose point lies at or behind the camera plane; these
    /// are reported here instead of being averaged.
    pub cheirality_violations: usize,
}

/// Root mean square of the point-based reprojection error `‖π(R_i (X - t_i)) - x̃_i‖`
/// over every observation of the supplied points. Tracks without a point
/// are skipped.
pub fn reprojection_rms(poses: &[CameraPose], points_w: &[(usize, Vector3<f64>)], tracks: &[Track]) -> ReprojectionStats {
    let by_id: HashMap<usize, &Track> = tracks.iter().map(|t| (t.track_id, t)).collect();
    let (mut sum, mut observations, mut cheirality_violations) = (0.0, 0usize, 0usize);
    for (track_id, p) in points_w {
        let Some(track) = by_id.get(track_id) else { continue };
        for (view, x) in track.observations() {
            let y = poses[*view].to_camera(p);
            if !(y.z > 0.0) {
                cheirality_violations += 1;
                continue;
            }
            sum += (y.x / y.z - x.x).powi(2) + (y.y / y.z - x.y).powi(2);
            observations += 1;
        }
    }
    let rms = if observations == 0 { 0.0 } else { (sum / observations as f64).sqrt() };
    ReprojectionStats { rms, observations, cheirality_violations }
}
