//! Linear global translation (LiGT) solver.
//!
//! Given global rotations and normalized image tracks, every track with a
//! non-degenerate base pair `(ζ, η)` contributes, for each of its views
//! `i ≠ ζ`, three linear equations
//!
//! ```text
//! B t_η + C t_i + D t_ζ = 0
//! B = [X_i]_x R_{ζ,i} X_ζ a_{ζ,η}ᵀ R_η,  C = θ²_{ζ,η} [X_i]_x R_i,  D = -(B + C)
//! ```
//!
//! in the stacked camera centers. Fixing the reference center to zero leaves
//! a one-dimensional null space whose direction is the translation estimate.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{NormalizedImagePoint, RotationMatrix, Track, THETA_FLOOR};
use crate::linalg::{self, SmallestSingular};

/// Reduced systems wider than this always use the normal-matrix route.
pub const DENSE_MAX_COLUMNS: usize = 1500;
/// Dense route is also skipped when the reduced matrix would exceed this
/// many entries (~240 MB of f64).
pub const DENSE_MAX_ENTRIES: usize = 30_000_000;
/// Default minimum `σ_2 / σ_1` of the reduced system. An ambiguous null
/// space puts both values at the noise level (ratio of order one), while
/// well-posed scenes at 1e-3 observation noise still measure above ten.
pub const DEFAULT_RANK_GAP_THRESHOLD: f64 = 10.0;
/// Number of smallest singular values reported with a solution.
pub const SPECTRUM_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LigtError {
    #[error("track {track_id}: every view pair is degenerate (max theta {max_theta:e})")]
    AllPairsDegenerate { track_id: usize, max_theta: f64 },
    #[error("only {usable} track(s) have a non-degenerate base pair; at least 2 are required")]
    InsufficientParallax { usable: usize },
    #[error("null space is ambiguous: sigma_2 / sigma_1 = {gap:.3e} < {threshold}")]
    RankDeficient { gap: f64, threshold: f64 },
    #[error("view {view} is out of range for {n_views} views")]
    ViewOutOfRange { view: usize, n_views: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NullSpaceBackend {
    /// Dense for moderate systems, normal matrix otherwise.
    #[default]
    Auto,
    Dense,
    Normal,
}

#[derive(Debug, Clone, Copy)]
pub struct LigtConfig {
    /// Row blocks whose `‖[X_i]_x R_{ζ,i} X_ζ‖` is at or below this are
    /// skipped. Base pairs additionally respect [`THETA_FLOOR`].
    pub theta_min: f64,
    /// Divide every block by `θ²_{ζ,η}`.
    pub normalize_blocks: bool,
    pub backend: NullSpaceBackend,
    /// Solutions with `σ_2 / σ_1` below this are rejected as rank deficient.
    pub rank_gap_threshold: f64,
    /// Build row blocks on the rayon pool. Results do not depend on this.
    pub parallel: bool,
}

impl Default for LigtConfig {
    fn default() -> Self {
        Self {
            theta_min: 0.0,
            normalize_blocks: false,
            backend: NullSpaceBackend::Auto,
            rank_gap_threshold: DEFAULT_RANK_GAP_THRESHOLD,
            parallel: true,
        }
    }
}

/// Left/right base views of a track: the observation pair of maximal θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseViewPair {
    pub left: usize,
    pub right: usize,
    pub theta: f64,
}

/// The three coefficient blocks one view contributes for one track.
#[derive(Debug, Clone, PartialEq)]
pub struct LigtRowBlock {
    pub track_id: usize,
    pub row_view: usize,
    pub left: usize,
    pub right: usize,
    /// Coefficient of `t_η`.
    pub b: Matrix3<f64>,
    /// Coefficient of `t_i`.
    pub c: Matrix3<f64>,
    /// Coefficient of `t_ζ`.
    pub d: Matrix3<f64>,
    /// The row view's ray is parallel to the transferred left ray; the block
    /// is all zero and carries no constraint.
    pub degenerate: bool,
}

impl LigtRowBlock {
    /// `B t_η + C t_i + D t_ζ` for full per-view centers.
    pub fn apply(&self, centers: &[Vector3<f64>]) -> Vector3<f64> {
        self.b * centers[self.right] + self.c * centers[self.row_view] + self.d * centers[self.left]
    }

    /// Coefficient blocks by view, with repeated views merged. The row view
    /// coincides with η for the row of the right base view.
    fn terms(&self) -> [(usize, Matrix3<f64>); 3] {
        if self.row_view == self.right {
            [(self.right, self.b + self.c), (self.left, self.d), (usize::MAX, Matrix3::zeros())]
        } else {
            [(self.right, self.b), (self.row_view, self.c), (self.left, self.d)]
        }
    }
}

/// Data for the cheirality vote: `a_worldᵀ (t_ζ - t_η)` equals
/// `a_{ζ,η}ᵀ t_{ζ,η}`, the numerator of the left-base depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignProbe {
    pub track_id: usize,
    pub left: usize,
    pub right: usize,
    pub a_world: Vector3<f64>,
}

impl SignProbe {
    pub fn value(&self, centers: &[Vector3<f64>]) -> f64 {
        self.a_world.dot(&(centers[self.left] - centers[self.right]))
    }
}

/// Assembled `L t = 0` with the reference view's columns eliminated.
#[derive(Debug, Clone)]
pub struct LigtSystem {
    pub n_views: usize,
    pub reference_view: usize,
    /// Non-degenerate blocks ordered by `(track_id, row_view)`.
    pub blocks: Vec<LigtRowBlock>,
    pub bases: Vec<(usize, BaseViewPair)>,
    pub sign_probes: Vec<SignProbe>,
    /// Tracks dropped because every pair was degenerate.
    pub excluded_tracks: Vec<usize>,
    /// Row blocks dropped as degenerate.
    pub skipped_blocks: usize,
    pub rank_gap_threshold: f64,
}

#[derive(Debug, Clone)]
pub struct TranslationSolution {
    /// Camera centers up to a global scale, reference view at the origin.
    pub translations: Vec<Vector3<f64>>,
    /// `(positive, negative)` base-pair votes after orientation.
    pub sign_votes: (usize, usize),
    /// Smallest singular values of the reduced system, ascending.
    pub spectrum: Vec<f64>,
    pub singular_gap: f64,
    pub sigma_max: f64,
    /// Norm of the re-inflated null vector before normalization.
    pub scale_norm: f64,
    pub backend: NullSpaceBackend,
}

fn world_rays(track: &Track, rotations: &[RotationMatrix]) -> Result<Vec<(usize, Vector3<f64>)>, LigtError> {
    track
        .observations()
        .iter()
        .map(|(v, x)| {
            let r = rotations.get(*v).ok_or(LigtError::ViewOutOfRange { view: *v, n_views: rotations.len() })?;
            Ok((*v, r.matrix().tr_mul(&x.ray())))
        })
        .collect()
}

/// Chooses the pair of maximal θ; ties go to the lexicographically smallest
/// `(i, j)` with `i < j` in track order, and `left = i`.
pub fn select_base_views(
    track: &Track,
    rotations: &[RotationMatrix],
    theta_min: f64,
) -> Result<BaseViewPair, LigtError> {
    // θ_{i,j} = ‖X_j × R_{i,j} X_i‖ = ‖w_j × w_i‖ for world rays w = Rᵀ X.
    let rays = world_rays(track, rotations)?;
    let mut best: Option<BaseViewPair> = None;
    for (a, (vi, wi)) in rays.iter().enumerate() {
        for (vj, wj) in &rays[a + 1..] {
            let theta = wj.cross(wi).norm();
            if best.is_none_or(|b| theta > b.theta) {
                best = Some(BaseViewPair { left: *vi, right: *vj, theta });
            }
        }
    }
    let best = best.expect("tracks hold at least two observations");
    if best.theta <= theta_min.max(THETA_FLOOR) {
        return Err(LigtError::AllPairsDegenerate { track_id: track.track_id, max_theta: best.theta });
    }
    Ok(best)
}

fn point(track: &Track, view: usize) -> NormalizedImagePoint {
    track.point_in(view).expect("base view belongs to the track")
}

fn base_a_world(track: &Track, base: &BaseViewPair, rotations: &[RotationMatrix]) -> (Vector3<f64>, f64) {
    // With world rays w = R_ζᵀ X_ζ, u = R_ηᵀ X_η: R_ηᵀ a_{ζ,η} = (w × u) × u.
    let w = rotations[base.left].matrix().tr_mul(&point(track, base.left).ray());
    let u = rotations[base.right].matrix().tr_mul(&point(track, base.right).ray());
    let n = w.cross(&u);
    (n.cross(&u), n.norm_squared())
}

pub fn build_row_blocks(
    track: &Track,
    base: &BaseViewPair,
    rotations: &[RotationMatrix],
    config: &LigtConfig,
) -> Vec<LigtRowBlock> {
    let r_left = rotations[base.left].matrix();
    let x_left = point(track, base.left).ray();
    let (a_world, theta2) = base_a_world(track, base, rotations);
    let scale = if config.normalize_blocks { 1.0 / theta2 } else { 1.0 };

    track
        .observations()
        .iter()
        .filter(|(v, _)| *v != base.left)
        .map(|(view, x)| {
            let r_i = rotations[*view].matrix();
            let x_i = x.ray();
            let transferred = r_i * r_left.tr_mul(&x_left);
            let v = x_i.cross(&transferred);
            let mut block = LigtRowBlock {
                track_id: track.track_id,
                row_view: *view,
                left: base.left,
                right: base.right,
                b: Matrix3::zeros(),
                c: Matrix3::zeros(),
                d: Matrix3::zeros(),
                degenerate: v.norm() <= config.theta_min,
            };
            if !block.degenerate {
                block.b = v * a_world.transpose() * scale;
                let mut c = Matrix3::zeros();
                for k in 0..3 {
                    c.set_column(k, &(x_i.cross(&r_i.column(k).into_owned()) * (theta2 * scale)));
                }
                block.c = c;
                block.d = -(block.b + block.c);
            }
            block
        })
        .collect()
}

struct TrackRows {
    track_id: usize,
    outcome: Result<(BaseViewPair, SignProbe, Vec<LigtRowBlock>), LigtError>,
}

pub fn assemble_system(
    tracks: &[Track],
    rotations: &[RotationMatrix],
    reference_view: usize,
    config: &LigtConfig,
) -> Result<LigtSystem, LigtError> {
    let n_views = rotations.len();
    if reference_view >= n_views {
        return Err(LigtError::ViewOutOfRange { view: reference_view, n_views });
    }
    let mut order: Vec<&Track> = tracks.iter().collect();
    order.sort_by_key(|t| t.track_id);

    let per_track = |track: &&Track| -> TrackRows {
        let outcome = select_base_views(track, rotations, config.theta_min).map(|base| {
            let (a_world, _) = base_a_world(track, &base, rotations);
            let probe = SignProbe { track_id: track.track_id, left: base.left, right: base.right, a_world };
            (base, probe, build_row_blocks(track, &base, rotations, config))
        });
        TrackRows { track_id: track.track_id, outcome }
    };
    let rows: Vec<TrackRows> = if config.parallel {
        order.par_iter().map(per_track).collect()
    } else {
        order.iter().map(per_track).collect()
    };

    let mut system = LigtSystem {
        n_views,
        reference_view,
        blocks: Vec::new(),
        bases: Vec::new(),
        sign_probes: Vec::new(),
        excluded_tracks: Vec::new(),
        skipped_blocks: 0,
        rank_gap_threshold: config.rank_gap_threshold,
    };
    for tr in rows {
        match tr.outcome {
            Ok((base, probe, blocks)) => {
                system.bases.push((tr.track_id, base));
                system.sign_probes.push(probe);
                for b in blocks {
                    if b.degenerate {
                        system.skipped_blocks += 1;
                    } else {
                        system.blocks.push(b);
                    }
                }
            }
            Err(LigtError::AllPairsDegenerate { .. }) => system.excluded_tracks.push(tr.track_id),
            Err(e) => return Err(e),
        }
    }
    if system.bases.len() < 2 {
        return Err(LigtError::InsufficientParallax { usable: system.bases.len() });
    }
    Ok(system)
}

impl LigtSystem {
    pub fn n_rows(&self) -> usize {
        3 * self.blocks.len()
    }

    pub fn reduced_columns(&self) -> usize {
        3 * (self.n_views - 1)
    }

    /// First reduced column of `view`, `None` for the reference view.
    pub fn column_of(&self, view: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match view.cmp(&self.reference_view) {
            Less => Some(3 * view),
            Equal => None,
            Greater => Some(3 * (view - 1)),
        }
    }

    /// Dense reduced matrix, `3 · blocks` rows by `3(n - 1)` columns.
    pub fn reduced_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows(), self.reduced_columns());
        for (k, block) in self.blocks.iter().enumerate() {
            for (view, coeff) in block.terms() {
                if let Some(col) = self.column_of_term(view) {
                    let mut dst = m.fixed_view_mut::<3, 3>(3 * k, col);
                    dst += coeff;
                }
            }
        }
        m
    }

    fn column_of_term(&self, view: usize) -> Option<usize> {
        if view == usize::MAX {
            None
        } else {
            self.column_of(view)
        }
    }

    /// `LᵀL` of the reduced system, accumulated block by block.
    pub fn normal_matrix(&self) -> DMatrix<f64> {
        let n = self.reduced_columns();
        let mut normal = DMatrix::zeros(n, n);
        for block in &self.blocks {
            let terms = block.terms();
            for (va, ma) in &terms {
                let Some(ca) = self.column_of_term(*va) else { continue };
                for (vb, mb) in &terms {
                    let Some(cb) = self.column_of_term(*vb) else { continue };
                    let mut dst = normal.fixed_view_mut::<3, 3>(ca, cb);
                    dst += ma.tr_mul(mb);
                }
            }
        }
        normal
    }

    /// `‖L t‖` for a reduced translation vector.
    pub fn reduced_residual_norm(&self, reduced: &DVector<f64>) -> f64 {
        let centers = self.inflate(reduced);
        self.blocks.iter().map(|b| b.apply(&centers).norm_squared()).sum::<f64>().sqrt()
    }

    /// Re-inserts the zero reference center.
    pub fn inflate(&self, reduced: &DVector<f64>) -> Vec<Vector3<f64>> {
        (0..self.n_views)
            .map(|v| match self.column_of(v) {
                Some(c) => Vector3::new(reduced[c], reduced[c + 1], reduced[c + 2]),
                None => Vector3::zeros(),
            })
            .collect()
    }

    fn resolve_backend(&self, backend: NullSpaceBackend) -> NullSpaceBackend {
        match backend {
            NullSpaceBackend::Auto => {
                let cols = self.reduced_columns();
                if cols <= DENSE_MAX_COLUMNS && cols * self.n_rows() <= DENSE_MAX_ENTRIES {
                    NullSpaceBackend::Dense
                } else {
                    NullSpaceBackend::Normal
                }
            }
            other => other,
        }
    }

    fn smallest(&self, k: usize, backend: NullSpaceBackend) -> SmallestSingular {
        match self.resolve_backend(backend) {
            NullSpaceBackend::Normal => {
                linalg::normal_smallest(&self.normal_matrix(), self.n_rows(), k, |v| self.reduced_residual_norm(v))
            }
            _ => linalg::dense_smallest(&self.reduced_dense(), k),
        }
    }
}

/// The `k` smallest singular values of the reduced system, ascending.
pub fn singular_spectrum(system: &LigtSystem, k: usize, backend: NullSpaceBackend) -> Vec<f64> {
    system.smallest(k, backend).spectrum
}

/// Orients `centers` so that most base pairs have a non-negative left-base
/// depth numerator. Returns the votes after orientation.
pub fn fix_sign(system: &LigtSystem, centers: &mut [Vector3<f64>]) -> (usize, usize) {
    let (mut pos, mut neg) = (0, 0);
    for probe in &system.sign_probes {
        let v = probe.value(centers);
        if v > 0.0 {
            pos += 1;
        } else if v < 0.0 {
            neg += 1;
        }
    }
    if neg > pos {
        centers.iter_mut().for_each(|c| *c = -*c);
        (neg, pos)
    } else {
        (pos, neg)
    }
}

pub fn solve_translations(system: &LigtSystem, backend: NullSpaceBackend) -> Result<TranslationSolution, LigtError> {
    let used = system.resolve_backend(backend);
    let smallest = system.smallest(SPECTRUM_LEN, used);
    let gap = smallest.gap();
    if !(gap >= system.rank_gap_threshold) {
        return Err(LigtError::RankDeficient { gap, threshold: system.rank_gap_threshold });
    }
    let mut centers = system.inflate(&smallest.vector);
    let votes = fix_sign(system, &mut centers);
    let scale_norm = centers.iter().map(|c| c.norm_squared()).sum::<f64>().sqrt();
    centers.iter_mut().for_each(|c| *c /= scale_norm);
    Ok(TranslationSolution {
        translations: centers,
        sign_votes: votes,
        spectrum: smallest.spectrum,
        singular_gap: gap,
        sigma_max: smallest.sigma_max,
        scale_norm,
        backend: used,
    })
}
