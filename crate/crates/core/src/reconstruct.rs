//! Analytical scene reconstruction from known poses.
//!
//! The depth of a feature in its left-base view ζ is the θ-weighted mean of
//! the left depths of every pair `(ζ, i)`; the point then follows from
//! back-projecting the ζ ray. A linear triangulation is kept alongside as an
//! independent check.

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{compute_pair_geometry, relative_pose, CameraPose, RotationMatrix, Track, THETA_FLOOR};
use crate::ligt::{select_base_views, BaseViewPair, LigtError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructError {
    #[error("track {track_id}: every pair with the left-base view is degenerate")]
    AllPairsDegenerate { track_id: usize },
    #[error("track {track_id}: fused depth {depth:e} is not positive")]
    NegativeDepth { track_id: usize, depth: f64 },
    #[error("track {track_id}: triangulation system is rank deficient")]
    Degenerate { track_id: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructedPoint {
    pub track_id: usize,
    pub position_w: Vector3<f64>,
    /// Depth in the left-base view.
    pub fused_depth: f64,
    /// `Σ θ_{ζ,i}` over contributing pairs.
    pub weight_sum: f64,
    pub contributing_views: usize,
    pub left_view: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RejectionSummary {
    pub all_pairs_degenerate: usize,
    pub negative_depth: usize,
}

impl RejectionSummary {
    pub fn total(&self) -> usize {
        self.all_pairs_degenerate + self.negative_depth
    }
}

#[derive(Debug, Clone, Default)]
pub struct Reconstruction {
    /// Accepted points ordered by track id.
    pub points: Vec<ReconstructedPoint>,
    pub rejected: RejectionSummary,
}

/// Weighted left-base depth and the weight sum `Σ θ_{ζ,i}`.
pub fn weighted_depth(
    track: &Track,
    base: &BaseViewPair,
    poses: &[CameraPose],
    theta_min: f64,
) -> Result<(f64, f64, usize), ReconstructError> {
    let left = &poses[base.left];
    let x_left = track.point_in(base.left).expect("left base view belongs to the track");
    let floor = theta_min.max(THETA_FLOOR);
    let (mut weighted, mut weight_sum, mut count) = (0.0, 0.0, 0);
    for (view, x) in track.observations() {
        if *view == base.left {
            continue;
        }
        let pg = compute_pair_geometry(&relative_pose(left, &poses[*view]), &x_left, x);
        if pg.theta <= floor {
            continue;
        }
        let depth = pg.a_vec.dot(&pg.rel_translation) / (pg.theta * pg.theta);
        weighted += pg.theta * depth;
        weight_sum += pg.theta;
        count += 1;
    }
    if count == 0 || weight_sum <= floor {
        return Err(ReconstructError::AllPairsDegenerate { track_id: track.track_id });
    }
    Ok((weighted / weight_sum, weight_sum, count))
}

pub fn reconstruct_point(
    track: &Track,
    base: &BaseViewPair,
    poses: &[CameraPose],
    theta_min: f64,
) -> Result<ReconstructedPoint, ReconstructError> {
    let (depth, weight_sum, contributing_views) = weighted_depth(track, base, poses, theta_min)?;
    if !(depth > 0.0) {
        return Err(ReconstructError::NegativeDepth { track_id: track.track_id, depth });
    }
    let left = &poses[base.left];
    let ray = track.point_in(base.left).expect("left base view belongs to the track").ray();
    Ok(ReconstructedPoint {
        track_id: track.track_id,
        position_w: left.rotation.matrix().tr_mul(&ray) * depth + left.center,
        fused_depth: depth,
        weight_sum,
        contributing_views,
        left_view: base.left,
    })
}

/// Reconstructs every track, selecting base views from the pose rotations.
pub fn reconstruct_all(tracks: &[Track], poses: &[CameraPose], theta_min: f64, parallel: bool) -> Reconstruction {
    let rotations: Vec<RotationMatrix> = poses.iter().map(|p| p.rotation).collect();
    let one = |track: &Track| -> Result<ReconstructedPoint, ReconstructError> {
        let base = select_base_views(track, &rotations, theta_min).map_err(|e| match e {
            LigtError::AllPairsDegenerate { .. } => ReconstructError::AllPairsDegenerate { track_id: track.track_id },
            other => panic!("track {} references a missing view: {other}", track.track_id),
        })?;
        reconstruct_point(track, &base, poses, theta_min)
    };
    let mut results: Vec<(usize, Result<ReconstructedPoint, ReconstructError>)> = if parallel {
        tracks.par_iter().map(|t| (t.track_id, one(t))).collect()
    } else {
        tracks.iter().map(|t| (t.track_id, one(t))).collect()
    };
    results.sort_by_key(|(id, _)| *id);

    let mut out = Reconstruction::default();
    for (_, r) in results {
        match r {
            Ok(p) => out.points.push(p),
            Err(ReconstructError::NegativeDepth { .. }) => out.rejected.negative_depth += 1,
            Err(_) => out.rejected.all_pairs_degenerate += 1,
        }
    }
    out
}

/// Linear least-squares triangulation from `[X_i]_x R_i (X - t_i) = 0`.
pub fn triangulate_dlt(track: &Track, poses: &[CameraPose]) -> Result<Vector3<f64>, ReconstructError> {
    let n = track.len();
    let mut a = DMatrix::zeros(3 * n, 3);
    let mut b = DVector::zeros(3 * n);
    for (k, (view, x)) in track.observations().iter().enumerate() {
        let pose = &poses[*view];
        let ray = x.ray();
        let r = pose.rotation.matrix();
        for col in 0..3 {
            let c = ray.cross(&r.column(col).into_owned());
            a.fixed_view_mut::<3, 1>(3 * k, col).copy_from(&c);
        }
        let rhs = ray.cross(&(r * pose.center));
        b.fixed_rows_mut::<3>(3 * k).copy_from(&rhs);
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax) {
        return Err(ReconstructError::Degenerate { track_id: track.track_id });
    }
    let x = svd.solve(&b, 0.0).map_err(|_| ReconstructError::Degenerate { track_id: track.track_id })?;
    Ok(Vector3::new(x[0], x[1], x[2]))
}
