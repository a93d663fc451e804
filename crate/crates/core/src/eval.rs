//! Metrics for an estimated set of poses against a problem file.
//!
//! Points are always rebuilt from the poses with the analytical
//! reconstruction, and the reprojection error comes from the same routine,
//! whichever solver produced the poses.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{CameraPose, GeometryError, RotationMatrix};
use crate::io::{align_similarity, AlignError, PosesFile, ProblemFile};
use crate::pa::reprojection_rms;
use crate::reconstruct::{reconstruct_all, RejectionSummary};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_views: usize,
    pub n_tracks: usize,
    /// Camera center RMS after similarity alignment, in ground-truth units.
    pub translation_rms_after_alignment: Option<f64>,
    pub alignment_scale: Option<f64>,
    pub alignment_degenerate: Option<bool>,
    pub rotation_error_deg_mean: Option<f64>,
    /// Absent when no observation has a point in front of its camera.
    pub reprojection_rms: Option<f64>,
    pub reprojection_observations: usize,
    pub cheirality_violations: usize,
    pub reconstructed_points: usize,
    pub rejected_points: RejectionSummary,
    pub singular_gap: Option<f64>,
    /// `(stage, runtime_ms)`, including this evaluation's reconstruction.
    pub runtime_ms: Vec<(String, f64)>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("problem has {problem} views but the pose file has {poses}")]
    ViewCountMismatch { problem: usize, poses: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

pub fn evaluate(
    problem: &ProblemFile,
    poses: &PosesFile,
    min_track_len: usize,
    theta_min: f64,
    parallel: bool,
) -> Result<EvalReport, EvalError> {
    let n = problem.n_views();
    if poses.poses.len() != n {
        return Err(EvalError::ViewCountMismatch { problem: n, poses: poses.poses.len() });
    }
    let tracks = crate::geometry::tracks_from_observations(&problem.observations, min_track_len)?;

    let start = Instant::now();
    let rec = reconstruct_all(&tracks, &poses.poses, theta_min, parallel);
    let reconstruct_ms = start.elapsed().as_secs_f64() * 1e3;
    let points: Vec<(usize, Vector3<f64>)> = rec.points.iter().map(|p| (p.track_id, p.position_w)).collect();
    let stats = reprojection_rms(&poses.poses, &points, &tracks);

    let mut report = EvalReport {
        n_views: n,
        n_tracks: tracks.len(),
        translation_rms_after_alignment: None,
        alignment_scale: None,
        alignment_degenerate: None,
        rotation_error_deg_mean: None,
        reprojection_rms: (stats.observations > 0).then_some(stats.rms),
        reprojection_observations: stats.observations,
        cheirality_violations: stats.cheirality_violations,
        reconstructed_points: rec.points.len(),
        rejected_points: rec.rejected,
        singular_gap: poses.singular_gap,
        runtime_ms: poses.runtimes.clone(),
    };
    report.runtime_ms.push(("eval_reconstruct".into(), reconstruct_ms));

    if let Some(gt) = problem.gt_camera_poses() {
        let est: Vec<Vector3<f64>> = poses.poses.iter().map(|p| p.center).collect();
        let truth: Vec<Vector3<f64>> = gt.iter().map(|p| p.center).collect();
        let sim = align_similarity(&est, &truth)?;
        report.translation_rms_after_alignment = Some(sim.rms);
        report.alignment_scale = Some(sim.scale);
        report.alignment_degenerate = Some(sim.degenerate);
        report.rotation_error_deg_mean = Some(mean_rotation_error_deg(&poses.poses, &gt));
    }
    Ok(report)
}

/// Mean angle between `R_est Qᵀ` and `R_gt`, where `Q` is the global
/// rotation minimizing `Σ ‖R_est Qᵀ - R_gt‖²_F`. Rotations are aligned on
/// their own because collinear centers leave the similarity's rotation free.
fn mean_rotation_error_deg(est: &[CameraPose], gt: &[CameraPose]) -> f64 {
    let m: Matrix3<f64> = est.iter().zip(gt).map(|(e, g)| g.rotation.matrix().transpose() * e.rotation.matrix()).sum();
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        let smallest = svd.singular_values.imin();
        d[(smallest, smallest)] = -1.0;
    }
    let q_t = (u * d * v_t).transpose();
    let sum: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| RotationMatrix::from_matrix_unchecked(e.rotation.matrix() * q_t).angle_to(&g.rotation).to_degrees())
        .sum();
    sum / est.len() as f64
}

impl EvalReport {
    fn rows(&self, with_runtime: bool) -> Vec<(String, String, String)> {
        // (key, machine value, human value)
        let mut rows = Vec::new();
        let mut f = |key: &str, v: Option<f64>| {
            if let Some(v) = v {
                rows.push((key.to_string(), format!("{v:?}"), format!("{v:.6e}")));
            }
        };
        f("translation_rms_after_alignment", self.translation_rms_after_alignment);
        f("alignment_scale", self.alignment_scale);
        f("rotation_error_deg_mean", self.rotation_error_deg_mean);
        f("reprojection_rms", self.reprojection_rms);
        f("singular_gap", self.singular_gap);
        let mut u = |key: &str, v: usize| rows.push((key.to_string(), v.to_string(), v.to_string()));
        u("n_views", self.n_views);
        u("n_tracks", self.n_tracks);
        u("reconstructed_points", self.reconstructed_points);
        u("rejected_points", self.rejected_points.total());
        u("rejected_all_pairs_degenerate", self.rejected_points.all_pairs_degenerate);
        u("rejected_negative_depth", self.rejected_points.negative_depth);
        u("reprojection_observations", self.reprojection_observations);
        u("cheirality_violations", self.cheirality_violations);
        if let Some(d) = self.alignment_degenerate {
            rows.push(("alignment_degenerate".into(), d.to_string(), d.to_string()));
        }
        if with_runtime {
            for (stage, ms) in &self.runtime_ms {
                rows.push((format!("runtime_ms.{stage}"), format!("{ms:?}"), format!("{ms:.3}")));
            }
        }
        rows
    }

    /// Flat `key=value` lines with round-trip float precision.
    pub fn to_key_values(&self, with_runtime: bool) -> String {
        self.rows(with_runtime).into_iter().fold(String::new(), |mut s, (k, v, _)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }

    pub fn to_table(&self, with_runtime: bool) -> String {
        let rows = self.rows(with_runtime);
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, _, human) in rows {
            let _ = writeln!(s, "{k:<width$}  {human}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene_s1;

    #[test]
    fn ground_truth_poses_score_zero() {
        let s = scene_s1();
        let problem = ProblemFile::from_scene(&s);
        let r = evaluate(&problem, &PosesFile::new(s.gt_poses.clone()), 2, 0.0, false).unwrap();
        assert!(r.translation_rms_after_alignment.unwrap() < 1e-15);
        assert!(r.rotation_error_deg_mean.unwrap() < 1e-12);
        assert!(r.reprojection_rms.unwrap() < 1e-15);
        assert_eq!(r.reconstructed_points, 2);
        assert_eq!(r.alignment_degenerate, Some(true));

        let kv = r.to_key_values(false);
        assert!(kv.lines().all(|l| l.split_once('=').is_some()));
        assert!(!kv.contains("runtime_ms"));
        assert!(r.to_key_values(true).contains("runtime_ms.eval_reconstruct="));
        assert_eq!(r.to_table(false).lines().count(), kv.lines().count());
    }

    #[test]
    fn pose_count_must_match() {
        let s = scene_s1();
        let problem = ProblemFile::from_scene(&s);
        let short = PosesFile::new(s.gt_poses[..2].to_vec());
        assert!(matches!(evaluate(&problem, &short, 2, 0.0, false), Err(EvalError::ViewCountMismatch { .. })));
    }
}
