#![allow(dead_code)]

pub mod dd_oracle;
pub mod ligt_oracle;

use nalgebra::Vector3;
use poseonly::geometry::{CameraPose, RotationMatrix};
use poseonly::io::align_similarity;
use poseonly::ligt::{assemble_system, solve_translations, LigtConfig, NullSpaceBackend, TranslationSolution};
use poseonly::sim::SceneProblem;

pub fn ligt_solution(problem: &SceneProblem, reference: usize) -> TranslationSolution {
    let tracks = problem.tracks(2).unwrap();
    let system = assemble_system(&tracks, &problem.rotations, reference, &LigtConfig::default()).unwrap();
    solve_translations(&system, NullSpaceBackend::Auto).unwrap()
}

pub fn with_rotations(rotations: &[RotationMatrix], centers: &[Vector3<f64>]) -> Vec<CameraPose> {
    rotations.iter().zip(centers).map(|(r, t)| CameraPose::new(*r, *t)).collect()
}

/// Center RMS against ground truth after the best similarity.
pub fn aligned_rms(est: &[Vector3<f64>], problem: &SceneProblem) -> f64 {
    align_similarity(est, &problem.gt_centers()).unwrap().rms
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The same scene after `X -> s Q X + c`, with observations re-projected.
pub fn transform_scene(problem: &SceneProblem, s: f64, q: &RotationMatrix, c: &Vector3<f64>) -> SceneProblem {
    use poseonly::geometry::{project, Observation};
    let map = |x: &Vector3<f64>| q.matrix() * x * s + c;
    let gt_poses: Vec<CameraPose> = problem
        .gt_poses
        .iter()
        .map(|p| CameraPose::new(RotationMatrix::from_matrix_unchecked(p.rotation.matrix() * q.matrix().transpose()), map(&p.center)))
        .collect();
    let gt_points: Vec<Vector3<f64>> = problem.gt_points.iter().map(map).collect();
    let observations = problem
        .observations
        .iter()
        .map(|o| Observation { point: project(&gt_poses[o.view_id], &gt_points[o.track_id]).unwrap(), ..*o })
        .collect();
    let rotations = problem
        .rotations
        .iter()
        .map(|r| RotationMatrix::from_matrix_unchecked(r.matrix() * q.matrix().transpose()))
        .collect();
    SceneProblem { rotations, observations, gt_poses, gt_points, reference_view: problem.reference_view }
}
