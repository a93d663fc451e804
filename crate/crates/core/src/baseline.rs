//! Cross-product global translation solver over relative directions.
//!
//! Each pair contributes `[d_ij]_x R_j (t_i - t_j) = 0`. Only directions
//! enter, so cameras moving along one line leave their spacing free: the
//! reduced system then has a null space of dimension above one.

use nalgebra::{DMatrix, Matrix3, Vector3};
use petgraph::unionfind::UnionFind;
use thiserror::Error;

use crate::geometry::{CameraPose, RotationMatrix, Track};
use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("the view graph has {components} connected components")]
    Disconnected { components: usize },
    #[error("null space is ambiguous: sigma_2 / sigma_1 = {gap:.3e} < {threshold}")]
    RankDeficient { gap: f64, threshold: f64, spectrum: Vec<f64> },
    #[error("view {view} is out of range for {n_views} views")]
    ViewOutOfRange { view: usize, n_views: usize },
    #[error("pair ({i}, {j}): direction is not a unit vector")]
    InvalidDirection { i: usize, j: usize },
}

/// Unit direction of `t_ij = R_j (t_i - t_j)`, the center of view i seen
/// from view j.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeDirection {
    pub i: usize,
    pub j: usize,
    pub dir: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct BaselineSolution {
    /// Unit-norm stacked centers with the reference at the origin.
    pub translations: Vec<Vector3<f64>>,
    /// Three smallest singular values of the reduced system, ascending.
    pub spectrum: Vec<f64>,
    pub singular_gap: f64,
}

const DIRECTION_TOL: f64 = 1e-12;
const SPECTRUM_LEN: usize = 3;

/// Directions for every pair of views that co-observe at least one track,
/// taken from known poses. Pairs with coincident centers are skipped.
pub fn directions_from_poses(poses: &[CameraPose], tracks: &[Track]) -> Vec<RelativeDirection> {
    let n = poses.len();
    let mut linked = vec![false; n * n];
    for t in tracks {
        let views: Vec<usize> = t.views().collect();
        for (a, &i) in views.iter().enumerate() {
            for &j in &views[a + 1..] {
                linked[i * n + j] = true;
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if !linked[i * n + j] {
                continue;
            }
            let t = poses[j].rotation.matrix() * (poses[i].center - poses[j].center);
            let norm = t.norm();
            if norm > 0.0 {
                out.push(RelativeDirection { i, j, dir: t / norm });
            }
        }
    }
    out
}

pub fn govindu_translations(
    directions: &[RelativeDirection],
    rotations: &[RotationMatrix],
    reference_view: usize,
    rank_gap_threshold: f64,
) -> Result<BaselineSolution, BaselineError> {
    let n = rotations.len();
    let check = |v: usize| if v < n { Ok(()) } else { Err(BaselineError::ViewOutOfRange { view: v, n_views: n }) };
    check(reference_view)?;
    let mut uf = UnionFind::<usize>::new(n);
    for d in directions {
        check(d.i)?;
        check(d.j)?;
        if !((d.dir.norm() - 1.0).abs() <= DIRECTION_TOL) {
            return Err(BaselineError::InvalidDirection { i: d.i, j: d.j });
        }
        uf.union(d.i, d.j);
    }
    let mut roots: Vec<usize> = uf.into_labeling();
    roots.sort_unstable();
    roots.dedup();
    if roots.len() != 1 {
        return Err(BaselineError::Disconnected { components: roots.len() });
    }

    let column = |v: usize| match v.cmp(&reference_view) {
        std::cmp::Ordering::Less => Some(3 * v),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(3 * (v - 1)),
    };
    let cols = 3 * (n - 1);
    let mut a = DMatrix::zeros(3 * directions.len(), cols);
    for (k, d) in directions.iter().enumerate() {
        let m: Matrix3<f64> = d.dir.cross_matrix() * rotations[d.j].matrix();
        if let Some(c) = column(d.i) {
            a.view_mut((3 * k, c), (3, 3)).copy_from(&m);
        }
        if let Some(c) = column(d.j) {
            a.view_mut((3 * k, c), (3, 3)).copy_from(&(-m));
        }
    }

    let smallest = linalg::dense_smallest(&a, SPECTRUM_LEN);
    let gap = smallest.gap();
    if !(gap >= rank_gap_threshold) {
        return Err(BaselineError::RankDeficient { gap, threshold: rank_gap_threshold, spectrum: smallest.spectrum });
    }
    let mut centers: Vec<Vector3<f64>> = (0..n)
        .map(|v| match column(v) {
            Some(c) => Vector3::new(smallest.vector[c], smallest.vector[c + 1], smallest.vector[c + 2]),
            None => Vector3::zeros(),
        })
        .collect();

    // Orient so that most pairs agree with their measured direction.
    let agree = directions
        .iter()
        .map(|d| d.dir.dot(&(rotations[d.j].matrix() * (centers[d.i] - centers[d.j]))))
        .fold(0i64, |acc, s| acc + (s > 0.0) as i64 - (s < 0.0) as i64);
    let norm = centers.iter().map(|c| c.norm_squared()).sum::<f64>().sqrt();
    let scale = if agree < 0 { -1.0 / norm } else { 1.0 / norm };
    centers.iter_mut().for_each(|c| *c *= scale);
    Ok(BaselineSolution { translations: centers, spectrum: smallest.spectrum, singular_gap: gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ligt::DEFAULT_RANK_GAP_THRESHOLD;
    use crate::sim::{generate_scene, scene_s1, MotionMode, SceneConfig};

    fn solve(poses: &[CameraPose], tracks: &[Track]) -> Result<BaselineSolution, BaselineError> {
        let rots: Vec<RotationMatrix> = poses.iter().map(|p| p.rotation).collect();
        govindu_translations(&directions_from_poses(poses, tracks), &rots, 0, DEFAULT_RANK_GAP_THRESHOLD)
    }

    #[test]
    fn generic_scene_recovers_centers_up_to_scale() {
        let s = generate_scene(&SceneConfig::new(MotionMode::GenericRing, 8, 30, 4)).unwrap();
        let sol = solve(&s.gt_poses, &s.tracks(2).unwrap()).unwrap();
        let gt = s.gt_centers();
        let shifted: Vec<_> = gt.iter().map(|c| c - gt[0]).collect();
        let norm = shifted.iter().map(|c| c.norm_squared()).sum::<f64>().sqrt();
        for (est, g) in sol.translations.iter().zip(&shifted) {
            assert!((est - g / norm).norm() < 1e-10);
        }
        assert!(sol.singular_gap > 1e6);
    }

    #[test]
    fn collinear_is_rank_deficient() {
        let s = scene_s1();
        match solve(&s.gt_poses, &s.tracks(2).unwrap()) {
            Err(BaselineError::RankDeficient { gap, spectrum, .. }) => {
                assert!(gap < 100.0);
                assert_eq!(spectrum.len(), 3);
            }
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn two_views_give_the_direction() {
        let rots = vec![RotationMatrix::identity(), RotationMatrix::from_scaled_axis(Vector3::new(0.1, -0.2, 0.3))];
        let c1 = Vector3::new(1.0, 2.0, -0.5);
        let dir = rots[1].matrix() * (Vector3::zeros() - c1);
        let d = [RelativeDirection { i: 0, j: 1, dir: dir.normalize() }];
        let sol = govindu_translations(&d, &rots, 0, 10.0).unwrap();
        assert!((sol.translations[1] - c1.normalize()).norm() < 1e-12);
        assert_eq!(sol.translations[0], Vector3::zeros());
    }

    #[test]
    fn disconnected_and_bad_input() {
        let rots = vec![RotationMatrix::identity(); 4];
        let d = [
            RelativeDirection { i: 0, j: 1, dir: Vector3::x() },
            RelativeDirection { i: 2, j: 3, dir: Vector3::y() },
        ];
        assert_eq!(govindu_translations(&d, &rots, 0, 10.0).unwrap_err(), BaselineError::Disconnected { components: 2 });
        let bad = [RelativeDirection { i: 0, j: 1, dir: Vector3::new(0.9, 0.0, 0.0) }];
        assert!(matches!(govindu_translations(&bad, &rots[..2], 0, 10.0), Err(BaselineError::InvalidDirection { .. })));
        let far = [RelativeDirection { i: 0, j: 7, dir: Vector3::x() }];
        assert!(matches!(govindu_translations(&far, &rots, 0, 10.0), Err(BaselineError::ViewOutOfRange { view: 7, .. })));
    }
}
