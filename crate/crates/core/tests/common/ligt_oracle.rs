//! Dense LiGT matrix assembled one column at a time from relative poses,
//! following the textbook block definitions directly.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use poseonly::geometry::{RotationMatrix, Track};

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `t_{i,j} = R_j (t_i - t_j)`.
fn rel_t(rot: &[RotationMatrix], t: &[Vector3<f64>], i: usize, j: usize) -> Vector3<f64> {
    rot[j].matrix() * (t[i] - t[j])
}

fn rel_r(rot: &[RotationMatrix], i: usize, j: usize) -> Matrix3<f64> {
    rot[j].matrix() * rot[i].matrix().transpose()
}

/// Brute-force base pair: the ordered pair maximizing `‖[X_j]_x R_{i,j} X_i‖`,
/// first maximum in `(i, j)` lexicographic order over `i < j`.
pub fn base_pair(track: &Track, rot: &[RotationMatrix]) -> (usize, usize, f64) {
    let obs = track.observations();
    let mut best = (0, 0, -1.0);
    for (a, (i, xi)) in obs.iter().enumerate() {
        for (j, xj) in &obs[a + 1..] {
            let theta = (skew(&xj.ray()) * rel_r(rot, *i, *j) * xi.ray()).norm();
            if theta > best.2 {
                best = (*i, *j, theta);
            }
        }
    }
    best
}

/// Stacked residual of every row block for translations `t`.
fn rows(tracks: &[Track], bases: &[(usize, usize)], rot: &[RotationMatrix], t: &[Vector3<f64>], theta_min: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for (track, &(z, e)) in tracks.iter().zip(bases) {
        let xz = track.point_in(z).unwrap().ray();
        let xe = track.point_in(e).unwrap().ray();
        let r_ze = rel_r(rot, z, e);
        let theta2 = (skew(&xe) * r_ze * xz).norm_squared();
        // a_{ζ,η}ᵀ = ([R_{ζ,η} X_ζ]_x X_η)ᵀ [X_η]_x
        let a_t = (skew(&(r_ze * xz)) * xe).transpose() * skew(&xe);
        for (i, xi) in track.observations() {
            if *i == z {
                continue;
            }
            let x = xi.ray();
            if (skew(&x) * rel_r(rot, z, *i) * xz).norm() <= theta_min {
                // B = C = D = 0 for a row ray parallel to the transferred left ray.
                out.extend_from_slice(&[0.0; 3]);
                continue;
            }
            // B t_η + C t_i + D t_ζ with D = -(B + C), written through relative translations.
            let lhs = skew(&x) * rel_r(rot, z, *i) * xz * (a_t * rel_t(rot, t, z, e))[0];
            let rhs = skew(&x) * rot[*i].matrix() * (t[*i] - t[z]) * theta2;
            let r = rhs - lhs;
            out.extend_from_slice(r.as_slice());
        }
    }
    out
}

/// `(track_id, row_view, ‖[X_i]_x R_{ζ,i} X_ζ‖)` for each block of rows.
pub fn block_labels(tracks: &[Track], rot: &[RotationMatrix]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for track in tracks {
        let (z, _, _) = base_pair(track, rot);
        let xz = track.point_in(z).unwrap().ray();
        for (i, xi) in track.observations() {
            if *i != z {
                out.push((track.track_id, *i, (skew(&xi.ray()) * rel_r(rot, z, *i) * xz).norm()));
            }
        }
    }
    out
}

/// `L` with 3n columns, built by applying the row model to unit vectors.
pub fn ligt_matrix(tracks: &[Track], rot: &[RotationMatrix], theta_min: f64) -> DMatrix<f64> {
    let n = rot.len();
    let bases: Vec<(usize, usize)> = tracks.iter().map(|t| base_pair(t, rot)).map(|(z, e, _)| (z, e)).collect();
    let cols: Vec<Vec<f64>> = (0..3 * n)
        .map(|k| {
            let mut t = vec![Vector3::zeros(); n];
            t[k / 3][k % 3] = 1.0;
            rows(tracks, &bases, rot, &t, theta_min)
        })
        .collect();
    DMatrix::from_fn(cols[0].len(), 3 * n, |r, c| cols[c][r])
}

/// Reference columns removed, then the full SVD. Returns the ascending
/// singular values and the inflated unit null vector (reference at zero).
pub fn oracle_null_space(
    tracks: &[Track],
    rot: &[RotationMatrix],
    reference: usize,
    theta_min: f64,
) -> (Vec<f64>, Vec<Vector3<f64>>) {
    let l = ligt_matrix(tracks, rot, theta_min);
    let keep: Vec<usize> = (0..l.ncols()).filter(|c| c / 3 != reference).collect();
    let reduced = l.select_columns(&keep);
    let svd = reduced.clone().svd(false, true);
    let v_t = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let v: DVector<f64> = v_t.row(order[0]).transpose();
    let mut centers = vec![Vector3::zeros(); rot.len()];
    for (k, &c) in keep.iter().enumerate() {
        centers[c / 3][c % 3] = v[k];
    }
    let norm = centers.iter().map(|c| c.norm_squared()).sum::<f64>().sqrt();
    centers.iter_mut().for_each(|c| *c /= norm);
    (order.iter().map(|&k| svd.singular_values[k]).collect(), centers)
}
