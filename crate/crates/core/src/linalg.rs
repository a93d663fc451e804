//! Smallest singular vectors of tall homogeneous systems.
//!
//! Two routes are provided: a dense QR + SVD route that sees the matrix
//! itself, and a normal-matrix route that only needs `AᵀA` plus a way to
//! evaluate `‖A v‖`. The second one scales to systems with millions of rows.

use nalgebra::{DMatrix, DVector};

/// The smallest singular values of a matrix together with the right singular
/// vector of the smallest one.
#[derive(Debug, Clone)]
pub struct SmallestSingular {
    /// Unit right singular vector for `spectrum[0]`.
    pub vector: DVector<f64>,
    /// Smallest singular values, ascending.
    pub spectrum: Vec<f64>,
    pub sigma_max: f64,
    /// Singular values below this are numerically indistinguishable from zero.
    pub zero_floor: f64,
}

impl SmallestSingular {
    /// `σ_2 / σ_1`, with both values clamped to the numerical zero floor so
    /// that two roundoff-level values compare as equal.
    pub fn gap(&self) -> f64 {
        singular_gap(&self.spectrum, self.zero_floor)
    }
}

pub fn singular_gap(spectrum: &[f64], zero_floor: f64) -> f64 {
    match spectrum {
        [s1, s2, ..] => {
            let floor = zero_floor.max(f64::MIN_POSITIVE);
            s2.max(floor) / s1.max(floor)
        }
        _ => f64::INFINITY,
    }
}

fn zero_floor(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    f64::EPSILON * rows.max(cols) as f64 * sigma_max
}

/// Dense route: QR-reduce tall matrices to their square triangular factor,
/// then take a full SVD of that.
pub fn dense_smallest(a: &DMatrix<f64>, k: usize) -> SmallestSingular {
    let (rows, cols) = a.shape();
    assert!(cols > 0, "matrix has no columns");
    let square = if rows > cols {
        a.clone().qr().r()
    } else {
        let mut padded = DMatrix::zeros(cols, cols);
        padded.rows_mut(0, rows).copy_from(a);
        padded
    };
    let svd = square.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let sigma_max = svd.singular_values.max();
    let vector = v_t.row(order[0]).transpose();
    SmallestSingular {
        vector,
        spectrum: order.iter().take(k).map(|&i| svd.singular_values[i]).collect(),
        sigma_max,
        zero_floor: zero_floor(sigma_max, rows, cols),
    }
}

/// Normal-matrix route. `normal` is `AᵀA` and `apply_norm(v)` returns
/// `‖A v‖`, which gives the reported singular values without the squaring
/// loss of `sqrt(λ)`.
///
/// Eigenvectors come from shift-invert subspace iteration on `AᵀA + μI`.
pub fn normal_smallest(
    normal: &DMatrix<f64>,
    rows: usize,
    k: usize,
    apply_norm: impl Fn(&DVector<f64>) -> f64,
) -> SmallestSingular {
    let n = normal.nrows();
    assert!(n > 0 && normal.ncols() == n, "normal matrix must be square and non-empty");
    let k = k.clamp(1, n);
    let block = (k + 2).min(n);

    let sigma_max = power_sigma_max(normal);
    let trace = normal.trace().max(f64::MIN_POSITIVE);
    let mut shift = 1e-13 * trace / n as f64;
    let chol = loop {
        let shifted = normal + DMatrix::identity(n, n) * shift;
        if let Some(c) = shifted.cholesky() {
            break c;
        }
        shift *= 100.0;
    };

    let mut basis = DMatrix::from_fn(n, block, |i, j| {
        // Deterministic, well-spread start vectors.
        (((i + 1) * (2 * j + 3)) as f64 * 0.618_033_988_749_895).sin() + if i % block == j { 1.0 } else { 0.0 }
    });
    basis = basis.qr().q();
    let mut ritz = vec![f64::INFINITY; block];
    let mut vectors = basis.clone();
    for _ in 0..200 {
        let w = chol.solve(&basis);
        let q = w.qr().q();
        let projected = q.transpose() * normal * &q;
        let eig = projected.symmetric_eigen();
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let mut rotated = DMatrix::zeros(n, block);
        for (dst, &src) in order.iter().enumerate() {
            rotated.set_column(dst, &(&q * eig.eigenvectors.column(src)));
        }
        let new_ritz: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let settled = new_ritz
            .iter()
            .zip(&ritz)
            .take(k)
            .all(|(a, b)| (a - b).abs() <= 1e-15 * trace + 1e-12 * a.abs());
        ritz = new_ritz;
        vectors = rotated.clone();
        basis = rotated;
        if settled {
            break;
        }
    }

    let mut pairs: Vec<(f64, DVector<f64>)> = (0..k)
        .map(|j| {
            let v = vectors.column(j).normalize();
            (apply_norm(&v), v)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    SmallestSingular {
        vector: pairs[0].1.clone(),
        spectrum: pairs.iter().map(|p| p.0).collect(),
        sigma_max,
        zero_floor: zero_floor(sigma_max, rows, n),
    }
}

fn power_sigma_max(normal: &DMatrix<f64>) -> f64 {
    let n = normal.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.37).sin() * 0.5);
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = normal * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w / norm;
        if (next - lambda).abs() <= 1e-12 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}
