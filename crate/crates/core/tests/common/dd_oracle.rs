//! Double-double residual model for finite-difference Jacobian checks.
//!
//! The residual is rebuilt from the relative-pose form, independently of the
//! world-ray code under test: with `R_{ζ,j} = R_j R_ζᵀ`,
//! `t_{ζ,j} = R_j (t_ζ - t_j)`, `a = ((R_{ζ,η} X_ζ) × X_η) × X_η` and
//! `θ = ‖X_η × R_{ζ,η} X_ζ‖`, the left-base depth is `d = aᵀ t_{ζ,η} / θ²`
//! and view `i` predicts `Y_i = d R_{ζ,i} X_ζ + t_{ζ,i}`.
//!
//! Roundoff in 106-bit arithmetic is far below the `h²` truncation error of
//! a central difference at `h = 1e-6`.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use poseonly::geometry::{CameraPose, Track};
use poseonly::ligt::BaseViewPair;
use poseonly::pa::PoseLayout;
use twofloat::TwoFloat;

type F = TwoFloat;
type V = [F; 3];
type M = [[F; 3]; 3];

fn f(x: f64) -> F {
    F::from(x)
}

/// `TwoFloat` division is only accurate to f64; one residual correction
/// restores double-double accuracy.
fn div(a: F, b: F) -> F {
    let q = a / b;
    q + (a - q * b) / b
}

fn zero() -> F {
    f(0.0)
}

fn add(a: &V, b: &V) -> V {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: &V, b: &V) -> V {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: &V, s: F) -> V {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: &V, b: &V) -> F {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &V, b: &V) -> V {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn mul(m: &M, v: &V) -> V {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

fn transpose(m: &M) -> M {
    let mut t = [[zero(); 3]; 3];
    for (r, row) in m.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            t[c][r] = *x;
        }
    }
    t
}

fn matmul(a: &M, b: &M) -> M {
    let bt = transpose(b);
    let mut out = [[zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = dot(&a[r], &bt[c]);
        }
    }
    out
}

/// Rodrigues for small angles by Taylor series; exact to double-double
/// precision for `|v| ≤ 1e-3`.
fn exp_small(v: &V) -> M {
    let t2 = dot(v, v);
    let a = f(1.0) - div(t2, f(6.0)) + div(t2 * t2, f(120.0)) - div(t2 * t2 * t2, f(5040.0));
    let b = f(0.5) - div(t2, f(24.0)) + div(t2 * t2, f(720.0)) - div(t2 * t2 * t2, f(40320.0));
    let k = [[zero(), -v[2], v[1]], [v[2], zero(), -v[0]], [-v[1], v[0], zero()]];
    let k2 = matmul(&k, &k);
    let mut out = [[zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let id = if r == c { f(1.0) } else { zero() };
            out[r][c] = id + a * k[r][c] + b * k2[r][c];
        }
    }
    out
}

#[derive(Clone)]
struct Pose {
    r: M,
    c: V,
}

fn lift(p: &CameraPose) -> Pose {
    let m = p.rotation.matrix();
    let mut r = [[zero(); 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = f(m[(i, j)]);
        }
    }
    Pose { r, c: [f(p.center.x), f(p.center.y), f(p.center.z)] }
}

/// Applies `±h` to parameter `k` with the same increment semantics as the
/// layout: camera-frame rotation and center steps, and a rotation of the
/// anchor's offset about its tangent axes.
fn perturb(poses: &[CameraPose], layout: &PoseLayout, k: usize, h: f64) -> Vec<Pose> {
    let mut out: Vec<Pose> = poses.iter().map(lift).collect();
    let (offset, axes) = layout.anchor_tangent(poses);
    for v in 0..poses.len() {
        if let Some(c) = layout.rotation_columns(v) {
            if (c..c + 3).contains(&k) {
                let mut d = [zero(); 3];
                d[k - c] = f(h);
                out[v].r = matmul(&exp_small(&d), &out[v].r);
            }
        }
        if let Some((c, width)) = layout.center_columns(v) {
            if (c..c + width).contains(&k) {
                if v == layout.anchor_view {
                    let e = axes[k - c];
                    let axis = [f(e.x * h), f(e.y * h), f(e.z * h)];
                    let off = [f(offset.x), f(offset.y), f(offset.z)];
                    let turned = mul(&exp_small(&axis), &off);
                    out[v].c = add(&out[layout.reference_view].c, &turned);
                } else {
                    let mut d = [zero(); 3];
                    d[k - c] = f(h);
                    out[v].c = add(&out[v].c, &mul(&transpose(&out[v].r), &d));
                }
            }
        }
    }
    out
}

fn ray(track: &Track, view: usize) -> V {
    let x = track.point_in(view).expect("view observes the track");
    [f(x.x), f(x.y), f(1.0)]
}

fn residuals(poses: &[Pose], tracks: &[Track], bases: &[BaseViewPair]) -> Vec<F> {
    let mut out = Vec::new();
    for (track, base) in tracks.iter().zip(bases) {
        let (pz, pe) = (&poses[base.left], &poses[base.right]);
        let xz = ray(track, base.left);
        let xe = ray(track, base.right);
        let r_ze = matmul(&pe.r, &transpose(&pz.r));
        let t_ze = mul(&pe.r, &sub(&pz.c, &pe.c));
        let rx = mul(&r_ze, &xz);
        let a = cross(&cross(&rx, &xe), &xe);
        let cr = cross(&xe, &rx);
        let theta2 = dot(&cr, &cr);
        let d = div(dot(&a, &t_ze), theta2);
        for (view, x) in track.observations() {
            if *view == base.left {
                continue;
            }
            let pi = &poses[*view];
            let r_zi = matmul(&pi.r, &transpose(&pz.r));
            let t_zi = mul(&pi.r, &sub(&pz.c, &pi.c));
            let y = add(&scale(&mul(&r_zi, &xz), d), &t_zi);
            out.push(div(y[0], y[2]) - f(x.x));
            out.push(div(y[1], y[2]) - f(x.y));
        }
    }
    out
}

/// Central-difference Jacobian with step `h`, computed in double-double.
pub fn fd_jacobian(
    poses: &[CameraPose],
    tracks: &[Track],
    bases: &[BaseViewPair],
    layout: &PoseLayout,
    h: f64,
) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..layout.n_params())
        .map(|k| {
            let plus = residuals(&perturb(poses, layout, k, h), tracks, bases);
            let minus = residuals(&perturb(poses, layout, k, -h), tracks, bases);
            let two_h = f(2.0 * h);
            DVector::from_iterator(plus.len(), plus.iter().zip(&minus).map(|(p, m)| f64::from(div(*p - *m, two_h))))
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// Residuals at the unperturbed poses, rounded to f64.
pub fn residuals_f64(poses: &[CameraPose], tracks: &[Track], bases: &[BaseViewPair]) -> Vec<f64> {
    let lifted: Vec<Pose> = poses.iter().map(lift).collect();
    residuals(&lifted, tracks, bases).into_iter().map(f64::from).collect()
}

/// Largest `|a - b| / max(|a|, |b|)` over entries with `max(|a|, |b|) > floor`.
pub fn max_relative_gap(analytic: &DMatrix<f64>, fd: &DMatrix<f64>, floor: f64) -> f64 {
    analytic
        .iter()
        .zip(fd.iter())
        .filter(|(a, b)| a.abs().max(b.abs()) > floor)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()))
        .fold(0.0, f64::max)
}
