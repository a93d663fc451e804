mod common;

use common::{aligned_rms, ligt_solution, transform_scene, with_rotations};
use nalgebra::Vector3;
use poseonly::baseline::{directions_from_poses, govindu_translations};
use poseonly::geometry::{project, CameraPose, NormalizedImagePoint, RotationMatrix};
use poseonly::io::{align_similarity, format_problem, parse_problem, ProblemFile};
use poseonly::ligt::{assemble_system, fix_sign, LigtConfig, DEFAULT_RANK_GAP_THRESHOLD};
use poseonly::reconstruct::{reconstruct_all, triangulate_dlt};
use poseonly::sim::{generate_scene, MotionMode, SceneConfig, SceneProblem};
use proptest::prelude::*;

const MODES: [MotionMode; 4] =
    [MotionMode::GenericRing, MotionMode::Collinear, MotionMode::LocalPureRotation, MotionMode::LoopClosure];

fn exact_scene(mode: MotionMode, seed: u64) -> SceneProblem {
    let (n, m) = if mode == MotionMode::LoopClosure { (12, 40) } else { (6, 20) };
    generate_scene(&SceneConfig::new(mode, n, m, seed)).unwrap()
}

fn mode() -> impl Strategy<Value = MotionMode> {
    (0usize..4).prop_map(|k| MODES[k])
}

fn rotation() -> impl Strategy<Value = RotationMatrix> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| {
        let v = Vector3::new(a, b, c);
        RotationMatrix::from_scaled_axis(if v.norm() > 3.1 { v * (3.1 / v.norm()) } else { v })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_mode_is_solvable_without_noise(mode in mode(), seed in 0u64..10_000) {
        let p = exact_scene(mode, seed);
        let sol = ligt_solution(&p, p.reference_view);
        prop_assert!(aligned_rms(&sol.translations, &p) < 1e-8);
        let poses = with_rotations(&p.rotations, &sol.translations);
        let rec = reconstruct_all(&p.tracks(2).unwrap(), &poses, 0.0, true);
        prop_assert_eq!(rec.rejected.total(), 0);
    }

    #[test]
    fn scenes_are_reproducible(mode in mode(), seed in 0u64..10_000) {
        let (n, m) = if mode == MotionMode::LoopClosure { (12, 36) } else { (5, 15) };
        let mut cfg = SceneConfig::new(mode, n, m, seed);
        cfg.obs_noise_sigma = 1e-3;
        cfg.rotation_noise_deg = 0.3;
        prop_assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
    }

    #[test]
    fn reference_change_is_a_gauge_change(mode in mode(), seed in 0u64..10_000, reference in 0usize..5) {
        let p = exact_scene(mode, seed);
        let a = ligt_solution(&p, p.reference_view);
        let b = ligt_solution(&p, reference);
        prop_assert_eq!(b.translations[reference], Vector3::zeros());
        prop_assert!(align_similarity(&b.translations, &a.translations).unwrap().rms < 1e-10);
    }

    #[test]
    fn similarity_of_the_scene_is_invisible(
        mode in mode(),
        seed in 0u64..10_000,
        log_scale in -3.0..3.0f64,
        q in rotation(),
        (cx, cy, cz) in (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64),
    ) {
        let p = exact_scene(mode, seed);
        let moved = transform_scene(&p, log_scale.exp(), &q, &Vector3::new(cx, cy, cz));
        let sol = ligt_solution(&moved, moved.reference_view);
        let extent = moved.gt_centers().iter().map(|c| (c - moved.gt_centers()[0]).norm()).fold(0.0, f64::max);
        prop_assert!(aligned_rms(&sol.translations, &moved) < 1e-8 * extent);
        // And against the untouched scene.
        prop_assert!(aligned_rms(&sol.translations, &p) < 1e-8 * (extent / log_scale.exp()));
    }

    #[test]
    fn sign_vote_recovers_positive_depths(mode in mode(), seed in 0u64..10_000, negate in any::<bool>()) {
        let p = exact_scene(mode, seed);
        let tracks = p.tracks(2).unwrap();
        let system = assemble_system(&tracks, &p.rotations, 0, &LigtConfig::default()).unwrap();
        let truth: Vec<Vector3<f64>> = p.gt_centers().iter().map(|c| c - p.gt_centers()[0]).collect();
        let mut candidate: Vec<Vector3<f64>> = truth.iter().map(|c| if negate { -c } else { *c }).collect();
        let (pos, neg) = fix_sign(&system, &mut candidate);
        prop_assert_eq!(neg, 0);
        prop_assert_eq!(pos, system.sign_probes.len());
        prop_assert_eq!(candidate, truth);
    }

    #[test]
    fn baseline_agrees_with_ligt_on_generic_scenes(seed in 0u64..10_000) {
        let p = generate_scene(&SceneConfig::new(MotionMode::GenericRing, 8, 30, seed)).unwrap();
        let tracks = p.tracks(2).unwrap();
        let dirs = directions_from_poses(&p.gt_poses, &tracks);
        let base = govindu_translations(&dirs, &p.rotations, 0, DEFAULT_RANK_GAP_THRESHOLD).unwrap();
        let ligt = ligt_solution(&p, 0);
        prop_assert!(align_similarity(&base.translations, &ligt.translations).unwrap().rms < 1e-7);
        prop_assert!(aligned_rms(&base.translations, &p) < 1e-8);
    }

    #[test]
    fn analytic_points_match_triangulation(mode in mode(), seed in 0u64..10_000) {
        let p = exact_scene(mode, seed);
        let tracks = p.tracks(2).unwrap();
        let rec = reconstruct_all(&tracks, &p.gt_poses, 0.0, false);
        for (pt, t) in rec.points.iter().zip(&tracks) {
            let dlt = triangulate_dlt(t, &p.gt_poses).unwrap();
            prop_assert!((pt.position_w - dlt).norm() <= 1e-9 * dlt.norm().max(1.0));
            prop_assert!((pt.position_w - p.gt_points[t.track_id]).norm() <= 1e-9 * dlt.norm().max(1.0));
        }
    }

    #[test]
    fn problem_files_round_trip(
        seed in 0u64..10_000,
        xs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 6),
        ref_view in 0usize..3,
    ) {
        let mut problem = ProblemFile::from_scene(&generate_scene(&SceneConfig::new(MotionMode::GenericRing, 3, 2, seed)).unwrap());
        problem.reference_view = ref_view;
        for (o, (x, y)) in problem.observations.iter_mut().zip(&xs) {
            o.point = NormalizedImagePoint::new(*x / 7.0, *y * 1e-9);
        }
        let text = format_problem(&problem);
        let back = parse_problem(&text).unwrap();
        prop_assert_eq!(&back, &problem);
        prop_assert_eq!(format_problem(&back), text);
    }

    #[test]
    fn alignment_undoes_a_random_similarity(
        pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 3..30),
        log_scale in -4.0..4.0f64,
        q in rotation(),
        (cx, cy, cz) in (-100.0..100.0f64, -100.0..100.0f64, -100.0..100.0f64),
    ) {
        let est: Vec<Vector3<f64>> = pts.iter().map(|(x, y, z)| Vector3::new(*x, *y, *z)).collect();
        let c = Vector3::new(cx, cy, cz);
        let gt: Vec<Vector3<f64>> = est.iter().map(|e| q.matrix() * e * log_scale.exp() + c).collect();
        let sim = align_similarity(&est, &gt).unwrap();
        prop_assert!(sim.rms < 1e-10 * (1.0 + c.norm()) * log_scale.exp().max(1.0));
        if !sim.degenerate {
            prop_assert!((sim.scale / log_scale.exp() - 1.0).abs() < 1e-10);
            prop_assert!(sim.rotation.angle_to(&q) < 1e-8);
        }
    }
}

#[test]
fn hand_negated_null_vectors_on_s1() {
    let p = poseonly::sim::scene_s1();
    let tracks = p.tracks(2).unwrap();
    let system = assemble_system(&tracks, &p.rotations, 0, &LigtConfig::default()).unwrap();
    let sol = ligt_solution(&p, 0);
    let mut flipped: Vec<Vector3<f64>> = sol.translations.iter().map(|c| -c).collect();
    fix_sign(&system, &mut flipped);
    assert_eq!(flipped, sol.translations);
    // Every reconstructed point lies in front of every camera.
    let poses: Vec<CameraPose> = with_rotations(&p.rotations, &sol.translations);
    let rec = reconstruct_all(&tracks, &poses, 0.0, false);
    for pt in &rec.points {
        for pose in &poses {
            assert!(project(pose, &pt.position_w).is_ok());
        }
    }
}
