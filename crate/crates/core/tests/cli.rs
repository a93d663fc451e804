use std::path::Path;
use std::process::Command;

use nalgebra::Vector3;
use poseonly::cli::{run_cli_with, ThreadMode};
use poseonly::geometry::{project, CameraPose, Observation, RotationMatrix};
use poseonly::io::{read_poses, write_problem, ProblemFile};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_cli_with(std::iter::once("poseonly").chain(args.iter().copied()), ThreadMode::Deterministic, &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn kv(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from\n{text}"))
        .parse()
        .unwrap()
}

#[test]
fn collinear_three_view_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (s1, poses) = (p(dir.path(), "s1.po"), p(dir.path(), "s1.poses"));
    let sim = run(&["simulate", "--motion", "collinear", "--views", "3", "--points", "2", "--sigma", "0", "--seed", "42", "-o", &s1]);
    assert_eq!(sim.code, 0, "{}", sim.err);
    assert_eq!(run(&["solve", &s1, "-o", &poses]).code, 0);
    let eval = run(&["eval", &s1, &poses, "--format", "kv"]);
    assert_eq!(eval.code, 0, "{}", eval.err);
    assert!(kv(&eval.out, "translation_rms_after_alignment") < 1e-8);
    assert!(kv(&eval.out, "singular_gap") > 1e6);

    let base = run(&["baseline", &s1]);
    assert_eq!(base.code, 2);
    assert!(base.err.contains("RankDeficient"), "{}", base.err);

    let ply = p(dir.path(), "s1.ply");
    assert_eq!(run(&["reconstruct", &s1, &poses, "-o", &ply]).code, 0);
    let text = std::fs::read_to_string(&ply).unwrap();
    assert!(text.contains("element vertex 5\n"));
    let body: Vec<&str> = text.lines().skip_while(|l| *l != "end_header").skip(1).collect();
    assert_eq!(body.len(), 5);
    assert_eq!(body.iter().filter(|l| l.ends_with(" 255 0 0")).count(), 3);
}

#[test]
fn stages_compose_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = |n: &str| p(dir.path(), n);
    let sim = run(&[
        "simulate", "--motion", "generic-ring", "--views", "8", "--points", "80", "--sigma", "1e-3", "--rot-noise", "0.05",
        "--seed", "9", "-o", &f("g.po"),
    ]);
    assert_eq!(sim.code, 0, "{}", sim.err);
    assert_eq!(run(&["solve", &f("g.po"), "-o", &f("ligt.poses")]).code, 0);
    let pa = run(&["pa", &f("g.po"), &f("ligt.poses"), "-o", &f("pa.poses")]);
    assert_eq!(pa.code, 0, "{}", pa.err);
    assert!(pa.err.contains("termination"));
    assert_eq!(run(&["reconstruct", &f("g.po"), &f("pa.poses"), "-o", &f("g.ply")]).code, 0);

    let before = kv(&run(&["eval", &f("g.po"), &f("ligt.poses"), "--format", "kv"]).out, "reprojection_rms");
    let after_eval = run(&["eval", &f("g.po"), &f("pa.poses"), "--format", "kv"]);
    let after = kv(&after_eval.out, "reprojection_rms");
    assert!(after < before, "{after} !< {before}");
    // The gap measured by the solve stage is carried through PA.
    assert!(kv(&after_eval.out, "singular_gap") > 10.0);
    assert!(!after_eval.out.contains("runtime_ms"));

    // Stdout output equals the file output.
    let to_stdout = run(&["solve", &f("g.po")]);
    assert_eq!(to_stdout.out, std::fs::read_to_string(f("ligt.poses")).unwrap());
    assert_eq!(read_poses(Path::new(&f("pa.poses"))).unwrap().poses.len(), 8);

    let both = run(&["eval", &f("g.po"), &f("pa.poses")]);
    assert!(both.out.contains("reprojection_rms  ") && both.out.contains("reprojection_rms="));
}

#[test]
fn usage_and_input_errors_exit_one() {
    let unknown = run(&["solve", "--no-such-flag", "x.po"]);
    assert_eq!(unknown.code, 1);
    assert!(unknown.err.contains("Usage:"));
    assert_eq!(run(&["frobnicate"]).code, 1);

    let dir = tempfile::tempdir().unwrap();
    let po = p(dir.path(), "t.po");
    std::fs::write(&po, "POSEONLY 1\n3 2 6\nV 0 1 0 0 0\nV 1 1 0 0\n").unwrap();
    let r = run(&["solve", &po]);
    assert_eq!(r.code, 1);
    assert!(r.err.starts_with("error: ParseError: line 4"), "{}", r.err);

    std::fs::write(&po, "POSEONLY 7\n").unwrap();
    assert!(run(&["solve", &po]).err.contains("VersionUnsupported"));

    let invalid = run(&["simulate", "--views", "1", "-o", &p(dir.path(), "x.po")]);
    assert_eq!(invalid.code, 1);
    assert!(invalid.err.contains("ConfigInvalid"));
}

#[test]
fn pure_rotation_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let po = p(dir.path(), "rot.po");
    let rotations: Vec<RotationMatrix> =
        (0..3).map(|k| RotationMatrix::from_scaled_axis(Vector3::new(0.0, 0.05 * k as f64, 0.01))).collect();
    let points = [Vector3::new(0.1, 0.2, 4.0), Vector3::new(-0.3, 0.1, 5.0), Vector3::new(0.2, -0.2, 6.0)];
    let mut observations = Vec::new();
    for (track_id, x) in points.iter().enumerate() {
        for (view_id, r) in rotations.iter().enumerate() {
            let point = project(&CameraPose::new(*r, Vector3::zeros()), x).unwrap();
            observations.push(Observation { track_id, view_id, point });
        }
    }
    let problem = ProblemFile {
        rotations: rotations.iter().map(|r| r.to_quaternion()).collect(),
        gt_poses: None,
        gt_points: None,
        n_tracks: points.len(),
        observations,
        reference_view: 0,
    };
    write_problem(Path::new(&po), &problem).unwrap();
    let r = run(&["solve", &po]);
    assert_eq!(r.code, 2);
    assert!(r.err.starts_with("error: InsufficientParallax"), "{}", r.err);
    let b = run(&["baseline", &po]);
    assert_eq!(b.code, 1);
    assert!(b.err.contains("MissingGroundTruth"));
}

#[test]
fn binary_is_deterministic_in_single_task_mode() {
    let dir = tempfile::tempdir().unwrap();
    let f = |n: &str| p(dir.path(), n);
    let bin = env!("CARGO_BIN_EXE_poseonly");
    let sh = |args: &[&str]| {
        let o = Command::new(bin).args(args).env("POSEONLY_THREADS", "0").output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let mut evals = Vec::new();
    for _ in 0..2 {
        sh(&["simulate", "--motion", "loop-closure", "--views", "12", "--points", "60", "--sigma", "1e-3", "--seed", "3", "-o", &f("l.po")]);
        sh(&["solve", &f("l.po"), "-o", &f("l.poses")]);
        sh(&["pa", &f("l.po"), &f("l.poses"), "-o", &f("l.pa")]);
        evals.push(sh(&["eval", &f("l.po"), &f("l.pa")]));
    }
    assert!(!evals[0].is_empty());
    assert_eq!(evals[0], evals[1]);

    let bad = Command::new(bin).args(["solve", &f("l.po")]).env("POSEONLY_THREADS", "two").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
