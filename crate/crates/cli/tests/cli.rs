//! End-to-end tests of the `patchpose` binary on small synthetic fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;
use patchpose::evaluation::{save_ground_truth, GroundTruthAnnotation};
use patchpose::features::{extract_grid, read_feature_file, write_feature_file};
use patchpose::onboarding::load_representation;
use patchpose::pipeline::ResultRecord;
use patchpose::rendering::sample_rotations;
use patchpose::synthetic::{cube, render_query, textured_box};
use patchpose::{CameraIntrinsics, FeatureGrid, GradientHistogramBackend, Pose, RgbImage};
use tempfile::TempDir;

const SMALL: [&str; 8] = [
    "--templates",
    "8",
    "--size",
    "224",
    "--words",
    "32",
    "--pca-dim",
    "32",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchpose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A box mesh, its onboarded archive and one query rendered at a template pose.
struct Fixture {
    dir: TempDir,
    truth: Pose,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mesh = textured_box(40.0, 30.0, 20.0, 3, 1);
        mesh.save_ply(dir.path().join("box.ply")).unwrap();
        let truth = Pose::new(sample_rotations(8, 0)[2], Vector3::new(0.0, 0.0, 500.0)).unwrap();
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let q = render_query(&mesh, &truth, &k, "box").unwrap();
        q.image.save_png(dir.path().join("query.png")).unwrap();
        q.mask.save_png(dir.path().join("mask.png")).unwrap();
        k.save_json(dir.path().join("k.json")).unwrap();
        let f = Fixture { dir, truth };
        let mut args = vec![
            "onboard",
            "--mesh",
            f.path_str("box.ply"),
            "--out",
            f.path_str("rep"),
            "--object-id",
            "box",
        ];
        args.extend(SMALL);
        let out = run(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Leaked so it fits in `&str` argument lists; each test process is short-lived.
    fn path_str(&self, name: &str) -> &'static str {
        Box::leak(
            self.path(name)
                .to_str()
                .unwrap()
                .to_owned()
                .into_boxed_str(),
        )
    }

    fn estimate(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "estimate",
            "--rep",
            self.path_str("rep"),
            "--image",
            self.path_str("query.png"),
            "--mask",
            self.path_str("mask.png"),
            "--intrinsics",
            self.path_str("k.json"),
            "--out",
            self.path_str(out),
        ];
        args.extend(extra);
        run(&args)
    }
}

#[test]
fn help_lists_every_flag() {
    let cases: [(&str, &[&str]); 5] = [
        (
            "onboard",
            &[
                "--mesh",
                "--out",
                "--config",
                "--features-dir",
                "--templates",
                "--words",
                "--seed",
            ],
        ),
        (
            "estimate",
            &[
                "--rep",
                "--image",
                "--mask",
                "--intrinsics",
                "--feature-file",
                "--no-refine",
                "--hypotheses",
                "--seed",
                "--out",
                "--threads",
                "--image-id",
                "--timings",
            ],
        ),
        (
            "evaluate",
            &["--results", "--gt", "--mesh", "--symmetries", "--out"],
        ),
        (
            "visualize",
            &[
                "--rep",
                "--image",
                "--result",
                "--out",
                "--intrinsics",
                "--mesh",
            ],
        ),
        ("export-templates", &["--mesh", "--out", "--fpft"]),
    ];
    for (cmd, flags) in cases {
        let out = run(&[cmd, "--help"]);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
    assert_eq!(code(&run(&["no-such-command"])), 2);
}

#[test]
fn onboard_writes_archive_and_reports_errors_by_kind() {
    let dir = tempfile::tempdir().unwrap();
    let mesh_path = dir.path().join("cube.ply");
    cube(40.0).save_ply(&mesh_path).unwrap();
    let rep = dir.path().join("rep");
    let mut args = vec!["onboard", "--mesh", s(&mesh_path), "--out", s(&rep)];
    args.extend(SMALL);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("8 templates"));
    assert_eq!(load_representation(&rep).unwrap().templates.len(), 8);

    let missing = dir.path().join("missing.ply");
    assert_eq!(
        code(&run(&["onboard", "--mesh", s(&missing), "--out", s(&rep)])),
        3
    );
    let bad_delta = run(&[
        "onboard",
        "--mesh",
        s(&mesh_path),
        "--out",
        s(&rep),
        "--delta",
        "1.5",
    ]);
    assert_eq!(code(&bad_delta), 2);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "bogus_key = 1\n").unwrap();
    assert_eq!(
        code(&run(&[
            "onboard",
            "--mesh",
            s(&mesh_path),
            "--out",
            s(&rep),
            "--config",
            s(&cfg)
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "onboard",
            "--mesh",
            s(&mesh_path),
            "--out",
            s(&rep),
            "--config",
            s(&missing)
        ])),
        3
    );
}

#[test]
fn onboarding_from_feature_files() {
    let f = Fixture::new();
    let mut args = vec![
        "export-templates",
        "--mesh",
        f.path_str("box.ply"),
        "--out",
        f.path_str("feats"),
        "--fpft",
    ];
    args.extend(SMALL);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for i in 0..8 {
        assert!(f.path(&format!("feats/template_{i}.png")).exists());
        assert!(f.path(&format!("feats/template_{i}_mask.png")).exists());
        let grid = read_feature_file(f.path(&format!("feats/template_{i}.fpft"))).unwrap();
        assert_eq!((grid.grid_h(), grid.grid_w()), (16, 16));
    }

    // Features of the built-in backend reproduce the built-in archive.
    let mut args = vec![
        "onboard",
        "--mesh",
        f.path_str("box.ply"),
        "--out",
        f.path_str("rep2"),
    ];
    args.extend(["--object-id", "box", "--features-dir", f.path_str("feats")]);
    args.extend(SMALL);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (a, b) = (
        load_representation(f.path("rep")).unwrap(),
        load_representation(f.path("rep2")).unwrap(),
    );
    assert_eq!(a.templates, b.templates);

    // One file with a different descriptor dimension is a configuration error.
    let odd = FeatureGrid::new(16, 16, 64, 14, vec![0.5; 16 * 16 * 64]).unwrap();
    write_feature_file(&odd, f.path("feats/template_3.fpft")).unwrap();
    let out = run(&args);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("onboarding stage"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn estimate_writes_deterministic_results() {
    let f = Fixture::new();
    let out = f.estimate("a.json", &["--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rec = &ResultRecord::load_many(f.path("a.json")).unwrap()[0];
    assert_eq!(rec.image_id, "query");
    assert_eq!(rec.object_id, "box");
    assert!(rec.rotation.iter().chain(&rec.t).all(|v| v.is_finite()));
    let err = (rec.pose().unwrap().translation() - f.truth.translation()).norm();
    assert!(err < 25.0, "translation error {err} mm");

    assert_eq!(
        code(&f.estimate("b.json", &["--seed", "4", "--threads", "2"])),
        0
    );
    let bytes = |n: &str| std::fs::read(f.path(n)).unwrap();
    assert_eq!(bytes("a.json"), bytes("b.json"));

    assert_eq!(code(&f.estimate("coarse.json", &["--no-refine"])), 0);
    let coarse = &ResultRecord::load_many(f.path("coarse.json")).unwrap()[0];
    assert_eq!(
        (coarse.rotation, coarse.t),
        (coarse.coarse_rotation, coarse.coarse_t)
    );

    assert_eq!(code(&f.estimate("timed.json", &["--timings"])), 0);
    assert!(String::from_utf8_lossy(&bytes("timed.json")).contains("timings_ms"));
    assert!(!String::from_utf8_lossy(&bytes("a.json")).contains("timings_ms"));
}

#[test]
fn estimate_errors_map_to_exit_codes() {
    let f = Fixture::new();
    assert_eq!(code(&f.estimate("x.json", &["--hypotheses", "0"])), 2);
    let missing = run(&[
        "estimate",
        "--rep",
        f.path_str("nowhere"),
        "--image",
        f.path_str("query.png"),
        "--mask",
        f.path_str("mask.png"),
        "--intrinsics",
        f.path_str("k.json"),
        "--out",
        f.path_str("x.json"),
    ]);
    assert_eq!(code(&missing), 3);
    // An all-black mask leaves nothing to crop.
    RgbImage::new(640, 480)
        .save_png(f.path("black.png"))
        .unwrap();
    let out = run(&[
        "estimate",
        "--rep",
        f.path_str("rep"),
        "--image",
        f.path_str("query.png"),
        "--mask",
        f.path_str("black.png"),
        "--intrinsics",
        f.path_str("k.json"),
        "--out",
        f.path_str("x.json"),
    ]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("crop stage"), "{}", stderr(&out));
}

#[test]
fn estimate_from_a_feature_file_matches_the_backend() {
    let f = Fixture::new();
    assert_eq!(
        code(&f.estimate("direct.json", &["--dump-crop", f.path_str("crop.png")])),
        0
    );
    let crop = RgbImage::load_png(f.path("crop.png")).unwrap();
    assert_eq!((crop.width(), crop.height()), (224, 224));
    let grid = extract_grid(&GradientHistogramBackend::default(), &crop).unwrap();
    write_feature_file(&grid, f.path("crop.fpft")).unwrap();
    assert_eq!(
        code(&f.estimate("file.json", &["--feature-file", f.path_str("crop.fpft")])),
        0
    );
    let (a, b) = (
        ResultRecord::load_many(f.path("direct.json")).unwrap(),
        ResultRecord::load_many(f.path("file.json")).unwrap(),
    );
    // The crop PNG is quantized to 8 bits, so the poses agree closely but not bitwise.
    assert_eq!(a[0].template_id, b[0].template_id);
    let gap = a[0]
        .pose()
        .unwrap()
        .rotation_angle_to(&b[0].pose().unwrap())
        .to_degrees();
    assert!(gap < 2.0, "{gap}°");
}

fn shifted(truth: &Pose, dx: f64) -> Pose {
    Pose::new(
        *truth.rotation(),
        truth.translation() + Vector3::new(dx, 0.0, 0.0),
    )
    .unwrap()
}

#[test]
fn evaluate_average_recall() {
    let f = Fixture::new();
    let mesh = cube(50.0);
    mesh.save_ply(f.path("cube.ply")).unwrap();
    let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
    let truth = Pose::from_axis_angle(Vector3::new(0.3, 0.2, 0.1), Vector3::new(0.0, 0.0, 700.0));
    let result = |id: &str, pose: &Pose| {
        let rm = pose.to_row_major();
        ResultRecord {
            image_id: id.into(),
            object_id: "cube".into(),
            rotation: rm[..9].try_into().unwrap(),
            t: rm[9..].try_into().unwrap(),
            score: 10,
            template_id: 0,
            coarse_rotation: rm[..9].try_into().unwrap(),
            coarse_t: rm[9..].try_into().unwrap(),
            refinement_cost_initial: 0.0,
            refinement_cost_final: 0.0,
            timings_ms: None,
        }
        .to_json()
    };
    let gts: Vec<GroundTruthAnnotation> = ["0", "1", "2", "3"]
        .iter()
        .map(|id| GroundTruthAnnotation::new(id, "cube", &truth, &k, 1.0))
        .collect();
    save_ground_truth(&gts, f.path("gt.json")).unwrap();
    let evaluate = |results: &str, out: &str| {
        run(&[
            "evaluate",
            "--results",
            f.path_str(results),
            "--gt",
            f.path_str("gt.json"),
            "--mesh",
            f.path_str("cube.ply"),
            "--out",
            f.path_str(out),
        ])
    };
    let ar = |out: &str, key: &str| -> f64 {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(f.path(out)).unwrap()).unwrap();
        v[key].as_f64().unwrap()
    };

    let perfect: Vec<String> = ["0", "1", "2", "3"]
        .iter()
        .map(|id| result(id, &truth))
        .collect();
    std::fs::write(f.path("perfect.json"), format!("[{}]", perfect.join(","))).unwrap();
    assert_eq!(code(&evaluate("perfect.json", "p.json")), 0);
    assert_eq!(ar("p.json", "ar"), 1.0);

    std::fs::write(f.path("none.json"), "[]").unwrap();
    let out = evaluate("none.json", "n.json");
    assert_eq!(code(&out), 0);
    assert_eq!(ar("n.json", "ar"), 0.0);
    assert!(stderr(&out).contains("no estimates"), "{}", stderr(&out));

    // Lateral shifts of 10, 40 and 80 mm on a cube of diameter 100·sqrt(3) pass
    // 9, 6 and 1 of the ten MSSD thresholds; instance 3 has no estimate.
    let partial = [
        result("0", &shifted(&truth, 10.0)),
        result("1", &shifted(&truth, 40.0)),
        result("2", &shifted(&truth, 80.0)),
    ];
    std::fs::write(f.path("partial.json"), format!("[{}]", partial.join(","))).unwrap();
    assert_eq!(code(&evaluate("partial.json", "h.json")), 0);
    let expected = (0.9 + 0.6 + 0.1 + 0.0) / 4.0;
    assert!(
        (ar("h.json", "ar_mssd") - expected).abs() < 1e-12,
        "{}",
        ar("h.json", "ar_mssd")
    );
    assert!(ar("h.json", "ar") < ar("p.json", "ar"));

    assert_eq!(code(&evaluate("missing.json", "x.json")), 3);
}

#[test]
fn visualize_draws_the_contour() {
    let f = Fixture::new();
    assert_eq!(code(&f.estimate("r.json", &[])), 0);
    let draw = |result: &str, out: &str| {
        run(&[
            "visualize",
            "--rep",
            f.path_str("rep"),
            "--image",
            f.path_str("query.png"),
            "--intrinsics",
            f.path_str("k.json"),
            "--result",
            f.path_str(result),
            "--out",
            f.path_str(out),
        ])
    };
    let out = draw("r.json", "overlay.png");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let overlay = RgbImage::load_png(f.path("overlay.png")).unwrap();
    let green = overlay
        .pixels()
        .iter()
        .filter(|p| **p == [0.0, 1.0, 0.0])
        .count();
    assert!(green > 50, "{green} contour pixels");

    let mut rec = ResultRecord::load_many(f.path("r.json")).unwrap().remove(0);
    rec.t[2] = -500.0;
    rec.save(f.path("behind.json")).unwrap();
    assert_eq!(code(&draw("behind.json", "b.png")), 4);
}
