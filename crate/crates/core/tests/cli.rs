use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_probefield"));
    c.env("RUST_LOG", "warn");
    c
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eval_of_identical_dirs_reports_zeros() {
    let gt = fixture("eval/gt");
    let out = run(&["eval", "--pred", arg(&gt), "--gt", arg(&gt)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for m in ["gray_diffuse", "silver_matte", "silver_mirror"] {
        for k in ["si_rmse", "angular_error_deg", "normalized_rmse"] {
            assert_eq!(report[m][k].as_f64(), Some(0.0), "{m}.{k}");
        }
    }
}

#[test]
fn eval_matches_frozen_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = run(&[
        "eval",
        "--pred",
        arg(&fixture("eval/pred")),
        "--gt",
        arg(&fixture("eval/gt")),
        "--out",
        arg(&report),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let got: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let want: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixture("eval/expected.json")).unwrap()).unwrap();
    assert_eq!(got["probes"], want["probes"]);
    for m in ["gray_diffuse", "silver_matte", "silver_mirror"] {
        for k in ["si_rmse", "angular_error_deg", "normalized_rmse", "si_scale"] {
            let (g, w) = (got[m][k].as_f64().unwrap(), want[m][k].as_f64().unwrap());
            assert!((g - w).abs() <= 1e-9 * w.abs().max(1e-3), "{m}.{k}: {g} vs frozen {w}");
        }
    }
    assert!(dir.path().join("report.json.manifest.json").exists());
}

#[test]
fn usage_errors_exit_one() {
    let out = run(&["eval", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    let out = run(&["distill", "--config", arg(&fixture("tiny.json")), "--oracle", "file", "--out", "unused"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("usage error:"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(&["distill", "--config", arg(&missing), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("runtime error:"));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"iterations": 3, "iteration": 4}"#).unwrap();
    let out = run(&["distill", "--config", arg(&bad), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

fn distill_tiny(out: &Path) {
    let o = run(&["distill", "--oracle", "synthetic", "--config", arg(&fixture("tiny.json")), "--seed", "7", "--out", arg(out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn distill_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    distill_tiny(&a);
    distill_tiny(&b);
    let names = ["psi_000005.bin", "psi_000010.bin", "psi_final.bin", "psi_final.bin.json"];
    for n in names {
        let (x, y) = (fs::read(a.join("checkpoints").join(n)).unwrap(), fs::read(b.join("checkpoints").join(n)).unwrap());
        assert_eq!(x, y, "{n} differs");
    }
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["inputs"][0]["hash"].as_str().unwrap().len(), 64);
}

#[test]
fn scene_gen_probe_render_and_export_round_out_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scene = d.join("scene");
    let o = run(&["scene-gen", "--preset", "three-emitter-step", "--num-probes", "2", "--env-height", "8", "--out", arg(&scene)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(scene.join("frames/frame_0020.png").exists() && scene.join("frames/depth_0001.pfm").exists());
    assert!(scene.join("gt/probe_001.pfm").exists());

    fs::write(d.join("ball.json"), r#"{"center": [0.0, 0.0, 2.0], "radius": 0.25}"#).unwrap();
    fs::write(d.join("camera.json"), r#"{"fx": 64, "fy": 64, "cx": 32, "cy": 32, "width": 64, "height": 64}"#).unwrap();
    let render = d.join("render");
    let o = run(&[
        "probe-render",
        "--env",
        arg(&scene.join("gt/probe_000.pfm")),
        "--ball",
        arg(&d.join("ball.json")),
        "--camera",
        arg(&d.join("camera.json")),
        "--out",
        arg(&render),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["sprite.png", "sprite.pfm", "mask.png", "manifest.json"] {
        assert!(render.join(f).exists(), "{f}");
    }

    let run_dir = d.join("run");
    distill_tiny(&run_dir);
    let export = d.join("export");
    let o = run(&[
        "envmap-export",
        "--checkpoint",
        arg(&run_dir.join("checkpoints/psi_final.bin")),
        "--probes",
        arg(&fixture("eval/probes.json")),
        "--height",
        "8",
        "--out",
        arg(&export),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(export.join("probe_002.pfm").exists());
}
