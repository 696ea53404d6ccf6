use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use occfield::Checkpoint;
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn occfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occfield")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = occfield(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Smoke scene rendered and fitted once, shared by the tests below.
struct Smoke {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn smoke() -> &'static Smoke {
    static CELL: OnceLock<Smoke> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        let fx = fixtures().join("smoke");
        ok(&["synth", "--spec", s(&fx.join("scene.json")), "--out", s(&data)]);
        ok(&[
            "fit",
            "--data",
            s(&data),
            "--grid",
            s(&fx.join("grid.json")),
            "--config",
            s(&fx.join("fit.json")),
            "--checkpoint-every",
            "200",
            "--out",
            s(&run),
        ]);
        Smoke { _dir: dir, data, run }
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn fit_writes_checkpoints_and_a_falling_loss_curve() {
    let sm = smoke();
    assert!(sm.run.join("checkpoint.ockp").is_file());
    assert!(sm.run.join("checkpoint_000200.ockp").is_file());
    assert!(sm.run.join("checkpoint_000400.ockp").is_file());
    assert!(!sm.run.join("checkpoint_000600.ockp").exists());

    let csv = std::fs::read_to_string(sm.run.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,L_pe,L_sem,L_dist,total"));
    let total: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(total.len(), 600);
    // minibatch losses are noisy; compare windows
    let (first, last) = (mean(&total[..100]), mean(&total[500..]));
    assert!(last < 0.75 * first, "loss did not fall: {first} -> {last}");

    let ck = Checkpoint::read(&sm.run.join("checkpoint.ockp")).unwrap();
    assert_eq!(ck.step, 600);
    let snap = Checkpoint::read(&sm.run.join("checkpoint_000200.ockp")).unwrap();
    assert_eq!(snap.step, 200);
    assert_ne!(snap.grid, ck.grid);
}

#[test]
fn checkpoint_resave_is_byte_identical() {
    let path = smoke().run.join("checkpoint.ockp");
    let bytes = std::fs::read(&path).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("again.ockp");
    Checkpoint::read(&path).unwrap().write(&copy).unwrap();
    assert_eq!(std::fs::read(copy).unwrap(), bytes);
}

#[test]
fn manifest_hashes_match_outputs() {
    let sm = smoke();
    let m = read_json(&sm.run.join("manifest.json"));
    assert_eq!(m["command"], "fit");
    assert_eq!(m["seed"], Value::Null);
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 4);
    for o in outputs {
        let path = Path::new(o["path"].as_str().unwrap());
        let bytes = std::fs::read(path).unwrap();
        assert_eq!(o["bytes"].as_u64().unwrap(), bytes.len() as u64);
        assert_eq!(o["sha256"].as_str().unwrap().len(), 64);
    }
    assert!(m["inputs"].as_array().unwrap().len() > 20);
    assert!(!sm.run.join(".occfield.lock").exists());
}

#[test]
fn rerun_with_same_seed_reproduces_outputs() {
    let sm = smoke();
    let fx = fixtures().join("smoke");
    let dir = tempfile::tempdir().unwrap();
    let hashes = |run: &Path| -> Vec<Value> {
        ok(&[
            "fit",
            "--data",
            s(&sm.data),
            "--grid",
            s(&fx.join("grid.json")),
            "--config",
            s(&fx.join("fit.json")),
            "--steps",
            "40",
            "--seed",
            "3",
            "--out",
            s(run),
        ]);
        let m = read_json(&run.join("manifest.json"));
        assert_eq!(m["seed"], 3);
        m["outputs"].as_array().unwrap().iter().map(|o| o["sha256"].clone()).collect()
    };
    let a = hashes(&dir.path().join("a"));
    let b = hashes(&dir.path().join("b"));
    assert_eq!(a, b);
}

#[test]
fn render_then_eval_depth() {
    let sm = smoke();
    let dir = tempfile::tempdir().unwrap();
    let view = dir.path().join("view");
    ok(&[
        "render",
        "--checkpoint",
        s(&sm.run.join("checkpoint.ockp")),
        "--data",
        s(&sm.data),
        "--camera",
        "front",
        "--out",
        s(&view),
    ]);
    for f in ["front_f002_depth.pfm", "front_f002_depth.png", "front_f002_opacity.pfm", "manifest.json"] {
        assert!(view.join(f).is_file(), "{f} missing");
    }

    let gt = sm.data.join("frame002/front_depth.pfm");
    let report = dir.path().join("report");
    ok(&["eval-depth", "--pred", s(&view.join("front_f002_depth.pfm")), "--gt", s(&gt), "--out", s(&report)]);
    let r = read_json(&report.join("report.json"));
    let abs_rel = r["abs_rel"].as_f64().unwrap();
    assert!(abs_rel.is_finite() && abs_rel < 1.0, "abs_rel {abs_rel}");
}

#[test]
fn eval_depth_of_identical_maps_is_perfect() {
    let sm = smoke();
    let gt = sm.data.join("frame001/left_depth.pfm");
    let dir = tempfile::tempdir().unwrap();
    ok(&["eval-depth", "--pred", s(&gt), "--gt", s(&gt), "--out", s(dir.path())]);
    let r = read_json(&dir.path().join("report.json"));
    assert_eq!(r["abs_rel"].as_f64(), Some(0.0));
    assert_eq!(r["rmse"].as_f64(), Some(0.0));
    assert_eq!(r["delta_1"].as_f64(), Some(1.0));
}

#[test]
fn eval_occ_sweeps_thresholds() {
    let sm = smoke();
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "eval-occ",
        "--checkpoint",
        s(&sm.run.join("checkpoint.ockp")),
        "--scene",
        s(&fixtures().join("smoke/scene.json")),
        "--threshold",
        "0.3",
        "--threshold",
        "0.5",
        "--out",
        s(dir.path()),
    ]);
    let r = read_json(&dir.path().join("report.json"));
    let sweep = r.as_array().unwrap();
    assert_eq!(sweep.len(), 2);
    assert_eq!(sweep[0]["threshold"], 0.3);
    for e in sweep {
        let iou = e["report"]["iou"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&iou));
    }
}

#[test]
fn fuse_labels_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixtures();
    ok(&[
        "fuse-labels",
        "--masks",
        s(&fx.join("fusion/masks.json")),
        "--prompts",
        s(&fx.join("prompts.json")),
        "--out",
        s(dir.path()),
    ]);
    assert!(dir.path().join("fusion.png").is_file());
}

#[test]
fn gradcheck_fixture_passes() {
    let out = ok(&["gradcheck", "--fixture", s(&fixtures().join("probe"))]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.ends_with(" ok")).count(), 3, "{text}");
}

#[test]
fn invalid_invocations_exit_one() {
    let fx = fixtures().join("smoke");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (scene, grid, out) = (fx.join("scene.json"), fx.join("grid.json"), s(&out).to_owned());
    let (scene, grid, fx) = (s(&scene), s(&grid), s(&fx));
    let cases: Vec<Vec<&str>> = vec![
        vec!["frobnicate"],
        vec!["fit", "--frob"],
        vec!["fit", "--data", "does/not/exist", "--grid", grid, "--out", &out],
        vec!["render", "--seed", "3", "--checkpoint", "a", "--data", "b", "--camera", "c", "--out", &out],
        vec!["eval-depth", "--pred", scene, "--gt", scene],
        // a scene description is not a fit config
        vec!["fit", "--data", fx, "--grid", grid, "--config", scene, "--out", &out],
    ];
    for args in cases {
        let o = occfield(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}:\n{}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn held_lock_refuses_second_writer() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".occfield.lock"), b"").unwrap();
    let o = occfield(&["fuse-labels", "--masks", s(&fixtures().join("fusion/masks.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("fusion.png").exists());
}

#[test]
fn help_exits_zero() {
    assert!(occfield(&["--help"]).status.success());
    assert!(occfield(&["fit", "--help"]).status.success());
}
