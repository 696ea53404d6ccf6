use nalgebra::Vector3;
use occfield::dataset::{load_frame_set, save_frame_set, FrameSet};
use occfield::io::{read_depth_png16, read_grid, read_json, read_pfm, write_depth_png16, write_grid, write_pfm};
use occfield::optimizer::{evaluate_loss, fit};
use occfield::synth::SceneSpec;
use occfield::{Activation, Checkpoint, ContractionParams, FitConfig, GridConfig, Image};
use proptest::prelude::*;

fn fixture(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn probe() -> (SceneSpec, GridConfig, FitConfig) {
    (
        read_json(&fixture("probe/scene.json")).unwrap(),
        read_json(&fixture("probe/grid.json")).unwrap(),
        read_json(&fixture("probe/fit.json")).unwrap(),
    )
}

#[test]
fn frame_set_survives_disk_and_gives_same_loss() {
    let (scene, grid_cfg, cfg) = probe();
    let set = FrameSet::from_scene(&scene).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_frame_set(dir.path(), &set, &[[0, 0, 0], [255, 255, 255]]).unwrap();
    let back = load_frame_set(dir.path()).unwrap();
    assert_eq!(back.rig, set.rig);
    assert_eq!(back.frames.len(), set.frames.len());

    // images are quantized to 8 bits on disk, so losses agree only roughly
    let grid = read_grid(&fixture("probe/perturbed.grid")).unwrap();
    let a = evaluate_loss(&grid, &set, &cfg).unwrap().total;
    let b = evaluate_loss(&grid, &back, &cfg).unwrap().total;
    assert!((a - b).abs() < 0.02 * a.abs().max(1e-3), "{a} vs {b}");
    assert_eq!(grid.dims(), grid_cfg.build().unwrap().dims());
}

#[test]
fn fit_checkpoint_file_roundtrip() {
    let (scene, grid_cfg, cfg) = probe();
    let set = FrameSet::from_scene(&scene).unwrap();
    let cfg = FitConfig { steps: 5, log_every: 0, ..cfg };
    let mut seen = 0;
    let out = fit(grid_cfg.build().unwrap(), &set, &cfg, |_, _| seen += 1).unwrap();
    assert_eq!(seen, 5);
    assert_eq!(out.log.len(), 5);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ockp");
    let ck = Checkpoint { step: 5, config: cfg, grid: out.grid };
    ck.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back.config, ck.config);
    let again = dir.path().join("b.ockp");
    back.write(&again).unwrap();
    assert_eq!(std::fs::read(path).unwrap(), std::fs::read(again).unwrap());
}

#[test]
fn grid_file_roundtrip_after_first_rounding() {
    let grid = read_grid(&fixture("probe/perturbed.grid")).unwrap();
    assert_eq!(grid.activation(), Activation::Weight);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.grid");
    write_grid(&p, &grid).unwrap();
    assert_eq!(read_grid(&p).unwrap(), grid);
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(fixture("probe/perturbed.grid")).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pfm_roundtrip_is_exact_in_f32(w in 1usize..9, h in 1usize..9, seed in any::<u32>()) {
        let img = Image::from_fn(w, h, 1, |x, y, _| {
            let v = ((x * 31 + y * 17) as u32 ^ seed) as f32 * 1e-3;
            v as f64
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        write_pfm(&p, &img).unwrap();
        prop_assert_eq!(read_pfm(&p).unwrap(), img);
    }

    #[test]
    fn depth_png_quantizes_to_half_a_millimetre(d in prop::collection::vec(0.001f64..65.0, 6)) {
        let img = Image::from_fn(3, 2, 1, |x, y, _| d[y * 3 + x]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        write_depth_png16(&p, &img).unwrap();
        let back = read_depth_png16(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 5e-4 + 1e-12, "{} -> {}", a, b);
        }
    }

    #[test]
    fn contraction_is_monotone_and_invertible(
        half in prop::array::uniform3(0.5f64..50.0),
        p in prop::array::uniform3(-1e4f64..1e4),
        q in prop::array::uniform3(-1e4f64..1e4),
    ) {
        let c = ContractionParams::new(0.667, -Vector3::from(half), Vector3::from(half)).unwrap();
        let (p, q) = (Vector3::from(p), Vector3::from(q));
        let (cp, cq) = (c.contract_point(&p), c.contract_point(&q));
        for k in 0..3 {
            prop_assert!(cp[k].abs() < 1.0 + 1e-12);
            if p[k] < q[k] {
                prop_assert!(cp[k] <= cq[k]);
            }
        }
        let back = c.invert_point(&cp).unwrap();
        prop_assert!((back - p).norm() <= 1e-6 * p.norm().max(1.0));
    }
}
