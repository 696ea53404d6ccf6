//! Regenerates the JSON and binary fixtures under `fixtures/`.
//!
//!     cargo run --release -p occfield --example gen_fixtures -- fixtures

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use occfield::io::{write_grid, write_json, write_mask_png};
use occfield::optimizer::{FitConfig, GradCheckConfig, GridConfig};
use occfield::semantics_fusion::{MaskEntry, MaskManifest, PromptTable};
use occfield::synth::{rig_camera, Primitive, PrimitiveKind, SceneSpec, Texture};
use occfield::{Activation, LossConfig, Pose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOXEL: f64 = 0.4;
const HALF: f64 = 6.4;
const Z_MIN: f64 = -1.2;
const Z_MAX: f64 = 2.8;

fn checker(period: f64, a: [f64; 3], b: [f64; 3]) -> Texture {
    Texture::Checker { period, colors: [a, b] }
}

/// Axis-aligned box from corner `lo` to corner `hi`.
fn slab(lo: [f64; 3], hi: [f64; 3], texture: Texture, category: u8) -> Primitive {
    Primitive {
        kind: PrimitiveKind::Box,
        pose: Pose::from_translation(Vector3::from_fn(|i, _| 0.5 * (lo[i] + hi[i]))),
        size: [0, 1, 2].map(|i| hi[i] - lo[i]),
        texture,
        category: Some(category),
    }
}

/// Walled yard with four low panels. Every face sits on a voxel boundary of
/// the grid in `yard_grid`, and the walls fill the outermost ring of the
/// inside region so nothing unobservable lies inside it.
fn yard_scene() -> SceneSpec {
    let xy = |k: f64| -HALF + k * VOXEL;
    let n = 2.0 * HALF / VOXEL;
    let (floor, ground) = (Z_MIN, Z_MIN + VOXEL);
    let (a, b) = (xy(0.0), xy(n));
    let (ia, ib) = (xy(1.0), xy(n - 1.0));

    let mut prims = vec![slab([ia, ia, floor], [ib, ib, ground], checker(0.7, [0.2, 0.25, 0.3], [0.8, 0.75, 0.6]), 0)];
    let wall = |p| checker(p, [0.1, 0.3, 0.6], [0.9, 0.85, 0.5]);
    prims.push(slab([ib, a, ground], [b, b, Z_MAX], wall(0.9), 1));
    prims.push(slab([a, a, ground], [ia, b, Z_MAX], wall(1.1), 1));
    prims.push(slab([a, ib, ground], [b, b, Z_MAX], wall(0.8), 1));
    prims.push(slab([a, a, ground], [b, ia, Z_MAX], wall(1.0), 1));

    let panel = |c| checker(0.5, c, [0.95, 0.95, 0.9]);
    let top = ground + VOXEL;
    // (x0, y0, x1, y1) in lattice units
    let panels = [
        (23.0, 19.0, 24.0, 24.0, [0.7, 0.1, 0.1]),
        (21.0, 9.0, 26.0, 10.0, [0.1, 0.6, 0.2]),
        (8.0, 19.0, 9.0, 24.0, [0.5, 0.2, 0.6]),
        (8.0, 10.0, 13.0, 11.0, [0.6, 0.5, 0.1]),
    ];
    for (x0, y0, x1, y1, c) in panels {
        prims.push(slab([xy(x0), xy(y0), ground], [xy(x1), xy(y1), top], panel(c), 1));
    }

    let (w, h, f, pitch) = (192, 128, 96.0, 0.3);
    let z = ground + 1.6;
    let mut rig = vec![
        rig_camera("front", w, h, f, 0.0, pitch, Vector3::new(0.4, 0.0, z)).unwrap(),
        rig_camera("left", w, h, f, 1.5708, pitch, Vector3::new(0.0, 0.3, z)).unwrap(),
        rig_camera("back", w, h, f, 3.1416, pitch, Vector3::new(-0.4, 0.0, z)).unwrap(),
        rig_camera("right", w, h, f, -1.5708, pitch, Vector3::new(0.0, -0.3, z)).unwrap(),
        rig_camera("front_left", w, h, f, 0.7854, pitch, Vector3::new(0.3, 0.2, z)).unwrap(),
    ];
    rig[4].held_out = true;
    let trajectory = (0..5).map(|i| Pose::from_translation(Vector3::new(0.5 * (i as f64 - 2.0), 0.0, 0.0))).collect();
    SceneSpec {
        primitives: prims,
        rig,
        trajectory,
        channels: 3,
        background: [0.55, 0.65, 0.8],
        supersample: 3,
        pixel_blur: 0.8,
    }
}

fn yard_grid(num_classes: usize) -> GridConfig {
    let cells = |lo: f64, hi: f64| ((hi - lo) / VOXEL).round() as usize;
    GridConfig {
        inside_dims: [cells(-HALF, HALF), cells(-HALF, HALF), cells(Z_MIN, Z_MAX)],
        inside_min: [-HALF, -HALF, Z_MIN],
        inside_max: [HALF, HALF, Z_MAX],
        alpha: 0.667,
        activation: Activation::Weight,
        num_classes,
    }
}

fn yard_fit(lambda: f64) -> FitConfig {
    FitConfig {
        learning_rate: 0.1,
        seed: 7,
        loss: LossConfig { lambda, distortion: 2.0, ..LossConfig::default() },
        ..FitConfig::default()
    }
}

/// Quarter-size yard with one panel, cheap enough for command-line smoke runs.
fn smoke_scene() -> SceneSpec {
    const H: f64 = 2.4;
    const TOP: f64 = 1.2;
    let xy = |k: f64| -H + k * VOXEL;
    let n = 2.0 * H / VOXEL;
    let (floor, ground) = (Z_MIN, Z_MIN + VOXEL);
    let (a, b) = (xy(0.0), xy(n));
    let (ia, ib) = (xy(1.0), xy(n - 1.0));
    let wall = |p| checker(p, [0.1, 0.3, 0.6], [0.9, 0.85, 0.5]);
    let prims = vec![
        slab([ia, ia, floor], [ib, ib, ground], checker(0.7, [0.2, 0.25, 0.3], [0.8, 0.75, 0.6]), 0),
        slab([ib, a, ground], [b, b, TOP], wall(0.9), 1),
        slab([a, a, ground], [ia, b, TOP], wall(1.1), 1),
        slab([a, ib, ground], [b, b, TOP], wall(0.8), 1),
        slab([a, a, ground], [b, ia, TOP], wall(1.0), 1),
        slab(
            [xy(8.0), xy(3.0), ground],
            [xy(9.0), xy(6.0), ground + VOXEL],
            checker(0.5, [0.7, 0.1, 0.1], [0.95, 0.95, 0.9]),
            1,
        ),
    ];
    let (w, h, f, pitch) = (64, 48, 32.0, 0.3);
    let z = ground + 1.2;
    let rig = vec![
        rig_camera("front", w, h, f, 0.0, pitch, Vector3::new(0.2, 0.0, z)).unwrap(),
        rig_camera("left", w, h, f, 1.5708, pitch, Vector3::new(0.0, 0.2, z)).unwrap(),
        rig_camera("back", w, h, f, 3.1416, pitch, Vector3::new(-0.2, 0.0, z)).unwrap(),
        rig_camera("right", w, h, f, -1.5708, pitch, Vector3::new(0.0, -0.2, z)).unwrap(),
    ];
    let trajectory = (0..5).map(|i| Pose::from_translation(Vector3::new(0.2 * (i as f64 - 2.0), 0.0, 0.0))).collect();
    SceneSpec {
        primitives: prims,
        rig,
        trajectory,
        channels: 3,
        background: [0.55, 0.65, 0.8],
        supersample: 2,
        pixel_blur: 0.8,
    }
}

fn smoke_grid() -> GridConfig {
    GridConfig {
        inside_dims: [12, 12, 6],
        inside_min: [-2.4, -2.4, Z_MIN],
        inside_max: [2.4, 2.4, 1.2],
        alpha: 0.667,
        activation: Activation::Weight,
        num_classes: 0,
    }
}

/// Small textured scene for finite-difference checks.
fn probe_scene() -> SceneSpec {
    let ground = Primitive {
        kind: PrimitiveKind::Plane,
        pose: Pose::from_translation(Vector3::new(0.0, 0.0, -1.0)),
        size: [100.0, 100.0, 0.2],
        texture: Texture::Noise { seed: 1, scale: 0.5 },
        category: Some(0),
    };
    let block = Primitive {
        kind: PrimitiveKind::Box,
        pose: Pose::from_translation(Vector3::new(3.0, 0.5, -0.2)),
        size: [1.0, 1.5, 1.6],
        texture: Texture::Noise { seed: 2, scale: 0.3 },
        category: Some(1),
    };
    let rig = vec![
        rig_camera("front", 16, 12, 10.0, 0.0, 0.2, Vector3::new(0.0, 0.0, 0.3)).unwrap(),
        rig_camera("left", 16, 12, 10.0, 0.8, 0.2, Vector3::new(0.0, 0.2, 0.3)).unwrap(),
    ];
    let trajectory = (0..5).map(|i| Pose::from_translation(Vector3::new(0.25 * i as f64, 0.0, 0.0))).collect();
    SceneSpec {
        primitives: vec![ground, block],
        rig,
        trajectory,
        channels: 3,
        background: [0.5, 0.6, 0.7],
        supersample: 2,
        pixel_blur: 0.6,
    }
}

fn probe_grid() -> GridConfig {
    GridConfig {
        inside_dims: [10, 10, 8],
        inside_min: [-1.0, -2.0, -1.5],
        inside_max: [3.0, 2.0, 1.5],
        alpha: 0.667,
        activation: Activation::Weight,
        num_classes: 2,
    }
}

fn main() -> occfield::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let put = |rel: &str| -> PathBuf {
        let p = root.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        p
    };

    write_json(&put("yard/scene.json"), &yard_scene())?;
    write_json(&put("yard/grid.json"), &yard_grid(0))?;
    write_json(&put("yard/grid_semantic.json"), &yard_grid(2))?;
    write_json(&put("yard/fit.json"), &yard_fit(0.0))?;
    write_json(&put("yard/fit_semantic.json"), &yard_fit(0.05))?;

    write_json(&put("smoke/scene.json"), &smoke_scene())?;
    write_json(&put("smoke/grid.json"), &smoke_grid())?;
    write_json(&put("smoke/fit.json"), &FitConfig { steps: 600, ..yard_fit(0.0) })?;

    write_json(&put("probe/scene.json"), &probe_scene())?;
    write_json(&put("probe/grid.json"), &probe_grid())?;
    let mut grid = probe_grid().build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in grid.opacity_raw.iter_mut() {
        *p = rng.random_range(-4.0..0.5);
    }
    for p in grid.semantic_raw.iter_mut() {
        *p = rng.random_range(-1.0..1.0);
    }
    write_grid(&put("probe/perturbed.grid"), &grid)?;
    let probe_fit =
        FitConfig { seed: 7, loss: LossConfig { lambda: 0.0, ..LossConfig::default() }, ..FitConfig::default() };
    write_json(&put("probe/fit.json"), &probe_fit)?;
    write_json(&put("probe/gradcheck.json"), &GradCheckConfig { num_params: 240, ..GradCheckConfig::default() })?;

    write_json(&put("prompts.json"), &PromptTable::builtin())?;
    // pixels: sedan only, sedan under a stronger highway, highway only, nothing
    write_mask_png(&put("fusion/sedan.png"), 4, 1, &[true, true, false, false])?;
    write_mask_png(&put("fusion/highway.png"), 4, 1, &[false, true, true, false])?;
    let masks = MaskManifest {
        image_id: "fusion".into(),
        size: None,
        entries: vec![
            MaskEntry { mask_path: "sedan.png".into(), logit: 0.4, phrase: "sedan".into() },
            MaskEntry { mask_path: "highway.png".into(), logit: 0.9, phrase: "highway".into() },
        ],
    };
    write_json(&put("fusion/masks.json"), &masks)?;
    println!("fixtures written to {}", Path::new(&root).display());
    Ok(())
}
