use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use occfield::dataset::{load_frame_set, save_frame_set, FrameSet};
use occfield::evalmetrics::{
    depth_metrics, extract_occupancy, occupancy_metrics, OccMetricsReport, VoxelLabels, DEPTH_CLIP, FREE_VOXEL,
    IGNORE_VOXEL,
};
use occfield::io::{
    read_depth_png16, read_grid, read_json, read_pfm, write_depth_png16, write_json, write_label_png, write_pfm,
};
use occfield::optimizer::{
    depth_gradient_check, fit, gradient_check, render_frame_view, write_loss_csv, Checkpoint, FitConfig,
    GradCheckConfig, GradCheckReport, GridConfig,
};
use occfield::semantics_fusion::{fuse_labels, load_mask_set, load_prompt_table, PromptTable};
use occfield::synth::{voxelize_occupancy, SceneSpec};
use occfield::{Activation, Image};

use crate::manifest::{OutputLock, RunManifest};
use crate::{Cli, Command, Usage};

pub const CHECKPOINT_FILE: &str = "checkpoint.ockp";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.json";

// Finite-difference settings for the compositor check.
const DEPTH_CHECK_RAYS: usize = 16;
const DEPTH_CHECK_SAMPLES: usize = 16;
const DEPTH_CHECK_STEP: f64 = 1e-4;
const DEPTH_CHECK_TOL: f64 = 1e-3;

pub fn run(cli: Cli) -> Result<()> {
    let Cli { seed, config, out, command } = cli;
    let name = match &command {
        Command::Synth(_) => "synth",
        Command::Fit(_) => "fit",
        Command::Render(_) => "render",
        Command::EvalDepth(_) => "eval-depth",
        Command::EvalOcc(_) => "eval-occ",
        Command::FuseLabels(_) => "fuse-labels",
        Command::Gradcheck(_) => "gradcheck",
    };
    let takes_seed = matches!(command, Command::Fit(_) | Command::Gradcheck(_));
    if seed.is_some() && !takes_seed {
        return Err(Usage(format!("--seed is not used by {name}")).into());
    }
    if config.is_some() && !takes_seed {
        return Err(Usage(format!("--config is not used by {name}")).into());
    }
    if let Some(c) = &config {
        existing(c)?;
    }
    let mut ctx = Run { out, manifest: RunManifest::new(name, seed, config.as_deref()), lock: None };
    match command {
        Command::Synth(a) => synth(&mut ctx, &a.spec, a.prompts.as_deref()),
        Command::Fit(a) => fit_cmd(&mut ctx, &a, seed, config.as_deref()),
        Command::Render(a) => render(&mut ctx, &a),
        Command::EvalDepth(a) => eval_depth(&mut ctx, &a.pred, &a.gt),
        Command::EvalOcc(a) => eval_occ(&mut ctx, &a),
        Command::FuseLabels(a) => fuse(&mut ctx, &a.masks, a.prompts.as_deref()),
        Command::Gradcheck(a) => gradcheck(&mut ctx, &a.fixture, seed, config.as_deref()),
    }
}

/// Per-invocation state: the output directory, its lock and the manifest.
struct Run {
    out: Option<PathBuf>,
    manifest: RunManifest,
    lock: Option<OutputLock>,
}

impl Run {
    /// The output directory, locked; an error if `--out` was not given.
    fn out_dir(&mut self) -> Result<PathBuf> {
        let dir = self.out.clone().ok_or_else(|| Usage(format!("{} needs --out", self.manifest.command)))?;
        self.lock(&dir)?;
        Ok(dir)
    }

    /// The output directory if one was given.
    fn optional_out(&mut self) -> Result<Option<PathBuf>> {
        match self.out.clone() {
            Some(d) => {
                self.lock(&d)?;
                Ok(Some(d))
            }
            None => Ok(None),
        }
    }

    fn lock(&mut self, dir: &Path) -> Result<()> {
        if self.lock.is_none() {
            self.lock = Some(OutputLock::acquire(dir)?);
        }
        Ok(())
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        existing(path)?;
        self.manifest.input(path)
    }

    fn finish(&mut self, dir: &Path, outputs: &[PathBuf]) -> Result<()> {
        for p in outputs {
            self.manifest.output(p)?;
        }
        self.manifest.write(dir)?;
        Ok(())
    }
}

fn existing(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Usage(format!("{} does not exist", path.display())).into())
    }
}

fn prompt_table(path: Option<&Path>) -> Result<PromptTable> {
    match path {
        Some(p) => {
            existing(p)?;
            Ok(load_prompt_table(p)?)
        }
        None => Ok(PromptTable::builtin()),
    }
}

fn synth(ctx: &mut Run, spec: &Path, prompts: Option<&Path>) -> Result<()> {
    ctx.input(spec)?;
    if let Some(p) = prompts {
        ctx.input(p)?;
    }
    let palette = prompt_table(prompts)?.palette();
    let scene: SceneSpec = read_json(spec)?;
    let dir = ctx.out_dir()?;
    let start = Instant::now();
    let set = FrameSet::from_scene(&scene)?;
    let written = save_frame_set(&dir, &set, &palette)?;
    log::info!(
        "rendered {} frames x {} cameras in {:.1}s",
        set.frames.len(),
        set.rig.len(),
        start.elapsed().as_secs_f64()
    );
    ctx.finish(&dir, &written)?;
    println!("wrote {} files to {}", written.len(), dir.display());
    Ok(())
}

fn fit_cmd(ctx: &mut Run, a: &crate::FitArgs, seed: Option<u64>, config: Option<&Path>) -> Result<()> {
    ctx.input(&a.data)?;
    ctx.input(&a.grid)?;
    let mut cfg: FitConfig = match config {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    if a.checkpoint_every == Some(0) {
        return Err(Usage("--checkpoint-every must be positive".into()).into());
    }
    cfg.validate()?;
    let grid_cfg: GridConfig = read_json(&a.grid)?;
    let grid = grid_cfg.build()?;
    let data = load_frame_set(&a.data)?;
    let dir = ctx.out_dir()?;

    let start = Instant::now();
    let mut outputs = Vec::new();
    let mut snapshot_err = None;
    let result = fit(grid, &data, &cfg, |rec, grid| {
        if let Some(every) = a.checkpoint_every {
            let step = rec.step + 1;
            if step % every == 0 && step < cfg.steps && snapshot_err.is_none() {
                let path = dir.join(format!("checkpoint_{step:06}.ockp"));
                let ck = Checkpoint { step, config: cfg.clone(), grid: grid.clone() };
                match ck.write(&path) {
                    Ok(()) => outputs.push(path),
                    Err(e) => snapshot_err = Some(e),
                }
            }
        }
    })?;
    if let Some(e) = snapshot_err {
        return Err(e.into());
    }
    let elapsed = start.elapsed().as_secs_f64();

    let ck_path = dir.join(CHECKPOINT_FILE);
    Checkpoint { step: cfg.steps, config: cfg.clone(), grid: result.grid }.write(&ck_path)?;
    outputs.push(ck_path);
    let csv = dir.join(LOSS_FILE);
    write_loss_csv(&csv, &result.log)?;
    outputs.push(csv);
    ctx.finish(&dir, &outputs)?;
    let last = result.log.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("fit {} steps in {elapsed:.1}s, keyframe {}, final loss {last:.5}", cfg.steps, result.keyframe);
    Ok(())
}

fn render(ctx: &mut Run, a: &crate::RenderArgs) -> Result<()> {
    ctx.input(&a.checkpoint)?;
    ctx.input(&a.data)?;
    if let Some(p) = &a.prompts {
        ctx.input(p)?;
    }
    let ck = Checkpoint::read(&a.checkpoint)?;
    let data = load_frame_set(&a.data)?;
    let camera = data
        .camera_index(&a.camera)
        .ok_or_else(|| Usage(format!("no camera named '{}' in {}", a.camera, a.data.display())))?;
    let keyframe = ck.config.keyframe_for(data.frames.len())?;
    let frame = a.frame.unwrap_or(keyframe);
    if frame >= data.frames.len() {
        return Err(Usage(format!("frame {frame} out of range (0..{})", data.frames.len())).into());
    }
    let dir = ctx.out_dir()?;
    let semantic = (ck.grid.num_classes() > 0).then_some(ck.config.semantic_stride);
    let view = render_frame_view(&ck.grid, &data, keyframe, frame, camera, semantic)?;

    let stem = format!("{}_f{frame:03}", a.camera);
    let mut outputs = vec![
        dir.join(format!("{stem}_depth.pfm")),
        dir.join(format!("{stem}_depth.png")),
        dir.join(format!("{stem}_opacity.pfm")),
    ];
    write_pfm(&outputs[0], &view.depth)?;
    write_depth_png16(&outputs[1], &view.depth)?;
    write_pfm(&outputs[2], &view.opacity)?;
    if let Some(labels) = &view.labels {
        let path = dir.join(format!("{stem}_labels.png"));
        write_label_png(&path, labels, &prompt_table(a.prompts.as_deref())?.palette())?;
        outputs.push(path);
    }
    ctx.finish(&dir, &outputs)?;
    println!("rendered '{}' at frame {frame} (keyframe {keyframe}) to {}", a.camera, dir.display());
    Ok(())
}

fn read_depth(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pfm") => Ok(read_pfm(path)?),
        Some("png") => Ok(read_depth_png16(path)?),
        _ => Err(Usage(format!("{}: depth must be .pfm or .png", path.display())).into()),
    }
}

fn eval_depth(ctx: &mut Run, pred: &Path, gt: &Path) -> Result<()> {
    ctx.input(pred)?;
    ctx.input(gt)?;
    let (p, g) = (read_depth(pred)?, read_depth(gt)?);
    if p.dims() != g.dims() || p.channels() != 1 {
        return Err(Usage(format!(
            "depth maps must be single-channel and equal in size, got {:?} and {:?}",
            p.dims(),
            g.dims()
        ))
        .into());
    }
    let report = depth_metrics(p.data(), g.data(), DEPTH_CLIP)?;
    println!("{report}");
    if let Some(dir) = ctx.optional_out()? {
        let path = dir.join(REPORT_FILE);
        write_json(&path, &report)?;
        ctx.finish(&dir, &[path])?;
    }
    Ok(())
}

#[derive(Serialize)]
struct OccSweepEntry {
    threshold: f64,
    report: OccMetricsReport,
}

fn eval_occ(ctx: &mut Run, a: &crate::EvalOccArgs) -> Result<()> {
    ctx.input(&a.checkpoint)?;
    let ck = Checkpoint::read(&a.checkpoint)?;
    let oracle: VoxelLabels = match (&a.scene, &a.oracle) {
        (Some(scene_path), None) => {
            ctx.input(scene_path)?;
            let scene: SceneSpec = read_json(scene_path)?;
            let frame = match a.frame {
                Some(f) => f,
                None => ck.config.keyframe_for(scene.trajectory.len())?,
            };
            let pose = scene
                .trajectory
                .get(frame)
                .ok_or_else(|| Usage(format!("frame {frame} out of range (0..{})", scene.trajectory.len())))?;
            voxelize_occupancy(&scene, &ck.grid, pose, None)
        }
        (None, Some(path)) => {
            ctx.input(path)?;
            read_json(path)?
        }
        _ => return Err(Usage("give exactly one of --scene and --oracle".into()).into()),
    };
    if a.thresholds.iter().any(|t| !t.is_finite()) {
        return Err(Usage("thresholds must be finite".into()).into());
    }
    if ck.grid.activation() == Activation::Weight && a.thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
        log::warn!("weight-mode opacity lies in (0, 1); thresholds outside [0, 1) select all or nothing");
    }
    let classes = match &a.classes {
        Some(c) => c.clone(),
        None => {
            let mut c: Vec<u8> =
                oracle.data.iter().copied().filter(|&v| v != FREE_VOXEL && v != IGNORE_VOXEL).collect();
            c.sort_unstable();
            c.dedup();
            c
        }
    };
    let mut sweep = Vec::new();
    for &threshold in &a.thresholds {
        let pred = extract_occupancy(&ck.grid, threshold);
        let report = occupancy_metrics(&pred, &oracle, &classes)?;
        println!("threshold {threshold}\n{report}");
        sweep.push(OccSweepEntry { threshold, report });
    }
    if let Some(dir) = ctx.optional_out()? {
        let path = dir.join(REPORT_FILE);
        write_json(&path, &sweep)?;
        ctx.finish(&dir, &[path])?;
    }
    Ok(())
}

fn fuse(ctx: &mut Run, masks: &[PathBuf], prompts: Option<&Path>) -> Result<()> {
    for m in masks {
        ctx.input(m)?;
    }
    if let Some(p) = prompts {
        ctx.input(p)?;
    }
    let table = prompt_table(prompts)?;
    let palette = table.palette();
    let sets = masks
        .iter()
        .map(|m| load_mask_set(m).with_context(|| format!("loading {}", m.display())))
        .collect::<Result<Vec<_>>>()?;
    let dir = ctx.out_dir()?;
    let mut outputs = Vec::new();
    for set in &sets {
        if set.image_id.is_empty() || set.image_id.contains(['/', '\\']) || set.image_id.starts_with('.') {
            return Err(Usage(format!("image id '{}' cannot be used as a file name", set.image_id)).into());
        }
        let labels = fuse_labels(set, &table)?;
        let path = dir.join(format!("{}.png", set.image_id));
        if outputs.contains(&path) {
            return Err(Usage(format!("image id '{}' appears twice", set.image_id)).into());
        }
        write_label_png(&path, &labels, &palette)?;
        outputs.push(path);
    }
    ctx.finish(&dir, &outputs)?;
    println!("fused {} label maps into {}", outputs.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct GradcheckOutput {
    depth_density: GradCheckReport,
    depth_weight: GradCheckReport,
    loss: GradCheckReport,
}

fn gradcheck(ctx: &mut Run, fixture: &Path, seed: Option<u64>, config: Option<&Path>) -> Result<()> {
    let file = |name: &str| fixture.join(name);
    ctx.input(&file("scene.json"))?;
    let scene: SceneSpec = read_json(&file("scene.json"))?;
    let fit_cfg: FitConfig = if file("fit.json").exists() {
        ctx.input(&file("fit.json"))?;
        read_json(&file("fit.json"))?
    } else {
        FitConfig::default()
    };
    let grid = if file("perturbed.grid").exists() {
        ctx.input(&file("perturbed.grid"))?;
        read_grid(&file("perturbed.grid"))?
    } else {
        ctx.input(&file("grid.json"))?;
        read_json::<GridConfig>(&file("grid.json"))?.build()?
    };
    let check_path = config.map(Path::to_path_buf).unwrap_or_else(|| file("gradcheck.json"));
    let mut check: GradCheckConfig = if check_path.exists() {
        ctx.input(&check_path)?;
        read_json(&check_path)?
    } else {
        GradCheckConfig::default()
    };
    if let Some(s) = seed {
        check.seed = s;
    }
    let data = FrameSet::from_scene(&scene)?;
    let out = GradcheckOutput {
        depth_density: depth_gradient_check(
            Activation::Density,
            DEPTH_CHECK_RAYS,
            DEPTH_CHECK_SAMPLES,
            DEPTH_CHECK_STEP,
            DEPTH_CHECK_TOL,
            check.seed,
        )?,
        depth_weight: depth_gradient_check(
            Activation::Weight,
            DEPTH_CHECK_RAYS,
            DEPTH_CHECK_SAMPLES,
            DEPTH_CHECK_STEP,
            DEPTH_CHECK_TOL,
            check.seed,
        )?,
        loss: gradient_check(&grid, &data, &fit_cfg, &check)?,
    };
    for (name, r) in
        [("depth (density)", &out.depth_density), ("depth (weight)", &out.depth_weight), ("loss", &out.loss)]
    {
        println!(
            "{name:<16} checked {:>4} rejected {:>3} max rel err {:.3e} tolerance {:.1e} {}",
            r.checked,
            r.rejected,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(dir) = ctx.optional_out()? {
        let path = dir.join(REPORT_FILE);
        write_json(&path, &out)?;
        ctx.finish(&dir, &[path])?;
    }
    if out.depth_density.passed && out.depth_weight.passed && out.loss.passed {
        Ok(())
    } else {
        anyhow::bail!("gradient check failed")
    }
}
