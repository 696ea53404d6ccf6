//! Fitting a grid to posed images: minibatch selection, the update rule and
//! the training loop, plus full-image rendering and a gradient checker.

mod batch;
mod checkpoint;
mod gradcheck;
mod trace;

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contraction::ContractionParams;
use crate::dataset::FrameSet;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Image, LabelMap, Pose};
use crate::grid::{Activation, GridGradient, OccupancyGrid};
use crate::photometric::{LossBreakdown, LossConfig};
use crate::sampler::{mix_seed, SamplingMode};

use batch::{evaluate, Group, Setup};

pub use checkpoint::Checkpoint;
pub use gradcheck::{depth_gradient_check, gradient_check, GradCheckConfig, GradCheckEntry, GradCheckReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Loss-bearing pixels per step, drawn as square patches.
    pub rays_per_step: usize,
    pub patch_size: usize,
    /// Frames whose depth is rendered each step, centered on the keyframe.
    pub rendered_frames: usize,
    /// Frames available as photometric sources, centered on the keyframe.
    pub window: usize,
    /// Semantic rendering keeps every n-th depth sample.
    pub semantic_stride: usize,
    pub seed: u64,
    /// Defaults to the middle frame.
    pub keyframe: Option<usize>,
    pub sampling: SamplingMode,
    pub loss: LossConfig,
    /// Progress is logged every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rays_per_step: 768,
            patch_size: 8,
            rendered_frames: 3,
            window: 5,
            semantic_stride: 4,
            seed: 0,
            keyframe: None,
            sampling: SamplingMode::Stratified,
            loss: LossConfig::default(),
            log_every: 100,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let positive = [
            ("steps", self.steps),
            ("rays_per_step", self.rays_per_step),
            ("patch_size", self.patch_size),
            ("rendered_frames", self.rendered_frames),
            ("window", self.window),
            ("semantic_stride", self.semantic_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.rendered_frames % 2 == 0 || self.window % 2 == 0 || self.window < self.rendered_frames + 2 {
            return Err(Error::Config(
                "rendered_frames and window must be odd with window >= rendered_frames + 2".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }

    /// The keyframe used for a frame set of `frames` frames.
    pub fn keyframe_for(&self, frames: usize) -> Result<usize> {
        let k = self.keyframe.unwrap_or(frames / 2);
        let half = self.window / 2;
        if k < half || k + half >= frames {
            return Err(Error::Config(format!(
                "keyframe {k} needs {half} frames on each side for a {}-frame window; the frame set has {frames}",
                self.window
            )));
        }
        Ok(k)
    }
}

/// Grid geometry for a fit, in keyframe ego coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub inside_dims: [usize; 3],
    pub inside_min: [f64; 3],
    pub inside_max: [f64; 3],
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub num_classes: usize,
}

fn default_alpha() -> f64 {
    0.667
}

impl GridConfig {
    pub fn build(&self) -> Result<OccupancyGrid> {
        let c = ContractionParams::new(self.alpha, Vector3::from(self.inside_min), Vector3::from(self.inside_max))?;
        OccupancyGrid::for_inside_dims(self.inside_dims, self.num_classes, c, self.activation)
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub photometric: f64,
    pub semantic: f64,
    pub distortion: f64,
    pub total: f64,
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut s = String::from("step,L_pe,L_sem,L_dist,total\n");
    for r in log {
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            r.step, r.photometric, r.semantic, r.distortion, r.total
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Adam or plain gradient descent on the raw grid parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: GridGradient,
    v: GridGradient,
}

impl Optimizer {
    pub fn new(grid: &OccupancyGrid, cfg: &FitConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: grid.zero_gradient(),
            v: grid.zero_gradient(),
        }
    }

    pub fn update(&mut self, grid: &mut OccupancyGrid, grad: &GridGradient) {
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in grid.opacity_raw.iter_mut().zip(&grad.opacity) {
                    *p -= lr * g;
                }
                for (p, g) in grid.semantic_raw.iter_mut().zip(&grad.semantic) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let c1 = 1.0 - b1.powi(self.step);
                let c2 = 1.0 - b2.powi(self.step);
                let apply = |params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64]| {
                    for i in 0..params.len() {
                        let g = grads[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                };
                apply(&mut grid.opacity_raw, &grad.opacity, &mut self.m.opacity, &mut self.v.opacity);
                apply(&mut grid.semantic_raw, &grad.semantic, &mut self.m.semantic, &mut self.v.semantic);
            }
        }
    }
}

/// Fitting context shared by the loop, evaluation and gradient checks.
struct Problem<'a> {
    data: &'a FrameSet,
    cfg: &'a FitConfig,
    keyframe: usize,
    targets: Vec<usize>,
    cameras: Vec<usize>,
    semantics: bool,
}

impl<'a> Problem<'a> {
    fn new(grid: &OccupancyGrid, data: &'a FrameSet, cfg: &'a FitConfig) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let keyframe = cfg.keyframe_for(data.frames.len())?;
        let r = cfg.rendered_frames / 2;
        let targets = (keyframe - r..=keyframe + r).collect();
        let cameras: Vec<usize> = (0..data.rig.len()).filter(|&c| !data.rig[c].held_out).collect();
        if cameras.is_empty() {
            return Err(Error::Config("every camera is held out".into()));
        }
        let semantics = cfg.loss.lambda > 0.0;
        if semantics && (!data.has_labels() || grid.num_classes() == 0) {
            return Err(Error::Config("lambda > 0 needs label maps and a grid with semantic classes".into()));
        }
        Ok(Self { data, cfg, keyframe, targets, cameras, semantics })
    }

    fn setup(&self, sampling: SamplingMode, seed: u64) -> Setup<'_> {
        let half = self.cfg.window / 2;
        Setup {
            data: self.data,
            keyframe: self.keyframe,
            window: (self.keyframe - half, self.keyframe + half),
            loss: &self.cfg.loss,
            sampling,
            semantic_stride: self.cfg.semantic_stride,
            semantics: self.semantics,
            seed,
        }
    }

    fn keys(&self) -> Vec<(usize, usize)> {
        self.targets.iter().flat_map(|&f| self.cameras.iter().map(move |&c| (f, c))).collect()
    }

    /// Random patches for one step, spread evenly over (frame, camera) pairs.
    fn patches(&self, step: usize) -> Vec<Group> {
        let keys = self.keys();
        let p = self.cfg.patch_size;
        let margin = self.cfg.loss.ssim_window / 2;
        let count = self.cfg.rays_per_step.div_ceil(p * p);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, &[step as u64, 0x9a7c]));
        let offset = rng.random_range(0..keys.len());
        (0..count)
            .map(|j| {
                let (frame, camera) = keys[(j + offset) % keys.len()];
                let cam = &self.data.rig[camera];
                let (s, m) = if cam.width >= p + 2 * margin && cam.height >= p + 2 * margin {
                    (p + 2 * margin, margin)
                } else {
                    (cam.width.min(cam.height), 0)
                };
                let x0 = rng.random_range(0..=cam.width - s.min(cam.width));
                let y0 = rng.random_range(0..=cam.height - s.min(cam.height));
                Group { frame, camera, x0, y0, w: s.min(cam.width), h: s.min(cam.height), margin: m }
            })
            .collect()
    }

    /// Whole images of every rendered frame and training camera.
    fn full_groups(&self) -> Vec<Group> {
        self.keys()
            .into_iter()
            .map(|(frame, camera)| {
                let cam = &self.data.rig[camera];
                Group { frame, camera, x0: 0, y0: 0, w: cam.width, h: cam.height, margin: 0 }
            })
            .collect()
    }
}

/// Deterministic full-image objective (midpoint sampling).
pub fn evaluate_loss(grid: &OccupancyGrid, data: &FrameSet, cfg: &FitConfig) -> Result<LossBreakdown> {
    let problem = Problem::new(grid, data, cfg)?;
    let setup = problem.setup(SamplingMode::Midpoint, cfg.seed);
    Ok(evaluate(grid, &setup, &problem.full_groups(), false)?.loss)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub grid: OccupancyGrid,
    pub log: Vec<LossRecord>,
    pub keyframe: usize,
}

/// Runs `cfg.steps` minibatch updates. The loss of each step is recorded
/// before its update. `on_step` sees every record as it is produced.
pub fn fit(
    mut grid: OccupancyGrid,
    data: &FrameSet,
    cfg: &FitConfig,
    mut on_step: impl FnMut(&LossRecord, &OccupancyGrid),
) -> Result<FitResult> {
    let problem = Problem::new(&grid, data, cfg)?;
    let mut opt = Optimizer::new(&grid, cfg);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let groups = problem.patches(step);
        let setup = problem.setup(cfg.sampling, mix_seed(cfg.seed, &[step as u64]));
        let out = evaluate(&grid, &setup, &groups, true)?;
        let rec = LossRecord {
            step,
            photometric: out.loss.photometric,
            semantic: out.loss.semantic,
            distortion: out.loss.distortion,
            total: out.loss.total,
        };
        if !rec.total.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss is {}", rec.total) });
        }
        let grad = out.grad.expect("gradient requested");
        if grad.opacity.iter().chain(&grad.semantic).any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, detail: "non-finite gradient".into() });
        }
        opt.update(&mut grid, &grad);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("step {step}: L_pe {:.5} L_sem {:.5} total {:.5}", rec.photometric, rec.semantic, rec.total);
        }
        on_step(&rec, &grid);
        log.push(rec);
    }
    Ok(FitResult { grid, log, keyframe: problem.keyframe })
}

/// Depth, opacity and (optionally) labels rendered for a whole camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    /// Camera z-depth.
    pub depth: Image,
    pub opacity: Image,
    pub labels: Option<LabelMap>,
}

/// Renders a camera placed by `grid_from_ego` (its ego pose relative to the
/// grid frame) with midpoint sampling.
pub fn render_view(
    grid: &OccupancyGrid,
    cam: &CameraModel,
    grid_from_ego: &Pose,
    semantic_stride: Option<usize>,
) -> Result<RenderedView> {
    let (w, h) = (cam.width, cam.height);
    let rows: Vec<Vec<(f64, f64, u8)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let r = cam.generate_ray(x as f64, y as f64);
                    let ray = crate::geometry::Ray {
                        origin: grid_from_ego.transform_point(&r.origin),
                        direction: grid_from_ego.transform_vector(&r.direction),
                        pixel: r.pixel,
                    };
                    let t = trace::trace_ray(grid, &ray, SamplingMode::Midpoint, 0, semantic_stride)?;
                    let label = t.semantic.as_ref().map_or(0, |s| {
                        let v = &s.pixel.semantics;
                        (0..v.len()).fold(0, |b, k| if v[k] > v[b] { k } else { b }) as u8
                    });
                    Ok((t.depth() / ray.direction.norm(), t.pixel.accumulated_opacity, label))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut depth = Image::new(w, h, 1);
    let mut opacity = Image::new(w, h, 1);
    let mut labels = LabelMap::filled(w, h, 0);
    for (y, row) in rows.iter().enumerate() {
        for (x, &(d, o, l)) in row.iter().enumerate() {
            depth.set(x, y, 0, d);
            opacity.set(x, y, 0, o);
            labels.set(x, y, l);
        }
    }
    let labels = (semantic_stride.is_some() && grid.num_classes() > 0).then_some(labels);
    Ok(RenderedView { depth, opacity, labels })
}

/// Renders camera `camera` of frame `frame`, with the grid anchored at
/// `keyframe`.
pub fn render_frame_view(
    grid: &OccupancyGrid,
    data: &FrameSet,
    keyframe: usize,
    frame: usize,
    camera: usize,
    semantic_stride: Option<usize>,
) -> Result<RenderedView> {
    if keyframe >= data.frames.len() || frame >= data.frames.len() || camera >= data.rig.len() {
        return Err(Error::InvalidParameter("frame or camera index out of range".into()));
    }
    let pose = data.frames[keyframe].ego_pose.inverse().compose(&data.frames[frame].ego_pose);
    render_view(grid, &data.rig[camera], &pose, semantic_stride)
}
