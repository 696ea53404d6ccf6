//! Forward and backward evaluation of the training objective on a set of
//! image regions ("groups").

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rayon::prelude::*;

use crate::dataset::FrameSet;
use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample_into, Image, Pose, Ray, UNCERTAIN_LABEL};
use crate::grid::{GridGradient, OccupancyGrid};
use crate::photometric::{
    clamp_states, min_reprojection, photometric_error, photometric_error_backward, softmax_cross_entropy, total_loss,
    LossBreakdown, LossConfig, MinReprojection, PixelTerms,
};
use crate::sampler::{mix_seed, SamplingMode};

use super::trace::{backprop_ray, trace_ray, RayGrad, Trace};

/// A rectangular pixel region of one camera at one frame. Pixels within
/// `margin` of the region border are rendered for SSIM context only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Group {
    pub frame: usize,
    pub camera: usize,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub margin: usize,
}

impl Group {
    fn inner(&self, x: usize, y: usize) -> bool {
        x >= self.margin && y >= self.margin && x + self.margin < self.w && y + self.margin < self.h
    }
}

/// Everything the objective depends on besides the grid.
pub(crate) struct Setup<'a> {
    pub data: &'a FrameSet,
    pub keyframe: usize,
    /// Inclusive range of frames usable as photometric sources.
    pub window: (usize, usize),
    pub loss: &'a LossConfig,
    pub sampling: SamplingMode,
    pub semantic_stride: usize,
    pub semantics: bool,
    pub seed: u64,
}

impl Setup<'_> {
    /// Keyframe-ego (grid) from frame-`f` ego.
    pub fn grid_from_ego(&self, f: usize) -> Pose {
        self.data.frames[self.keyframe].ego_pose.inverse().compose(&self.data.frames[f].ego_pose)
    }

    pub fn sources(&self, f: usize) -> Vec<usize> {
        [f.checked_sub(1), Some(f + 1)]
            .into_iter()
            .flatten()
            .filter(|&s| s >= self.window.0 && s <= self.window.1 && s < self.data.frames.len())
            .collect()
    }

    /// Ray through pixel `(x, y)` of `camera` at frame `f`, in grid coordinates.
    pub fn ray(&self, f: usize, camera: usize, x: usize, y: usize) -> Ray {
        let g = self.grid_from_ego(f);
        let r = self.data.rig[camera].generate_ray(x as f64, y as f64);
        Ray { origin: g.transform_point(&r.origin), direction: g.transform_vector(&r.direction), pixel: r.pixel }
    }
}

struct SourceWarp {
    warped: Image,
    valid: Vec<bool>,
    grad_u: Vec<f64>,
    grad_v: Vec<f64>,
    duv_dd: Vec<[f64; 2]>,
}

struct SemanticTerms {
    loss: Vec<f64>,
    mask: Vec<bool>,
    d_logits: Vec<f64>,
}

struct GroupForward {
    traces: Vec<Trace>,
    target: Image,
    sources: Vec<SourceWarp>,
    reprojection: MinReprojection,
    semantic: Option<SemanticTerms>,
    /// Sum of the weight-spread penalty over inner pixels, and their count.
    distortion: f64,
    inner: usize,
    signature: u64,
}

fn forward(grid: &OccupancyGrid, setup: &Setup<'_>, g: &Group) -> Result<GroupForward> {
    let data = setup.data;
    let cam = &data.rig[g.camera];
    let with_sem = setup.semantics && g.frame == setup.keyframe;
    let mut traces = Vec::with_capacity(g.w * g.h);
    for y in 0..g.h {
        for x in 0..g.w {
            let (px, py) = (g.x0 + x, g.y0 + y);
            let seed = mix_seed(setup.seed, &[g.frame as u64, g.camera as u64, px as u64, py as u64]);
            let ray = setup.ray(g.frame, g.camera, px, py);
            traces.push(trace_ray(grid, &ray, setup.sampling, seed, with_sem.then_some(setup.semantic_stride))?);
        }
    }
    let target = data.frames[g.frame].images[g.camera].crop(g.x0, g.y0, g.w, g.h);
    let c = target.channels();
    let n = g.w * g.h;
    let mut hasher = DefaultHasher::new();
    let mut sources = Vec::new();
    let mut losses = Vec::new();
    let mut identity = Vec::new();
    for s in setup.sources(g.frame) {
        let src = &data.frames[s].images[g.camera];
        let ego_s_from_grid = setup.grid_from_ego(s).inverse();
        let mut warp = SourceWarp {
            warped: Image::new(g.w, g.h, c),
            valid: vec![false; n],
            grad_u: vec![0.0; n * c],
            grad_v: vec![0.0; n * c],
            duv_dd: vec![[0.0; 2]; n],
        };
        for (q, tr) in traces.iter().enumerate() {
            let (x, y) = (q % g.w, q / g.w);
            let ray = setup.ray(g.frame, g.camera, g.x0 + x, g.y0 + y);
            let dir = ray.unit_direction();
            let p = ego_s_from_grid.transform_point(&(ray.origin + dir * tr.depth()));
            let (proj, jac) = cam.project_with_jacobian(&p);
            let ok = proj.valid
                && bilinear_sample_into(
                    src,
                    proj.u,
                    proj.v,
                    warp.warped.pixel_mut(x, y),
                    Some((&mut warp.grad_u[q * c..(q + 1) * c], &mut warp.grad_v[q * c..(q + 1) * c])),
                );
            warp.valid[q] = ok;
            ok.hash(&mut hasher);
            if ok {
                let d = ego_s_from_grid.transform_vector(&dir);
                warp.duv_dd[q] = [jac[0].dot(&d), jac[1].dot(&d)];
                (proj.u.floor() as i64, proj.v.floor() as i64).hash(&mut hasher);
            }
        }
        let mut loss = photometric_error(&target, &warp.warped, setup.loss)?;
        for (l, &ok) in loss.iter_mut().zip(&warp.valid) {
            if !ok {
                *l = f64::INFINITY;
            }
        }
        for (a, b) in target.data().iter().zip(warp.warped.data()) {
            ((a > b) as i8 - (a < b) as i8).hash(&mut hasher);
        }
        clamp_states(&target, &warp.warped, &setup.loss.ssim_params()).hash(&mut hasher);
        identity.push(photometric_error(&target, &src.crop(g.x0, g.y0, g.w, g.h), setup.loss)?);
        losses.push(loss);
        sources.push(warp);
    }
    if losses.is_empty() {
        return Err(Error::Config(format!("frame {} has no photometric source inside the window", g.frame)));
    }
    let mut reprojection = min_reprojection(&losses, &identity, setup.loss.automask)?;
    for q in 0..n {
        if !g.inner(q % g.w, q / g.w) {
            reprojection.mask[q] = false;
        }
    }
    reprojection.mask.hash(&mut hasher);
    reprojection.argmin.hash(&mut hasher);

    let semantic = if with_sem {
        let labels = data.frames[g.frame]
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("semantic loss requested but the frame set has no labels".into()))?;
        let labels = &labels[g.camera];
        let classes = grid.num_classes();
        let mut t = SemanticTerms { loss: vec![0.0; n], mask: vec![false; n], d_logits: vec![0.0; n * classes] };
        for q in 0..n {
            let (x, y) = (q % g.w, q / g.w);
            let label = labels.get(g.x0 + x, g.y0 + y);
            if label == UNCERTAIN_LABEL || !g.inner(x, y) {
                continue;
            }
            if label as usize >= classes {
                return Err(Error::Config(format!("label {label} exceeds the grid's {classes} classes")));
            }
            let sem = traces[q].semantic.as_ref().expect("semantic trace rendered");
            t.loss[q] = softmax_cross_entropy(
                &sem.pixel.semantics,
                label as usize,
                &mut t.d_logits[q * classes..(q + 1) * classes],
            );
            t.mask[q] = true;
        }
        Some(t)
    } else {
        None
    };
    let (mut distortion, mut inner) = (0.0, 0);
    if setup.loss.distortion > 0.0 {
        for (q, tr) in traces.iter().enumerate() {
            if g.inner(q % g.w, q / g.w) {
                distortion += tr.distortion();
                inner += 1;
            }
        }
    }
    Ok(GroupForward { traces, target, sources, reprojection, semantic, distortion, inner, signature: hasher.finish() })
}

fn backward(
    grid: &OccupancyGrid,
    setup: &Setup<'_>,
    f: &GroupForward,
    w_pe: f64,
    w_sem: f64,
    w_dist: f64,
    g: &Group,
) -> Result<Vec<RayGrad>> {
    let n = f.traces.len();
    let c = f.target.channels();
    let mut d_depth = vec![0.0; n];
    for (si, src) in f.sources.iter().enumerate() {
        let up: Vec<f64> =
            (0..n).map(|q| if f.reprojection.mask[q] && f.reprojection.argmin[q] == si { w_pe } else { 0.0 }).collect();
        if w_pe == 0.0 || up.iter().all(|&u| u == 0.0) {
            continue;
        }
        let g_img = photometric_error_backward(&f.target, &src.warped, setup.loss, &up)?;
        for q in 0..n {
            if !src.valid[q] {
                continue;
            }
            let [du, dv] = src.duv_dd[q];
            let mut acc = 0.0;
            for ch in 0..c {
                let gi = g_img.data()[q * c + ch];
                acc += gi * (src.grad_u[q * c + ch] * du + src.grad_v[q * c + ch] * dv);
            }
            d_depth[q] += acc;
        }
    }
    let classes = grid.num_classes();
    let mut d_sem = vec![0.0; classes];
    let mut out = Vec::with_capacity(n);
    for q in 0..n {
        let sem_up = match &f.semantic {
            Some(s) if s.mask[q] && w_sem != 0.0 => {
                for (o, g) in d_sem.iter_mut().zip(&s.d_logits[q * classes..(q + 1) * classes]) {
                    *o = w_sem * g;
                }
                Some(&d_sem[..])
            }
            _ => None,
        };
        let d_dist = if g.inner(q % g.w, q / g.w) { w_dist } else { 0.0 };
        out.push(backprop_ray(grid, &f.traces[q], d_depth[q], sem_up, d_dist)?);
    }
    Ok(out)
}

pub(crate) struct BatchOutcome {
    pub loss: LossBreakdown,
    pub grad: Option<GridGradient>,
    /// Hash of every discrete decision taken by the forward pass.
    pub signature: u64,
}

/// Evaluates the objective over `groups`; with `need_grad`, also its
/// gradient, merged in group and pixel order so results do not depend on
/// thread scheduling.
pub(crate) fn evaluate(
    grid: &OccupancyGrid,
    setup: &Setup<'_>,
    groups: &[Group],
    need_grad: bool,
) -> Result<BatchOutcome> {
    let fwd: Vec<GroupForward> = groups.par_iter().map(|g| forward(grid, setup, g)).collect::<Result<_>>()?;
    let pe: Vec<PixelTerms<'_>> =
        fwd.iter().map(|f| PixelTerms { loss: &f.reprojection.loss, mask: &f.reprojection.mask }).collect();
    let sem_index: Vec<Option<usize>> = {
        let mut k = 0;
        fwd.iter()
            .map(|f| {
                f.semantic.as_ref().map(|_| {
                    k += 1;
                    k - 1
                })
            })
            .collect()
    };
    let sem: Vec<PixelTerms<'_>> =
        fwd.iter().filter_map(|f| f.semantic.as_ref()).map(|s| PixelTerms { loss: &s.loss, mask: &s.mask }).collect();
    let mut loss = total_loss(&pe, &sem, setup.loss)?;
    let rays: usize = fwd.iter().map(|f| f.inner).sum();
    let mut w_dist = 0.0;
    if rays > 0 {
        loss.distortion = fwd.iter().map(|f| f.distortion).sum::<f64>() / rays as f64;
        loss.total += setup.loss.distortion * loss.distortion;
        w_dist = setup.loss.distortion / rays as f64;
    }
    let mut hasher = DefaultHasher::new();
    for f in &fwd {
        f.signature.hash(&mut hasher);
    }
    let grad = if need_grad {
        let per_group: Vec<Vec<RayGrad>> = fwd
            .par_iter()
            .enumerate()
            .map(|(i, f)| {
                let w_sem = sem_index[i].map_or(0.0, |k| loss.semantic_weights[k]);
                backward(grid, setup, f, loss.photometric_weights[i], w_sem, w_dist, &groups[i])
            })
            .collect::<Result<_>>()?;
        let mut g = grid.zero_gradient();
        for rays in &per_group {
            for r in rays {
                r.scatter(grid, &mut g);
            }
        }
        Some(g)
    } else {
        None
    };
    Ok(BatchOutcome { loss, grad, signature: hasher.finish() })
}
