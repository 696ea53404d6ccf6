//! Rendering single rays through the grid and pushing gradients back.

use nalgebra::Vector3;

use crate::error::Result;
use crate::geometry::Ray;
use crate::grid::{GridGradient, OccupancyGrid};
use crate::renderer::{
    alpha_to_value_grad, distortion_loss, render_backward, render_depth, render_semantics, weights_backward,
    RenderUpstream, RenderedPixel,
};
use crate::sampler::{sample_ray, RaySamples, SamplingMode};

/// Forward state of one ray, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub samples: RaySamples,
    /// Trilinearly interpolated raw opacity per sample.
    pub raw: Vec<f64>,
    pub pixel: RenderedPixel,
    pub semantic: Option<SemanticTrace>,
}

#[derive(Debug, Clone)]
pub(crate) struct SemanticTrace {
    pub stride: usize,
    pub samples: RaySamples,
    pub pixel: RenderedPixel,
    /// Sample-major `L_s × C`.
    pub logits: Vec<f64>,
}

impl Trace {
    /// Metric distance along the unit ray direction.
    pub fn depth(&self) -> f64 {
        self.pixel.depth
    }

    /// Weight-spread penalty in normalized ray coordinates.
    pub fn distortion(&self) -> f64 {
        distortion_loss(&self.samples.u, 1.0 / self.samples.len() as f64, &self.pixel.per_sample_weights, None)
    }
}

pub(crate) fn trace_ray(
    grid: &OccupancyGrid,
    ray: &Ray,
    mode: SamplingMode,
    seed: u64,
    semantic_stride: Option<usize>,
) -> Result<Trace> {
    let samples = sample_ray(ray, grid.contraction(), grid.voxel_size(), mode, seed)?;
    let act = grid.activation();
    let mut raw = Vec::with_capacity(samples.len());
    let mut values = Vec::with_capacity(samples.len());
    for p in &samples.points_contracted {
        let r = grid.sample_opacity_raw(&grid.stencil(p));
        raw.push(r);
        values.push(act.apply(r));
    }
    let pixel = render_depth(&samples, &values, act)?;
    let semantic = match semantic_stride {
        Some(stride) if grid.num_classes() > 0 => {
            let c = grid.num_classes();
            let sub = samples.strided(stride);
            let sub_values: Vec<f64> = samples.strided_indices(stride).map(|i| values[i]).collect();
            let mut logits = vec![0.0; sub.len() * c];
            for (k, p) in sub.points_contracted.iter().enumerate() {
                grid.sample_semantic_raw(&grid.stencil(p), &mut logits[k * c..(k + 1) * c]);
            }
            let pixel = render_semantics(&sub, &sub_values, &logits, c, act)?;
            Some(SemanticTrace { stride, samples: sub, pixel, logits })
        }
        _ => None,
    };
    Ok(Trace { samples, raw, pixel, semantic })
}

/// Per-sample gradients of one ray, scattered into the grid later so that
/// the merge order is fixed.
#[derive(Debug, Clone, Default)]
pub(crate) struct RayGrad {
    pub points: Vec<Vector3<f64>>,
    /// d/d(raw opacity) per point.
    pub opacity: Vec<f64>,
    /// Semantic points and their `C` logit gradients.
    pub sem_points: Vec<Vector3<f64>>,
    pub sem: Vec<f64>,
}

impl RayGrad {
    pub fn scatter(&self, grid: &OccupancyGrid, out: &mut GridGradient) {
        for (p, &g) in self.points.iter().zip(&self.opacity) {
            if g != 0.0 {
                out.scatter_opacity(&grid.stencil(p), g);
            }
        }
        let c = grid.num_classes();
        for (k, p) in self.sem_points.iter().enumerate() {
            out.scatter_semantic(&grid.stencil(p), &self.sem[k * c..(k + 1) * c], c);
        }
    }
}

/// Gradient of `d_depth * D + d_sem · S + d_dist * distortion` with respect
/// to the grid, expressed per sample point.
pub(crate) fn backprop_ray(
    grid: &OccupancyGrid,
    trace: &Trace,
    d_depth: f64,
    d_sem: Option<&[f64]>,
    d_dist: f64,
) -> Result<RayGrad> {
    let act = grid.activation();
    let n = trace.samples.len();
    let mut d_values = vec![0.0; n];
    if d_depth != 0.0 {
        let g = render_backward(
            &trace.samples,
            &trace.pixel,
            act,
            None,
            &RenderUpstream { depth: d_depth, semantics: None },
        )?;
        d_values.copy_from_slice(&g.values);
    }
    if d_dist != 0.0 {
        let px = &trace.pixel;
        let mut gw = vec![0.0; n];
        distortion_loss(&trace.samples.u, 1.0 / n as f64, &px.per_sample_weights, Some(&mut gw));
        gw.iter_mut().for_each(|g| *g *= d_dist);
        let mut gv = vec![0.0; n];
        weights_backward(&px.alphas, &px.transmittance, &gw, &mut gv);
        alpha_to_value_grad(&px.alphas, &trace.samples.delta, act, &mut gv);
        d_values.iter_mut().zip(&gv).for_each(|(d, g)| *d += g);
    }
    let mut out = RayGrad::default();
    if let (Some(up), Some(sem)) = (d_sem, &trace.semantic) {
        let g = render_backward(
            &sem.samples,
            &sem.pixel,
            act,
            Some(&sem.logits),
            &RenderUpstream { depth: 0.0, semantics: Some(up) },
        )?;
        for (k, i) in trace.samples.strided_indices(sem.stride).enumerate() {
            d_values[i] += g.values[k];
        }
        out.sem_points = sem.samples.points_contracted.clone();
        out.sem = g.logits;
    }
    if d_values.iter().any(|&g| g != 0.0) {
        out.points = trace.samples.points_contracted.clone();
        out.opacity = d_values.iter().zip(&trace.raw).map(|(g, &r)| g * act.derivative(r)).collect();
    }
    Ok(out)
}
