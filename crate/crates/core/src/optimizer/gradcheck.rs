//! Finite-difference checks of the analytic gradients.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FrameSet;
use crate::error::{Error, Result};
use crate::grid::{Activation, OccupancyGrid};
use crate::renderer::{render_backward, render_depth, RenderUpstream};
use crate::sampler::{RaySamples, SamplingMode};

use super::batch::evaluate;
use super::trace::trace_ray;
use super::{FitConfig, Problem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Accepted parameters to compare.
    pub num_params: usize,
    /// Central-difference step on raw parameters.
    pub step: f64,
    /// Relative errors use `max(|a|, |n|, floor_fraction * max|grad|)` as
    /// denominator so that near-zero entries do not dominate.
    pub floor_fraction: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { num_params: 200, step: 1e-3, floor_fraction: 1e-3, tolerance: 5e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    /// Flat parameter index; semantic parameters follow the opacity block.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Parameters skipped because the perturbation flipped a discrete
    /// decision (pixel cell, mask, argmin, clamp or sign).
    pub rejected: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    fn from_entries(entries: Vec<GradCheckEntry>, rejected: usize, tolerance: f64) -> Self {
        let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
        Self { checked: entries.len(), rejected, max_rel_error, tolerance, passed: max_rel_error < tolerance, entries }
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    let d = a.abs().max(n.abs()).max(floor);
    if d == 0.0 {
        0.0
    } else {
        (a - n).abs() / d
    }
}

/// Compares the analytic gradient of the full objective on whole images
/// (midpoint sampling) with central differences on randomly chosen raw
/// parameters that lie in the trilinear support of some sample.
pub fn gradient_check(
    grid: &OccupancyGrid,
    data: &FrameSet,
    fit: &FitConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) || cfg.num_params == 0 {
        return Err(Error::Config("gradient check needs a positive step and parameter count".into()));
    }
    let problem = Problem::new(grid, data, fit)?;
    let setup = problem.setup(SamplingMode::Midpoint, fit.seed);
    let groups = problem.full_groups();
    let base = evaluate(grid, &setup, &groups, true)?;
    let grad = base.grad.expect("gradient requested");

    let n_opacity = grid.opacity_raw.len();
    let classes = grid.num_classes();
    let mut support = vec![false; n_opacity];
    for g in &groups {
        for y in 0..g.h {
            for x in 0..g.w {
                let ray = setup.ray(g.frame, g.camera, g.x0 + x, g.y0 + y);
                let t = trace_ray(grid, &ray, SamplingMode::Midpoint, 0, None)?;
                for p in &t.samples.points_contracted {
                    let s = grid.stencil(p);
                    for (&i, &w) in s.indices.iter().zip(&s.weights) {
                        if w > 0.0 {
                            support[i as usize] = true;
                        }
                    }
                }
            }
        }
    }
    let mut candidates: Vec<usize> = (0..n_opacity).filter(|&i| support[i]).collect();
    if problem.semantics {
        for i in 0..n_opacity {
            if support[i] {
                candidates.extend((0..classes).map(|c| n_opacity + i * classes + c));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    candidates.shuffle(&mut rng);

    let all = grad.opacity.iter().chain(&grad.semantic);
    let floor = cfg.floor_fraction * all.fold(0.0f64, |m, g| m.max(g.abs()));
    let analytic = |i: usize| if i < n_opacity { grad.opacity[i] } else { grad.semantic[i - n_opacity] };

    let mut work = grid.clone();
    let mut entries = Vec::with_capacity(cfg.num_params);
    let mut rejected = 0;
    for &i in &candidates {
        if entries.len() == cfg.num_params {
            break;
        }
        let mut probe = |delta: f64| -> Result<(f64, u64)> {
            let slot = if i < n_opacity { &mut work.opacity_raw[i] } else { &mut work.semantic_raw[i - n_opacity] };
            let old = *slot;
            *slot = old + delta;
            let out = evaluate(&work, &setup, &groups, false);
            let slot = if i < n_opacity { &mut work.opacity_raw[i] } else { &mut work.semantic_raw[i - n_opacity] };
            *slot = old;
            let out = out?;
            Ok((out.loss.total, out.signature))
        };
        let (lp, sp) = probe(cfg.step)?;
        let (lm, sm) = probe(-cfg.step)?;
        if sp != base.signature || sm != base.signature {
            rejected += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * cfg.step);
        let a = analytic(i);
        entries.push(GradCheckEntry { index: i, analytic: a, numeric, rel_error: rel_error(a, numeric, floor) });
    }
    if entries.len() < cfg.num_params {
        log::warn!(
            "gradient check compared {} of {} requested parameters ({} candidates, {} rejected)",
            entries.len(),
            cfg.num_params,
            candidates.len(),
            rejected
        );
    }
    Ok(GradCheckReport::from_entries(entries, rejected, cfg.tolerance))
}

/// Checks d(depth)/d(per-sample value) of the compositor on random rays of
/// `samples_per_ray` samples. Values are alphas in weight mode and
/// densities in density mode.
pub fn depth_gradient_check(
    mode: Activation,
    rays: usize,
    samples_per_ray: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for r in 0..rays {
        let mut t = Vec::with_capacity(samples_per_ray);
        let mut acc = rng.random_range(0.1..1.0);
        for _ in 0..samples_per_ray {
            t.push(acc);
            acc += rng.random_range(0.05..0.5);
        }
        let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        delta.push(*delta.last().unwrap_or(&0.1));
        let samples = RaySamples {
            u: vec![0.0; samples_per_ray],
            t,
            delta,
            points_contracted: vec![Vector3::zeros(); samples_per_ray],
            r_b: 1.0,
        };
        let values: Vec<f64> = (0..samples_per_ray)
            .map(|_| match mode {
                Activation::Weight => rng.random_range(0.02..0.5),
                Activation::Density => rng.random_range(0.05..2.0),
            })
            .collect();
        let px = render_depth(&samples, &values, mode)?;
        let g = render_backward(&samples, &px, mode, None, &RenderUpstream { depth: 1.0, semantics: None })?;
        let floor = 1e-3 * g.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut v = values.clone();
        for k in 0..samples_per_ray {
            v[k] = values[k] + step;
            let dp = render_depth(&samples, &v, mode)?.depth;
            v[k] = values[k] - step;
            let dm = render_depth(&samples, &v, mode)?.depth;
            v[k] = values[k];
            let numeric = (dp - dm) / (2.0 * step);
            entries.push(GradCheckEntry {
                index: r * samples_per_ray + k,
                analytic: g.values[k],
                numeric,
                rel_error: rel_error(g.values[k], numeric, floor),
            });
        }
    }
    Ok(GradCheckReport::from_entries(entries, 0, tolerance))
}
