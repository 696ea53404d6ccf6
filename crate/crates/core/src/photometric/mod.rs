//! Photometric self-supervision: warping, SSIM + L1 error, minimum
//! reprojection with auto-masking, and the combined objective.

mod ssim;
mod warp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Image;

pub use ssim::{ssim_map, SsimParams};
pub use warp::{warp_adjacent, WarpResult};

pub(crate) use ssim::clamp_states;
use ssim::{moments, ssim_from_moments, Windows};

/// How per-pixel losses from several views are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraReduction {
    /// Mean over each view's valid pixels, then summed over views.
    #[default]
    MeanThenSum,
    /// Single mean over all valid pixels of all views.
    PixelMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda: f64,
    pub ssim_window: usize,
    pub c1: f64,
    pub c2: f64,
    pub automask: bool,
    pub camera_reduction: CameraReduction,
    /// Weight of the per-ray weight-spread penalty, averaged over rendered
    /// rays. 0 disables it.
    pub distortion: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.85,
            lambda: 0.05,
            ssim_window: 3,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            automask: true,
            camera_reduction: CameraReduction::MeanThenSum,
            distortion: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.distortion >= 0.0) || !self.distortion.is_finite() {
            return Err(Error::Config(format!("distortion must be finite and >= 0, got {}", self.distortion)));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!("ssim_window must be odd and >= 3, got {}", self.ssim_window)));
        }
        if !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::Config("SSIM constants must be positive".into()));
        }
        Ok(())
    }

    pub fn ssim_params(&self) -> SsimParams {
        SsimParams { window: self.ssim_window, c1: self.c1, c2: self.c2 }
    }
}

fn check_pair(target: &Image, recon: &Image, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if !target.same_shape(recon) {
        let (w, h, c) = target.dims();
        let (w2, h2, c2) = recon.dims();
        return Err(Error::mismatch(format!("{w}x{h}x{c}"), format!("{w2}x{h2}x{c2}")));
    }
    if target.width() < cfg.ssim_window / 2 + 1 || target.height() < cfg.ssim_window / 2 + 1 {
        return Err(Error::InvalidParameter("image smaller than the SSIM window".into()));
    }
    Ok(())
}

/// Per-pixel `(β/2)(1 − SSIM) + (1 − β)·|I − Î|`, channel-averaged.
pub fn photometric_error(target: &Image, recon: &Image, cfg: &LossConfig) -> Result<Vec<f64>> {
    check_pair(target, recon, cfg)?;
    let (w, h, c) = target.dims();
    let ssim = ssim_map(target, recon, &cfg.ssim_params());
    let mut out = vec![0.0; w * h];
    for (i, (o, s)) in out.iter_mut().zip(&ssim).enumerate() {
        let l1: f64 =
            (0..c).map(|ch| (target.data()[i * c + ch] - recon.data()[i * c + ch]).abs()).sum::<f64>() / c as f64;
        *o = 0.5 * cfg.beta * (1.0 - s) + (1.0 - cfg.beta) * l1;
    }
    Ok(out)
}

/// Gradient of `Σ_p upstream[p]·loss[p]` with respect to `recon`.
///
/// Pixels whose upstream weight is zero are skipped, so masked pixels cost
/// nothing. Clamped SSIM values contribute no gradient, and the L1 kink uses
/// `sign(0) = 0`.
pub fn photometric_error_backward(target: &Image, recon: &Image, cfg: &LossConfig, upstream: &[f64]) -> Result<Image> {
    check_pair(target, recon, cfg)?;
    let (w, h, c) = target.dims();
    if upstream.len() != w * h {
        return Err(Error::mismatch(w * h, upstream.len()));
    }
    let p = cfg.ssim_params();
    let win = Windows::new(w, h, cfg.ssim_window);
    let mut grad = Image::new(w, h, c);
    let l1_scale = (1.0 - cfg.beta) / c as f64;
    let ssim_scale = -0.5 * cfg.beta / c as f64;
    for y in 0..h {
        for x in 0..w {
            let g = upstream[y * w + x];
            if g == 0.0 {
                continue;
            }
            for ch in 0..c {
                let diff = recon.get(x, y, ch) - target.get(x, y, ch);
                if diff != 0.0 {
                    let v = grad.get(x, y, ch) + g * l1_scale * diff.signum();
                    grad.set(x, y, ch, v);
                }
                if cfg.beta == 0.0 {
                    continue;
                }
                let m = moments(target, recon, &win, x, y, ch);
                let (s, d) = ssim_from_moments(&m, &p);
                if !(s > 0.0 && s < 1.0) {
                    continue;
                }
                let n = (win.xs[x].len() * win.ys[y].len()) as f64;
                let k = g * ssim_scale / n;
                for &yy in &win.ys[y] {
                    for &xx in &win.xs[x] {
                        let dv = d[0] + 2.0 * d[1] * recon.get(xx, yy, ch) + d[2] * target.get(xx, yy, ch);
                        let v = grad.get(xx, yy, ch) + k * dv;
                        grad.set(xx, yy, ch, v);
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Output of [`min_reprojection`].
#[derive(Debug, Clone, PartialEq)]
pub struct MinReprojection {
    pub loss: Vec<f64>,
    pub mask: Vec<bool>,
    /// Index of the source achieving the minimum (0 where none is finite).
    pub argmin: Vec<usize>,
}

/// Per-pixel minimum over sources with optional auto-masking.
///
/// Invalid warped pixels are expected as `f64::INFINITY`. A pixel is kept
/// when its minimum is finite and, with auto-masking, strictly below the
/// minimum identity loss. Ties resolve to the lowest source index.
pub fn min_reprojection(losses: &[Vec<f64>], identity_losses: &[Vec<f64>], automask: bool) -> Result<MinReprojection> {
    let first = losses.first().ok_or_else(|| Error::InvalidParameter("at least one source frame required".into()))?;
    let n = first.len();
    if let Some(bad) = losses.iter().chain(identity_losses).find(|l| l.len() != n) {
        return Err(Error::mismatch(n, bad.len()));
    }
    let mut out = MinReprojection { loss: vec![0.0; n], mask: vec![false; n], argmin: vec![0; n] };
    for i in 0..n {
        let (mut best, mut arg) = (f64::INFINITY, 0);
        for (s, l) in losses.iter().enumerate() {
            if l[i] < best {
                best = l[i];
                arg = s;
            }
        }
        let mut keep = best.is_finite();
        if keep && automask && !identity_losses.is_empty() {
            let id = identity_losses.iter().map(|l| l[i]).fold(f64::INFINITY, f64::min);
            keep = best < id;
        }
        out.loss[i] = if best.is_finite() { best } else { 0.0 };
        out.mask[i] = keep;
        out.argmin[i] = arg;
    }
    Ok(out)
}

/// Softmax cross-entropy of `logits` against `label`; writes d/dlogits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (g, &l) in grad.iter_mut().zip(logits) {
        *g = (l - max).exp();
        z += *g;
    }
    for g in grad.iter_mut() {
        *g /= z;
    }
    let loss = -(grad[label].ln());
    grad[label] -= 1.0;
    loss
}

/// One view's per-pixel loss map with its validity mask.
#[derive(Debug, Clone, Copy)]
pub struct PixelTerms<'a> {
    pub loss: &'a [f64],
    pub mask: &'a [bool],
}

/// Scalar objective and the per-pixel weights `d total / d loss[p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub photometric: f64,
    pub semantic: f64,
    /// One weight per photometric view, applied to each of its valid pixels.
    pub photometric_weights: Vec<f64>,
    /// Same for semantic views, already scaled by λ.
    pub semantic_weights: Vec<f64>,
    /// Mean weight-spread penalty (unweighted); filled in by the caller
    /// that renders the rays.
    pub distortion: f64,
}

fn reduce(views: &[PixelTerms<'_>], mode: CameraReduction, what: &'static str) -> Result<(f64, Vec<f64>)> {
    let mut counts = Vec::with_capacity(views.len());
    for v in views {
        if v.loss.len() != v.mask.len() {
            return Err(Error::mismatch(v.loss.len(), v.mask.len()));
        }
        counts.push(v.mask.iter().filter(|&&m| m).count());
    }
    let all: usize = counts.iter().sum();
    if all == 0 {
        if !views.is_empty() {
            log::warn!("no valid pixels for the {what} loss; contributing zero");
        }
        return Ok((0.0, vec![0.0; views.len()]));
    }
    let weights: Vec<f64> = counts
        .iter()
        .map(|&k| match mode {
            CameraReduction::MeanThenSum if k > 0 => 1.0 / k as f64,
            CameraReduction::MeanThenSum => 0.0,
            CameraReduction::PixelMean => 1.0 / all as f64,
        })
        .collect();
    let mut total = 0.0;
    for (v, w) in views.iter().zip(&weights) {
        let mut s = 0.0;
        for (&l, &m) in v.loss.iter().zip(v.mask) {
            if m {
                if !l.is_finite() {
                    return Err(Error::NonFinite(what));
                }
                s += l;
            }
        }
        total += s * w;
    }
    Ok((total, weights))
}

/// `Σ_i L_pe^i + λ·L_sem^i` over views, each averaged over its valid pixels.
pub fn total_loss(
    photometric: &[PixelTerms<'_>],
    semantic: &[PixelTerms<'_>],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let (pe, pw) = reduce(photometric, cfg.camera_reduction, "photometric")?;
    let (se, mut sw) = if cfg.lambda > 0.0 {
        reduce(semantic, cfg.camera_reduction, "semantic")?
    } else {
        (0.0, vec![0.0; semantic.len()])
    };
    sw.iter_mut().for_each(|w| *w *= cfg.lambda);
    Ok(LossBreakdown {
        total: pe + cfg.lambda * se,
        photometric: pe,
        semantic: se,
        photometric_weights: pw,
        semantic_weights: sw,
        distortion: 0.0,
    })
}
