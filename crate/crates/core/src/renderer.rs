//! Volume rendering of depth and semantics along sampled rays.
//!
//! Two modes share one compositing core:
//! - density: `alpha_k = 1 - exp(-sigma_k * delta_k)`, transmittance from the
//!   running sum of `sigma * delta`;
//! - weight: the per-sample alpha is predicted directly and transmittance is
//!   the running product of `1 - alpha`.
//!
//! `w_k = T_k * alpha_k`, depth `D = sum_k w_k t_k` (not normalized by the
//! accumulated opacity unless asked for).

use crate::error::{Error, Result};
use crate::grid::Activation;
use crate::sampler::RaySamples;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPixel {
    /// Expected distance along the unit ray direction, in meters.
    pub depth: f64,
    /// Accumulated pre-softmax logits (empty when not rendered).
    pub semantics: Vec<f64>,
    pub accumulated_opacity: f64,
    pub per_sample_weights: Vec<f64>,
    /// `T_k` for each sample.
    pub transmittance: Vec<f64>,
    /// Per-sample alpha.
    pub alphas: Vec<f64>,
}

impl RenderedPixel {
    /// `D / sum(w)`, or 0 for an empty ray.
    pub fn normalized_depth(&self) -> f64 {
        if self.accumulated_opacity > 0.0 {
            self.depth / self.accumulated_opacity
        } else {
            0.0
        }
    }

    /// Transmittance left after the last sample.
    pub fn final_transmittance(&self) -> f64 {
        1.0 - self.accumulated_opacity
    }
}

/// Per-sample alphas from mode-specific values (`sigma >= 0` or `alpha`).
pub fn alphas_from_values(values: &[f64], delta: &[f64], mode: Activation, out: &mut [f64]) {
    match mode {
        Activation::Weight => out.copy_from_slice(values),
        Activation::Density => {
            for k in 0..values.len() {
                out[k] = -(-values[k] * delta[k]).exp_m1();
            }
        }
    }
}

/// Fills transmittance and weights; returns accumulated opacity.
pub fn composite(
    values: &[f64],
    delta: &[f64],
    mode: Activation,
    alphas: &mut [f64],
    trans: &mut [f64],
    weights: &mut [f64],
) -> f64 {
    alphas_from_values(values, delta, mode, alphas);
    match mode {
        Activation::Density => {
            let mut optical = 0.0f64;
            for k in 0..values.len() {
                trans[k] = (-optical).exp();
                weights[k] = trans[k] * alphas[k];
                optical += values[k] * delta[k];
            }
            1.0 - (-optical).exp()
        }
        Activation::Weight => {
            let mut t = 1.0;
            for k in 0..values.len() {
                trans[k] = t;
                weights[k] = t * alphas[k];
                t *= 1.0 - alphas[k];
            }
            1.0 - t
        }
    }
}

fn check_values(samples: &RaySamples, values: &[f64], mode: Activation) -> Result<()> {
    if values.len() != samples.len() {
        return Err(Error::mismatch(samples.len(), values.len()));
    }
    for &v in values {
        if v.is_nan() {
            return Err(Error::NonFinite("render input"));
        }
        let ok = match mode {
            Activation::Density => v >= 0.0,
            Activation::Weight => (0.0..=1.0).contains(&v),
        };
        if !ok {
            return Err(Error::InvalidParameter(format!("render input {v} out of range for {mode:?} mode")));
        }
    }
    Ok(())
}

pub fn render_depth(samples: &RaySamples, values: &[f64], mode: Activation) -> Result<RenderedPixel> {
    check_values(samples, values, mode)?;
    let n = values.len();
    let (mut alphas, mut trans, mut weights) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let acc = composite(values, &samples.delta, mode, &mut alphas, &mut trans, &mut weights);
    let depth = weights.iter().zip(&samples.t).map(|(w, t)| w * t).sum();
    Ok(RenderedPixel {
        depth,
        semantics: Vec::new(),
        accumulated_opacity: acc,
        per_sample_weights: weights,
        transmittance: trans,
        alphas,
    })
}

/// `S_hat = sum_k w_k S_k` with `logits` laid out sample-major (`L x C`).
pub fn render_semantics(
    samples: &RaySamples,
    values: &[f64],
    logits: &[f64],
    classes: usize,
    mode: Activation,
) -> Result<RenderedPixel> {
    if logits.len() != samples.len() * classes {
        return Err(Error::mismatch(format!("{} x {classes} logits", samples.len()), logits.len()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("semantic logits"));
    }
    let mut px = render_depth(samples, values, mode)?;
    let mut out = vec![0.0; classes];
    for (k, w) in px.per_sample_weights.iter().enumerate() {
        for c in 0..classes {
            out[c] += w * logits[k * classes + c];
        }
    }
    px.semantics = out;
    Ok(px)
}

/// Given `g_k = dL/dw_k`, writes `dL/dalpha_k` using the suffix recursion
/// `R_{k} = g_{k+1} alpha_{k+1} + (1 - alpha_{k+1}) R_{k+1}`, so that
/// `dL/dalpha_k = T_k (g_k - R_k)` without dividing by `1 - alpha`.
pub fn weights_backward(alphas: &[f64], trans: &[f64], grad_weights: &[f64], out: &mut [f64]) {
    let mut r = 0.0;
    for k in (0..alphas.len()).rev() {
        out[k] = trans[k] * (grad_weights[k] - r);
        r = grad_weights[k] * alphas[k] + (1.0 - alphas[k]) * r;
    }
}

/// Chains `dL/dalpha` to `dL/dvalue` in place.
pub fn alpha_to_value_grad(alphas: &[f64], delta: &[f64], mode: Activation, grad: &mut [f64]) {
    if mode == Activation::Density {
        for k in 0..grad.len() {
            grad[k] *= delta[k] * (1.0 - alphas[k]);
        }
    }
}

/// Upstream gradients for one rendered pixel.
#[derive(Debug, Clone, Default)]
pub struct RenderUpstream<'a> {
    pub depth: f64,
    /// `dL/dS_hat`, length `C`.
    pub semantics: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    /// `dL/dsigma_k` (density) or `dL/dalpha_k` (weight).
    pub values: Vec<f64>,
    /// `dL/dt_k` with the intervals held fixed.
    pub t: Vec<f64>,
    /// `dL/dS_k`, sample-major `L x C` (empty without semantic upstream).
    pub logits: Vec<f64>,
}

pub fn render_backward(
    samples: &RaySamples,
    pixel: &RenderedPixel,
    mode: Activation,
    logits: Option<&[f64]>,
    upstream: &RenderUpstream<'_>,
) -> Result<RenderGradients> {
    let n = samples.len();
    if pixel.per_sample_weights.len() != n {
        return Err(Error::mismatch(n, pixel.per_sample_weights.len()));
    }
    let mut gw: Vec<f64> = samples.t.iter().map(|t| upstream.depth * t).collect();
    let mut d_logits = Vec::new();
    if let Some(up) = upstream.semantics {
        let logits = logits.ok_or_else(|| Error::InvalidParameter("semantic upstream without logits".into()))?;
        let c = up.len();
        if logits.len() != n * c {
            return Err(Error::mismatch(n * c, logits.len()));
        }
        d_logits = vec![0.0; n * c];
        for k in 0..n {
            let w = pixel.per_sample_weights[k];
            for j in 0..c {
                gw[k] += up[j] * logits[k * c + j];
                d_logits[k * c + j] = w * up[j];
            }
        }
    }
    let mut values = vec![0.0; n];
    weights_backward(&pixel.alphas, &pixel.transmittance, &gw, &mut values);
    alpha_to_value_grad(&pixel.alphas, &samples.delta, mode, &mut values);
    let t = pixel.per_sample_weights.iter().map(|w| upstream.depth * w).collect();
    Ok(RenderGradients { values, t, logits: d_logits })
}

/// Weight-spread penalty over a ray with ascending normalized positions `u`
/// and equal interval width `width`:
/// `sum_ij w_i w_j |u_i - u_j| + width / 3 * sum_i w_i^2`.
/// Small when the weights concentrate on one short stretch of the ray.
/// Writes `d/dw` into `grad` when given. Linear in the number of samples.
pub fn distortion_loss(u: &[f64], width: f64, weights: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let (w_tot, s_tot): (f64, f64) = weights.iter().zip(u).fold((0.0, 0.0), |(a, b), (w, u)| (a + w, b + w * u));
    let (mut w_lo, mut s_lo) = (0.0, 0.0);
    let mut pair = 0.0;
    let mut sq = 0.0;
    let mut g = grad;
    for k in 0..weights.len() {
        let (w, x) = (weights[k], u[k]);
        // sum_j w_j |u_k - u_j|
        let spread = x * w_lo - s_lo + (s_tot - s_lo - w * x) - x * (w_tot - w_lo - w);
        pair += w * spread;
        sq += w * w;
        if let Some(g) = g.as_deref_mut() {
            g[k] = 2.0 * spread + 2.0 * width / 3.0 * w;
        }
        w_lo += w;
        s_lo += w * x;
    }
    pair + width / 3.0 * sq
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples_from_t(t: Vec<f64>) -> RaySamples {
        let n = t.len();
        let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        delta.push(if n >= 2 { t[n - 1] - t[n - 2] } else { 0.0 });
        RaySamples { u: vec![0.0; n], points_contracted: vec![nalgebra::Vector3::zeros(); n], delta, t, r_b: 1.0 }
    }

    fn random_ray(rng: &mut ChaCha8Rng, n: usize) -> (RaySamples, Vec<f64>) {
        let mut t = 0.1;
        let ts: Vec<f64> = (0..n)
            .map(|_| {
                t += rng.random_range(0.01..0.5);
                t
            })
            .collect();
        let sigma = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        (samples_from_t(ts), sigma)
    }

    #[test]
    fn distortion_matches_double_loop_and_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 24;
        let mut u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        u.sort_by(f64::total_cmp);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.2)).collect();
        let width = 1.0 / n as f64;
        let literal = |w: &[f64]| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += w[i] * w[j] * (u[i] - u[j]).abs();
                }
                acc += width / 3.0 * w[i] * w[i];
            }
            acc
        };
        let mut g = vec![0.0; n];
        let v = distortion_loss(&u, width, &w, Some(&mut g));
        assert_relative_eq!(v, literal(&w), max_relative = 1e-12);
        let h = 1e-6;
        for k in 0..n {
            let mut wp = w.clone();
            wp[k] += h;
            let mut wm = w.clone();
            wm[k] -= h;
            assert_relative_eq!(g[k], (literal(&wp) - literal(&wm)) / (2.0 * h), max_relative = 1e-6, epsilon = 1e-9);
        }
        // one concentrated sample beats the same mass spread out
        let mut spike = vec![0.0; n];
        spike[5] = 1.0;
        let flat = vec![1.0 / n as f64; n];
        assert!(distortion_loss(&u, width, &spike, None) < distortion_loss(&u, width, &flat, None));
    }

    /// Literal double loop over the compositing sum, used as an independent reference.
    fn literal_depth(s: &RaySamples, sigma: &[f64]) -> (f64, f64) {
        let mut d = 0.0;
        let mut wsum = 0.0;
        for k in 0..s.len() {
            let mut optical = 0.0;
            for kp in 0..k {
                optical += sigma[kp] * s.delta[kp];
            }
            let w = (-optical).exp() * (1.0 - (-sigma[k] * s.delta[k]).exp());
            d += w * s.t[k];
            wsum += w;
        }
        (d, wsum)
    }

    #[test]
    fn opaque_sample_gives_its_distance() {
        let s = samples_from_t(vec![3.0, 7.5, 9.0]);
        let px = render_depth(&s, &[0.0, 1.0, 0.0], Activation::Weight).unwrap();
        assert_eq!(px.depth, 7.5);
        assert_eq!(px.accumulated_opacity, 1.0);
    }

    #[test]
    fn ln2_two_sample_fixture() {
        let s = RaySamples {
            u: vec![0.0; 2],
            t: vec![1.0, 2.0],
            delta: vec![1.0, 1.0],
            points_contracted: vec![nalgebra::Vector3::zeros(); 2],
            r_b: 1.0,
        };
        let ln2 = std::f64::consts::LN_2;
        let px = render_depth(&s, &[ln2, ln2], Activation::Density).unwrap();
        assert_relative_eq!(px.per_sample_weights[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(px.per_sample_weights[1], 0.25, epsilon = 1e-15);
        assert_relative_eq!(px.depth, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_scene() {
        let s = samples_from_t(vec![1.0, 2.0, 4.0]);
        for mode in [Activation::Weight, Activation::Density] {
            let px = render_depth(&s, &[0.0; 3], mode).unwrap();
            assert_eq!(px.depth, 0.0);
            assert_eq!(px.accumulated_opacity, 0.0);
            assert_eq!(px.normalized_depth(), 0.0);
        }
        let sem = render_semantics(&s, &[0.0; 3], &[1.0; 6], 2, Activation::Weight).unwrap();
        assert_eq!(sem.semantics, vec![0.0, 0.0]);
    }

    #[test]
    fn nan_and_range_errors() {
        let s = samples_from_t(vec![1.0, 2.0]);
        assert!(render_depth(&s, &[f64::NAN, 0.0], Activation::Density).is_err());
        assert!(render_depth(&s, &[1.2, 0.0], Activation::Weight).is_err());
        assert!(render_depth(&s, &[-0.1, 0.0], Activation::Density).is_err());
        assert!(render_depth(&s, &[0.1], Activation::Density).is_err());
        assert!(render_semantics(&s, &[0.1, 0.2], &[0.0; 3], 2, Activation::Weight).is_err());
    }

    #[test]
    fn semantic_examples() {
        let s = samples_from_t(vec![1.0, 2.0, 3.0]);
        let logits = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let px = render_semantics(&s, &[0.0, 1.0, 0.0], &logits, 3, Activation::Weight).unwrap();
        assert_eq!(px.semantics, vec![0.0, 1.0, 0.0]);

        // alphas (0.5, 1.0): both weights 0.5.
        let l1 = [2.0, -1.0];
        let l2 = [0.0, 4.0];
        let s2 = samples_from_t(vec![1.0, 2.0]);
        let px = render_semantics(&s2, &[0.5, 1.0], &[l1[0], l1[1], l2[0], l2[1]], 2, Activation::Weight).unwrap();
        assert_relative_eq!(px.semantics[0], 0.5 * l1[0] + 0.5 * l2[0]);
        assert_relative_eq!(px.semantics[1], 0.5 * l1[1] + 0.5 * l2[1]);

        // Partial opacity scales the blend.
        let px =
            render_semantics(&s2, &[0.25, 1.0 / 3.0], &[l1[0], l1[1], l2[0], l2[1]], 2, Activation::Weight).unwrap();
        assert_relative_eq!(px.accumulated_opacity, 0.5, epsilon = 1e-15);
        assert_relative_eq!(px.semantics[0], 0.25 * l1[0] + 0.25 * l2[0], epsilon = 1e-15);
    }

    #[test]
    fn matches_literal_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..=256);
            let (s, sigma) = random_ray(&mut rng, n);
            let px = render_depth(&s, &sigma, Activation::Density).unwrap();
            let (d, wsum) = literal_depth(&s, &sigma);
            assert!((px.depth - d).abs() <= 1e-10 * d.abs().max(1.0));
            assert!((px.accumulated_opacity - wsum).abs() <= 1e-10);
        }
    }

    #[test]
    fn depth_gradient_wrt_t_is_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, sigma) = random_ray(&mut rng, 16);
        let px = render_depth(&s, &sigma, Activation::Density).unwrap();
        let g = render_backward(&s, &px, Activation::Density, None, &RenderUpstream { depth: 1.0, semantics: None })
            .unwrap();
        let h = 1e-6;
        for k in 0..16 {
            let mut sp = s.clone();
            sp.t[k] += h;
            let mut sm = s.clone();
            sm.t[k] -= h;
            let fd = (render_depth(&sp, &sigma, Activation::Density).unwrap().depth
                - render_depth(&sm, &sigma, Activation::Density).unwrap().depth)
                / (2.0 * h);
            assert_relative_eq!(fd, g.t[k], epsilon = 1e-8);
            assert_relative_eq!(g.t[k], px.per_sample_weights[k]);
        }
    }

    fn fd_check(mode: Activation, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, mut vals) = random_ray(&mut rng, 16);
        if mode == Activation::Weight {
            vals.iter_mut().for_each(|v| *v = rng.random_range(0.02..0.6));
        }
        let classes = 3;
        let logits: Vec<f64> = (0..16 * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let up_sem = [0.3, -1.1, 0.7];
        let up = RenderUpstream { depth: 0.8, semantics: Some(&up_sem) };
        let loss = |v: &[f64], l: &[f64]| {
            let px = render_semantics(&s, v, l, classes, mode).unwrap();
            0.8 * px.depth + (0..3).map(|c| up_sem[c] * px.semantics[c]).sum::<f64>()
        };
        let px = render_semantics(&s, &vals, &logits, classes, mode).unwrap();
        let g = render_backward(&s, &px, mode, Some(&logits), &up).unwrap();
        let h = 1e-4;
        for k in 0..16 {
            let mut vp = vals.clone();
            vp[k] += h;
            let mut vm = vals.clone();
            vm[k] -= h;
            let fd = (loss(&vp, &logits) - loss(&vm, &logits)) / (2.0 * h);
            let rel = (fd - g.values[k]).abs() / fd.abs().max(g.values[k].abs()).max(1e-8);
            assert!(rel < 1e-3, "{mode:?} sample {k}: fd {fd} analytic {}", g.values[k]);
        }
        for j in [0, 7, 20, 47] {
            let mut lp = logits.clone();
            lp[j] += h;
            let mut lm = logits.clone();
            lm[j] -= h;
            let fd = (loss(&vals, &lp) - loss(&vals, &lm)) / (2.0 * h);
            assert_relative_eq!(fd, g.logits[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..10 {
            fd_check(Activation::Density, seed);
            fd_check(Activation::Weight, seed);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (s, sigma) = random_ray(&mut rng, 12);
        let px = render_depth(&s, &sigma, Activation::Density).unwrap();
        let g = render_backward(&s, &px, Activation::Density, None, &RenderUpstream::default()).unwrap();
        assert!(g.values.iter().chain(&g.t).all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn weights_normalize(vals in prop::collection::vec(0.0f64..1.0, 1..64), density in any::<bool>()) {
            let t: Vec<f64> = (1..=vals.len()).map(|k| k as f64 * 0.37).collect();
            let s = samples_from_t(t);
            let mode = if density { Activation::Density } else { Activation::Weight };
            let v: Vec<f64> = if density { vals.iter().map(|x| x * 5.0).collect() } else { vals.clone() };
            let px = render_depth(&s, &v, mode).unwrap();
            let wsum: f64 = px.per_sample_weights.iter().sum();
            prop_assert!((wsum + px.final_transmittance() - 1.0).abs() < 1e-6);
            prop_assert!(wsum <= 1.0 + 1e-6);
            prop_assert!(px.per_sample_weights.iter().all(|&w| w >= 0.0));
            prop_assert!(px.transmittance.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(px.depth >= 0.0);
        }

        #[test]
        fn occlusion_never_raises_later_weights(
            vals in prop::collection::vec(0.0f64..0.9, 2..32), k in 0usize..32, bump in 0.0f64..0.5,
        ) {
            let k = k % (vals.len() - 1);
            let t: Vec<f64> = (1..=vals.len()).map(|i| i as f64).collect();
            let s = samples_from_t(t);
            let before = render_depth(&s, &vals, Activation::Weight).unwrap();
            let mut v2 = vals.clone();
            v2[k] = (v2[k] + bump).min(1.0);
            let after = render_depth(&s, &v2, Activation::Weight).unwrap();
            for j in k + 1..vals.len() {
                prop_assert!(after.per_sample_weights[j] <= before.per_sample_weights[j] + 1e-15);
            }
        }
    }
}
