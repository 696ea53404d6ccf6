//! Per-ray sample placement: samples are spread uniformly in the contracted
//! coordinate of a scalar contraction whose inside bound `r_b(v)` depends on
//! the ray direction, then mapped back to metric distance.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contraction::{invert_normalized, ContractionParams};
use crate::error::{Error, Result};
use crate::geometry::Ray;

/// `u` is clipped to `[U_EPS, 1 - U_EPS]`; `u -> 1` maps to infinite distance.
pub const U_EPS: f64 = 1e-4;
pub const MIN_SAMPLES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// One jittered draw per stratum `[k/L, (k+1)/L)`.
    #[default]
    Stratified,
    /// `L` i.i.d. draws from `U[0, 1]`, sorted.
    Uniform,
    /// Stratum midpoints; deterministic, used for evaluation renders.
    Midpoint,
}

/// Samples along one ray. `t` is metric distance along the unit direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub u: Vec<f64>,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub points_contracted: Vec<Vector3<f64>>,
    pub r_b: f64,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Every `stride`-th sample, with intervals recomputed on the subset.
    pub fn strided(&self, stride: usize) -> RaySamples {
        let stride = stride.max(1);
        let idx: Vec<usize> = (0..self.len()).step_by(stride).collect();
        let t: Vec<f64> = idx.iter().map(|&i| self.t[i]).collect();
        RaySamples {
            u: idx.iter().map(|&i| self.u[i]).collect(),
            delta: intervals(&t),
            points_contracted: idx.iter().map(|&i| self.points_contracted[i]).collect(),
            t,
            r_b: self.r_b,
        }
    }

    /// Indices (into the full set) kept by [`RaySamples::strided`].
    pub fn strided_indices(&self, stride: usize) -> impl Iterator<Item = usize> {
        (0..self.len()).step_by(stride.max(1))
    }
}

/// `r_b(v) = |(d_x l_x, d_y l_y, d_z l_z)| / (2 |d|)`.
pub fn ray_bound(direction: &Vector3<f64>, params: &ContractionParams) -> Result<f64> {
    let norm = direction.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidParameter("ray direction must be non-zero and finite".into()));
    }
    let l = params.inside_lengths();
    Ok(direction.component_mul(&l).norm() / (2.0 * norm))
}

/// `L(v) = ceil(2 r_b(v) / (alpha d_v))`, at least [`MIN_SAMPLES`].
pub fn sample_count(r_b: f64, alpha: f64, voxel_size: f64) -> Result<usize> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidParameter(format!("voxel size must be positive, got {voxel_size}")));
    }
    let l = (2.0 * r_b / (alpha * voxel_size)).ceil();
    Ok(if l.is_finite() { (l as usize).max(MIN_SAMPLES) } else { MIN_SAMPLES })
}

/// Metric distance for contracted coordinate `u` under bound `r_b`.
#[inline]
pub fn distance_for_u(u: f64, r_b: f64, params: &ContractionParams) -> f64 {
    r_b * invert_normalized(u, params.alpha(), params.a(), params.b())
}

pub fn sample_ray(
    ray: &Ray,
    params: &ContractionParams,
    voxel_size: f64,
    mode: SamplingMode,
    seed: u64,
) -> Result<RaySamples> {
    let r_b = ray_bound(&ray.direction, params)?;
    let count = sample_count(r_b, params.alpha(), voxel_size)?;
    let inv_l = 1.0 / count as f64;
    let mut u: Vec<f64> = match mode {
        SamplingMode::Midpoint => (0..count).map(|k| (k as f64 + 0.5) * inv_l).collect(),
        SamplingMode::Stratified => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count).map(|k| (k as f64 + rng.random::<f64>()) * inv_l).collect()
        }
        SamplingMode::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v: Vec<f64> = (0..count).map(|_| rng.random::<f64>()).collect();
            v.sort_by(f64::total_cmp);
            v
        }
    };
    for x in u.iter_mut() {
        *x = x.clamp(U_EPS, 1.0 - U_EPS);
    }
    let t: Vec<f64> = u.iter().map(|&x| distance_for_u(x, r_b, params)).collect();
    let dir = ray.unit_direction();
    let points_contracted = t.iter().map(|&tk| params.contract_point(&(ray.origin + dir * tk))).collect();
    Ok(RaySamples { delta: intervals(&t), u, t, points_contracted, r_b })
}

/// `delta_k = t_{k+1} - t_k`; the last interval repeats the previous one.
fn intervals(t: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut d = Vec::with_capacity(n);
    for k in 0..n.saturating_sub(1) {
        d.push(t[k + 1] - t[k]);
    }
    if n >= 2 {
        d.push(t[n - 1] - t[n - 2]);
    } else if n == 1 {
        d.push(0.0);
    }
    d
}

/// SplitMix64 over a base seed and a list of stream identifiers.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = splitmix(z ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    z
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(alpha: f64) -> ContractionParams {
        ContractionParams::new(alpha, Vector3::new(-40.0, -40.0, -3.2), Vector3::new(40.0, 40.0, 3.2)).unwrap()
    }

    fn ray(d: Vector3<f64>) -> Ray {
        Ray { origin: Vector3::zeros(), direction: d, pixel: (0.0, 0.0) }
    }

    #[test]
    fn bound_examples() {
        let p = params(2.0 / 3.0);
        assert_relative_eq!(ray_bound(&Vector3::new(1.0, 0.0, 0.0), &p).unwrap(), 40.0, max_relative = 1e-15);
        assert_relative_eq!(ray_bound(&Vector3::new(0.0, 0.0, 1.0), &p).unwrap(), 3.2, max_relative = 1e-15);
        let d = Vector3::new(0.3, -0.7, 0.2);
        assert_relative_eq!(ray_bound(&(d * 17.5), &p).unwrap(), ray_bound(&d, &p).unwrap(), max_relative = 1e-14);
        assert!(ray_bound(&Vector3::zeros(), &p).is_err());
    }

    #[test]
    fn count_examples() {
        assert_eq!(sample_count(40.0, 2.0 / 3.0, 0.4).unwrap(), 300);
        assert_eq!(sample_count(3.2, 2.0 / 3.0, 0.4).unwrap(), 24);
        assert_eq!(sample_count(1e-9, 2.0 / 3.0, 0.4).unwrap(), 2);
        assert!(sample_count(1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn seam_maps_to_bound() {
        let p = params(2.0 / 3.0);
        assert_relative_eq!(distance_for_u(2.0 / 3.0, 40.0, &p), 40.0, max_relative = 1e-14);
    }

    #[test]
    fn inner_samples_are_linear() {
        let p = params(2.0 / 3.0);
        let s = sample_ray(&ray(Vector3::new(1.0, 0.0, 0.0)), &p, 0.4, SamplingMode::Midpoint, 0).unwrap();
        assert_eq!(s.len(), 300);
        let du = 1.0 / 300.0;
        for k in 0..s.len() - 1 {
            if s.u[k + 1] <= p.alpha() {
                assert_relative_eq!(s.t[k + 1] - s.t[k], 40.0 / p.alpha() * du, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let p = params(0.667);
        let r = ray(Vector3::new(0.4, 0.9, -0.1));
        let a = sample_ray(&r, &p, 0.4, SamplingMode::Stratified, 42).unwrap();
        let b = sample_ray(&r, &p, 0.4, SamplingMode::Stratified, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_ray(&r, &p, 0.4, SamplingMode::Stratified, 43).unwrap();
        assert_ne!(a.t, c.t);
    }

    #[test]
    fn strided_subset() {
        let p = params(0.667);
        let s = sample_ray(&ray(Vector3::new(1.0, 0.0, 0.0)), &p, 0.4, SamplingMode::Midpoint, 0).unwrap();
        let sub = s.strided(4);
        assert_eq!(sub.len(), s.len().div_ceil(4));
        assert_eq!(sub.t[1], s.t[4]);
        assert_relative_eq!(sub.delta[0], s.t[4] - s.t[0]);
    }

    #[test]
    fn contracted_points_follow_ray() {
        let p = params(0.667);
        let r = Ray { origin: Vector3::new(1.0, 2.0, 0.5), direction: Vector3::new(0.0, 2.0, 0.0), pixel: (0.0, 0.0) };
        let s = sample_ray(&r, &p, 0.4, SamplingMode::Midpoint, 0).unwrap();
        for (t, c) in s.t.iter().zip(&s.points_contracted) {
            let back = p.invert_point(c).unwrap();
            assert_relative_eq!(back, r.origin + Vector3::new(0.0, *t, 0.0), max_relative = 1e-8);
        }
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(7, &[1, 2]), mix_seed(7, &[2, 1]));
        assert_eq!(mix_seed(7, &[1, 2]), mix_seed(7, &[1, 2]));
    }

    proptest! {
        #[test]
        fn samples_ascending_and_positive(
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0, seed in any::<u64>(),
            mode in prop_oneof![Just(SamplingMode::Stratified), Just(SamplingMode::Uniform), Just(SamplingMode::Midpoint)],
        ) {
            let d = Vector3::new(dx, dy, dz);
            prop_assume!(d.norm() > 1e-3);
            let p = params(0.667);
            let s = sample_ray(&ray(d), &p, 0.4, mode, seed).unwrap();
            prop_assert!(s.len() >= 2);
            prop_assert!(s.t[0] > 0.0);
            for k in 0..s.len() - 1 {
                prop_assert!(s.t[k] < s.t[k + 1]);
                prop_assert!(s.u[k] < s.u[k + 1]);
            }
            prop_assert!(s.delta.iter().all(|&d| d >= 0.0));
            if mode == SamplingMode::Stratified {
                let l = s.len() as f64;
                for (k, u) in s.u.iter().enumerate() {
                    prop_assert!(*u >= (k as f64 / l).max(U_EPS) - 1e-15 && *u <= ((k + 1) as f64 / l).min(1.0 - U_EPS));
                }
            }
        }

        #[test]
        fn distance_monotone_in_u(u1 in 0.0f64..1.0, u2 in 0.0f64..1.0) {
            prop_assume!(u1 < u2);
            let p = params(0.667);
            prop_assert!(distance_for_u(u1, 10.0, &p) < distance_for_u(u2, 10.0, &p));
        }
    }

    #[test]
    fn coverage_grows_without_bound() {
        let p = params(0.667);
        let far = [0.9, 0.99, 0.999, 0.9999].map(|u| distance_for_u(u, 5.0, &p));
        assert!(far.windows(2).all(|w| w[1] > 5.0 * w[0]));
    }
}
