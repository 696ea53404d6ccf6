//! Dense voxel grid over the contracted cube `[-1, 1]^3`.
//!
//! Voxel `i` along an axis of `N` voxels has its center at contracted
//! coordinate `-1 + (i + 0.5) * 2 / N`. The central `inside_dims` block covers
//! the linear (inside) part of the contraction.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::contraction::ContractionParams;
use crate::error::{Error, Result};

/// Activated opacity used to initialize raw parameters.
pub const INIT_ACTIVATION: f64 = 0.01;

/// How raw opacity parameters become renderable quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `sigmoid(raw)` is the per-sample rendering alpha.
    #[default]
    Weight,
    /// `softplus(raw)` is a volume density.
    Density,
}

impl Activation {
    #[inline]
    pub fn apply(self, raw: f64) -> f64 {
        match self {
            Activation::Weight => sigmoid(raw),
            Activation::Density => softplus(raw),
        }
    }

    #[inline]
    pub fn derivative(self, raw: f64) -> f64 {
        match self {
            Activation::Weight => {
                let s = sigmoid(raw);
                s * (1.0 - s)
            }
            Activation::Density => sigmoid(raw),
        }
    }

    pub fn inverse(self, value: f64) -> f64 {
        match self {
            Activation::Weight => (value / (1.0 - value)).ln(),
            Activation::Density => value.exp_m1().ln(),
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Weight => 0,
            Activation::Density => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Weight),
            1 => Some(Activation::Density),
            _ => None,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// The 8 voxels surrounding a query point and their trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub indices: [u32; 8],
    pub weights: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    dims: [usize; 3],
    inside_dims: [usize; 3],
    num_classes: usize,
    contraction: ContractionParams,
    activation: Activation,
    pub opacity_raw: Vec<f64>,
    pub semantic_raw: Vec<f64>,
}

impl OccupancyGrid {
    /// A grid initialized to near-transparent opacity and zero logits.
    pub fn new(
        dims: [usize; 3],
        inside_dims: [usize; 3],
        num_classes: usize,
        contraction: ContractionParams,
        activation: Activation,
    ) -> Result<Self> {
        validate_dims(dims, inside_dims, contraction.alpha())?;
        let n = dims.iter().product::<usize>();
        if n > u32::MAX as usize {
            return Err(Error::InvalidParameter("grid too large".into()));
        }
        Ok(Self {
            dims,
            inside_dims,
            num_classes,
            contraction,
            activation,
            opacity_raw: vec![activation.inverse(INIT_ACTIVATION); n],
            semantic_raw: vec![0.0; n * num_classes],
        })
    }

    /// Grid whose outer shell has the width implied by `alpha`.
    pub fn for_inside_dims(
        inside_dims: [usize; 3],
        num_classes: usize,
        contraction: ContractionParams,
        activation: Activation,
    ) -> Result<Self> {
        let alpha = contraction.alpha();
        let mut dims = [0; 3];
        for i in 0..3 {
            let mut n = (inside_dims[i] as f64 / alpha).round() as usize;
            if (n - inside_dims[i]) % 2 == 1 {
                n += 1;
            }
            dims[i] = n;
        }
        Self::new(dims, inside_dims, num_classes, contraction, activation)
    }

    /// Rebuilds a grid from stored parameters.
    pub fn from_parts(
        dims: [usize; 3],
        inside_dims: [usize; 3],
        num_classes: usize,
        contraction: ContractionParams,
        activation: Activation,
        opacity_raw: Vec<f64>,
        semantic_raw: Vec<f64>,
    ) -> Result<Self> {
        let mut grid = Self::new(dims, inside_dims, num_classes, contraction, activation)?;
        if opacity_raw.len() != grid.opacity_raw.len() {
            return Err(Error::mismatch(grid.opacity_raw.len(), opacity_raw.len()));
        }
        if semantic_raw.len() != grid.semantic_raw.len() {
            return Err(Error::mismatch(grid.semantic_raw.len(), semantic_raw.len()));
        }
        grid.opacity_raw = opacity_raw;
        grid.semantic_raw = semantic_raw;
        Ok(grid)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn inside_dims(&self) -> [usize; 3] {
        self.inside_dims
    }

    /// First voxel index of the inside block along each axis.
    pub fn inside_offset(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| (self.dims[i] - self.inside_dims[i]) / 2)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_voxels(&self) -> usize {
        self.opacity_raw.len()
    }

    pub fn contraction(&self) -> &ContractionParams {
        &self.contraction
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Nominal metric voxel edge `d_v` of the inside region (smallest axis).
    pub fn voxel_size(&self) -> f64 {
        let l = self.contraction.inside_lengths();
        (0..3).map(|i| l[i] / self.inside_dims[i] as f64).fold(f64::INFINITY, f64::min)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let z = index % self.dims[2];
        let y = (index / self.dims[2]) % self.dims[1];
        let x = index / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn voxel_center_contracted(&self, ijk: [usize; 3]) -> Vector3<f64> {
        Vector3::from_fn(|i, _| -1.0 + (ijk[i] as f64 + 0.5) * 2.0 / self.dims[i] as f64)
    }

    pub fn voxel_center_ego(&self, ijk: [usize; 3]) -> Vector3<f64> {
        self.contraction
            .invert_point(&self.voxel_center_contracted(ijk))
            .expect("voxel centers lie strictly inside the cube")
    }

    /// Voxel containing a contracted point (clamped to the grid).
    pub fn voxel_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|i| {
            let g = (p[i] + 1.0) * 0.5 * self.dims[i] as f64;
            (g.floor().max(0.0) as usize).min(self.dims[i] - 1)
        })
    }

    /// Trilinear stencil at a contracted point. Queries outside the cube are
    /// clamped to its boundary.
    #[inline]
    pub fn stencil(&self, p: &Vector3<f64>) -> Stencil {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        let mut step = [0usize; 3];
        for i in 0..3 {
            let n = self.dims[i];
            let g = ((p[i] + 1.0) * 0.5 * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (g.floor() as usize).min(n.saturating_sub(2));
            base[i] = i0;
            frac[i] = g - i0 as f64;
            step[i] = usize::from(n > 1);
        }
        let sx = self.dims[1] * self.dims[2] * step[0];
        let sy = self.dims[2] * step[1];
        let sz = step[2];
        let i000 = self.index(base[0], base[1], base[2]);
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        Stencil {
            indices: [
                i000,
                i000 + sz,
                i000 + sy,
                i000 + sy + sz,
                i000 + sx,
                i000 + sx + sz,
                i000 + sx + sy,
                i000 + sx + sy + sz,
            ]
            .map(|i| i as u32),
            weights: [
                gx * gy * gz,
                gx * gy * fz,
                gx * fy * gz,
                gx * fy * fz,
                fx * gy * gz,
                fx * gy * fz,
                fx * fy * gz,
                fx * fy * fz,
            ],
        }
    }

    #[inline]
    pub fn sample_opacity_raw(&self, s: &Stencil) -> f64 {
        let mut acc = 0.0;
        for k in 0..8 {
            acc += s.weights[k] * self.opacity_raw[s.indices[k] as usize];
        }
        acc
    }

    #[inline]
    pub fn sample_semantic_raw(&self, s: &Stencil, out: &mut [f64]) {
        let c = self.num_classes;
        out[..c].fill(0.0);
        for k in 0..8 {
            let base = s.indices[k] as usize * c;
            let w = s.weights[k];
            for (o, v) in out[..c].iter_mut().zip(&self.semantic_raw[base..base + c]) {
                *o += w * v;
            }
        }
    }

    /// Raw opacity and semantic logits at a contracted point.
    pub fn sample_trilinear(&self, p: &Vector3<f64>) -> (f64, Vec<f64>) {
        let s = self.stencil(p);
        let mut sem = vec![0.0; self.num_classes];
        self.sample_semantic_raw(&s, &mut sem);
        (self.sample_opacity_raw(&s), sem)
    }

    pub fn zero_gradient(&self) -> GridGradient {
        GridGradient { opacity: vec![0.0; self.opacity_raw.len()], semantic: vec![0.0; self.semantic_raw.len()] }
    }

    /// Adds `upstream * weight` to each corner of the query's stencil.
    pub fn scatter_gradient(
        &self,
        grad: &mut GridGradient,
        p: &Vector3<f64>,
        upstream_opacity: f64,
        upstream_semantic: Option<&[f64]>,
    ) {
        let s = self.stencil(p);
        grad.scatter_opacity(&s, upstream_opacity);
        if let Some(up) = upstream_semantic {
            grad.scatter_semantic(&s, up, self.num_classes);
        }
    }
}

fn validate_dims(dims: [usize; 3], inside_dims: [usize; 3], alpha: f64) -> Result<()> {
    for i in 0..3 {
        let (n, m) = (dims[i], inside_dims[i]);
        if n == 0 || m == 0 {
            return Err(Error::InvalidParameter("grid dimensions must be positive".into()));
        }
        if m > n || (n - m) % 2 != 0 {
            return Err(Error::InvalidParameter(format!("inside block {m} must be centered in {n} voxels (axis {i})")));
        }
        // The inside block spans [-m/n, m/n] in contracted space; it should
        // match the linear region [-alpha, alpha] to within one voxel.
        if ((m as f64 / n as f64) - alpha).abs() * n as f64 > 1.0 {
            return Err(Error::InvalidParameter(format!(
                "inside block {m}/{n} does not match contraction alpha {alpha} (axis {i})"
            )));
        }
    }
    Ok(())
}

/// Gradient buffers matching a grid's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub opacity: Vec<f64>,
    pub semantic: Vec<f64>,
}

impl GridGradient {
    pub fn zero(&mut self) {
        self.opacity.fill(0.0);
        self.semantic.fill(0.0);
    }

    #[inline]
    pub fn scatter_opacity(&mut self, s: &Stencil, upstream: f64) {
        for k in 0..8 {
            self.opacity[s.indices[k] as usize] += upstream * s.weights[k];
        }
    }

    #[inline]
    pub fn scatter_semantic(&mut self, s: &Stencil, upstream: &[f64], classes: usize) {
        for k in 0..8 {
            let base = s.indices[k] as usize * classes;
            let w = s.weights[k];
            for (g, u) in self.semantic[base..base + classes].iter_mut().zip(upstream) {
                *g += u * w;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.opacity.iter_mut().chain(self.semantic.iter_mut()).for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &GridGradient) {
        for (a, b) in self.opacity.iter_mut().zip(&other.opacity) {
            *a += b;
        }
        for (a, b) in self.semantic.iter_mut().zip(&other.semantic) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_grid() -> OccupancyGrid {
        let c = ContractionParams::new(2.0 / 3.0, Vector3::new(-4.0, -4.0, -2.0), Vector3::new(4.0, 4.0, 2.0)).unwrap();
        let mut g = OccupancyGrid::for_inside_dims([8, 8, 4], 3, c, Activation::Weight).unwrap();
        for (i, v) in g.opacity_raw.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 * 0.3 - 1.0;
        }
        for (i, v) in g.semantic_raw.iter_mut().enumerate() {
            *v = ((i * 13) % 7) as f64 * 0.5 - 1.5;
        }
        g
    }

    #[test]
    fn shell_from_alpha() {
        let g = small_grid();
        assert_eq!(g.dims(), [12, 12, 6]);
        assert_eq!(g.inside_offset(), [2, 2, 1]);
        assert_relative_eq!(g.voxel_size(), 1.0);
        let c = ContractionParams::new(0.667, Vector3::new(-40.0, -40.0, -1.0), Vector3::new(40.0, 40.0, 5.4)).unwrap();
        let full = OccupancyGrid::for_inside_dims([200, 200, 16], 0, c, Activation::Weight).unwrap();
        assert_eq!(full.dims(), [300, 300, 24]);
        assert_relative_eq!(full.voxel_size(), 0.4, max_relative = 1e-12);
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let c = ContractionParams::new(2.0 / 3.0, Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert!(OccupancyGrid::new([12, 12, 6], [8, 8, 3], 0, c.clone(), Activation::Weight).is_err());
        assert!(OccupancyGrid::new([12, 12, 6], [4, 8, 4], 0, c.clone(), Activation::Weight).is_err());
        assert!(OccupancyGrid::new([12, 12, 6], [14, 8, 4], 0, c, Activation::Weight).is_err());
    }

    #[test]
    fn init_activation() {
        let c = ContractionParams::new(0.6, Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)).unwrap();
        for act in [Activation::Weight, Activation::Density] {
            let g = OccupancyGrid::for_inside_dims([6, 6, 6], 0, c.clone(), act).unwrap();
            assert_relative_eq!(act.apply(g.opacity_raw[0]), INIT_ACTIVATION, max_relative = 1e-12);
        }
    }

    #[test]
    fn voxel_center_query_returns_stored_value() {
        let g = small_grid();
        for ijk in [[0, 0, 0], [5, 7, 2], [11, 11, 5], [3, 0, 4]] {
            let (o, s) = g.sample_trilinear(&g.voxel_center_contracted(ijk));
            let i = g.index(ijk[0], ijk[1], ijk[2]);
            assert_relative_eq!(o, g.opacity_raw[i], epsilon = 1e-12);
            for c in 0..3 {
                assert_relative_eq!(s[c], g.semantic_raw[i * 3 + c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn midpoint_between_centers_is_average() {
        let mut g = small_grid();
        let a = g.index(4, 5, 2);
        let b = g.index(5, 5, 2);
        g.opacity_raw[a] = 2.0;
        g.opacity_raw[b] = 4.0;
        let p = (g.voxel_center_contracted([4, 5, 2]) + g.voxel_center_contracted([5, 5, 2])) * 0.5;
        assert_relative_eq!(g.sample_trilinear(&p).0, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn scatter_at_center_hits_one_voxel() {
        let g = small_grid();
        let mut grad = g.zero_gradient();
        let ijk = [6, 3, 2];
        g.scatter_gradient(&mut grad, &g.voxel_center_contracted(ijk), 1.0, Some(&[1.0, -2.0, 0.5]));
        let i = g.index(6, 3, 2);
        for (j, v) in grad.opacity.iter().enumerate() {
            let expected = if j == i { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-12);
        }
        assert_relative_eq!(grad.semantic[i * 3 + 1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn finite_difference_matches_weight() {
        let mut g = small_grid();
        let p = Vector3::new(0.13, -0.42, 0.05);
        let s = g.stencil(&p);
        let h = 1e-3;
        for k in 0..8 {
            let i = s.indices[k] as usize;
            let base = g.sample_trilinear(&p).0;
            g.opacity_raw[i] += h;
            let bumped = g.sample_trilinear(&p).0;
            g.opacity_raw[i] -= h;
            assert_relative_eq!((bumped - base) / h, s.weights[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn coords_roundtrip() {
        let g = small_grid();
        for i in [0, 1, 77, g.num_voxels() - 1] {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
    }

    #[test]
    fn ego_mapping_chain_lands_in_start_voxel() {
        let g = small_grid();
        for ijk in [[2, 2, 1], [5, 6, 3], [9, 9, 4], [0, 11, 0], [11, 0, 5]] {
            let ego = g.voxel_center_ego(ijk);
            let back = g.voxel_of(&g.contraction().contract_point(&ego));
            assert_eq!(back, ijk);
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(x in -1.2f64..1.2, y in -1.2f64..1.2, z in -1.2f64..1.2) {
            let g = small_grid();
            let s = g.stencil(&Vector3::new(x, y, z));
            let sum: f64 = s.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.weights.iter().all(|&w| w >= -1e-15));
            let mut grad = g.zero_gradient();
            g.scatter_gradient(&mut grad, &Vector3::new(x, y, z), 2.5, None);
            prop_assert!((grad.opacity.iter().sum::<f64>() - 2.5).abs() < 1e-12);
        }

        #[test]
        fn sampling_is_linear_in_parameters(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, a in -3.0f64..3.0) {
            let g = small_grid();
            let mut h = g.clone();
            for v in h.opacity_raw.iter_mut() { *v = *v * a + 1.0; }
            let p = Vector3::new(x, y, z);
            prop_assert!((h.sample_trilinear(&p).0 - (a * g.sample_trilinear(&p).0 + 1.0)).abs() < 1e-10);
        }
    }
}
