//! Depth and occupancy evaluation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Activation, OccupancyGrid};

pub const DEPTH_CLIP: (f64, f64) = (0.1, 80.0);

/// Voxel label for empty space.
pub const FREE_VOXEL: u8 = 254;
/// Voxel label excluded from evaluation.
pub const IGNORE_VOXEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta_1: f64,
    pub delta_2: f64,
    pub delta_3: f64,
    pub valid_pixels: usize,
}

impl fmt::Display for DepthMetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "abs_rel", "sq_rel", "rmse", "rmse_log", "d<1.25", "d<1.25^2", "d<1.25^3", "pixels"
        )?;
        write!(
            f,
            "{:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10}",
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta_1,
            self.delta_2,
            self.delta_3,
            self.valid_pixels
        )
    }
}

/// Standard depth metrics without median scaling.
///
/// Ground truth outside `clip` (including the infinite background sentinel)
/// is ignored; predictions are clamped into `clip`.
pub fn depth_metrics(pred: &[f64], gt: &[f64], clip: (f64, f64)) -> Result<DepthMetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::mismatch(gt.len(), pred.len()));
    }
    if !(clip.0 > 0.0 && clip.0 < clip.1) {
        return Err(Error::InvalidParameter(format!("bad depth clip range {clip:?}")));
    }
    let (mut n, mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0usize, 0.0, 0.0, 0.0, 0.0);
    let mut deltas = [0usize; 3];
    for (&p, &g) in pred.iter().zip(gt) {
        if !(g >= clip.0 && g <= clip.1) {
            continue;
        }
        if p.is_nan() {
            return Err(Error::NonFinite("predicted depth"));
        }
        let p = p.clamp(clip.0, clip.1);
        let e = p - g;
        n += 1;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
        sq += e * e;
        let el = p.ln() - g.ln();
        sq_log += el * el;
        let ratio = (p / g).max(g / p);
        for (k, d) in deltas.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *d += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels("depth ground truth"));
    }
    let nf = n as f64;
    Ok(DepthMetricsReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta_1: deltas[0] as f64 / nf,
        delta_2: deltas[1] as f64 / nf,
        delta_3: deltas[2] as f64 / nf,
        valid_pixels: n,
    })
}

/// Labels over the inside block, x-major like the grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelLabels {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl VoxelLabels {
    pub fn free(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![FREE_VOXEL; dims.iter().product()] }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn occupied_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != FREE_VOXEL && v != IGNORE_VOXEL).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: u8,
    pub iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccMetricsReport {
    pub per_class: Vec<ClassIou>,
    /// Mean over classes that appear in prediction or ground truth.
    pub miou: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl fmt::Display for OccMetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>10} {:>10} {:>10} {:>10}", "class", "iou", "tp", "fp", "fn")?;
        for c in &self.per_class {
            writeln!(f, "{:>8} {:>10.4} {:>10} {:>10} {:>10}", c.class, c.iou, c.tp, c.fp, c.fn_)?;
        }
        writeln!(f, "{:>8} {:>10.4}", "mIoU", self.miou)?;
        write!(f, "{:>8} {:>10.4} precision {:.4} recall {:.4}", "IoU", self.iou, self.precision, self.recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion-derived occupancy metrics. Ground-truth voxels labelled
/// `IGNORE_VOXEL` are skipped; classes absent from both grids are left out of
/// the mIoU mean.
pub fn occupancy_metrics(pred: &VoxelLabels, gt: &VoxelLabels, classes: &[u8]) -> Result<OccMetricsReport> {
    if pred.dims != gt.dims || pred.data.len() != gt.data.len() {
        return Err(Error::mismatch(format!("{:?}", gt.dims), format!("{:?}", pred.dims)));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    let mut per: Vec<ClassIou> =
        classes.iter().map(|&c| ClassIou { class: c, iou: 0.0, tp: 0, fp: 0, fn_: 0 }).collect();
    let mut evaluated = 0usize;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g == IGNORE_VOXEL {
            continue;
        }
        evaluated += 1;
        let (po, go) = (p != FREE_VOXEL, g != FREE_VOXEL);
        match (po, go) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
        for c in per.iter_mut() {
            match (p == c.class, g == c.class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::NoValidPixels("occupancy evaluation set"));
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in per.iter_mut() {
        let union = c.tp + c.fp + c.fn_;
        c.iou = ratio(c.tp, union);
        if union > 0 {
            sum += c.iou;
            present += 1;
        }
    }
    Ok(OccMetricsReport {
        per_class: per,
        miou: if present > 0 { sum / present as f64 } else { 0.0 },
        iou: ratio(tp, tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        tp,
        fp,
        fn_,
        tn,
    })
}

/// Occupancy of the inside block.
///
/// A voxel is occupied when its activated opacity exceeds `threshold`. In
/// density mode the density is first turned into the alpha of one inside
/// voxel length. Occupied voxels take the argmax logit as label (0 when the
/// grid has no classes).
pub fn extract_occupancy(grid: &OccupancyGrid, threshold: f64) -> VoxelLabels {
    let inside = grid.inside_dims();
    let off = grid.inside_offset();
    let lengths = grid.contraction().inside_lengths();
    let step = (0..3).map(|k| lengths[k] / inside[k] as f64).fold(f64::INFINITY, f64::min);
    let classes = grid.num_classes();
    let mut out = VoxelLabels::free(inside);
    for x in 0..inside[0] {
        for y in 0..inside[1] {
            for z in 0..inside[2] {
                let gi = grid.index(x + off[0], y + off[1], z + off[2]);
                let raw = grid.opacity_raw[gi];
                let opacity = match grid.activation() {
                    Activation::Weight => grid.activation().apply(raw),
                    Activation::Density => 1.0 - (-grid.activation().apply(raw) * step).exp(),
                };
                if opacity > threshold {
                    let logits = &grid.semantic_raw[gi * classes..(gi + 1) * classes];
                    let mut best = 0;
                    for (k, &l) in logits.iter().enumerate() {
                        if l > logits[best] {
                            best = k;
                        }
                    }
                    let i = out.index(x, y, z);
                    out.data[i] = best as u8;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contraction::ContractionParams;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    #[test]
    fn perfect_depth() {
        let d = [1.0, 5.0, 30.0];
        let r = depth_metrics(&d, &d, DEPTH_CLIP).unwrap();
        assert_eq!((r.abs_rel, r.sq_rel, r.rmse, r.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((r.delta_1, r.delta_2, r.delta_3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn pred_two_gt_one() {
        let r = depth_metrics(&[2.0], &[1.0], DEPTH_CLIP).unwrap();
        assert_eq!(r.abs_rel, 1.0);
        assert_eq!(r.sq_rel, 1.0);
        assert_eq!(r.rmse, 1.0);
        assert_eq!(r.rmse_log, 2f64.ln());
        // ratio 2 exceeds 1.25^3 = 1.953125, so no threshold is met
        assert_eq!((r.delta_1, r.delta_2, r.delta_3), (0.0, 0.0, 0.0));
        assert_eq!(depth_metrics(&[1.2], &[1.0], DEPTH_CLIP).unwrap().delta_1, 1.0);
    }

    #[test]
    fn clipping_and_empty() {
        let r = depth_metrics(&[200.0, 1.0], &[f64::INFINITY, 1.0], DEPTH_CLIP).unwrap();
        assert_eq!(r.valid_pixels, 1);
        let r = depth_metrics(&[200.0], &[40.0], DEPTH_CLIP).unwrap();
        assert!((r.abs_rel - 1.0).abs() < 1e-12);
        assert!(matches!(depth_metrics(&[1.0], &[f64::INFINITY], DEPTH_CLIP), Err(Error::NoValidPixels(_))));
        assert!(depth_metrics(&[1.0], &[1.0, 2.0], DEPTH_CLIP).is_err());
    }

    #[test]
    fn occupancy_fixture() {
        let pred = VoxelLabels { dims: [2, 1, 1], data: vec![3, FREE_VOXEL] };
        let gt = VoxelLabels { dims: [2, 1, 1], data: vec![3, 3] };
        let r = occupancy_metrics(&pred, &gt, &[3]).unwrap();
        assert_eq!(r.per_class[0].iou, 0.5);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.iou, 0.5);
        assert_eq!(r.miou, 0.5);
    }

    #[test]
    fn occupancy_edge_cases() {
        let gt = VoxelLabels { dims: [3, 1, 1], data: vec![0, 1, FREE_VOXEL] };
        let same = occupancy_metrics(&gt, &gt, &[0, 1, 2]).unwrap();
        assert_eq!((same.iou, same.miou, same.precision, same.recall), (1.0, 1.0, 1.0, 1.0));
        let empty = VoxelLabels::free([3, 1, 1]);
        assert_eq!(occupancy_metrics(&empty, &gt, &[0, 1]).unwrap().recall, 0.0);
        let ignored = VoxelLabels { dims: [1, 1, 1], data: vec![IGNORE_VOXEL] };
        assert!(occupancy_metrics(&ignored, &ignored, &[0]).is_err());
    }

    fn small_grid() -> OccupancyGrid {
        let c = ContractionParams::new(0.5, Vector3::new(-2.0, -2.0, -2.0), Vector3::new(2.0, 2.0, 2.0)).unwrap();
        OccupancyGrid::for_inside_dims([4, 4, 4], 2, c, Activation::Weight).unwrap()
    }

    #[test]
    fn extraction() {
        let mut g = small_grid();
        g.opacity_raw.iter_mut().for_each(|v| *v = -1e9);
        assert_eq!(extract_occupancy(&g, 0.5).occupied_count(), 0);
        let off = g.inside_offset();
        let gi = g.index(off[0] + 1, off[1] + 2, off[2] + 3);
        g.opacity_raw[gi] = 5.0;
        g.semantic_raw[gi * 2 + 1] = 1.0;
        let out = extract_occupancy(&g, 0.5);
        assert_eq!(out.occupied_count(), 1);
        assert_eq!(out.data[out.index(1, 2, 3)], 1);
    }

    proptest! {
        #[test]
        fn scale_invariance(pairs in proptest::collection::vec((0.5f64..10.0, 0.5f64..10.0), 1..20), k in 0.5f64..4.0) {
            let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let a = depth_metrics(&p, &g, (1e-3, 1e3)).unwrap();
            let ps: Vec<f64> = p.iter().map(|v| v * k).collect();
            let gs: Vec<f64> = g.iter().map(|v| v * k).collect();
            let b = depth_metrics(&ps, &gs, (1e-3, 1e3)).unwrap();
            prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
            prop_assert!((a.sq_rel * k - b.sq_rel).abs() < 1e-9 * b.sq_rel.max(1.0));
            prop_assert!((a.rmse * k - b.rmse).abs() < 1e-9 * b.rmse.max(1.0));
            prop_assert!((a.rmse_log - b.rmse_log).abs() < 1e-9);
            prop_assert!(a.delta_1 <= a.delta_2 && a.delta_2 <= a.delta_3);
        }

        #[test]
        fn threshold_sweep_monotone(raw in proptest::collection::vec(-6.0f64..6.0, 64), t1 in 0.05f64..0.95, dt in 0.0f64..0.5) {
            let mut g = small_grid();
            let off = g.inside_offset();
            for (k, r) in raw.iter().enumerate() {
                let gi = g.index(off[0] + k / 16, off[1] + (k / 4) % 4, off[2] + k % 4);
                g.opacity_raw[gi] = *r;
            }
            let lo = extract_occupancy(&g, t1);
            let hi = extract_occupancy(&g, (t1 + dt).min(0.99));
            for (a, b) in lo.data.iter().zip(&hi.data) {
                prop_assert!(!(*b != FREE_VOXEL && *a == FREE_VOXEL));
            }
        }
    }
}
