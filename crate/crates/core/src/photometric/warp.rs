use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample_into, CameraModel, Image, Pose};

/// Source image resampled into the target view.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: Image,
    /// False where depth is non-positive or the reprojection leaves the source.
    pub valid: Vec<bool>,
}

/// Inverse-warps `source_image` into the target view.
///
/// `depth` holds target camera-frame z per pixel. `source_from_target` maps
/// the target camera's ego frame into the source camera's ego frame; each
/// camera's extrinsic is expressed in its own ego frame.
pub fn warp_adjacent(
    depth: &Image,
    target_cam: &CameraModel,
    source_cam: &CameraModel,
    source_from_target: &Pose,
    source_image: &Image,
) -> Result<WarpResult> {
    if depth.channels() != 1 || depth.width() != target_cam.width || depth.height() != target_cam.height {
        return Err(Error::mismatch(
            format!("{}x{}x1 depth", target_cam.width, target_cam.height),
            format!("{}x{}x{}", depth.width(), depth.height(), depth.channels()),
        ));
    }
    if source_image.width() != source_cam.width || source_image.height() != source_cam.height {
        return Err(Error::mismatch(
            format!("{}x{} source", source_cam.width, source_cam.height),
            format!("{}x{}", source_image.width(), source_image.height()),
        ));
    }
    let (w, h) = (depth.width(), depth.height());
    let c = source_image.channels();
    let mut image = Image::new(w, h, c);
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let z = depth.get(x, y, 0);
            if !(z > 0.0) || !z.is_finite() {
                continue;
            }
            let p = target_cam.generate_ray(x as f64, y as f64).at(z);
            let proj = source_cam.project(&source_from_target.transform_point(&p));
            if !proj.valid {
                continue;
            }
            valid[y * w + x] = bilinear_sample_into(source_image, proj.u, proj.v, image.pixel_mut(x, y), None);
        }
    }
    Ok(WarpResult { image, valid })
}
