//! Posed multi-camera frame sequences and their on-disk manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Image, LabelMap, Pose};
use crate::io;
use crate::synth::{render_ground_truth, SceneSpec};

/// One time step: the ego pose and one entry per rig camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// World-from-ego.
    pub ego_pose: Pose,
    pub images: Vec<Image>,
    pub labels: Option<Vec<LabelMap>>,
    /// Oracle z-depth, used for evaluation only.
    pub depth: Option<Vec<Image>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub rig: Vec<CameraModel>,
    pub frames: Vec<Frame>,
}

impl FrameSet {
    pub fn validate(&self) -> Result<()> {
        if self.rig.is_empty() || self.frames.is_empty() {
            return Err(Error::Config("frame set needs at least one camera and one frame".into()));
        }
        let channels = self.frames[0].images.first().map(Image::channels).unwrap_or(0);
        for (fi, f) in self.frames.iter().enumerate() {
            if f.images.len() != self.rig.len() {
                return Err(Error::mismatch(format!("{} images in frame {fi}", self.rig.len()), f.images.len()));
            }
            for (cam, img) in self.rig.iter().zip(&f.images) {
                if img.width() != cam.width || img.height() != cam.height || img.channels() != channels {
                    return Err(Error::mismatch(
                        format!("{}x{}x{channels} image for '{}'", cam.width, cam.height, cam.name),
                        format!("{}x{}x{}", img.width(), img.height(), img.channels()),
                    ));
                }
            }
            if let Some(labels) = &f.labels {
                if labels.len() != self.rig.len()
                    || labels.iter().zip(&self.rig).any(|(l, c)| l.width != c.width || l.height != c.height)
                {
                    return Err(Error::mismatch("one label map per camera", format!("frame {fi}")));
                }
            }
            if let Some(depth) = &f.depth {
                if depth.len() != self.rig.len()
                    || depth.iter().zip(&self.rig).any(|(d, c)| d.width() != c.width || d.height() != c.height)
                {
                    return Err(Error::mismatch("one depth map per camera", format!("frame {fi}")));
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.frames[0].images[0].channels()
    }

    pub fn has_labels(&self) -> bool {
        self.frames.iter().all(|f| f.labels.is_some())
    }

    pub fn camera_index(&self, name: &str) -> Option<usize> {
        self.rig.iter().position(|c| c.name == name)
    }

    /// Renders every frame of a synthetic scene, keeping oracle depth and labels.
    pub fn from_scene(scene: &SceneSpec) -> Result<Self> {
        scene.validate()?;
        let mut frames = Vec::with_capacity(scene.trajectory.len());
        for (i, pose) in scene.trajectory.iter().enumerate() {
            let views = render_ground_truth(scene, i)?;
            let (mut images, mut labels, mut depth) = (Vec::new(), Vec::new(), Vec::new());
            for v in views {
                images.push(v.image);
                labels.push(v.labels);
                depth.push(v.depth);
            }
            frames.push(Frame { ego_pose: *pose, images, labels: Some(labels), depth: Some(depth) });
        }
        Ok(Self { rig: scene.rig.clone(), frames })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    ego_pose: Pose,
    images: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<PathBuf>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    rig: Vec<CameraModel>,
    frames: Vec<FrameEntry>,
}

pub const MANIFEST_NAME: &str = "frames.json";

/// Writes images (PPM/PGM), labels (indexed PNG) and oracle depth (PFM)
/// under `dir` plus `frames.json`. Returns the written paths.
pub fn save_frame_set(dir: &Path, set: &FrameSet, palette: &[[u8; 3]]) -> Result<Vec<PathBuf>> {
    set.validate()?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    let ext = if set.channels() == 1 { "pgm" } else { "ppm" };
    for (fi, f) in set.frames.iter().enumerate() {
        let mut entry = FrameEntry { ego_pose: f.ego_pose, images: vec![], labels: None, depth: None };
        let name =
            |ci: usize, kind: &str, e: &str| PathBuf::from(format!("frame{fi:03}/{}_{kind}.{e}", set.rig[ci].name));
        for (ci, img) in f.images.iter().enumerate() {
            let rel = name(ci, "image", ext);
            io::write_ppm(&dir.join(&rel), img)?;
            written.push(dir.join(&rel));
            entry.images.push(rel);
        }
        if let Some(labels) = &f.labels {
            let mut v = Vec::new();
            for (ci, l) in labels.iter().enumerate() {
                let rel = name(ci, "labels", "png");
                io::write_label_png(&dir.join(&rel), l, palette)?;
                written.push(dir.join(&rel));
                v.push(rel);
            }
            entry.labels = Some(v);
        }
        if let Some(depth) = &f.depth {
            let mut v = Vec::new();
            for (ci, d) in depth.iter().enumerate() {
                let rel = name(ci, "depth", "pfm");
                io::write_pfm(&dir.join(&rel), d)?;
                written.push(dir.join(&rel));
                v.push(rel);
            }
            entry.depth = Some(v);
        }
        entries.push(entry);
    }
    let manifest = Manifest { version: 1, rig: set.rig.clone(), frames: entries };
    let path = dir.join(MANIFEST_NAME);
    io::write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}

/// Loads a frame set from a directory containing `frames.json`.
pub fn load_frame_set(dir: &Path) -> Result<FrameSet> {
    let manifest: Manifest = io::read_json(&dir.join(MANIFEST_NAME))?;
    if manifest.version != 1 {
        return Err(Error::format("frames manifest", format!("unsupported version {}", manifest.version)));
    }
    let mut frames = Vec::new();
    for e in manifest.frames {
        let images = e.images.iter().map(|p| io::read_ppm(&dir.join(p))).collect::<Result<Vec<_>>>()?;
        let labels = e
            .labels
            .map(|ls| ls.iter().map(|p| io::read_label_png(&dir.join(p))).collect::<Result<Vec<_>>>())
            .transpose()?;
        let depth =
            e.depth.map(|ds| ds.iter().map(|p| io::read_pfm(&dir.join(p))).collect::<Result<Vec<_>>>()).transpose()?;
        frames.push(Frame { ego_pose: e.ego_pose, images, labels, depth });
    }
    let set = FrameSet { rig: manifest.rig, frames };
    set.validate()?;
    Ok(set)
}
