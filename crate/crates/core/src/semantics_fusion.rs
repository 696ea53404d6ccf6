//! Per-pixel label fusion from open-vocabulary detections.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LabelMap, UNCERTAIN_LABEL};
use crate::io;

/// One category with the detector phrases that map onto it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRow {
    pub id: u8,
    pub name: String,
    pub phrases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
}

/// Phrase to category mapping. Ids are dense `0..C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PromptRow>", into = "Vec<PromptRow>")]
pub struct PromptTable {
    rows: Vec<PromptRow>,
    lookup: HashMap<String, u8>,
}

fn normalize(phrase: &str) -> String {
    phrase.trim().to_lowercase()
}

impl TryFrom<Vec<PromptRow>> for PromptTable {
    type Error = Error;

    fn try_from(rows: Vec<PromptRow>) -> Result<Self> {
        if rows.is_empty() || rows.len() >= UNCERTAIN_LABEL as usize {
            return Err(Error::Config(format!("prompt table needs 1..=254 categories, got {}", rows.len())));
        }
        let mut lookup = HashMap::new();
        for (i, row) in rows.iter().enumerate() {
            if row.id as usize != i {
                return Err(Error::Config(format!("category ids must be dense; row {i} has id {}", row.id)));
            }
            if row.phrases.is_empty() {
                return Err(Error::Config(format!("category '{}' has no phrases", row.name)));
            }
            for p in &row.phrases {
                if let Some(prev) = lookup.insert(normalize(p), row.id) {
                    return Err(Error::Config(format!(
                        "phrase '{p}' maps to both '{}' and '{}'",
                        rows[prev as usize].name, row.name
                    )));
                }
            }
        }
        Ok(Self { rows, lookup })
    }
}

impl From<PromptTable> for Vec<PromptRow> {
    fn from(t: PromptTable) -> Self {
        t.rows
    }
}

// (name, phrases, color)
const BUILTIN: [(&str, &[&str], [u8; 3]); 15] = [
    ("barrier", &["barrier"], [255, 120, 50]),
    ("bicycle", &["bicycle", "bicyclist"], [255, 192, 203]),
    ("bus", &["bus"], [255, 255, 0]),
    ("car", &["sedan"], [0, 150, 245]),
    ("construction vehicle", &["crane"], [0, 255, 255]),
    ("motorcycle", &["motorcycle", "motorcyclist"], [200, 180, 0]),
    ("pedestrian", &["pedestrian"], [255, 0, 0]),
    ("traffic cone", &["cone"], [255, 240, 150]),
    ("trailer", &["trailer"], [135, 60, 0]),
    ("truck", &["truck"], [160, 32, 240]),
    ("drivable surface", &["highway"], [255, 0, 255]),
    ("sidewalk", &["sidewalk"], [75, 0, 75]),
    ("terrain", &["terrain"], [150, 240, 80]),
    ("manmade", &["building", "compound", "bridge", "pole", "billboard", "light", "ashbin"], [230, 230, 250]),
    ("vegetation", &["tree"], [0, 175, 0]),
];

impl PromptTable {
    /// The substitutions used for the Occ3D classes, without 'other' and
    /// 'other flat'. Unlisted classes use their own name as the phrase.
    pub fn builtin() -> Self {
        let rows: Vec<PromptRow> = BUILTIN
            .iter()
            .enumerate()
            .map(|(i, (name, phrases, color))| PromptRow {
                id: i as u8,
                name: name.to_string(),
                phrases: phrases.iter().map(|p| p.to_string()).collect(),
                color: Some(*color),
            })
            .collect();
        Self::try_from(rows).expect("builtin table is valid")
    }

    pub fn rows(&self) -> &[PromptRow] {
        &self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn category_of(&self, phrase: &str) -> Result<u8> {
        self.lookup
            .get(&normalize(phrase))
            .copied()
            .ok_or_else(|| Error::Config(format!("phrase '{phrase}' is not in the prompt table")))
    }

    pub fn id_of_name(&self, name: &str) -> Option<u8> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.id)
    }

    /// RGB color per id; rows without a color get a deterministic gray ramp.
    pub fn palette(&self) -> Vec<[u8; 3]> {
        self.rows
            .iter()
            .map(|r| {
                r.color.unwrap_or_else(|| {
                    let g = (40 + (r.id as usize * 37) % 200) as u8;
                    [g, g, g]
                })
            })
            .collect()
    }
}

pub fn load_prompt_table(path: &Path) -> Result<PromptTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Row-major `width × height` mask.
    pub mask: Vec<bool>,
    pub logit: f64,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMaskSet {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub entries: Vec<Detection>,
}

impl DetectionMaskSet {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize) -> Self {
        Self { image_id: image_id.into(), width, height, entries: Vec::new() }
    }

    pub fn push(&mut self, mask: Vec<bool>, logit: f64, phrase: impl Into<String>) -> Result<()> {
        if mask.len() != self.width * self.height {
            return Err(Error::mismatch(self.width * self.height, mask.len()));
        }
        if !(logit > 0.0 && logit <= 1.0) {
            return Err(Error::OutOfDomain { value: logit, domain: "(0, 1]" });
        }
        self.entries.push(Detection { mask, logit, phrase: phrase.into() });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEntry {
    /// 1-bit PNG, relative to the manifest's directory.
    pub mask_path: PathBuf,
    pub logit: f64,
    pub phrase: String,
}

/// On-disk description of one image's detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskManifest {
    pub image_id: String,
    /// Needed only when `entries` is empty; otherwise taken from the masks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[usize; 2]>,
    pub entries: Vec<MaskEntry>,
}

pub fn load_mask_set(manifest_path: &Path) -> Result<DetectionMaskSet> {
    let manifest: MaskManifest = io::read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut masks = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        masks.push(io::read_mask_png(&dir.join(&e.mask_path))?);
    }
    let (width, height) = match (masks.first(), manifest.size) {
        (Some(&(w, h, _)), _) => (w, h),
        (None, Some([w, h])) => (w, h),
        (None, None) => {
            return Err(Error::Config(format!("mask manifest '{}' has no entries and no size", manifest.image_id)))
        }
    };
    let mut set = DetectionMaskSet::new(manifest.image_id, width, height);
    for (e, (w, h, mask)) in manifest.entries.into_iter().zip(masks) {
        if (w, h) != (width, height) {
            return Err(Error::mismatch(
                format!("{width}x{height} mask"),
                format!("{w}x{h} in {}", e.mask_path.display()),
            ));
        }
        set.push(mask, e.logit, e.phrase)?;
    }
    Ok(set)
}

/// Per pixel, the label of the detection maximizing `logit·mask`.
///
/// Ties go to the lowest detection index; pixels no mask covers are
/// `UNCERTAIN_LABEL`.
pub fn fuse_labels(set: &DetectionMaskSet, table: &PromptTable) -> Result<LabelMap> {
    let n = set.width * set.height;
    let mut categories = Vec::with_capacity(set.entries.len());
    for e in &set.entries {
        if e.mask.len() != n {
            return Err(Error::mismatch(n, e.mask.len()));
        }
        categories.push(table.category_of(&e.phrase)?);
    }
    let mut labels = LabelMap::filled(set.width, set.height, UNCERTAIN_LABEL);
    let mut best = vec![0.0f64; n];
    for (e, &cat) in set.entries.iter().zip(&categories) {
        for (i, _) in e.mask.iter().enumerate().filter(|(_, &m)| m) {
            if e.logit > best[i] {
                best[i] = e.logit;
                labels.data[i] = cat;
            }
        }
    }
    Ok(labels)
}
