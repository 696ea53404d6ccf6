//! Fit checkpoints: the step count, the fit configuration and the grid.
//!
//! Layout (little-endian): `OCKP`, u32 version, u64 step, u32 config length,
//! config as compact JSON, then an OCCF grid container.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::OccupancyGrid;
use crate::io::{grid_from_bytes, grid_to_bytes};

use super::FitConfig;

const MAGIC: &[u8; 4] = b"OCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Optimizer steps taken to produce `grid`.
    pub step: usize,
    pub config: FitConfig,
    pub grid: OccupancyGrid,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("fit config serializes");
        let grid = grid_to_bytes(&self.grid);
        let mut b = Vec::with_capacity(20 + config.len() + grid.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.step as u64).to_le_bytes());
        b.extend_from_slice(&(config.len() as u32).to_le_bytes());
        b.extend_from_slice(&config);
        b.extend_from_slice(&grid);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format("OCKP", d);
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(bad("missing OCKP header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let step = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let end =
            20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated config".into()))?;
        let config: FitConfig = serde_json::from_slice(&bytes[20..end]).map_err(|e| bad(format!("config: {e}")))?;
        let grid = grid_from_bytes(&bytes[end..])?;
        Ok(Self { step, config, grid })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
