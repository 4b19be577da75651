//! Window manifests: JSON documents listing the files of one forecasting
//! window. Relative paths are resolved against the manifest's directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use crowdcast::flow::{baseline_flow_density, FlowParams};
use crowdcast::forecaster::SampleWindow;
use crowdcast::grid::read_grid_auto;
use crowdcast::{DensityMap, Frame};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowManifest {
    /// Observed frames, oldest first.
    pub frames: Vec<PathBuf>,
    /// Density maps aligned with `frames`.
    pub densities: Vec<PathBuf>,
    /// Precomputed flow-warped last density.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warped: Option<PathBuf>,
    /// Ground truth for the next interval; required for training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
}

impl WindowManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// Loads every listed grid. When no warp is listed and `flow` is given,
    /// the warp is estimated from the last two frames.
    pub fn load(&self, base: &Path, flow: Option<&FlowParams>) -> Result<SampleWindow> {
        let frames = self.frames.iter().map(|p| read_frame(&base.join(p))).collect::<Result<Vec<_>>>()?;
        let densities = self.densities.iter().map(|p| read_density(&base.join(p))).collect::<Result<Vec<_>>>()?;
        let target = self.target.as_ref().map(|p| read_density(&base.join(p))).transpose()?;
        let flow_warped = match (&self.warped, flow) {
            (Some(p), _) => Some(read_density(&base.join(p))?),
            (None, Some(params)) if frames.len() >= 2 && frames.len() == densities.len() => {
                let n = frames.len();
                Some(baseline_flow_density(&frames[n - 2], &frames[n - 1], &densities[n - 1], params)?)
            }
            (None, _) => None,
        };
        Ok(SampleWindow {
            frames,
            densities,
            target,
            flow_warped,
        })
    }
}

/// Directory relative paths in a manifest are resolved against.
pub fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn read_frame(path: &Path) -> Result<Frame> {
    let grid = read_grid_auto(path).with_context(|| format!("reading frame {}", path.display()))?;
    Frame::new(grid).with_context(|| format!("frame {}", path.display()))
}

pub fn read_density(path: &Path) -> Result<DensityMap> {
    let grid = read_grid_auto(path).with_context(|| format!("reading density {}", path.display()))?;
    DensityMap::new(grid).with_context(|| format!("density {}", path.display()))
}
