//! Patch-wise prediction metrics (P-MAE_K, P-MSE_K) and high-density masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{patch_side, DensityMap, Grid2D};

/// Ground truth for one predicted map: either a full map or its per-patch
/// counts keyed by K.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    Map(DensityMap),
    PatchCounts(Vec<(usize, Vec<f64>)>),
}

impl GroundTruth {
    fn patch_counts(&self, k: usize) -> Result<Vec<f64>> {
        match self {
            GroundTruth::Map(m) => m.grid().patch_sums(k),
            GroundTruth::PatchCounts(tables) => {
                let (_, counts) = tables.iter().find(|(kk, _)| *kk == k).ok_or_else(|| {
                    Error::InvalidPatchCount {
                        k,
                        reason: "no ground-truth count table for this K".into(),
                    }
                })?;
                if counts.len() != k {
                    return Err(Error::DimensionMismatch(format!(
                        "count table for K={k} has {} entries",
                        counts.len()
                    )));
                }
                Ok(counts.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub k: usize,
    pub pmae: f64,
    pub pmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_maps: usize,
    pub results: Vec<PatchScore>,
}

impl MetricReport {
    pub fn get(&self, k: usize) -> Option<&PatchScore> {
        self.results.iter().find(|s| s.k == k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean absolute and squared per-patch count error over all maps and patches.
pub fn evaluate(preds: &[DensityMap], gts: &[GroundTruth], ks: &[usize]) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidValue("no maps to evaluate".into()));
    }
    for (p, g) in preds.iter().zip(gts) {
        if let GroundTruth::Map(g) = g {
            if g.dims() != p.dims() {
                return Err(Error::DimensionMismatch(format!(
                    "prediction {:?} vs ground truth {:?}",
                    p.dims(),
                    g.dims()
                )));
            }
        }
    }
    let mut results = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut abs = 0.0;
        let mut sq = 0.0;
        for (p, g) in preds.iter().zip(gts) {
            let pred = p.grid().patch_sums(k)?;
            let truth = g.patch_counts(k)?;
            for (c, d) in truth.iter().zip(&pred) {
                let e = c - d;
                abs += e.abs();
                sq += e * e;
            }
        }
        let denom = (preds.len() * k) as f64;
        results.push(PatchScore {
            k,
            pmae: abs / denom,
            pmse: sq / denom,
        });
    }
    Ok(MetricReport {
        n_maps: preds.len(),
        results,
    })
}

/// Convenience wrapper when ground truth is available as maps.
pub fn evaluate_maps(preds: &[DensityMap], gts: &[DensityMap], ks: &[usize]) -> Result<MetricReport> {
    let gts: Vec<GroundTruth> = gts.iter().cloned().map(GroundTruth::Map).collect();
    evaluate(preds, &gts, ks)
}

/// `k x k` mask (row-major) of patches whose mass reaches `threshold` persons.
pub fn high_density_regions(density: &DensityMap, k: usize, threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidValue(format!("threshold must be positive, got {threshold}")));
    }
    Ok(density.grid().patch_sums(k)?.into_iter().map(|s| s >= threshold).collect())
}

/// The mask as a 0/1 grid, for writing as DGRID.
pub fn mask_grid(mask: &[bool], k: usize) -> Result<Grid2D> {
    let side = patch_side(k)?;
    Grid2D::new(side, side, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}
