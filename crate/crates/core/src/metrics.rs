//! Attention-placement metrics against a ground-truth region.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_TAU: f64 = 0.15;

fn check_roi(map: &Tensor, roi: &[usize]) -> Result<()> {
    if roi.is_empty() {
        return Err(Error::Metric("ground-truth region is empty".into()));
    }
    if let Some(&bad) = roi.iter().find(|&&c| c >= map.len()) {
        return Err(Error::Metric(format!("region token {bad} outside a map of {}", map.len())));
    }
    Ok(())
}

/// Share of region tokens whose attention is at least `tau`. The map is
/// thresholded as produced, without rescaling.
pub fn coverage_score(map: &Tensor, roi: &[usize], tau: f64) -> Result<f64> {
    check_roi(map, roi)?;
    let hits = roi.iter().filter(|&&c| map.data()[c] >= tau).count();
    Ok(hits as f64 / roi.len() as f64)
}

/// Mean attention over region tokens.
pub fn intensity_alignment(map: &Tensor, roi: &[usize]) -> Result<f64> {
    check_roi(map, roi)?;
    Ok(roi.iter().map(|&c| map.data()[c]).sum::<f64>() / roi.len() as f64)
}
