//! Sum over supervision levels of the per-level mean squared error.

use tch::Tensor;

use crate::error::{Error, Result};
use crate::heatmap::HeatmapPyramid;

/// Multiscale loss on tensors. `predictions[k]` and `targets[k]` must have
/// identical shapes; every level contributes the mean over batch, channels
/// and pixels.
pub fn multiscale_loss(predictions: &[Tensor], targets: &[Tensor]) -> Result<Tensor> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} prediction levels vs {} target levels",
            predictions.len(),
            targets.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (k, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if p.size() != t.size() {
            return Err(Error::Shape(format!("level {k}: prediction {:?} vs target {:?}", p.size(), t.size())));
        }
        let level = p.mse_loss(&t.to_kind(p.kind()), tch::Reduction::Mean);
        total = Some(match total {
            Some(acc) => acc + level,
            None => level,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Same loss on rendered pyramids, accumulated in f64.
pub fn multiscale_loss_pyramids(predictions: &HeatmapPyramid, targets: &HeatmapPyramid) -> Result<f64> {
    if predictions.levels.is_empty() || predictions.levels.len() != targets.levels.len() {
        return Err(Error::Shape(format!(
            "{} prediction levels vs {} target levels",
            predictions.levels.len(),
            targets.levels.len()
        )));
    }
    let mut total = 0.0;
    for (k, (p, t)) in predictions.levels.iter().zip(&targets.levels).enumerate() {
        if (p.width, p.height, p.channels()) != (t.width, t.height, t.channels()) {
            return Err(Error::Shape(format!(
                "level {k}: {}x{}x{} vs {}x{}x{}",
                p.channels(),
                p.height,
                p.width,
                t.channels(),
                t.height,
                t.width
            )));
        }
        let sse: f64 = p
            .values
            .iter()
            .zip(&t.values)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        total += sse / p.values.len().max(1) as f64;
    }
    Ok(total)
}
