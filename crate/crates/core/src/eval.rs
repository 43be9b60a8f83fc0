//! Segmentation-quality metrics (IoU, average precision) and the
//! measurement-precision statistic used in the result tables.

use crate::raster::{BitMask, RasterError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty measurement vector")]
    Empty,
    #[error("truth value at index {index} is {value}, must be > 0")]
    NonpositiveTruth { index: usize, value: f64 },
}

/// Intersection over union. Two empty masks have IoU 0.
pub fn iou(a: &BitMask, b: &BitMask) -> Result<f64, EvalError> {
    let union = a.union_area(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_area(b)? as f64 / union as f64)
}

/// One scored prediction of a single class.
#[derive(Debug, Clone)]
pub struct Detection {
    pub mask: BitMask,
    pub score: f32,
}

/// Average precision of scored mask predictions against ground truth at one
/// IoU threshold.
///
/// Predictions are visited in descending score order (stable on ties). Each
/// is matched greedily to the unmatched truth of highest IoU, counted as a
/// true positive when that IoU reaches the threshold, and each truth may be
/// claimed once. AP is the area under the raw precision-recall steps,
/// summing precision-at-each-hit times the recall increment. With no truths
/// the recall axis is degenerate and the result is 0.
pub fn average_precision(
    dets: &[Detection],
    truths: &[BitMask],
    iou_thresh: f64,
) -> Result<f64, EvalError> {
    if truths.is_empty() {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut matched = vec![false; truths.len()];
    let mut tp = 0usize;
    let mut ap = 0.0;
    let recall_step = 1.0 / truths.len() as f64;
    for (rank, &pi) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ti, truth) in truths.iter().enumerate() {
            if matched[ti] {
                continue;
            }
            let v = iou(&dets[pi].mask, truth)?;
            let better = match best {
                None => true,
                Some((_, bv)) => v > bv,
            };
            if better {
                best = Some((ti, v));
            }
        }
        if let Some((ti, v)) = best {
            if v >= iou_thresh {
                matched[ti] = true;
                tp += 1;
                let precision = tp as f64 / (rank + 1) as f64;
                ap += recall_step * precision;
            }
        }
    }
    Ok(ap)
}

/// The standard 10-threshold grid .50:.05:.95.
pub const COCO_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Mean AP over the .50:.05:.95 threshold grid.
pub fn mean_average_precision(dets: &[Detection], truths: &[BitMask]) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    for &t in &COCO_THRESHOLDS {
        sum += average_precision(dets, truths, t)?;
    }
    Ok(sum / COCO_THRESHOLDS.len() as f64)
}

/// The tables' precision statistic: 100 minus the mean absolute percentage
/// error of `detected` against `truth`.
pub fn mean_precision(detected: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    if detected.len() != truth.len() {
        return Err(EvalError::LengthMismatch(detected.len(), truth.len()));
    }
    if detected.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut mape = 0.0;
    for (i, (&d, &t)) in detected.iter().zip(truth).enumerate() {
        if t <= 0.0 {
            return Err(EvalError::NonpositiveTruth { index: i, value: t });
        }
        mape += 100.0 * (d - t).abs() / t;
    }
    Ok(100.0 - mape / detected.len() as f64)
}
