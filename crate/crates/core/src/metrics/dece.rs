//! Detection expected calibration error with reliability-diagram bins.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::ProbabilisticDetection;
use crate::error::{Error, Result};

use super::{flatten_detections, greedy_tp_flags, GtStore};

/// One reliability-diagram bin over a confidence sub-range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    /// Mean confidence of the detections in the bin (0 when empty).
    pub mean_confidence: f64,
    /// TP fraction of the detections in the bin (0 when empty).
    pub precision: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeceReport {
    pub dece: f64,
    pub bins: Vec<ReliabilityBin>,
    /// Number of detections that survived the confidence threshold.
    pub evaluated: usize,
    /// True when nothing survived the threshold (D-ECE is vacuously 0).
    pub no_samples: bool,
    pub conf_threshold: f64,
    pub match_iou: f64,
}

/// Bins the thresholded detections by confidence and averages the absolute
/// per-bin gap between precision and mean confidence, weighted by bin mass.
pub fn compute_dece(
    dets_by_image: &BTreeMap<u64, Vec<ProbabilisticDetection>>,
    store: &GtStore,
    num_bins: usize,
    conf_threshold: f64,
    match_iou: f64,
) -> Result<DeceReport> {
    if num_bins == 0 {
        return Err(Error::Configuration("bin count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&match_iou) {
        return Err(Error::Configuration(format!(
            "match IoU must lie in [0,1], got {match_iou}"
        )));
    }
    let mut dets = flatten_detections(dets_by_image, store)?;
    dets.retain(|d| d.confidence >= conf_threshold);
    let flags = greedy_tp_flags(&dets, store, match_iou)?;

    let mut conf_sum = vec![0.0f64; num_bins];
    let mut tp_count = vec![0usize; num_bins];
    let mut count = vec![0usize; num_bins];
    for (det, &tp) in dets.iter().zip(&flags) {
        let idx = ((det.confidence * num_bins as f64) as usize).min(num_bins - 1);
        conf_sum[idx] += det.confidence;
        tp_count[idx] += usize::from(tp);
        count[idx] += 1;
    }
    let total: usize = count.iter().sum();
    let mut dece = 0.0;
    let mut bins = Vec::with_capacity(num_bins);
    for b in 0..num_bins {
        let lo = b as f64 / num_bins as f64;
        let hi = (b + 1) as f64 / num_bins as f64;
        let (mean_confidence, precision) = if count[b] > 0 {
            (
                conf_sum[b] / count[b] as f64,
                tp_count[b] as f64 / count[b] as f64,
            )
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            dece += (count[b] as f64 / total as f64) * (precision - mean_confidence).abs();
        }
        bins.push(ReliabilityBin {
            lo,
            hi,
            mean_confidence,
            precision,
            count: count[b],
        });
    }
    Ok(DeceReport {
        dece,
        bins,
        evaluated: total,
        no_samples: total == 0,
        conf_threshold,
        match_iou,
    })
}
