//! COCO-style mean average precision over IoU thresholds 0.50:0.95.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::ProbabilisticDetection;
use crate::error::Result;
use crate::geometry::iou;

use super::{flatten_detections, EvalDet, GtStore};

/// mAP plus the per-class APs (each averaged over the IoU thresholds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub mean_ap: f64,
    pub per_class: BTreeMap<usize, f64>,
    pub iou_thresholds: Vec<f64>,
}

pub(crate) fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Greedy confidence-ordered matching per IoU threshold; AP via 101-point
/// interpolated precision; classes with zero ground truth are excluded.
pub fn compute_map(
    dets_by_image: &BTreeMap<u64, Vec<ProbabilisticDetection>>,
    store: &GtStore,
) -> Result<MapReport> {
    let dets = flatten_detections(dets_by_image, store)?;
    let thresholds = iou_thresholds();
    let classes = store.classes();
    let mut per_class = BTreeMap::new();
    for &class in &classes {
        let mut class_dets: Vec<&EvalDet> = dets.iter().filter(|d| d.class == class).collect();
        class_dets.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(a.image_id.cmp(&b.image_id))
        });
        let num_gt = store.class_instance_count(class);
        let mut ap_sum = 0.0;
        for &thr in &thresholds {
            ap_sum += average_precision(&class_dets, store, class, thr, num_gt)?;
        }
        per_class.insert(class, ap_sum / thresholds.len() as f64);
    }
    let mean_ap = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(MapReport {
        mean_ap,
        per_class,
        iou_thresholds: thresholds,
    })
}

/// One class, one IoU threshold: greedy matching in confidence order, then
/// 101-point interpolation of the precision-recall curve.
fn average_precision(
    sorted_dets: &[&EvalDet],
    store: &GtStore,
    class: usize,
    iou_threshold: f64,
    num_gt: usize,
) -> Result<f64> {
    if num_gt == 0 {
        return Ok(0.0);
    }
    let mut taken: BTreeMap<(u64, u64), ()> = BTreeMap::new();
    let mut tp_flags = Vec::with_capacity(sorted_dets.len());
    for det in sorted_dets {
        let mut best: Option<(u64, f64)> = None;
        for gt in store.instances(det.image_id) {
            if gt.class != class || taken.contains_key(&(det.image_id, gt.instance_id)) {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox)?;
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gt.instance_id, overlap));
            }
        }
        match best {
            Some((id, _)) => {
                taken.insert((det.image_id, id), ());
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    Ok(ap_from_flags(&tp_flags, num_gt))
}

/// 101-point interpolated AP from ordered TP flags.
pub(crate) fn ap_from_flags(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let n = tp_flags.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, &flag) in tp_flags.iter().enumerate() {
        tp += usize::from(flag);
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // Monotone non-increasing interpolation from the right.
    for i in (0..n.saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut ptr = 0usize;
    for r_idx in 0..=100 {
        let r = r_idx as f64 / 100.0;
        while ptr < n && recalls[ptr] < r - 1e-12 {
            ptr += 1;
        }
        if ptr < n {
            ap += precisions[ptr];
        }
    }
    ap / 101.0
}
