//! Probabilistic detection quality over box-shaped foreground regions.
//!
//! Each detection's corner uncertainty is modeled as two independent 2D
//! Gaussians taken from the diagonal 2x2 blocks of its corner-frame
//! covariance (top-left corner from rows/cols {0,1}, bottom-right from
//! {2,3}), floored by adding `eps^2 I`. A pixel's probability of lying
//! inside the detection is the product of the top-left orthant probability
//! and the bottom-right survival probability. Spatial quality exponentiates
//! the negative mean foreground/background losses (both normalized by the
//! ground-truth box pixel count); label quality is the probability the
//! detection assigns to the ground-truth class. Pairwise quality is their
//! geometric mean, detections and ground truths are matched by a Hungarian
//! assignment on the negated qualities, and the final score divides the
//! summed assigned quality by TP + FP + FN.
//!
//! Pixels are sampled at centers `(i + 0.5, j + 0.5)`: with zero covariance
//! and a vanishing floor an exact detection approaches quality 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::ProbabilisticDetection;
use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};

use super::hungarian::hungarian_assign;
use super::normal::{bvn_cdf, bvn_survival};
use super::{flatten_detections, EvalDet, GtStore};

/// Pixels with inside-probability below this are outside the detection's
/// support region and contribute no background loss.
const HEATMAP_THRESH: f64 = 0.0027;
/// Probability floor inside logarithms.
const LOG_FLOOR: f64 = 1e-14;
/// Support-region margin in corner standard deviations.
const ROI_SIGMAS: f64 = 5.0;

/// Per-class TP/FP/FN counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PdqClassCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdqReport {
    pub score: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Sum of assigned pairwise qualities (the score's numerator).
    pub total_pairwise_quality: f64,
    /// Mean spatial quality over true positives (0 when there are none).
    pub mean_spatial_quality: f64,
    /// Mean label quality over true positives (0 when there are none).
    pub mean_label_quality: f64,
    /// TP/FP/FN per class (FPs counted under the detection's class).
    pub per_class: BTreeMap<usize, PdqClassCounts>,
    pub conf_threshold: f64,
    /// Covariance floor, standard deviation in pixels per corner coordinate.
    pub eps: f64,
}

pub fn compute_pdq(
    dets_by_image: &BTreeMap<u64, Vec<ProbabilisticDetection>>,
    store: &GtStore,
    conf_threshold: f64,
    eps: f64,
) -> Result<PdqReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Configuration(format!(
            "covariance floor must be positive, got {eps}"
        )));
    }
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::Configuration(format!(
            "confidence threshold must lie in [0,1], got {conf_threshold}"
        )));
    }
    let flattened = flatten_detections(dets_by_image, store)?;
    let mut by_image: BTreeMap<u64, Vec<&EvalDet>> = BTreeMap::new();
    for det in &flattened {
        if det.confidence >= conf_threshold {
            by_image.entry(det.image_id).or_default().push(det);
        }
    }

    let (mut tp, mut fp, mut fn_count) = (0usize, 0usize, 0usize);
    let mut total_pq = 0.0;
    let mut spatial_sum = 0.0;
    let mut label_sum = 0.0;
    let mut per_class: BTreeMap<usize, PdqClassCounts> = BTreeMap::new();

    for image_id in store.image_ids() {
        let gts = store.instances(image_id);
        let dets = by_image.get(&image_id).map_or(&[][..], |v| v.as_slice());
        if dets.is_empty() {
            fn_count += gts.len();
            for gt in gts {
                per_class.entry(gt.class).or_default().false_negatives += 1;
            }
            continue;
        }
        if gts.is_empty() {
            fp += dets.len();
            for det in dets {
                per_class.entry(det.class).or_default().false_positives += 1;
            }
            continue;
        }
        let size = store.image_size(image_id).expect("image id from store");
        let rows = dets.len();
        let cols = gts.len();
        let mut pq = vec![vec![0.0f64; cols]; rows];
        let mut qs = vec![vec![0.0f64; cols]; rows];
        let mut ql = vec![vec![0.0f64; cols]; rows];
        for (d, det) in dets.iter().enumerate() {
            for (g, gt) in gts.iter().enumerate() {
                if det.class != gt.class {
                    continue;
                }
                let label = det.confidence;
                if label <= 0.0 {
                    continue;
                }
                let spatial = spatial_quality(det, &gt.bbox, size, eps);
                qs[d][g] = spatial;
                ql[d][g] = label;
                pq[d][g] = (spatial * label).sqrt();
            }
        }
        let cost: Vec<Vec<f64>> = pq.iter().map(|row| row.iter().map(|q| -q).collect()).collect();
        let assignment = hungarian_assign(&cost)?;
        let mut matched_dets = vec![false; rows];
        let mut matched_gts = vec![false; cols];
        for (d, col) in assignment.row_to_col.iter().enumerate() {
            if let Some(g) = col {
                if pq[d][*g] > 0.0 {
                    matched_dets[d] = true;
                    matched_gts[*g] = true;
                    total_pq += pq[d][*g];
                    spatial_sum += qs[d][*g];
                    label_sum += ql[d][*g];
                    per_class.entry(gts[*g].class).or_default().true_positives += 1;
                }
            }
        }
        let image_tp = matched_dets.iter().filter(|&&m| m).count();
        tp += image_tp;
        fp += rows - image_tp;
        fn_count += cols - image_tp;
        for (d, det) in dets.iter().enumerate() {
            if !matched_dets[d] {
                per_class.entry(det.class).or_default().false_positives += 1;
            }
        }
        for (g, gt) in gts.iter().enumerate() {
            if !matched_gts[g] {
                per_class.entry(gt.class).or_default().false_negatives += 1;
            }
        }
    }

    let denom = tp + fp + fn_count;
    Ok(PdqReport {
        score: if denom == 0 {
            0.0
        } else {
            total_pq / denom as f64
        },
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_count,
        total_pairwise_quality: total_pq,
        mean_spatial_quality: if tp == 0 { 0.0 } else { spatial_sum / tp as f64 },
        mean_label_quality: if tp == 0 { 0.0 } else { label_sum / tp as f64 },
        per_class,
        conf_threshold,
        eps,
    })
}

/// One corner's Gaussian after flooring, in standardized form.
struct CornerGaussian {
    mean_x: f64,
    mean_y: f64,
    sx: f64,
    sy: f64,
    rho: f64,
}

impl CornerGaussian {
    fn new(mean_x: f64, mean_y: f64, vxx: f64, vxy: f64, vyy: f64, eps: f64) -> Self {
        let vx = vxx + eps * eps;
        let vy = vyy + eps * eps;
        let sx = vx.sqrt();
        let sy = vy.sqrt();
        let rho = (vxy / (sx * sy)).clamp(-0.999_999, 0.999_999);
        Self {
            mean_x,
            mean_y,
            sx,
            sy,
            rho,
        }
    }

    fn prob_leq(&self, x: f64, y: f64) -> f64 {
        bvn_cdf(
            (x - self.mean_x) / self.sx,
            (y - self.mean_y) / self.sy,
            self.rho,
        )
    }

    fn prob_geq(&self, x: f64, y: f64) -> f64 {
        bvn_survival(
            (x - self.mean_x) / self.sx,
            (y - self.mean_y) / self.sy,
            self.rho,
        )
    }
}

/// Integer pixel indices whose centers `i + 0.5` fall inside `[lo, hi]`,
/// clipped to the image extent `[0, extent)`.
fn center_range(lo: f64, hi: f64, extent: f64) -> Option<(i64, i64)> {
    let start = (lo - 0.5).ceil().max(0.0) as i64;
    let end = (hi - 0.5).floor().min(extent - 1.0) as i64;
    if end < start {
        None
    } else {
        Some((start, end))
    }
}

/// Exponentiated negative mean foreground/background loss for one
/// detection-ground-truth pair.
fn spatial_quality(det: &EvalDet, gt_box: &BBox, image: ImageSize, eps: f64) -> f64 {
    let [dx1, dy1, dx2, dy2] = det.bbox.coords();
    let c = &det.cov;
    let tl = CornerGaussian::new(dx1, dy1, c[0][0], c[0][1], c[1][1], eps);
    let br = CornerGaussian::new(dx2, dy2, c[2][2], c[2][3], c[3][3], eps);
    let [gx1, gy1, gx2, gy2] = gt_box.coords();

    let Some((fgx0, fgx1)) = center_range(gx1, gx2, image.width) else {
        return 0.0;
    };
    let Some((fgy0, fgy1)) = center_range(gy1, gy2, image.height) else {
        return 0.0;
    };
    let n_fg = ((fgx1 - fgx0 + 1) * (fgy1 - fgy0 + 1)) as f64;

    let prob_inside = |x: f64, y: f64| tl.prob_leq(x, y) * br.prob_geq(x, y);

    let mut fg_loss = 0.0;
    for iy in fgy0..=fgy1 {
        let y = iy as f64 + 0.5;
        for ix in fgx0..=fgx1 {
            let x = ix as f64 + 0.5;
            fg_loss -= prob_inside(x, y).max(LOG_FLOOR).ln();
        }
    }
    fg_loss /= n_fg;

    // Support region of the detection: wherever the inside-probability can
    // still reach the heatmap threshold.
    let roi_x = center_range(
        (dx1 - ROI_SIGMAS * tl.sx).max(0.0),
        (dx2 + ROI_SIGMAS * br.sx).min(image.width),
        image.width,
    );
    let roi_y = center_range(
        (dy1 - ROI_SIGMAS * tl.sy).max(0.0),
        (dy2 + ROI_SIGMAS * br.sy).min(image.height),
        image.height,
    );
    let mut bg_loss = 0.0;
    if let (Some((rx0, rx1)), Some((ry0, ry1))) = (roi_x, roi_y) {
        for iy in ry0..=ry1 {
            let y = iy as f64 + 0.5;
            let inside_gt_y = y >= gy1 && y <= gy2;
            for ix in rx0..=rx1 {
                let x = ix as f64 + 0.5;
                if inside_gt_y && x >= gx1 && x <= gx2 {
                    continue;
                }
                let p = prob_inside(x, y);
                if p >= HEATMAP_THRESH {
                    bg_loss -= (1.0 - p).max(LOG_FLOOR).ln();
                }
            }
        }
    }
    bg_loss /= n_fg;

    (-(fg_loss + bg_loss)).exp()
}
