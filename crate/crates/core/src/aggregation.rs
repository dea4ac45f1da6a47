//! Cluster aggregation: scaled-max confidence, softmax-weighted mean box,
//! and the weighted spatial covariance of the member boxes.
//!
//! The final confidence of a cluster scales its maximum member confidence by
//! `alpha = min(|C|, G) / G`: clusters supported by few query groups are
//! likely false positives and get suppressed, while full-support clusters
//! keep their maximum score. Box and covariance use softmax weights over the
//! raw member confidences (no temperature, no max subtraction; confidences
//! live in `[0,1]`).

use serde::{Deserialize, Serialize};

use crate::clustering::Cluster;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxCovariance, Parameterization};

/// Confidence aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationStrategy {
    /// Arithmetic mean of member confidences.
    MeanConf,
    /// Maximum member confidence, unscaled.
    MaxConf,
    /// Maximum member confidence scaled by `min(|C|, G) / G`.
    MaxConfScaled,
}

/// One aggregated detection with semantic and spatial uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilisticDetection {
    pub image_id: u64,
    /// Aggregated box, normalized cx/cy/w/h.
    pub bbox: BBox,
    /// 4x4 spatial covariance in the same frame as `bbox`; zero for
    /// singleton clusters.
    pub covariance: BoxCovariance,
    pub class: usize,
    pub confidence: f64,
    /// Cluster member count (may exceed the number of query groups).
    pub support: usize,
}

fn require_nonempty(cluster: &Cluster) -> Result<()> {
    if cluster.is_empty() {
        return Err(Error::Cluster("cannot aggregate an empty cluster".into()));
    }
    Ok(())
}

/// Final confidence score of a cluster under the chosen strategy.
pub fn final_confidence(
    cluster: &Cluster,
    num_groups: usize,
    strategy: AggregationStrategy,
) -> Result<f64> {
    require_nonempty(cluster)?;
    if num_groups == 0 {
        return Err(Error::Configuration("num_groups must be >= 1".into()));
    }
    let confs = cluster.confidences();
    let max = confs.iter().fold(f64::NEG_INFINITY, |m, &c| m.max(c));
    Ok(match strategy {
        AggregationStrategy::MeanConf => confs.iter().sum::<f64>() / confs.len() as f64,
        AggregationStrategy::MaxConf => max,
        AggregationStrategy::MaxConfScaled => {
            let alpha = cluster.len().min(num_groups) as f64 / num_groups as f64;
            alpha * max
        }
    })
}

/// Softmax over raw confidences: `w_i = exp(c_i) / sum_j exp(c_j)`.
pub fn softmax_weights(confidences: &[f64]) -> Vec<f64> {
    let sum: f64 = confidences.iter().map(|c| c.exp()).sum();
    confidences.iter().map(|c| c.exp() / sum).collect()
}

/// Softmax-confidence-weighted mean of the member boxes, coordinatewise in
/// normalized cx/cy/w/h.
pub fn aggregate_box(cluster: &Cluster) -> Result<BBox> {
    require_nonempty(cluster)?;
    for m in &cluster.members {
        if m.bbox.param() != Parameterization::CxcywhNorm {
            return Err(Error::Parameterization(
                "aggregation expects normalized cx/cy/w/h member boxes".into(),
            ));
        }
    }
    let weights = softmax_weights(&cluster.confidences());
    // Weighted mean in shifted form, b_ref + sum w_i (b_i - b_ref): exact
    // when all members coincide, which keeps the zero-noise pipeline closed.
    let reference = cluster.members[0].bbox.coords();
    let mut acc = [0.0f64; 4];
    for (member, w) in cluster.members.iter().zip(&weights) {
        for ((a, c), r) in acc.iter_mut().zip(member.bbox.coords()).zip(reference) {
            *a += w * (c - r);
        }
    }
    BBox::cxcywh_norm(
        reference[0] + acc[0],
        reference[1] + acc[1],
        reference[2] + acc[2],
        reference[3] + acc[3],
    )
}

/// Softmax-weighted covariance of member boxes about the aggregated box:
/// `sum_i w_i (b_i - b_m)(b_i - b_m)^T`. Symmetric PSD by construction;
/// exactly zero for singleton clusters.
pub fn aggregate_covariance(cluster: &Cluster, mean_box: &BBox) -> Result<BoxCovariance> {
    require_nonempty(cluster)?;
    let weights = softmax_weights(&cluster.confidences());
    let mean = mean_box.coords();
    let mut m = [[0.0f64; 4]; 4];
    for (member, w) in cluster.members.iter().zip(&weights) {
        let coords = member.bbox.coords();
        let dev = [
            coords[0] - mean[0],
            coords[1] - mean[1],
            coords[2] - mean[2],
            coords[3] - mean[3],
        ];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] += w * dev[i] * dev[j];
            }
        }
    }
    BoxCovariance::new(Parameterization::CxcywhNorm, m)
}

/// Aggregates every cluster, drops results below the confidence threshold,
/// and sorts the survivors by confidence descending.
pub fn aggregate_all(
    clusters: &[Cluster],
    num_groups: usize,
    strategy: AggregationStrategy,
    conf_threshold: f64,
    image_id: u64,
) -> Result<Vec<ProbabilisticDetection>> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::Configuration(format!(
            "confidence threshold must lie in [0,1], got {conf_threshold}"
        )));
    }
    let mut out = Vec::with_capacity(clusters.len());
    for cluster in clusters {
        let confidence = final_confidence(cluster, num_groups, strategy)?;
        if confidence < conf_threshold {
            continue;
        }
        let bbox = aggregate_box(cluster)?;
        let covariance = aggregate_covariance(cluster, &bbox)?;
        out.push(ProbabilisticDetection {
            image_id,
            bbox,
            covariance,
            class: cluster.label,
            confidence,
            support: cluster.len(),
        });
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(out)
}
