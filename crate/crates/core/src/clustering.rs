//! Basic sequential clustering of pooled detections by IoU and class.
//!
//! Detections are sorted by confidence (descending) and processed greedily:
//! a detection joins the best-overlapping existing cluster of its class when
//! the IoU with that cluster's seed box reaches the threshold, otherwise it
//! opens a new cluster. Clusters may grow beyond the number of query groups;
//! no per-group uniqueness constraint is applied.

use crate::decoder::Detection;
use crate::error::{Error, Result};
use crate::geometry::iou;

/// Clustering parameters. The multi-cluster assignment rule is fixed to
/// "highest IoU" (ties resolved toward the earliest-created cluster).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringParams {
    /// IoU threshold in `(0, 1]`.
    pub theta: f64,
}

impl ClusteringParams {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::Configuration(format!(
                "theta must lie in (0,1], got {theta}"
            )));
        }
        Ok(Self { theta })
    }
}

impl Default for ClusteringParams {
    fn default() -> Self {
        Self { theta: 0.7 }
    }
}

/// Confidence-sorted detections judged to cover one ground-truth instance.
///
/// `members[0]` is the seed: the highest-confidence detection, fixed at
/// creation and used as the cluster's comparison box.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub label: usize,
    pub members: Vec<Detection>,
}

impl Cluster {
    pub fn seed(&self) -> &Detection {
        &self.members[0]
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.confidence).collect()
    }
}

/// Descending confidence, ties broken by `(group_index, query_index)`
/// ascending. This makes clustering independent of input permutation.
pub fn sort_detections(pool: &[Detection]) -> Vec<Detection> {
    let mut sorted = pool.to_vec();
    sorted.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.group_index.cmp(&b.group_index))
            .then(a.query_index.cmp(&b.query_index))
    });
    sorted
}

/// Greedy sequential clustering of the pooled detections.
pub fn bsas_cluster(pool: &[Detection], params: &ClusteringParams) -> Result<Vec<Cluster>> {
    let mut clusters: Vec<Cluster> = Vec::new();
    for det in sort_detections(pool) {
        let mut best: Option<(usize, f64)> = None;
        for (idx, cluster) in clusters.iter().enumerate() {
            if cluster.label != det.class {
                continue;
            }
            let overlap = iou(&det.bbox, &cluster.seed().bbox)?;
            if overlap >= params.theta {
                // Strict comparison keeps the earliest-created cluster on ties.
                let better = best.is_none_or(|(_, b)| overlap > b);
                if better {
                    best = Some((idx, overlap));
                }
            }
        }
        match best {
            Some((idx, _)) => clusters[idx].members.push(det),
            None => clusters.push(Cluster {
                label: det.class,
                members: vec![det],
            }),
        }
    }
    Ok(clusters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn det(class: usize, corners: [f64; 4], conf: f64, group: usize, query: usize) -> Detection {
        // Scale pixel-style corners into the unit square.
        let [x1, y1, x2, y2] = corners.map(|c| c / 20.0);
        let bbox = BBox::cxcywh_norm(
            (x1 + x2) / 2.0,
            (y1 + y2) / 2.0,
            x2 - x1,
            y2 - y1,
        )
        .unwrap();
        Detection::new(bbox, class, conf, group, query).unwrap()
    }

    #[test]
    fn sort_empty() {
        assert!(sort_detections(&[]).is_empty());
    }

    #[test]
    fn sort_descending() {
        let pool = vec![
            det(1, [0.0, 0.0, 2.0, 2.0], 0.3, 1, 1),
            det(1, [0.0, 0.0, 2.0, 2.0], 0.9, 1, 2),
            det(1, [0.0, 0.0, 2.0, 2.0], 0.5, 1, 3),
        ];
        let sorted = sort_detections(&pool);
        let confs: Vec<f64> = sorted.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.9, 0.5, 0.3]);
    }

    #[test]
    fn sort_ties_by_group_then_query() {
        let pool = vec![
            det(1, [0.0, 0.0, 2.0, 2.0], 0.7, 2, 1),
            det(1, [0.0, 0.0, 2.0, 2.0], 0.7, 1, 4),
        ];
        let sorted = sort_detections(&pool);
        assert_eq!(sorted[0].group_index, 1);
        assert_eq!(sorted[1].group_index, 2);
    }

    #[test]
    fn single_detection_single_cluster() {
        let pool = vec![det(1, [0.0, 0.0, 2.0, 2.0], 0.9, 1, 1)];
        let clusters = bsas_cluster(&pool, &ClusteringParams::default()).unwrap();
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].len(), 1);
    }

    #[test]
    fn class_splits_clusters() {
        // A and B share a box and class; C shares the box with a new class.
        let pool = vec![
            det(1, [0.0, 0.0, 2.0, 2.0], 0.9, 1, 1),
            det(1, [0.0, 0.0, 2.0, 2.0], 0.8, 2, 1),
            det(2, [0.0, 0.0, 2.0, 2.0], 0.7, 3, 1),
        ];
        let clusters = bsas_cluster(&pool, &ClusteringParams::default()).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0].label, 1);
        assert_eq!(clusters[0].len(), 2);
        assert_eq!(clusters[1].label, 2);
        assert_eq!(clusters[1].len(), 1);
    }

    #[test]
    fn low_iou_splits_clusters() {
        let pool = vec![
            det(1, [0.0, 0.0, 2.0, 2.0], 0.9, 1, 1),
            det(1, [10.0, 10.0, 12.0, 12.0], 0.8, 2, 1),
        ];
        let clusters = bsas_cluster(&pool, &ClusteringParams::default()).unwrap();
        assert_eq!(clusters.len(), 2);
    }

    #[test]
    fn invalid_theta_rejected() {
        assert!(ClusteringParams::new(0.0).is_err());
        assert!(ClusteringParams::new(1.5).is_err());
        assert!(ClusteringParams::new(1.0).is_ok());
    }

    fn random_pool(seed: u64, len: usize) -> Vec<Detection> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len)
            .map(|i| {
                let w = rng.random_range(0.05..0.3);
                let h = rng.random_range(0.05..0.3);
                let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
                let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
                Detection::new(
                    BBox::cxcywh_norm(cx, cy, w, h).unwrap(),
                    rng.random_range(1..=3),
                    (rng.random_range(0..=100) as f64) / 100.0,
                    rng.random_range(1..=5),
                    i + 1,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn partition_and_seed_dominance() {
        let params = ClusteringParams::default();
        for seed in 0..100u64 {
            let pool = random_pool(seed, 25);
            let clusters = bsas_cluster(&pool, &params).unwrap();
            let total: usize = clusters.iter().map(Cluster::len).sum();
            assert_eq!(total, pool.len());
            for c in &clusters {
                assert!(c.members.iter().all(|m| m.class == c.label));
                let seed_conf = c.seed().confidence;
                assert!(c.members.iter().all(|m| m.confidence <= seed_conf));
                for m in &c.members {
                    assert!(iou(&m.bbox, &c.seed().bbox).unwrap() >= params.theta);
                }
            }
        }
    }

    #[test]
    fn output_independent_of_input_permutation() {
        let params = ClusteringParams::default();
        for seed in 0..20u64 {
            let pool = random_pool(seed, 20);
            let mut shuffled = pool.clone();
            shuffled.reverse();
            shuffled.swap(0, 5);
            let a = bsas_cluster(&pool, &params).unwrap();
            let b = bsas_cluster(&shuffled, &params).unwrap();
            assert_eq!(a, b);
        }
    }
}
