//! Seeded synthetic scene and ensemble generation.
//!
//! Stands in for trained models: scenes are rejection-sampled ground-truth
//! layouts, and ensembles are `G` per-group detection sets derived from the
//! ground truth with controllable box jitter, confidence noise, miss rate,
//! and Poisson false positives. Everything is deterministic given the seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Detection, DetectionSetGroup};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ImageSize, Parameterization};
use crate::metrics::GroundTruthInstance;

/// Scene sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub image_size: ImageSize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    /// Minimum box side length in pixels.
    pub min_box_size: f64,
    /// Maximum pairwise ground-truth IoU.
    pub overlap_limit: f64,
    pub seed: u64,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_objects < self.min_objects {
            return Err(Error::Configuration(format!(
                "object count range [{}, {}] is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Configuration("at least one class required".into()));
        }
        let max_side = self.image_size.width.min(self.image_size.height) / 3.0;
        if !(self.min_box_size > 0.0 && self.min_box_size <= max_side) {
            return Err(Error::Configuration(format!(
                "min box size {} must lie in (0, {max_side}] for image {}x{}",
                self.min_box_size, self.image_size.width, self.image_size.height
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_limit) {
            return Err(Error::Configuration(format!(
                "overlap limit must lie in [0,1), got {}",
                self.overlap_limit
            )));
        }
        Ok(())
    }
}

/// Per-group detection noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleNoise {
    /// Gaussian box jitter as a fraction of each box's own size, applied per
    /// normalized cx/cy/w/h coordinate.
    pub box_sigma: f64,
    pub conf_base: f64,
    /// Gaussian confidence jitter standard deviation.
    pub conf_jitter: f64,
    /// Per-group probability of missing a ground-truth object.
    pub miss_prob: f64,
    /// Poisson mean of false positives per group.
    pub fp_rate: f64,
    pub seed: u64,
}

impl EnsembleNoise {
    pub fn validate(&self) -> Result<()> {
        if self.box_sigma < 0.0 || self.conf_jitter < 0.0 || self.fp_rate < 0.0 {
            return Err(Error::Configuration(
                "noise magnitudes must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.conf_base) {
            return Err(Error::Configuration(format!(
                "confidence base must lie in [0,1], got {}",
                self.conf_base
            )));
        }
        if !(0.0..=1.0).contains(&self.miss_prob) {
            return Err(Error::Configuration(format!(
                "miss probability must lie in [0,1], got {}",
                self.miss_prob
            )));
        }
        Ok(())
    }
}

const REJECTION_BUDGET: usize = 10_000;

/// Rejection-samples non-overlapping ground-truth boxes. Deterministic
/// given the seed; instances are stamped with `image_id`.
pub fn generate_scene(params: &SceneParams, image_id: u64) -> Result<Vec<GroundTruthInstance>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let count = rng.random_range(params.min_objects..=params.max_objects);
    let (w, h) = (params.image_size.width, params.image_size.height);
    let max_side = w.min(h) / 3.0;
    let mut instances: Vec<GroundTruthInstance> = Vec::with_capacity(count);
    for i in 0..count {
        let mut accepted = false;
        for _ in 0..REJECTION_BUDGET {
            let bw = rng.random_range(params.min_box_size..=max_side);
            let bh = rng.random_range(params.min_box_size..=max_side);
            let x1 = rng.random_range(0.0..=(w - bw));
            let y1 = rng.random_range(0.0..=(h - bh));
            let bbox = BBox::xyxy_abs(x1, y1, x1 + bw, y1 + bh)?;
            let mut ok = true;
            for gt in &instances {
                if iou(&bbox, &gt.bbox)? > params.overlap_limit {
                    ok = false;
                    break;
                }
            }
            if ok {
                instances.push(GroundTruthInstance {
                    image_id,
                    class: rng.random_range(1..=params.num_classes),
                    bbox,
                    instance_id: i as u64 + 1,
                });
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Capacity(format!(
                "failed to place object {} of {count} within {REJECTION_BUDGET} rejections",
                i + 1
            )));
        }
    }
    Ok(instances)
}

/// Box-Muller standard normal draw.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Knuth Poisson draw; fine for the small means used here.
fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

/// Simulates the per-group detection sets for one scene.
///
/// Each group independently detects every ground truth with probability
/// `1 - miss_prob`, emitting a jittered, clamped box with the correct class,
/// then adds `Poisson(fp_rate)` false positives with random boxes/classes
/// and low confidences drawn uniformly from `[0.05, 0.5]`.
pub fn simulate_ensemble(
    gts: &[GroundTruthInstance],
    image: ImageSize,
    num_groups: usize,
    num_classes: usize,
    noise: &EnsembleNoise,
) -> Result<DetectionSetGroup> {
    noise.validate()?;
    if num_groups == 0 {
        return Err(Error::Configuration("num_groups must be >= 1".into()));
    }
    if num_classes == 0 {
        return Err(Error::Configuration("num_classes must be >= 1".into()));
    }
    let mut groups = Vec::with_capacity(num_groups);
    for g in 0..num_groups {
        // Independent stream per group so sets are exchangeable and stable.
        let mut rng = ChaCha8Rng::seed_from_u64(mix_group_seed(noise.seed, g as u64));
        let mut dets: Vec<Detection> = Vec::new();
        for gt in gts {
            if noise.miss_prob > 0.0 && rng.random::<f64>() < noise.miss_prob {
                continue;
            }
            let norm_box = gt.bbox.convert(Parameterization::CxcywhNorm, image)?;
            let [cx, cy, w, h] = norm_box.coords();
            let s = noise.box_sigma;
            let jittered = if s > 0.0 {
                let ncx = cx + s * w * normal(&mut rng);
                let ncy = cy + s * h * normal(&mut rng);
                let nw = (w * (1.0 + s * normal(&mut rng))).clamp(1e-4, 1.0);
                let nh = (h * (1.0 + s * normal(&mut rng))).clamp(1e-4, 1.0);
                clamp_to_unit(ncx, ncy, nw, nh)?
            } else {
                norm_box
            };
            let confidence = if noise.conf_jitter > 0.0 {
                (noise.conf_base + noise.conf_jitter * normal(&mut rng)).clamp(0.0, 1.0)
            } else {
                noise.conf_base
            };
            dets.push(Detection {
                bbox: jittered,
                class: gt.class,
                confidence,
                group_index: g + 1,
                query_index: dets.len() + 1,
            });
        }
        for _ in 0..poisson(&mut rng, noise.fp_rate) {
            let w = rng.random_range(0.02..0.25);
            let h = rng.random_range(0.02..0.25);
            let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
            let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
            dets.push(Detection {
                bbox: BBox::cxcywh_norm(cx, cy, w, h)?,
                class: rng.random_range(1..=num_classes),
                confidence: rng.random_range(0.05..0.5),
                group_index: g + 1,
                query_index: dets.len() + 1,
            });
        }
        groups.push(dets);
    }
    Ok(DetectionSetGroup { groups })
}

fn mix_group_seed(seed: u64, group: u64) -> u64 {
    // splitmix-style finalizer; keeps group streams independent.
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(group.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keeps a jittered normalized box inside the unit square by shrinking to
/// fit and shifting the center.
fn clamp_to_unit(cx: f64, cy: f64, w: f64, h: f64) -> Result<BBox> {
    let w = w.min(1.0);
    let h = h.min(1.0);
    let cx = cx.clamp(w / 2.0, 1.0 - w / 2.0);
    let cy = cy.clamp(h / 2.0, 1.0 - h / 2.0);
    BBox::cxcywh_norm(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{aggregate_all, AggregationStrategy};
    use crate::clustering::{bsas_cluster, ClusteringParams};
    use crate::metrics::GtStore;

    fn params(seed: u64) -> SceneParams {
        SceneParams {
            image_size: ImageSize::new(320.0, 240.0).unwrap(),
            min_objects: 4,
            max_objects: 7,
            num_classes: 4,
            min_box_size: 20.0,
            overlap_limit: 0.2,
            seed,
        }
    }

    fn zero_noise(seed: u64) -> EnsembleNoise {
        EnsembleNoise {
            box_sigma: 0.0,
            conf_base: 1.0,
            conf_jitter: 0.0,
            miss_prob: 0.0,
            fp_rate: 0.0,
            seed,
        }
    }

    #[test]
    fn empty_scene() {
        let mut p = params(1);
        p.min_objects = 0;
        p.max_objects = 0;
        assert!(generate_scene(&p, 1).unwrap().is_empty());
    }

    #[test]
    fn overlap_limit_zero_gives_disjoint_boxes() {
        let mut p = params(3);
        p.overlap_limit = 0.0;
        let scene = generate_scene(&p, 1).unwrap();
        for (i, a) in scene.iter().enumerate() {
            for b in &scene[i + 1..] {
                assert_eq!(iou(&a.bbox, &b.bbox).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn scene_determinism() {
        let a = generate_scene(&params(9), 1).unwrap();
        let b = generate_scene(&params(9), 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scene_respects_bounds_and_overlap() {
        for seed in 0..20 {
            let p = params(seed);
            let scene = generate_scene(&p, 1).unwrap();
            assert!(scene.len() >= p.min_objects && scene.len() <= p.max_objects);
            for gt in &scene {
                let [x1, y1, x2, y2] = gt.bbox.coords();
                assert!(x1 >= 0.0 && y1 >= 0.0);
                assert!(x2 <= p.image_size.width && y2 <= p.image_size.height);
                assert!((1..=p.num_classes).contains(&gt.class));
            }
            for (i, a) in scene.iter().enumerate() {
                for b in &scene[i + 1..] {
                    assert!(iou(&a.bbox, &b.bbox).unwrap() <= p.overlap_limit + 1e-12);
                }
            }
        }
    }

    #[test]
    fn capacity_error_when_scene_cannot_fit() {
        let p = SceneParams {
            image_size: ImageSize::new(60.0, 60.0).unwrap(),
            min_objects: 40,
            max_objects: 40,
            num_classes: 2,
            min_box_size: 20.0,
            overlap_limit: 0.0,
            seed: 1,
        };
        assert!(matches!(generate_scene(&p, 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn zero_noise_reproduces_ground_truth() {
        let p = params(5);
        let scene = generate_scene(&p, 1).unwrap();
        let sets =
            simulate_ensemble(&scene, p.image_size, 5, p.num_classes, &zero_noise(2)).unwrap();
        assert_eq!(sets.num_groups(), 5);
        for group in &sets.groups {
            assert_eq!(group.len(), scene.len());
            for (det, gt) in group.iter().zip(&scene) {
                let back = det
                    .bbox
                    .convert(Parameterization::XyxyAbs, p.image_size)
                    .unwrap();
                for (a, b) in back.coords().iter().zip(gt.bbox.coords()) {
                    assert!((a - b).abs() < 1e-9);
                }
                assert_eq!(det.class, gt.class);
                assert_eq!(det.confidence, 1.0);
            }
        }
    }

    #[test]
    fn full_miss_empties_all_groups() {
        let p = params(6);
        let scene = generate_scene(&p, 1).unwrap();
        let noise = EnsembleNoise {
            miss_prob: 1.0,
            ..zero_noise(3)
        };
        let sets = simulate_ensemble(&scene, p.image_size, 5, p.num_classes, &noise).unwrap();
        assert!(sets.groups.iter().all(|g| g.is_empty()));
    }

    #[test]
    fn ensemble_determinism() {
        let p = params(7);
        let scene = generate_scene(&p, 1).unwrap();
        let noise = EnsembleNoise {
            box_sigma: 0.05,
            conf_base: 0.7,
            conf_jitter: 0.1,
            miss_prob: 0.1,
            fp_rate: 0.5,
            seed: 11,
        };
        let a = simulate_ensemble(&scene, p.image_size, 5, p.num_classes, &noise).unwrap();
        let b = simulate_ensemble(&scene, p.image_size, 5, p.num_classes, &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_pipeline_closure() {
        // sigma = miss = fp = 0 with G = 5: clustering + scaled aggregation
        // must return exactly |GT| detections, each with support 5, full
        // confidence, and a zero covariance.
        for seed in 0..10u64 {
            let p = params(seed);
            let scene = generate_scene(&p, 1).unwrap();
            let sets =
                simulate_ensemble(&scene, p.image_size, 5, p.num_classes, &zero_noise(seed))
                    .unwrap();
            let clusters = bsas_cluster(&sets.pooled(), &ClusteringParams::default()).unwrap();
            let out =
                aggregate_all(&clusters, 5, AggregationStrategy::MaxConfScaled, 0.0, 1).unwrap();
            assert_eq!(out.len(), scene.len());
            for det in &out {
                assert_eq!(det.support, 5);
                assert_eq!(det.confidence, 1.0);
                assert_eq!(det.covariance.matrix(), &[[0.0; 4]; 4]);
            }
        }
    }

    #[test]
    fn covariance_trace_grows_with_box_jitter() {
        // Seed-averaged mean covariance trace of multi-member clusters must
        // be monotone over sigma in {0.01, 0.05, 0.1}.
        let sigmas = [0.01, 0.05, 0.1];
        let mut means = Vec::new();
        for &sigma in &sigmas {
            let mut total = 0.0;
            let mut count = 0usize;
            for seed in 0..100u64 {
                let p = params(seed);
                let scene = generate_scene(&p, 1).unwrap();
                let noise = EnsembleNoise {
                    box_sigma: sigma,
                    conf_base: 0.8,
                    conf_jitter: 0.0,
                    miss_prob: 0.0,
                    fp_rate: 0.0,
                    seed: seed + 1,
                };
                let sets =
                    simulate_ensemble(&scene, p.image_size, 5, p.num_classes, &noise).unwrap();
                let clusters = bsas_cluster(&sets.pooled(), &ClusteringParams::default()).unwrap();
                let out = aggregate_all(&clusters, 5, AggregationStrategy::MaxConfScaled, 0.0, 1)
                    .unwrap();
                for det in out.iter().filter(|d| d.support > 1) {
                    total += det.covariance.trace();
                    count += 1;
                }
            }
            means.push(total / count as f64);
        }
        assert!(
            means[0] < means[1] && means[1] < means[2],
            "traces not monotone: {means:?}"
        );
    }

    #[test]
    fn calibrated_confidence_single_bin_gap_vanishes() {
        // Confidence base 0.4 with enough false positives that precision at
        // the 0.3 threshold is also 0.4: kept false positives are uniform on
        // [0.3, 0.5] (mean 0.4) and survive the threshold with probability
        // 4/9, so fp_rate = 1.5 * objects * 9/4 balances the pool. Counts
        // are pooled across seeds before the ratio (a per-seed ratio mean
        // picks up a Jensen bias); the pooled signed gap between precision
        // and mean confidence must vanish within 3 standard errors.
        use crate::aggregation::ProbabilisticDetection;
        use crate::geometry::BoxCovariance;
        use std::collections::BTreeMap;

        let objects = 8usize;
        let fp_rate = 1.5 * objects as f64 * 9.0 / 4.0;
        // Per-seed (tp - confidence_sum, count) pairs.
        let mut numerators = Vec::new();
        let mut total_count = 0usize;
        for seed in 0..100u64 {
            let p = SceneParams {
                image_size: ImageSize::new(320.0, 240.0).unwrap(),
                min_objects: objects,
                max_objects: objects,
                num_classes: 4,
                min_box_size: 20.0,
                overlap_limit: 0.2,
                seed,
            };
            let scene = generate_scene(&p, 1).unwrap();
            let noise = EnsembleNoise {
                box_sigma: 0.0,
                conf_base: 0.4,
                conf_jitter: 0.0,
                miss_prob: 0.0,
                fp_rate,
                seed: seed + 10_000,
            };
            let sets = simulate_ensemble(&scene, p.image_size, 1, p.num_classes, &noise).unwrap();
            let mut store = GtStore::new();
            store.add_image(1, p.image_size).unwrap();
            for gt in &scene {
                store.add_instance(*gt).unwrap();
            }
            let dets: Vec<ProbabilisticDetection> = sets.groups[0]
                .iter()
                .map(|d| ProbabilisticDetection {
                    image_id: 1,
                    bbox: d.bbox,
                    covariance: BoxCovariance::zero(Parameterization::CxcywhNorm),
                    class: d.class,
                    confidence: d.confidence,
                    support: 1,
                })
                .collect();
            let mut by_image = BTreeMap::new();
            by_image.insert(1u64, dets);
            let report = crate::metrics::compute_dece(&by_image, &store, 1, 0.3, 0.5).unwrap();
            if !report.no_samples {
                let bin = &report.bins[0];
                let count = bin.count as f64;
                numerators.push(count * (bin.precision - bin.mean_confidence));
                total_count += bin.count;
            }
        }
        let seeds = numerators.len() as f64;
        let num_mean = numerators.iter().sum::<f64>() / seeds;
        let num_var = numerators
            .iter()
            .map(|x| (x - num_mean) * (x - num_mean))
            .sum::<f64>()
            / (seeds - 1.0);
        let pooled_gap = numerators.iter().sum::<f64>() / total_count as f64;
        let se = (num_var * seeds).sqrt() / total_count as f64;
        assert!(
            pooled_gap.abs() <= 3.0 * se,
            "pooled gap {pooled_gap} exceeds 3 SE {se}"
        );
    }
}
