//! Evaluation stack: COCO-style mAP, detection expected calibration error
//! with reliability-diagram data, and probabilistic detection quality with
//! Gaussian corner uncertainty, plus the Hungarian assignment solver that
//! PDQ's optimal detection-to-ground-truth matching rides on.
//!
//! Detections arrive in the decoder's normalized frame and are converted to
//! absolute corner coordinates here, per image, using the ground-truth
//! store's image dimensions.

pub mod dece;
pub mod hungarian;
pub mod map;
pub mod normal;
pub mod pdq;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::ProbabilisticDetection;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ImageSize, Parameterization};

pub use dece::{compute_dece, DeceReport, ReliabilityBin};
pub use hungarian::{hungarian_assign, Assignment};
pub use map::{compute_map, MapReport};
pub use pdq::{compute_pdq, PdqReport};

/// One annotated object: absolute-corner box on a known image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub image_id: u64,
    pub class: usize,
    /// Corner box in absolute pixels.
    pub bbox: BBox,
    pub instance_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub size: ImageSize,
    pub instances: Vec<GroundTruthInstance>,
}

/// Ground truth keyed by image id. Instances are kept sorted by instance id
/// so the store is insensitive to annotation order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GtStore {
    images: BTreeMap<u64, ImageEntry>,
}

impl GtStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(&mut self, image_id: u64, size: ImageSize) -> Result<()> {
        if self.images.contains_key(&image_id) {
            return Err(Error::Data(format!("duplicate image id {image_id}")));
        }
        self.images.insert(
            image_id,
            ImageEntry {
                size,
                instances: Vec::new(),
            },
        );
        Ok(())
    }

    pub fn add_instance(&mut self, instance: GroundTruthInstance) -> Result<()> {
        if instance.bbox.param() != Parameterization::XyxyAbs {
            return Err(Error::Validation(
                "ground-truth boxes must be absolute corner coordinates".into(),
            ));
        }
        let entry = self
            .images
            .get_mut(&instance.image_id)
            .ok_or_else(|| Error::Reference(format!("unknown image id {}", instance.image_id)))?;
        let [x1, y1, x2, y2] = instance.bbox.coords();
        if x1 < -1e-9 || y1 < -1e-9 || x2 > entry.size.width + 1e-9 || y2 > entry.size.height + 1e-9
        {
            return Err(Error::Validation(format!(
                "instance {} box {:?} exceeds image bounds {}x{}",
                instance.instance_id,
                instance.bbox.coords(),
                entry.size.width,
                entry.size.height
            )));
        }
        entry.instances.push(instance);
        entry.instances.sort_by_key(|i| i.instance_id);
        Ok(())
    }

    pub fn image_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.images.keys().copied()
    }

    pub fn image_size(&self, image_id: u64) -> Option<ImageSize> {
        self.images.get(&image_id).map(|e| e.size)
    }

    pub fn image_sizes(&self) -> BTreeMap<u64, ImageSize> {
        self.images.iter().map(|(id, e)| (*id, e.size)).collect()
    }

    pub fn instances(&self, image_id: u64) -> &[GroundTruthInstance] {
        self.images
            .get(&image_id)
            .map_or(&[], |e| e.instances.as_slice())
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &ImageEntry)> {
        self.images.iter().map(|(id, e)| (*id, e))
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn total_instances(&self) -> usize {
        self.images.values().map(|e| e.instances.len()).sum()
    }

    /// Classes that have at least one ground-truth instance, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut classes: Vec<usize> = self
            .images
            .values()
            .flat_map(|e| e.instances.iter().map(|i| i.class))
            .collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }

    pub fn class_instance_count(&self, class: usize) -> usize {
        self.images
            .values()
            .flat_map(|e| &e.instances)
            .filter(|i| i.class == class)
            .count()
    }
}

/// Aggregate evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: MapReport,
    pub dece: DeceReport,
    pub pdq: PdqReport,
}

/// Flattened detection in the evaluation frame (absolute corners).
#[derive(Debug, Clone)]
pub(crate) struct EvalDet {
    pub image_id: u64,
    pub class: usize,
    pub confidence: f64,
    /// Corner box in absolute pixels.
    pub bbox: BBox,
    /// 4x4 covariance in corner coordinates, pixel^2.
    pub cov: [[f64; 4]; 4],
}

/// Converts per-image detections into the absolute evaluation frame.
/// Unknown image ids are a data error.
pub(crate) fn flatten_detections(
    dets_by_image: &BTreeMap<u64, Vec<ProbabilisticDetection>>,
    store: &GtStore,
) -> Result<Vec<EvalDet>> {
    let mut out = Vec::new();
    for (&image_id, dets) in dets_by_image {
        let size = store
            .image_size(image_id)
            .ok_or_else(|| Error::Data(format!("unknown image id {image_id} in detections")))?;
        for d in dets {
            let bbox = d.bbox.convert(Parameterization::XyxyAbs, size)?;
            let cov = d.covariance.convert(Parameterization::XyxyAbs, size)?;
            out.push(EvalDet {
                image_id,
                class: d.class,
                confidence: d.confidence,
                bbox,
                cov: *cov.matrix(),
            });
        }
    }
    Ok(out)
}

/// Greedy class-aware TP/FP marking: detections are visited in descending
/// confidence and claim the unmatched same-class, same-image ground truth
/// with the highest IoU at or above the threshold. Returns one flag per
/// detection, aligned with the input order.
pub(crate) fn greedy_tp_flags(
    dets: &[EvalDet],
    store: &GtStore,
    iou_threshold: f64,
) -> Result<Vec<bool>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(dets[a].image_id.cmp(&dets[b].image_id))
            .then(a.cmp(&b))
    });
    let mut taken: BTreeMap<(u64, u64), ()> = BTreeMap::new();
    let mut flags = vec![false; dets.len()];
    for &idx in &order {
        let det = &dets[idx];
        let mut best: Option<(u64, f64)> = None;
        for gt in store.instances(det.image_id) {
            if gt.class != det.class {
                continue;
            }
            if taken.contains_key(&(det.image_id, gt.instance_id)) {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox)?;
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gt.instance_id, overlap));
            }
        }
        if let Some((instance_id, _)) = best {
            taken.insert((det.image_id, instance_id), ());
            flags[idx] = true;
        }
    }
    Ok(flags)
}
