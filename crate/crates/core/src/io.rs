//! Data interchange: COCO-format ground truth, raw ensemble detections,
//! probabilistic detections with a covariance extension, and CSV emission.
//!
//! Detections serialize in COCO results style (absolute `[x, y, w, h]`
//! boxes) for tool interop; the covariance serializes as 16 row-major
//! numbers in corner coordinates (pixel^2), the frame the PDQ consumer
//! needs. All writes are atomic: a sibling temp file is renamed over the
//! target, so failed runs leave no partial output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::aggregation::ProbabilisticDetection;
use crate::decoder::Detection;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxCovariance, ImageSize, Parameterization};
use crate::metrics::{GroundTruthInstance, GtStore, ReliabilityBin};

// --- COCO ground truth -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub file_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    /// `[x, y, w, h]` in absolute pixels.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

/// COCO-style ground-truth file. Unknown JSON fields are ignored on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoGroundTruthFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Loads COCO ground truth into a store keyed by image id. Every annotation
/// reference must resolve; bboxes convert to absolute corners.
pub fn load_coco_gt(path: &Path) -> Result<GtStore> {
    let file: CocoGroundTruthFile = read_json(path)?;
    let categories: std::collections::BTreeSet<usize> =
        file.categories.iter().map(|c| c.id).collect();
    let mut store = GtStore::new();
    for image in &file.images {
        store.add_image(image.id, ImageSize::new(image.width, image.height)?)?;
    }
    for (idx, ann) in file.annotations.iter().enumerate() {
        if store.image_size(ann.image_id).is_none() {
            return Err(Error::Reference(format!(
                "annotation {} references unknown image_id {}",
                ann.id, ann.image_id
            )));
        }
        if !categories.contains(&ann.category_id) {
            return Err(Error::Reference(format!(
                "annotation {} references unknown category_id {}",
                ann.id, ann.category_id
            )));
        }
        let [x, y, w, h] = ann.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Validation(format!(
                "annotation record {idx} (id {}) has degenerate bbox {:?}",
                ann.id, ann.bbox
            )));
        }
        store.add_instance(GroundTruthInstance {
            image_id: ann.image_id,
            class: ann.category_id,
            bbox: BBox::xyxy_abs(x, y, x + w, y + h)?,
            instance_id: ann.id,
        })?;
    }
    Ok(store)
}

/// Writes a store back out in COCO format with `class_<k>` category names.
pub fn save_coco_gt(store: &GtStore, num_classes: usize, path: &Path) -> Result<()> {
    let images = store
        .entries()
        .map(|(id, e)| CocoImage {
            id,
            width: e.size.width,
            height: e.size.height,
            file_name: format!("synthetic_{id:06}.png"),
        })
        .collect();
    let mut annotations = Vec::new();
    let mut next_id = 1u64;
    for (image_id, entry) in store.entries() {
        for inst in &entry.instances {
            let [x1, y1, x2, y2] = inst.bbox.coords();
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id,
                category_id: inst.class,
                bbox: [x1, y1, x2 - x1, y2 - y1],
            });
            next_id += 1;
        }
    }
    let categories = (1..=num_classes)
        .map(|id| CocoCategory {
            id,
            name: format!("class_{id}"),
        })
        .collect();
    write_json(
        path,
        &CocoGroundTruthFile {
            images,
            annotations,
            categories,
        },
    )
}

// --- probabilistic detections ------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbDetRecord {
    pub image_id: u64,
    pub category_id: usize,
    /// `[x, y, w, h]` in absolute pixels.
    pub bbox: [f64; 4],
    pub score: f64,
    pub support: usize,
    /// 16 row-major numbers, corner (x1,y1,x2,y2) coordinates, pixel^2.
    pub covariance: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbDetectionFile {
    pub detections: Vec<ProbDetRecord>,
}

/// Symmetry tolerance accepted when parsing covariances; the matrix is
/// symmetrized after the check.
const PARSE_SYMMETRY_TOL: f64 = 1e-6;

/// Saves aggregated detections; per-image sizes are needed to export boxes
/// and covariances in pixel coordinates.
pub fn save_prob_detections(
    dets: &[ProbabilisticDetection],
    sizes: &BTreeMap<u64, ImageSize>,
    path: &Path,
) -> Result<()> {
    let mut records = Vec::with_capacity(dets.len());
    for det in dets {
        let size = *sizes.get(&det.image_id).ok_or_else(|| {
            Error::Data(format!("unknown image id {} in detections", det.image_id))
        })?;
        let [x1, y1, x2, y2] = det.bbox.convert(Parameterization::XyxyAbs, size)?.coords();
        let cov = det.covariance.convert(Parameterization::XyxyAbs, size)?;
        records.push(ProbDetRecord {
            image_id: det.image_id,
            category_id: det.class,
            bbox: [x1, y1, x2 - x1, y2 - y1],
            score: det.confidence,
            support: det.support,
            covariance: cov.matrix().iter().flatten().copied().collect(),
        });
    }
    write_json(path, &ProbDetectionFile { detections: records })
}

/// Loads detections back into the internal normalized frame.
pub fn load_prob_detections(
    path: &Path,
    sizes: &BTreeMap<u64, ImageSize>,
) -> Result<Vec<ProbabilisticDetection>> {
    let file: ProbDetectionFile = read_json(path)?;
    let mut out = Vec::with_capacity(file.detections.len());
    for (idx, rec) in file.detections.iter().enumerate() {
        let size = *sizes.get(&rec.image_id).ok_or_else(|| {
            Error::Reference(format!(
                "detection record {idx} references unknown image_id {}",
                rec.image_id
            ))
        })?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(Error::Validation(format!(
                "detection record {idx} has score {} outside [0,1]",
                rec.score
            )));
        }
        if rec.covariance.len() != 16 {
            return Err(Error::Validation(format!(
                "detection record {idx} has {} covariance entries, expected 16",
                rec.covariance.len()
            )));
        }
        let mut m = [[0.0f64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = rec.covariance[i * 4 + j];
            }
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                if (m[i][j] - m[j][i]).abs() > PARSE_SYMMETRY_TOL {
                    return Err(Error::Validation(format!(
                        "detection record {idx} covariance asymmetric at ({i},{j})"
                    )));
                }
                let sym = (m[i][j] + m[j][i]) / 2.0;
                m[i][j] = sym;
                m[j][i] = sym;
            }
        }
        let [x, y, w, h] = rec.bbox;
        let bbox = BBox::xyxy_abs(x, y, x + w, y + h)?
            .convert(Parameterization::CxcywhNorm, size)?;
        let covariance = BoxCovariance::new(Parameterization::XyxyAbs, m)?
            .convert(Parameterization::CxcywhNorm, size)?;
        out.push(ProbabilisticDetection {
            image_id: rec.image_id,
            bbox,
            covariance,
            class: rec.category_id,
            confidence: rec.score,
            support: rec.support,
        });
    }
    Ok(out)
}

/// Groups loaded detections per image for the metrics stack.
pub fn group_by_image(
    dets: Vec<ProbabilisticDetection>,
) -> BTreeMap<u64, Vec<ProbabilisticDetection>> {
    let mut by_image: BTreeMap<u64, Vec<ProbabilisticDetection>> = BTreeMap::new();
    for det in dets {
        by_image.entry(det.image_id).or_default().push(det);
    }
    by_image
}

// --- raw ensemble detections --------------------------------------------------

/// Raw per-group detections for one image, in the decoder's normalized frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawImageEntry {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    /// `groups[g]` is group `g+1`'s complete detection set.
    pub groups: Vec<Vec<Detection>>,
}

/// Ensemble output before clustering: `G` detection sets per image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawEnsembleFile {
    pub num_groups: usize,
    pub images: Vec<RawImageEntry>,
}

pub fn save_raw_ensemble(file: &RawEnsembleFile, path: &Path) -> Result<()> {
    write_json(path, file)
}

pub fn load_raw_ensemble(path: &Path) -> Result<RawEnsembleFile> {
    let file: RawEnsembleFile = read_json(path)?;
    for entry in &file.images {
        ImageSize::new(entry.width, entry.height)?;
        if entry.groups.len() != file.num_groups {
            return Err(Error::Validation(format!(
                "image {} has {} groups, file declares {}",
                entry.image_id,
                entry.groups.len(),
                file.num_groups
            )));
        }
        for (g, dets) in entry.groups.iter().enumerate() {
            for det in dets {
                if det.group_index != g + 1 {
                    return Err(Error::Validation(format!(
                        "image {}: detection in group {} is tagged group {}",
                        entry.image_id,
                        g + 1,
                        det.group_index
                    )));
                }
                if !(0.0..=1.0).contains(&det.confidence) {
                    return Err(Error::Validation(format!(
                        "image {}: confidence {} outside [0,1]",
                        entry.image_id, det.confidence
                    )));
                }
            }
        }
    }
    Ok(file)
}

// --- CSV ----------------------------------------------------------------------

/// One row per bin: `lo, hi, mean_conf, precision, count`.
pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut out = String::from("lo,hi,mean_conf,precision,count\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lo, b.hi, b.mean_confidence, b.precision, b.count
        ));
    }
    out
}

// --- primitives ----------------------------------------------------------------

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Atomic write: serialize to a sibling temp file, then rename.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_vec_pretty(value)?;
    atomic_write(path, &body)
}

pub fn atomic_write_text(path: &Path, body: &str) -> Result<()> {
    atomic_write(path, body.as_bytes())
}

fn atomic_write(path: &Path, body: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    fs::write(&tmp, body)?;
    if let Err(err) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(err.into());
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample_store() -> GtStore {
        let mut store = GtStore::new();
        store
            .add_image(1, ImageSize::new(640.0, 480.0).unwrap())
            .unwrap();
        store
            .add_image(2, ImageSize::new(320.0, 240.0).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn coco_load_converts_bbox() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        let file = CocoGroundTruthFile {
            images: vec![CocoImage {
                id: 1,
                width: 640.0,
                height: 480.0,
                file_name: "a.png".into(),
            }],
            annotations: vec![CocoAnnotation {
                id: 7,
                image_id: 1,
                category_id: 2,
                bbox: [10.0, 20.0, 30.0, 40.0],
            }],
            categories: vec![
                CocoCategory {
                    id: 1,
                    name: "one".into(),
                },
                CocoCategory {
                    id: 2,
                    name: "two".into(),
                },
            ],
        };
        write_json(&path, &file).unwrap();
        let store = load_coco_gt(&path).unwrap();
        let inst = &store.instances(1)[0];
        assert_eq!(inst.bbox.coords(), [10.0, 20.0, 40.0, 60.0]);
        assert_eq!(inst.class, 2);
        assert_eq!(inst.instance_id, 7);
    }

    #[test]
    fn coco_load_empty_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        let file = CocoGroundTruthFile {
            images: vec![CocoImage {
                id: 1,
                width: 64.0,
                height: 48.0,
                file_name: "a.png".into(),
            }],
            annotations: vec![],
            categories: vec![],
        };
        write_json(&path, &file).unwrap();
        let store = load_coco_gt(&path).unwrap();
        assert_eq!(store.total_instances(), 0);
        assert_eq!(store.num_images(), 1);
    }

    #[test]
    fn coco_load_dangling_image_reference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        let file = CocoGroundTruthFile {
            images: vec![CocoImage {
                id: 1,
                width: 64.0,
                height: 48.0,
                file_name: "a.png".into(),
            }],
            annotations: vec![CocoAnnotation {
                id: 1,
                image_id: 999,
                category_id: 1,
                bbox: [1.0, 1.0, 5.0, 5.0],
            }],
            categories: vec![CocoCategory {
                id: 1,
                name: "one".into(),
            }],
        };
        write_json(&path, &file).unwrap();
        match load_coco_gt(&path) {
            Err(Error::Reference(msg)) => assert!(msg.contains("999")),
            other => panic!("expected reference error, got {other:?}"),
        }
    }

    #[test]
    fn coco_load_ignores_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        let raw = r#"{
            "info": {"year": 2024},
            "images": [{"id": 1, "width": 64, "height": 48, "file_name": "a.png", "license": 1}],
            "annotations": [],
            "categories": []
        }"#;
        atomic_write_text(&path, raw).unwrap();
        assert!(load_coco_gt(&path).is_ok());
    }

    #[test]
    fn coco_round_trip_through_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        let mut store = sample_store();
        store
            .add_instance(GroundTruthInstance {
                image_id: 1,
                class: 3,
                bbox: BBox::xyxy_abs(5.0, 6.0, 100.0, 90.0).unwrap(),
                instance_id: 1,
            })
            .unwrap();
        save_coco_gt(&store, 4, &path).unwrap();
        let loaded = load_coco_gt(&path).unwrap();
        assert_eq!(loaded, store);
    }

    fn random_prob_detection(rng: &mut rand_chacha::ChaCha8Rng, image_id: u64) -> ProbabilisticDetection {
        let w = rng.random_range(0.05..0.4);
        let h = rng.random_range(0.05..0.4);
        let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
        // PSD covariance from a random factor, scaled to plausible size.
        let mut a = [[0.0f64; 4]; 4];
        for row in &mut a {
            for v in row.iter_mut() {
                *v = rng.random_range(-0.01..0.01);
            }
        }
        let mut m = [[0.0f64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for (k, _) in a.iter().enumerate() {
                    m[i][j] += a[i][k] * a[j][k];
                }
            }
        }
        ProbabilisticDetection {
            image_id,
            bbox: BBox::cxcywh_norm(cx, cy, w, h).unwrap(),
            covariance: BoxCovariance::new(Parameterization::CxcywhNorm, m).unwrap(),
            class: rng.random_range(1..=5),
            confidence: rng.random_range(0.0..1.0),
            support: rng.random_range(1..=7),
        }
    }

    #[test]
    fn prob_detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.json");
        let store = sample_store();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dets: Vec<ProbabilisticDetection> = (0..100)
            .map(|i| random_prob_detection(&mut rng, 1 + (i % 2) as u64))
            .collect();
        save_prob_detections(&dets, &store.image_sizes(), &path).unwrap();
        let loaded = load_prob_detections(&path, &store.image_sizes()).unwrap();
        assert_eq!(loaded.len(), dets.len());
        for (a, b) in dets.iter().zip(&loaded) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.class, b.class);
            assert_eq!(a.support, b.support);
            assert!((a.confidence - b.confidence).abs() <= 1e-12);
            for (x, y) in a.bbox.coords().iter().zip(b.bbox.coords()) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
            for i in 0..4 {
                for j in 0..4 {
                    let (x, y) = (a.covariance.matrix()[i][j], b.covariance.matrix()[i][j]);
                    assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn prob_detections_empty_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.json");
        let store = sample_store();
        save_prob_detections(&[], &store.image_sizes(), &path).unwrap();
        let loaded = load_prob_detections(&path, &store.image_sizes()).unwrap();
        assert!(loaded.is_empty());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"detections\": []"));
    }

    #[test]
    fn zero_covariance_serializes_as_sixteen_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.json");
        let store = sample_store();
        let det = ProbabilisticDetection {
            image_id: 1,
            bbox: BBox::cxcywh_norm(0.5, 0.5, 0.2, 0.2).unwrap(),
            covariance: BoxCovariance::zero(Parameterization::CxcywhNorm),
            class: 1,
            confidence: 0.9,
            support: 5,
        };
        save_prob_detections(&[det], &store.image_sizes(), &path).unwrap();
        let file: ProbDetectionFile = read_json(&path).unwrap();
        assert_eq!(file.detections[0].covariance, vec![0.0; 16]);
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.json");
        let store = sample_store();
        let mut cov = vec![0.0; 16];
        cov[1] = 0.5; // cov[4] stays 0: asymmetric beyond tolerance
        let file = ProbDetectionFile {
            detections: vec![ProbDetRecord {
                image_id: 1,
                category_id: 1,
                bbox: [10.0, 10.0, 20.0, 20.0],
                score: 0.5,
                support: 1,
                covariance: cov,
            }],
        };
        write_json(&path, &file).unwrap();
        assert!(matches!(
            load_prob_detections(&path, &store.image_sizes()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn raw_ensemble_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.json");
        let det = Detection {
            bbox: BBox::cxcywh_norm(0.5, 0.5, 0.2, 0.2).unwrap(),
            class: 1,
            confidence: 0.8,
            group_index: 1,
            query_index: 1,
        };
        let file = RawEnsembleFile {
            num_groups: 2,
            images: vec![RawImageEntry {
                image_id: 1,
                width: 100.0,
                height: 100.0,
                groups: vec![vec![det], vec![]],
            }],
        };
        save_raw_ensemble(&file, &path).unwrap();
        let loaded = load_raw_ensemble(&path).unwrap();
        assert_eq!(loaded.num_groups, 2);
        assert_eq!(loaded.images[0].groups[0].len(), 1);

        let mut bad = file.clone();
        bad.images[0].groups[1].push(Detection {
            group_index: 1, // wrong slot
            ..det
        });
        save_raw_ensemble(&bad, &path).unwrap();
        assert!(matches!(
            load_raw_ensemble(&path),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn atomic_write_leaves_no_temp_on_success() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        write_json(&path, &serde_json::json!({"ok": true})).unwrap();
        let names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["out.json".to_string()]);
    }

    #[test]
    fn reliability_csv_shape() {
        let bins = vec![ReliabilityBin {
            lo: 0.0,
            hi: 0.5,
            mean_confidence: 0.25,
            precision: 0.3,
            count: 4,
        }];
        let csv = reliability_csv(&bins);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("lo,hi,mean_conf,precision,count"));
        assert_eq!(lines.next(), Some("0,0.5,0.25,0.3,4"));
    }
}
