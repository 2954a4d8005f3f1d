//! Scene schema, validation, and the handcrafted box descriptor.
//!
//! Scene JSON layout:
//!
//! ```json
//! {
//!   "image_id": "scene_0000",
//!   "width": 96, "height": 80,
//!   "annotations": [ {"instance_id": 0, "class_id": 1, "x": 12.5, "y": 30.0} ],
//!   "bags": [
//!     {"instance_id": 0, "proposals": [
//!        {"box": [x, y, w, h],
//!         "rle": {"counts": [..]},
//!         "generator_score": 0.8,
//!         "feature": [..]}
//!     ]}
//!   ],
//!   "gt": [ {"instance_id": 0, "box": [..], "rle": {"counts": [..]}} ],
//!   "image_plane": "scene_0000.ppm"
//! }
//! ```
//!
//! Masks are full-image column-major RLE. A proposal needs at least one of
//! `box`/`rle`; when both are present the box must equal the mask's tight
//! bounding box. `gt` and `image_plane` are optional; the image plane is a
//! PNM file referenced relative to the scene file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_pnm, Plane};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_box, point_in_box, rle_decode, rle_encode, BBox, BitMask, Point, Rle};

/// One candidate mask/box with optional generator confidence and feature.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub mask: Option<BitMask>,
    /// Tight box of the mask when a mask is present. Degenerate zero box
    /// for empty-mask proposals, which every selector skips naturally
    /// (their IoU with anything is 0).
    pub bbox: BBox,
    /// True when the proposal's mask decoded to no foreground.
    pub empty: bool,
    pub generator_score: Option<f64>,
    pub feature: Option<Vec<f64>>,
}

/// All candidates for one annotated point.
#[derive(Debug, Clone)]
pub struct ProposalBag {
    pub instance_id: i64,
    pub point: Point,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone)]
pub struct GtInstance {
    pub instance_id: i64,
    pub bbox: BBox,
    pub mask: Option<BitMask>,
}

/// One image's annotations, bags, optional ground truth, and image plane.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point>,
    pub bags: Vec<ProposalBag>,
    pub gt: Option<Vec<GtInstance>>,
    pub image_plane: Option<Plane>,
}

impl Scene {
    pub fn gt_for(&self, instance_id: i64) -> Option<&GtInstance> {
        self.gt.as_ref()?.iter().find(|g| g.instance_id == instance_id)
    }
}

// ---------------------------------------------------------------- raw JSON

#[derive(Serialize, Deserialize)]
struct AnnotationJson {
    instance_id: i64,
    class_id: usize,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct ProposalJson {
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rle: Option<Rle>,
    #[serde(skip_serializing_if = "Option::is_none")]
    generator_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BagJson {
    instance_id: i64,
    proposals: Vec<ProposalJson>,
}

#[derive(Serialize, Deserialize)]
struct GtJson {
    instance_id: i64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    rle: Option<Rle>,
}

#[derive(Serialize, Deserialize)]
struct SceneJson {
    image_id: String,
    width: usize,
    height: usize,
    annotations: Vec<AnnotationJson>,
    bags: Vec<BagJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gt: Option<Vec<GtJson>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_plane: Option<String>,
}

/// Load and fully validate a scene document.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)?;
    let raw: SceneJson = serde_json::from_str(&text)?;
    if raw.width == 0 || raw.height == 0 {
        return Err(Error::schema(&raw.image_id, "zero image dimension"));
    }
    if raw.annotations.len() != raw.bags.len() {
        return Err(Error::schema(
            &raw.image_id,
            format!("{} annotations but {} bags", raw.annotations.len(), raw.bags.len()),
        ));
    }

    let mut points = Vec::with_capacity(raw.annotations.len());
    for ann in &raw.annotations {
        if points.iter().any(|p: &Point| p.instance_id == ann.instance_id) {
            return Err(Error::Invariant {
                instance_id: ann.instance_id,
                message: "duplicate instance_id".to_string(),
            });
        }
        if ann.x < 0.0 || ann.x >= raw.width as f64 || ann.y < 0.0 || ann.y >= raw.height as f64 {
            return Err(Error::Invariant {
                instance_id: ann.instance_id,
                message: format!(
                    "annotated point ({}, {}) outside {}x{} image",
                    ann.x, ann.y, raw.width, raw.height
                ),
            });
        }
        points.push(Point { x: ann.x, y: ann.y, class_id: ann.class_id, instance_id: ann.instance_id });
    }

    let mut bags = Vec::with_capacity(raw.bags.len());
    let mut feature_dim: Option<usize> = None;
    for (i, bag) in raw.bags.iter().enumerate() {
        let point = points[i];
        if bag.instance_id != point.instance_id {
            return Err(Error::Invariant {
                instance_id: bag.instance_id,
                message: format!("bag order mismatch: annotation {} has id {}", i, point.instance_id),
            });
        }
        if bag.proposals.is_empty() {
            return Err(Error::Invariant {
                instance_id: bag.instance_id,
                message: "bag has no proposals".to_string(),
            });
        }
        let mut proposals = Vec::with_capacity(bag.proposals.len());
        for (m, prop) in bag.proposals.iter().enumerate() {
            let mask = match &prop.rle {
                Some(rle) => Some(rle_decode(rle, raw.width, raw.height).map_err(|e| {
                    Error::Invariant {
                        instance_id: bag.instance_id,
                        message: format!("proposal {m}: {e}"),
                    }
                })?),
                None => None,
            };
            let derived = mask.as_ref().and_then(mask_to_box);
            let (bbox, empty) = match (&prop.bbox, &mask) {
                (Some(b), Some(_)) => {
                    let b = BBox::new(b[0], b[1], b[2], b[3]);
                    match derived {
                        Some(d) => {
                            let close = (b.x - d.x).abs() < 1e-6
                                && (b.y - d.y).abs() < 1e-6
                                && (b.w - d.w).abs() < 1e-6
                                && (b.h - d.h).abs() < 1e-6;
                            if !close {
                                return Err(Error::Invariant {
                                    instance_id: bag.instance_id,
                                    message: format!(
                                        "proposal {m}: declared box {:?} != mask box {:?}",
                                        b.as_array(),
                                        d.as_array()
                                    ),
                                });
                            }
                            (b, false)
                        }
                        None => (BBox::new(0.0, 0.0, 0.0, 0.0), true),
                    }
                }
                (Some(b), None) => (BBox::new(b[0], b[1], b[2], b[3]), false),
                (None, Some(_)) => match derived {
                    Some(d) => (d, false),
                    None => (BBox::new(0.0, 0.0, 0.0, 0.0), true),
                },
                (None, None) => {
                    return Err(Error::Invariant {
                        instance_id: bag.instance_id,
                        message: format!("proposal {m} carries neither box nor mask"),
                    });
                }
            };
            if bbox.w < 0.0 || bbox.h < 0.0 {
                return Err(Error::Invariant {
                    instance_id: bag.instance_id,
                    message: format!("proposal {m}: negative box extent"),
                });
            }
            if let Some(f) = &prop.feature {
                if !f.iter().all(|v| v.is_finite()) {
                    return Err(Error::Invariant {
                        instance_id: bag.instance_id,
                        message: format!("proposal {m}: non-finite feature"),
                    });
                }
                match feature_dim {
                    None => feature_dim = Some(f.len()),
                    Some(d) if d != f.len() => {
                        return Err(Error::Invariant {
                            instance_id: bag.instance_id,
                            message: format!("proposal {m}: feature dim {} != {}", f.len(), d),
                        });
                    }
                    _ => {}
                }
            }
            proposals.push(Proposal {
                mask,
                bbox,
                empty,
                generator_score: prop.generator_score,
                feature: prop.feature.clone(),
            });
        }
        bags.push(ProposalBag { instance_id: bag.instance_id, point, proposals });
    }

    let gt = match raw.gt {
        Some(items) => {
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                let mask = match &item.rle {
                    Some(rle) => Some(rle_decode(rle, raw.width, raw.height)?),
                    None => None,
                };
                out.push(GtInstance {
                    instance_id: item.instance_id,
                    bbox: BBox::new(item.bbox[0], item.bbox[1], item.bbox[2], item.bbox[3]),
                    mask,
                });
            }
            Some(out)
        }
        None => None,
    };

    let image_plane = match raw.image_plane {
        Some(rel) => {
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            Some(read_pnm(&dir.join(rel))?)
        }
        None => None,
    };

    Ok(Scene { image_id: raw.image_id, width: raw.width, height: raw.height, points, bags, gt, image_plane })
}

/// Serialize a scene back to the JSON schema. `image_plane_file`, when
/// given, is recorded as the relative image reference (the caller writes
/// the actual PNM).
pub fn write_scene(path: &Path, scene: &Scene, image_plane_file: Option<&str>) -> Result<()> {
    let raw = SceneJson {
        image_id: scene.image_id.clone(),
        width: scene.width,
        height: scene.height,
        annotations: scene
            .points
            .iter()
            .map(|p| AnnotationJson { instance_id: p.instance_id, class_id: p.class_id, x: p.x, y: p.y })
            .collect(),
        bags: scene
            .bags
            .iter()
            .map(|bag| BagJson {
                instance_id: bag.instance_id,
                proposals: bag
                    .proposals
                    .iter()
                    .map(|p| ProposalJson {
                        bbox: if p.empty { None } else { Some(p.bbox.as_array()) },
                        rle: p.mask.as_ref().map(rle_encode),
                        generator_score: p.generator_score,
                        feature: p.feature.clone(),
                    })
                    .collect(),
            })
            .collect(),
        gt: scene.gt.as_ref().map(|items| {
            items
                .iter()
                .map(|g| GtJson {
                    instance_id: g.instance_id,
                    bbox: g.bbox.as_array(),
                    rle: g.mask.as_ref().map(rle_encode),
                })
                .collect()
        }),
        image_plane: image_plane_file.map(String::from),
    };
    let text = serde_json::to_string(&raw)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Dimension of the handcrafted descriptor used when a box has no
/// extracted feature (sampled positives and negatives, descriptor-space
/// refinement).
pub const DESCRIPTOR_DIM: usize = 12;

/// Deterministic 12-dim descriptor for an arbitrary box in a scene:
/// normalized center and size, foreground ratio, generator score, mask
/// perimeter ratio, aspect, distance of the annotated point to the box
/// center, and three constants. Mask-free boxes count as fully filled.
pub fn box_descriptor(
    width: f64,
    height: f64,
    point: &Point,
    bbox: &BBox,
    mask: Option<&BitMask>,
    generator_score: f64,
) -> Vec<f64> {
    let (cx, cy) = bbox.center();
    let area = bbox.area();
    let fg_ratio = match mask {
        Some(m) if area > 0.0 => (m.count() as f64 / area).min(1.0),
        Some(_) => 0.0,
        None => 1.0,
    };
    let perimeter_ratio = match mask {
        Some(m) => {
            let box_perimeter = 2.0 * (bbox.w + bbox.h) + 1.0;
            (m.perimeter() as f64 / box_perimeter).min(1.0)
        }
        None => 1.0,
    };
    let aspect = if bbox.w + bbox.h > 0.0 { bbox.w / (bbox.w + bbox.h) } else { 0.5 };
    let diag = (bbox.w * bbox.w + bbox.h * bbox.h).sqrt();
    let point_dist = if diag > 0.0 {
        let dx = point.x - cx;
        let dy = point.y - cy;
        ((dx * dx + dy * dy).sqrt() / diag).min(1.5)
    } else {
        1.5
    };
    vec![
        cx / width,
        cy / height,
        bbox.w / width,
        bbox.h / height,
        fg_ratio,
        generator_score,
        perimeter_ratio,
        aspect,
        point_dist,
        1.0,
        0.5,
        0.25,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_scene_json() -> serde_json::Value {
        serde_json::json!({
            "image_id": "s0",
            "width": 8,
            "height": 8,
            "annotations": [{"instance_id": 0, "class_id": 0, "x": 2.0, "y": 2.0}],
            "bags": [{"instance_id": 0, "proposals": [
                {"box": [1.0, 1.0, 3.0, 3.0]}
            ]}]
        })
    }

    fn write_json(dir: &Path, value: &serde_json::Value) -> std::path::PathBuf {
        let path = dir.join("scene.json");
        std::fs::write(&path, serde_json::to_string(value).unwrap()).unwrap();
        path
    }

    #[test]
    fn minimal_scene_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(dir.path(), &minimal_scene_json());
        let scene = load_scene(&path).unwrap();
        assert_eq!(scene.points.len(), 1);
        assert_eq!(scene.bags[0].proposals.len(), 1);
    }

    #[test]
    fn mask_only_proposal_derives_box() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = BitMask::new(8, 8);
        mask.set(2, 2, true);
        mask.set(4, 3, true);
        let rle = rle_encode(&mask);
        let mut json = minimal_scene_json();
        json["bags"][0]["proposals"] = serde_json::json!([{"rle": {"counts": rle.counts}}]);
        let path = write_json(dir.path(), &json);
        let scene = load_scene(&path).unwrap();
        assert_eq!(scene.bags[0].proposals[0].bbox, BBox::new(2.0, 2.0, 3.0, 2.0));
    }

    #[test]
    fn point_outside_image_names_instance() {
        let dir = tempfile::tempdir().unwrap();
        let mut json = minimal_scene_json();
        json["annotations"][0]["x"] = serde_json::json!(55.0);
        json["annotations"][0]["instance_id"] = serde_json::json!(42);
        json["bags"][0]["instance_id"] = serde_json::json!(42);
        let path = write_json(dir.path(), &json);
        let err = load_scene(&path).unwrap_err();
        assert!(err.to_string().contains("42"), "{err}");
    }

    #[test]
    fn mismatched_box_and_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = BitMask::new(8, 8);
        mask.set(2, 2, true);
        let rle = rle_encode(&mask);
        let mut json = minimal_scene_json();
        json["bags"][0]["proposals"] =
            serde_json::json!([{"box": [0.0, 0.0, 5.0, 5.0], "rle": {"counts": rle.counts}}]);
        let path = write_json(dir.path(), &json);
        assert!(load_scene(&path).is_err());
    }

    #[test]
    fn inconsistent_feature_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut json = minimal_scene_json();
        json["bags"][0]["proposals"] = serde_json::json!([
            {"box": [1.0, 1.0, 2.0, 2.0], "feature": [0.1, 0.2]},
            {"box": [2.0, 2.0, 2.0, 2.0], "feature": [0.1]}
        ]);
        let path = write_json(dir.path(), &json);
        assert!(load_scene(&path).is_err());
    }

    #[test]
    fn scene_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_json(dir.path(), &minimal_scene_json());
        let scene = load_scene(&path).unwrap();
        let out = dir.path().join("copy.json");
        write_scene(&out, &scene, None).unwrap();
        let back = load_scene(&out).unwrap();
        assert_eq!(back.bags[0].proposals[0].bbox, scene.bags[0].proposals[0].bbox);
    }

    #[test]
    fn descriptor_is_deterministic_and_sized() {
        let p = Point { x: 4.0, y: 4.0, class_id: 0, instance_id: 0 };
        let b = BBox::new(2.0, 2.0, 4.0, 4.0);
        let d1 = box_descriptor(8.0, 8.0, &p, &b, None, 0.5);
        let d2 = box_descriptor(8.0, 8.0, &p, &b, None, 0.5);
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), DESCRIPTOR_DIM);
        assert_eq!(d1[4], 1.0); // mask-free boxes count as filled
    }
}
