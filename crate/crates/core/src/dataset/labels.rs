//! Pseudo-label output document and the raw-float soft-mask sidecar.
//!
//! Labels are one JSON document per corpus. Soft masks go to sidecar files
//! (`"SMSK" | u32 H | u32 W | H*W f32 row-major`) referenced by relative
//! path from the JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Rle};

/// Peak scores recorded at each selection stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageScores {
    /// Fused score of the initially selected proposal.
    pub initial_peak: f64,
    /// Refinement-stage score of the selected proposal.
    pub refined_peak: f64,
    /// Completeness score of the winning proposal (0.0 when the
    /// completeness stage is disabled).
    pub completeness: f64,
}

/// Final per-instance output of the mining pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub image_id: String,
    pub instance_id: i64,
    pub class_id: usize,
    /// Box selected by the first stage.
    pub box_initial: [f64; 4],
    /// Box after refinement and mining.
    pub box_refined: [f64; 4],
    /// Mask of the proposal matched to the refined box.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<Rle>,
    pub scores: StageScores,
    /// Sidecar path of the image-plane refined soft mask.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_mask_image: Option<String>,
    /// Sidecar path of the semantic-plane refined soft mask.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_mask_semantic: Option<String>,
}

impl PseudoLabel {
    pub fn initial_bbox(&self) -> BBox {
        BBox::new(self.box_initial[0], self.box_initial[1], self.box_initial[2], self.box_initial[3])
    }

    pub fn refined_bbox(&self) -> BBox {
        BBox::new(self.box_refined[0], self.box_refined[1], self.box_refined[2], self.box_refined[3])
    }
}

#[derive(Serialize, Deserialize)]
struct LabelsJson {
    labels: Vec<PseudoLabel>,
}

pub fn write_pseudo_labels(path: &Path, labels: &[PseudoLabel]) -> Result<()> {
    let doc = LabelsJson { labels: labels.to_vec() };
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabel>> {
    let text = fs::read_to_string(path)?;
    let doc: LabelsJson = serde_json::from_str(&text)?;
    Ok(doc.labels)
}

const SOFT_MASK_MAGIC: &[u8; 4] = b"SMSK";

pub fn write_soft_mask(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut out = Vec::with_capacity(values.len() * 4 + 12);
    out.extend_from_slice(SOFT_MASK_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_soft_mask(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != SOFT_MASK_MAGIC {
        return Err(Error::format("smsk", "bad magic or truncated header".to_string()));
    }
    let height = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let width = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let expected = 12 + width * height * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            "smsk",
            format!("file is {} bytes, expected {}", bytes.len(), expected),
        ));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((values, width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_label_list_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.json");
        write_pseudo_labels(&path, &[]).unwrap();
        assert!(read_pseudo_labels(&path).unwrap().is_empty());
    }

    #[test]
    fn label_box_coordinates_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.json");
        let label = PseudoLabel {
            image_id: "s0".into(),
            instance_id: 3,
            class_id: 1,
            box_initial: [1.25, 2.5, 3.0000001, 4.75],
            box_refined: [0.1 + 0.2, 2.0, 9.219512195121951, 4.0],
            mask_rle: None,
            scores: StageScores { initial_peak: 0.5, refined_peak: 0.75, completeness: 0.25 },
            soft_mask_image: None,
            soft_mask_semantic: None,
        };
        write_pseudo_labels(&path, std::slice::from_ref(&label)).unwrap();
        let back = read_pseudo_labels(&path).unwrap();
        assert_eq!(back[0].box_initial, label.box_initial);
        assert_eq!(back[0].box_refined, label.box_refined);
    }

    #[test]
    fn soft_mask_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.smk");
        let values: Vec<f64> = (0..6).map(|i| (i as f32 * 0.125) as f64).collect();
        write_soft_mask(&path, &values, 3, 2).unwrap();
        let (back, w, h) = read_soft_mask(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, values);
    }
}
