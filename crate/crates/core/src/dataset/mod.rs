//! Scene ingestion, feature pyramids, image planes, and pseudo-label
//! persistence.
//!
//! A scene is one JSON document (see [`scene`] for the field-by-field
//! schema) with masks stored as column-major RLE, an optional PNM image
//! plane referenced by relative path, and an optional feature pyramid in
//! the binary `SAPF` container.

mod labels;
mod plane;
mod pnm;
mod pyramid;
mod scene;

pub use labels::{
    read_pseudo_labels, read_soft_mask, write_pseudo_labels, write_soft_mask, PseudoLabel,
    StageScores,
};
pub use plane::Plane;
pub use pnm::{read_pnm, write_pgm, write_ppm};
pub use pyramid::{load_feature_pyramid, write_feature_pyramid, FeaturePyramid};
pub use scene::{
    box_descriptor, load_scene, write_scene, GtInstance, Proposal, ProposalBag, Scene,
    DESCRIPTOR_DIM,
};
