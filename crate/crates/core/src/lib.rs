//! Open-vocabulary 3D segmentation by multi-view mask fusion.
//!
//! A model (mesh, point cloud or Gaussian centers) is rendered from a ring of
//! pinhole cameras. Externally generated 2D mask proposals and their embeddings
//! arrive through an on-disk [`proposal::ProposalBundle`]; masks are lifted to
//! 3D through the renderer's point-index maps, classified against text
//! embeddings by cosine similarity and fused into per-point labels.
//!
//! The crate also carries the RGB-D capture math used to build models from a
//! multi-camera rig, segmentation metrics, and deterministic synthetic fixtures.

pub mod camera;
pub mod capture;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geom;
pub mod proposal;
pub mod render;
pub mod synth;

mod io_util;

pub use camera::{CameraPose, Intrinsics, Rig};
pub use error::{Error, ErrorKind, Result};
pub use fusion::{LabelField, Normalization, Segmenter, TextEmbeddingSet};
pub use geom::{Model, ModelKind, PointSet, RigidTransform, TriMesh, Vec3};
pub use proposal::{Mask2D, Mask3D, ProposalBundle, SparseMaskMatrix};
pub use render::RenderOutput;
