//! Cross-modal 3D scene graph alignment.
//!
//! Per-object point clouds, meshes, structure graphs, captions and spatial
//! referrals are encoded into a joint embedding space with attention fusion,
//! trained with intra/inter-modal contrastive objectives. Nodes of partially
//! overlapping scene graphs are then matched by cosine similarity, scene
//! overlap is classified from the alignment score, and matched graphs are
//! merged into a unified scene graph. A synthetic multi-room scene generator
//! provides a dataset-free experiment substrate.

pub mod numerics;
pub mod alignment;
pub mod datagen;
pub mod encoders;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod scenegraph;
pub mod training;

pub use numerics::{Graph, Tensor};
