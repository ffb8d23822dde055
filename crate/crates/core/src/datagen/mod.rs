//! Dataset-free experiment substrate: synthetic scene generation, sub-scan
//! pair extraction with controlled overlap, random rigid transforms,
//! segmentation-noise simulation, and corpus files with manifests.

mod corpus;
mod pair;
mod predicted;
mod scene;
mod shapes;

pub use corpus::{
    generate_corpus, load_manifest, manifest_root, CorpusManifest, ManifestEntry, Split,
};
pub use pair::{make_pair, random_rigid_transform, transform_scene, undo_transform, ScenePair};
pub use predicted::{propagate_annotations, simulate_predicted, NoiseConfig};
pub use scene::{generate_scene, relation_holds, SyntheticSceneConfig};
pub use shapes::{box_mesh, composite_mesh, cylinder_mesh, pose_mesh, sphere_mesh, ShapeKind};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator configuration")]
    InvalidConfig,
    #[error("could not place object {object} after {retries} retries")]
    InfeasiblePlacement { object: usize, retries: usize },
    #[error("target overlap {0} outside [0.1, 0.9]")]
    OverlapOutOfRange(f32),
    #[error("overlap {target} unattainable within 0.05 for a scene of {scene_size} objects")]
    UnattainableOverlap { target: f32, scene_size: usize },
    #[error("generated scene failed validation: {0}")]
    GeneratedInvalid(String),
    #[error("manifest line {0}: {1}")]
    ManifestParse(usize, String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    SceneGraph(#[from] crate::scenegraph::SceneGraphError),
}
