//! Permutation-invariant point cloud encoder: a shared per-point MLP
//! (3 -> 64 -> 128 -> out) followed by a coordinatewise max over points.

use crate::numerics::{linear, Graph, Tensor};

pub const POINT_HIDDEN_1: usize = 64;
pub const POINT_HIDDEN_2: usize = 128;
pub const POINT_FEATURE_DIM: usize = 128;

/// Tensor views over one point encoder's weights.
pub struct PointNetViews<'g> {
    pub w1: Tensor<'g>,
    pub b1: Tensor<'g>,
    pub w2: Tensor<'g>,
    pub b2: Tensor<'g>,
    pub w3: Tensor<'g>,
    pub b3: Tensor<'g>,
}

/// Encode an already downsampled, canonicalized cloud into one feature
/// vector. Permutation- and duplication-invariant by max pooling.
pub fn encode_points<'g>(
    g: &'g Graph,
    views: &PointNetViews<'g>,
    points: &[[f32; 3]],
) -> Tensor<'g> {
    assert!(!points.is_empty(), "encode_points on empty cloud");
    let n = points.len();
    let mut flat = Vec::with_capacity(n * 3);
    for p in points {
        flat.extend_from_slice(p);
    }
    let x = g.leaf(flat, &[n, 3]);
    let h1 = linear(x, views.w1, views.b1).relu();
    let h2 = linear(h1, views.w2, views.b2).relu();
    let h3 = linear(h2, views.w3, views.b3);
    h3.max_axis(0)
}
