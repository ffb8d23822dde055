//! Point-cloud downsampling and mesh surface sampling.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::seeded_rng;
use crate::scenegraph::TriMesh;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("cannot sample from an empty point set")]
    EmptyPoints,
    #[error("degenerate mesh: no triangle with positive area")]
    DegenerateMesh,
}

fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest-point sampling returning `min(k, n)` indices.
///
/// Deterministic: starts from the point nearest the centroid; each further
/// pick maximizes the minimum distance to the selected set; ties break to
/// the lowest index.
pub fn fps(points: &[[f32; 3]], k: usize) -> Result<Vec<usize>, SamplingError> {
    if points.is_empty() {
        return Err(SamplingError::EmptyPoints);
    }
    assert!(k >= 1, "fps requires k >= 1");
    let n = points.len();
    let k = k.min(n);

    let mut centroid = [0.0f32; 3];
    for p in points {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for c in centroid.iter_mut() {
        *c /= n as f32;
    }
    let mut start = 0usize;
    let mut best = f32::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, &centroid);
        if d < best {
            best = d;
            start = i;
        }
    }

    let mut selected = Vec::with_capacity(k);
    selected.push(start);
    let mut min_d: Vec<f32> = points.iter().map(|p| dist2(p, &points[start])).collect();
    while selected.len() < k {
        let mut far = 0usize;
        let mut far_d = f32::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > far_d {
                far_d = d;
                far = i;
            }
        }
        selected.push(far);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = dist2(&points[i], &points[far]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// Uniform surface-area sampling of `n` points from a triangle mesh.
/// Triangles are drawn proportionally to area, positions barycentrically.
pub fn sample_mesh_surface(
    mesh: &TriMesh,
    n: usize,
    seed: u64,
) -> Result<Vec<[f32; 3]>, SamplingError> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0f64;
    for f in &mesh.faces {
        let a = mesh.vertices[f[0] as usize];
        let b = mesh.vertices[f[1] as usize];
        let c = mesh.vertices[f[2] as usize];
        total += triangle_area(&a, &b, &c) as f64;
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(SamplingError::DegenerateMesh);
    }
    let mut rng: ChaCha8Rng = seeded_rng(seed, 0x6d65_7368);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random_range(0.0f64..total);
        let tri = cumulative.partition_point(|&c| c <= u).min(mesh.faces.len() - 1);
        let f = &mesh.faces[tri];
        let a = mesh.vertices[f[0] as usize];
        let b = mesh.vertices[f[1] as usize];
        let c = mesh.vertices[f[2] as usize];
        // sqrt trick for barycentric-uniform points
        let r1 = rng.random_range(0.0f32..1.0).sqrt();
        let r2 = rng.random_range(0.0f32..1.0);
        let w0 = 1.0 - r1;
        let w1 = r1 * (1.0 - r2);
        let w2 = r1 * r2;
        out.push([
            w0 * a[0] + w1 * b[0] + w2 * c[0],
            w0 * a[1] + w1 * b[1] + w2 * c[1],
            w0 * a[2] + w1 * b[2] + w2 * c[2],
        ]);
    }
    Ok(out)
}

pub fn triangle_area(a: &[f32; 3], b: &[f32; 3], c: &[f32; 3]) -> f32 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let cx = u[1] * v[2] - u[2] * v[1];
    let cy = u[2] * v[0] - u[0] * v[2];
    let cz = u[0] * v[1] - u[1] * v[0];
    0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
}

/// Unit-sphere normalization: subtract the centroid, divide by the max
/// distance to it. A zero-spread cloud maps to all-zeros.
pub fn canonicalize_points(points: &[[f32; 3]]) -> Vec<[f32; 3]> {
    assert!(!points.is_empty(), "canonicalize_points on empty cloud");
    let n = points.len() as f32;
    let mut centroid = [0.0f32; 3];
    for p in points {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for c in centroid.iter_mut() {
        *c /= n;
    }
    let mut max_d = 0.0f32;
    for p in points {
        let d = dist2(p, &centroid).sqrt();
        if d > max_d {
            max_d = d;
        }
    }
    if max_d == 0.0 {
        return vec![[0.0; 3]; points.len()];
    }
    points
        .iter()
        .map(|p| {
            [
                (p[0] - centroid[0]) / max_d,
                (p[1] - centroid[1]) / max_d,
                (p[2] - centroid[2]) / max_d,
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_returns_all_when_k_exceeds_n() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let idx = fps(&pts, 10).unwrap();
        assert_eq!(idx.len(), 3);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
    }

    #[test]
    fn fps_unit_square_picks_a_diagonal() {
        let pts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ];
        let idx = fps(&pts, 2).unwrap();
        let a = pts[idx[0]];
        let b = pts[idx[1]];
        let d = dist2(&a, &b);
        assert!((d - 2.0).abs() < 1e-6, "expected opposite corners, got {a:?} {b:?}");
    }

    #[test]
    fn fps_empty_input_errors() {
        assert!(matches!(fps(&[], 4), Err(SamplingError::EmptyPoints)));
    }

    /// O(N^2 k) reference: recompute every min-distance from scratch at each
    /// step instead of maintaining a running array.
    fn fps_brute(points: &[[f32; 3]], k: usize) -> Vec<usize> {
        let n = points.len();
        let k = k.min(n);
        let mut centroid = [0.0f32; 3];
        for p in points {
            for a in 0..3 {
                centroid[a] += p[a];
            }
        }
        for c in centroid.iter_mut() {
            *c /= n as f32;
        }
        let mut start = 0;
        for i in 1..n {
            if dist2(&points[i], &centroid) < dist2(&points[start], &centroid) {
                start = i;
            }
        }
        let mut sel = vec![start];
        while sel.len() < k {
            let mut best_i = usize::MAX;
            let mut best_d = f32::NEG_INFINITY;
            for i in 0..n {
                let d = sel
                    .iter()
                    .map(|&s| dist2(&points[i], &points[s]))
                    .fold(f32::INFINITY, f32::min);
                if d > best_d {
                    best_d = d;
                    best_i = i;
                }
            }
            sel.push(best_i);
        }
        sel
    }

    #[test]
    fn fps_matches_brute_force_oracle() {
        let mut rng = seeded_rng(17, 1);
        for _ in 0..20 {
            let pts: Vec<[f32; 3]> = (0..64)
                .map(|_| {
                    [
                        rng.random_range(-1.0f32..1.0),
                        rng.random_range(-1.0f32..1.0),
                        rng.random_range(-1.0f32..1.0),
                    ]
                })
                .collect();
            assert_eq!(fps(&pts, 8).unwrap(), fps_brute(&pts, 8));
        }
    }

    fn unit_triangle() -> TriMesh {
        TriMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
        }
    }

    #[test]
    fn samples_stay_inside_single_triangle() {
        let mesh = unit_triangle();
        let pts = sample_mesh_surface(&mesh, 500, 3).unwrap();
        for p in pts {
            assert!(p[0] >= -1e-6 && p[1] >= -1e-6, "outside: {p:?}");
            assert!(p[0] + p[1] <= 1.0 + 1e-5, "outside: {p:?}");
            assert!(p[2].abs() < 1e-6);
        }
    }

    #[test]
    fn triangle_draws_proportional_to_area() {
        // areas 1 (z=0 plane) and 3
        let mesh = TriMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [10.0, 0.0, 5.0],
                [12.0, 0.0, 5.0],
                [10.0, 3.0, 5.0],
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        let n = 10_000usize;
        let pts = sample_mesh_surface(&mesh, n, 5).unwrap();
        let count_b = pts.iter().filter(|p| p[2] > 2.0).count();
        // binomial with p = 3/4: 3 sigma bound
        let p = 0.75f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let expected = n as f64 * p;
        assert!(
            (count_b as f64 - expected).abs() < 3.0 * sigma,
            "count {count_b} vs expected {expected} (sigma {sigma})"
        );
    }

    #[test]
    fn unit_square_sample_mean_is_centered() {
        let mesh = TriMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
        };
        let n = 10_000usize;
        let pts = sample_mesh_surface(&mesh, n, 9).unwrap();
        let mut mean = [0.0f64; 3];
        for p in &pts {
            for a in 0..3 {
                mean[a] += p[a] as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        assert!((mean[0] - 0.5).abs() < 0.02, "mean {mean:?}");
        assert!((mean[1] - 0.5).abs() < 0.02, "mean {mean:?}");
        assert!(mean[2].abs() < 0.02, "mean {mean:?}");
    }

    #[test]
    fn degenerate_mesh_errors() {
        let mesh = TriMesh {
            vertices: vec![[0.0; 3], [0.0; 3], [0.0; 3]],
            faces: vec![[0, 1, 2]],
        };
        assert!(matches!(
            sample_mesh_surface(&mesh, 10, 0),
            Err(SamplingError::DegenerateMesh)
        ));
    }

    #[test]
    fn mesh_sampling_is_seed_deterministic() {
        let mesh = unit_triangle();
        let a = sample_mesh_surface(&mesh, 64, 42).unwrap();
        let b = sample_mesh_surface(&mesh, 64, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_mesh_surface(&mesh, 64, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn canonicalize_single_point_is_origin() {
        assert_eq!(canonicalize_points(&[[3.0, -1.0, 2.0]]), vec![[0.0; 3]]);
    }

    #[test]
    fn canonicalize_two_points() {
        let out = canonicalize_points(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(out, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn canonicalize_translation_invariant() {
        let mut rng = seeded_rng(23, 2);
        let pts: Vec<[f32; 3]> = (0..40)
            .map(|_| {
                [
                    rng.random_range(-2.0f32..2.0),
                    rng.random_range(-2.0f32..2.0),
                    rng.random_range(-2.0f32..2.0),
                ]
            })
            .collect();
        let t = [
            rng.random_range(-10.0f32..10.0),
            rng.random_range(-10.0f32..10.0),
            rng.random_range(-10.0f32..10.0),
        ];
        let moved: Vec<[f32; 3]> = pts
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();
        let a = canonicalize_points(&pts);
        let b = canonicalize_points(&moved);
        for (pa, pb) in a.iter().zip(&b) {
            for c in 0..3 {
                assert!((pa[c] - pb[c]).abs() < 1e-6);
            }
        }
    }
}
