//! Primitive object shapes for the synthetic scene generator. All meshes
//! are built with their base on z = 0, centered in x/y, then posed by a yaw
//! rotation and a translation.

use crate::scenegraph::TriMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Box,
    Cylinder,
    Sphere,
    Composite,
}

impl ShapeKind {
    pub fn noun(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Sphere => "sphere",
            ShapeKind::Composite => "stack",
        }
    }

    /// Shapes with a flat, load-bearing top surface.
    pub fn stackable_top(self) -> bool {
        matches!(self, ShapeKind::Box | ShapeKind::Composite)
    }
}

pub fn box_mesh(w: f32, d: f32, h: f32) -> TriMesh {
    box_mesh_at(w, d, h, 0.0)
}

fn box_mesh_at(w: f32, d: f32, h: f32, z0: f32) -> TriMesh {
    let (hw, hd) = (0.5 * w, 0.5 * d);
    let vertices = vec![
        [-hw, -hd, z0],
        [hw, -hd, z0],
        [hw, hd, z0],
        [-hw, hd, z0],
        [-hw, -hd, z0 + h],
        [hw, -hd, z0 + h],
        [hw, hd, z0 + h],
        [-hw, hd, z0 + h],
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2], // bottom
        [4, 5, 6],
        [4, 6, 7], // top
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    TriMesh { vertices, faces }
}

pub fn cylinder_mesh(radius: f32, height: f32, segments: usize) -> TriMesh {
    assert!(segments >= 3);
    let mut vertices = Vec::with_capacity(2 * segments + 2);
    for ring in 0..2 {
        let z = ring as f32 * height;
        for i in 0..segments {
            let a = std::f32::consts::TAU * i as f32 / segments as f32;
            vertices.push([radius * a.cos(), radius * a.sin(), z]);
        }
    }
    let bottom_center = vertices.len() as u32;
    vertices.push([0.0, 0.0, 0.0]);
    let top_center = vertices.len() as u32;
    vertices.push([0.0, 0.0, height]);

    let mut faces = Vec::new();
    let seg = segments as u32;
    for i in 0..seg {
        let j = (i + 1) % seg;
        // side
        faces.push([i, j, seg + j]);
        faces.push([i, seg + j, seg + i]);
        // caps
        faces.push([bottom_center, j, i]);
        faces.push([top_center, seg + i, seg + j]);
    }
    TriMesh { vertices, faces }
}

pub fn sphere_mesh(radius: f32, rings: usize, segments: usize) -> TriMesh {
    assert!(rings >= 2 && segments >= 3);
    let mut vertices = vec![[0.0, 0.0, 0.0]]; // south pole (base)
    for ring in 1..rings {
        let phi = std::f32::consts::PI * ring as f32 / rings as f32;
        let z = radius * (1.0 - phi.cos());
        let r = radius * phi.sin();
        for i in 0..segments {
            let a = std::f32::consts::TAU * i as f32 / segments as f32;
            vertices.push([r * a.cos(), r * a.sin(), z]);
        }
    }
    let north = vertices.len() as u32;
    vertices.push([0.0, 0.0, 2.0 * radius]);

    let seg = segments as u32;
    let ring_start = |ring: u32| 1 + (ring - 1) * seg;
    let mut faces = Vec::new();
    for i in 0..seg {
        let j = (i + 1) % seg;
        faces.push([0, ring_start(1) + j, ring_start(1) + i]);
    }
    for ring in 1..(rings as u32 - 1) {
        let a = ring_start(ring);
        let b = ring_start(ring + 1);
        for i in 0..seg {
            let j = (i + 1) % seg;
            faces.push([a + i, a + j, b + j]);
            faces.push([a + i, b + j, b + i]);
        }
    }
    let last = ring_start(rings as u32 - 1);
    for i in 0..seg {
        let j = (i + 1) % seg;
        faces.push([north, last + i, last + j]);
    }
    TriMesh { vertices, faces }
}

/// Two stacked boxes: a wide base and a narrower top.
pub fn composite_mesh(w: f32, d: f32, h: f32) -> TriMesh {
    let base = box_mesh_at(w, d, 0.55 * h, 0.0);
    let top = box_mesh_at(0.6 * w, 0.6 * d, 0.45 * h, 0.55 * h);
    let mut vertices = base.vertices;
    let mut faces = base.faces;
    let off = vertices.len() as u32;
    vertices.extend(top.vertices);
    faces.extend(top.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
    TriMesh { vertices, faces }
}

/// Yaw-rotate around z, then translate.
pub fn pose_mesh(mesh: &TriMesh, yaw: f32, translation: [f32; 3]) -> TriMesh {
    let (c, s) = (yaw.cos(), yaw.sin());
    TriMesh {
        vertices: mesh
            .vertices
            .iter()
            .map(|v| {
                [
                    c * v[0] - s * v[1] + translation[0],
                    s * v[0] + c * v[1] + translation[1],
                    v[2] + translation[2],
                ]
            })
            .collect(),
        faces: mesh.faces.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::triangle_area;

    fn total_area(mesh: &TriMesh) -> f32 {
        mesh.faces
            .iter()
            .map(|f| {
                triangle_area(
                    &mesh.vertices[f[0] as usize],
                    &mesh.vertices[f[1] as usize],
                    &mesh.vertices[f[2] as usize],
                )
            })
            .sum()
    }

    #[test]
    fn box_surface_area_is_exact() {
        let m = box_mesh(2.0, 3.0, 4.0);
        let expected = 2.0 * (2.0 * 3.0 + 2.0 * 4.0 + 3.0 * 4.0);
        assert!((total_area(&m) - expected).abs() < 1e-4);
    }

    #[test]
    fn meshes_have_valid_face_indices() {
        for m in [
            box_mesh(1.0, 1.0, 1.0),
            cylinder_mesh(0.5, 1.2, 24),
            sphere_mesh(0.4, 8, 12),
            composite_mesh(1.0, 0.8, 1.5),
        ] {
            let nv = m.vertices.len() as u32;
            for f in &m.faces {
                assert!(f.iter().all(|&v| v < nv));
            }
            assert!(total_area(&m) > 0.0);
        }
    }

    #[test]
    fn pose_translates_and_rotates() {
        let m = box_mesh(1.0, 1.0, 1.0);
        let posed = pose_mesh(&m, std::f32::consts::FRAC_PI_2, [5.0, 0.0, 1.0]);
        // corner (-0.5,-0.5,0) rotates to (0.5,-0.5) then translates
        let v = posed.vertices[0];
        assert!((v[0] - 5.5).abs() < 1e-6);
        assert!((v[1] + 0.5).abs() < 1e-6);
        assert!((v[2] - 1.0).abs() < 1e-6);
    }
}
