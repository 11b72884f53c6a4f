//! Meshes, cameras, scene normalization and exact surface queries.
//!
//! Convention: right-handed, +Y up, cameras look down their local −Z.
//! All downstream stages work in the normalized frame produced by
//! [`normalize_scene`], where the scene's bounding box fits in `[-1, 1]³`.

mod camera;
mod mesh;
mod procedural;
pub mod raycast;
pub mod tri2d;

use serde::{Deserialize, Serialize};

pub use camera::{fixed_rig, Camera, Projection, RigParams};
pub use mesh::{load_obj, parse_obj, to_obj, uv_to_raster, Face, TriMesh, Vec2, Vec3};
pub use procedural::{cube6chart, quad, two_plane_occluder, uv_sphere, MeshKind};

use crate::error::{invariant, Result};

/// Uniform normalization `p ↦ (p − center) / half_extent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneNorm {
    pub center: [f64; 3],
    pub half_extent: f64,
}

impl SceneNorm {
    pub const IDENTITY: SceneNorm = SceneNorm {
        center: [0.0; 3],
        half_extent: 1.0,
    };

    pub fn apply(&self, p: Vec3) -> Vec3 {
        (p - Vec3::from(self.center)) / self.half_extent
    }
}

/// Centers the mesh on its bounding-box center and scales uniformly so the
/// largest half-dimension becomes 1. Normals are unchanged.
pub fn normalize_scene(mesh: &TriMesh) -> Result<(TriMesh, SceneNorm)> {
    let (lo, hi) = mesh
        .aabb()
        .ok_or_else(|| invariant!("cannot normalize an empty mesh"))?;
    let center = (lo + hi) / 2.0;
    let half = ((hi - lo) / 2.0).max();
    if !(half > 0.0) {
        return Err(invariant!("mesh has zero extent"));
    }
    let norm = SceneNorm {
        center: center.into(),
        half_extent: half,
    };
    let mut out = mesh.clone();
    for p in &mut out.positions {
        *p = norm.apply(*p);
    }
    Ok((out, norm))
}

/// Attributes of a surface point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub uv: Vec2,
}

/// Interpolates vertex attributes of `face` with barycentric weights `bary`;
/// the normal is renormalized.
pub fn barycentric_query(mesh: &TriMesh, face: usize, bary: [f64; 3]) -> SurfacePoint {
    let p = mesh.face_positions(face);
    let n = mesh.face_normals(face);
    let t = mesh.face_uvs(face);
    let position = p[0] * bary[0] + p[1] * bary[1] + p[2] * bary[2];
    let normal = n[0] * bary[0] + n[1] * bary[1] + n[2] * bary[2];
    let len = normal.norm();
    let normal = if len > 0.0 {
        normal / len
    } else {
        mesh.geometric_normal(face).normalize()
    };
    SurfacePoint {
        position,
        normal,
        uv: t[0] * bary[0] + t[1] * bary[1] + t[2] * bary[2],
    }
}
