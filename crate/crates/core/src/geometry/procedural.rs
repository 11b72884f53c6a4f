//! Procedural test scenes with fixed, documented UV layouts.
//!
//! * `Quad` – the plane `z = 0`, `x, y ∈ [-1, 1]`, facing +Z; UV = `((x+1)/2, (y+1)/2)`.
//! * `Cube6Chart` – the cube `[-1,1]³`; face k ∈ (+X, −X, +Y, −Y, +Z, −Z) gets a
//!   0.3 × 0.3 chart centered in cell `(k % 3, k / 3)` of a 3 × 2 grid.
//! * `UvSphere` – unit sphere, longitude → u, latitude → v (north pole at v = 1),
//!   seam at u = 0/1.
//! * `TwoPlaneOccluder` – the `Quad` plane plus a 1 × 1 plane at `z = 0.1`
//!   centered in front of it. Large plane chart `[0.02, 0.66]²`, small plane
//!   chart `[0.67, 0.99] × [0.02, 0.34]`.

use serde::{Deserialize, Serialize};

use super::mesh::{Face, TriMesh, Vec2, Vec3};
use crate::error::{invariant, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshKind {
    Quad,
    Cube6chart,
    Uvsphere,
    TwoPlaneOccluder,
}

impl MeshKind {
    pub const ALL: [MeshKind; 4] = [
        MeshKind::Quad,
        MeshKind::Cube6chart,
        MeshKind::Uvsphere,
        MeshKind::TwoPlaneOccluder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MeshKind::Quad => "quad",
            MeshKind::Cube6chart => "cube6chart",
            MeshKind::Uvsphere => "uvsphere",
            MeshKind::TwoPlaneOccluder => "two_plane_occluder",
        }
    }

    /// The mesh with default parameters (`uvsphere` uses 32 × 16).
    pub fn build(self) -> Result<TriMesh> {
        match self {
            MeshKind::Quad => quad(),
            MeshKind::Cube6chart => cube6chart(),
            MeshKind::Uvsphere => uv_sphere(32, 16),
            MeshKind::TwoPlaneOccluder => two_plane_occluder(0.1, 0.5),
        }
    }
}

struct Builder {
    positions: Vec<Vec3>,
    normals: Vec<Vec3>,
    uvs: Vec<Vec2>,
    faces: Vec<Face>,
}

impl Builder {
    fn new() -> Self {
        Self {
            positions: Vec::new(),
            normals: Vec::new(),
            uvs: Vec::new(),
            faces: Vec::new(),
        }
    }

    /// Adds a vertex whose position, normal and UV share one index.
    fn vertex(&mut self, p: Vec3, n: Vec3, uv: Vec2) -> u32 {
        self.positions.push(p);
        self.normals.push(n.normalize());
        self.uvs.push(uv);
        (self.positions.len() - 1) as u32
    }

    fn tri(&mut self, a: u32, b: u32, c: u32) {
        self.faces.push(Face {
            pos: [a, b, c],
            nrm: [a, b, c],
            uv: [a, b, c],
        });
    }

    /// A planar rectangle `origin + s·t + r·b`, `s, r ∈ [-1, 1]` scaled by `half`,
    /// mapped onto the UV square at `uv0` with side `side`. `t × b` is the front.
    fn rect(&mut self, origin: Vec3, t: Vec3, b: Vec3, half: f64, uv0: Vec2, side: f64) {
        let n = t.cross(&b);
        let corner = |s: f64, r: f64| {
            (
                origin + half * (s * t + r * b),
                uv0 + side * Vec2::new((s + 1.0) / 2.0, (r + 1.0) / 2.0),
            )
        };
        let ids: Vec<u32> = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
            .iter()
            .map(|&(s, r)| {
                let (p, uv) = corner(s, r);
                self.vertex(p, n, uv)
            })
            .collect();
        self.tri(ids[0], ids[1], ids[2]);
        self.tri(ids[0], ids[2], ids[3]);
    }

    fn finish(self) -> Result<TriMesh> {
        TriMesh::new(self.positions, self.normals, self.uvs, self.faces)
    }
}

pub fn quad() -> Result<TriMesh> {
    let mut b = Builder::new();
    b.rect(Vec3::zeros(), Vec3::x(), Vec3::y(), 1.0, Vec2::zeros(), 1.0);
    b.finish()
}

pub fn cube6chart() -> Result<TriMesh> {
    const SIDE: f64 = 0.3;
    let faces: [(Vec3, Vec3); 6] = [
        (Vec3::new(0.0, 0.0, -1.0), Vec3::y()),  // +X
        (Vec3::new(0.0, 0.0, 1.0), Vec3::y()),   // −X
        (Vec3::x(), Vec3::new(0.0, 0.0, -1.0)),  // +Y
        (Vec3::x(), Vec3::new(0.0, 0.0, 1.0)),   // −Y
        (Vec3::x(), Vec3::y()),                  // +Z
        (Vec3::new(-1.0, 0.0, 0.0), Vec3::y()),  // −Z
    ];
    let mut b = Builder::new();
    for (k, (t, bt)) in faces.iter().enumerate() {
        let n = t.cross(bt);
        let (col, row) = ((k % 3) as f64, (k / 3) as f64);
        let uv0 = Vec2::new(
            col / 3.0 + (1.0 / 3.0 - SIDE) / 2.0,
            row / 2.0 + (0.5 - SIDE) / 2.0,
        );
        b.rect(n, *t, *bt, 1.0, uv0, SIDE);
    }
    b.finish()
}

/// Unit sphere with `segments` longitudinal and `rings` latitudinal divisions.
/// Positions are shared across the UV seam; UVs are not.
pub fn uv_sphere(segments: usize, rings: usize) -> Result<TriMesh> {
    if segments < 3 || rings < 2 {
        return Err(invariant!(
            "uv sphere needs segments >= 3 and rings >= 2, got {segments}x{rings}"
        ));
    }
    let (s_n, r_n) = (segments, rings);
    let pi = std::f64::consts::PI;
    let mut positions = vec![Vec3::y(), -Vec3::y()];
    for r in 1..r_n {
        let theta = pi * r as f64 / r_n as f64;
        for s in 0..s_n {
            let phi = 2.0 * pi * s as f64 / s_n as f64;
            positions.push(Vec3::new(
                theta.sin() * phi.sin(),
                theta.cos(),
                theta.sin() * phi.cos(),
            ));
        }
    }
    let normals: Vec<Vec3> = positions.iter().map(|p| p.normalize()).collect();
    let ring_pos = |r: usize, s: usize| (2 + (r - 1) * s_n + s % s_n) as u32;

    let mut uvs = Vec::new();
    for r in 0..=r_n {
        for s in 0..=s_n {
            uvs.push(Vec2::new(s as f64 / s_n as f64, 1.0 - r as f64 / r_n as f64));
        }
    }
    let grid_uv = |r: usize, s: usize| (r * (s_n + 1) + s) as u32;
    let pole_uv_base = uvs.len() as u32;
    for s in 0..s_n {
        uvs.push(Vec2::new((s as f64 + 0.5) / s_n as f64, 1.0));
    }
    for s in 0..s_n {
        uvs.push(Vec2::new((s as f64 + 0.5) / s_n as f64, 0.0));
    }

    let mut faces = Vec::new();
    let mut push = |p: [u32; 3], t: [u32; 3]| faces.push(Face { pos: p, nrm: p, uv: t });
    for s in 0..s_n {
        // North cap, counter-clockwise seen from outside.
        push(
            [0, ring_pos(1, s), ring_pos(1, s + 1)],
            [pole_uv_base + s as u32, grid_uv(1, s), grid_uv(1, s + 1)],
        );
        for r in 1..r_n - 1 {
            let (a, b, c, d) = (
                ring_pos(r, s),
                ring_pos(r + 1, s),
                ring_pos(r + 1, s + 1),
                ring_pos(r, s + 1),
            );
            let (ta, tb, tc, td) = (
                grid_uv(r, s),
                grid_uv(r + 1, s),
                grid_uv(r + 1, s + 1),
                grid_uv(r, s + 1),
            );
            push([a, b, c], [ta, tb, tc]);
            push([a, c, d], [ta, tc, td]);
        }
        push(
            [1, ring_pos(r_n - 1, s + 1), ring_pos(r_n - 1, s)],
            [
                pole_uv_base + (s_n + s) as u32,
                grid_uv(r_n - 1, s + 1),
                grid_uv(r_n - 1, s),
            ],
        );
    }
    TriMesh::new(positions, normals, uvs, faces)
}

/// Large plane at `z = 0` plus a square occluder of half-size `half` at `z = gap`.
pub fn two_plane_occluder(gap: f64, half: f64) -> Result<TriMesh> {
    if !(gap > 0.0 && half > 0.0 && half < 1.0) {
        return Err(invariant!("occluder needs gap > 0 and 0 < half < 1"));
    }
    let mut b = Builder::new();
    b.rect(Vec3::zeros(), Vec3::x(), Vec3::y(), 1.0, Vec2::new(0.02, 0.02), 0.64);
    b.rect(
        Vec3::new(0.0, 0.0, gap),
        Vec3::x(),
        Vec3::y(),
        half,
        Vec2::new(0.67, 0.02),
        0.32,
    );
    b.finish()
}
