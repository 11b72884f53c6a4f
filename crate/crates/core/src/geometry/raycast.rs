//! Möller–Trumbore ray casting, used as an independent check on rasterization.

use super::mesh::{TriMesh, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub face: usize,
    pub t: f64,
    /// Barycentrics in face vertex order.
    pub bary: [f64; 3],
}

/// Ray/triangle intersection. Returns `(t, bary)` with `t > 0`.
pub fn intersect(origin: Vec3, dir: Vec3, tri: [Vec3; 3], cull_back: bool) -> Option<(f64, [f64; 3])> {
    const EPS: f64 = 1e-12;
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if cull_back {
        if det < EPS {
            return None;
        }
    } else if det.abs() < EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    if t <= EPS {
        return None;
    }
    Some((t, [1.0 - u - v, u, v]))
}

/// Closest hit over all faces; ties go to the lower face index.
pub fn cast(mesh: &TriMesh, origin: Vec3, dir: Vec3, cull_back: bool) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for f in 0..mesh.faces.len() {
        if let Some((t, bary)) = intersect(origin, dir, mesh.face_positions(f), cull_back) {
            if best.map_or(true, |b| t < b.t) {
                best = Some(Hit { face: f, t, bary });
            }
        }
    }
    best
}
