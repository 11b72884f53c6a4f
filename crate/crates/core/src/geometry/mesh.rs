use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use super::tri2d::Coverage;
use crate::error::{invariant, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// One triangle, with a separate index triple per attribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Face {
    pub pos: [u32; 3],
    pub nrm: [u32; 3],
    pub uv: [u32; 3],
}

/// Indexed triangle mesh with per-vertex positions, unit normals and UVs.
///
/// Construction validates: UVs inside `[0,1]²`, unit normals, indices in
/// range, no triangle with zero UV area, and no two UV charts overlapping.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub uvs: Vec<Vec2>,
    pub faces: Vec<Face>,
}

const UV_TOL: f64 = 1e-6;
const NORMAL_TOL: f64 = 1e-4;
/// Raster resolution of the chart-overlap check.
const OVERLAP_RES: usize = 256;

impl TriMesh {
    pub fn new(positions: Vec<Vec3>, normals: Vec<Vec3>, uvs: Vec<Vec2>, faces: Vec<Face>) -> Result<Self> {
        let m = Self {
            positions,
            normals,
            uvs,
            faces,
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds a mesh whose normals are area-weighted averages of the incident
    /// face normals. `faces` give `(position, uv)` index triples.
    pub fn with_computed_normals(positions: Vec<Vec3>, uvs: Vec<Vec2>, faces: &[([u32; 3], [u32; 3])]) -> Result<Self> {
        let mut acc = vec![Vec3::zeros(); positions.len()];
        for (p, _) in faces {
            for &i in p {
                if i as usize >= positions.len() {
                    return Err(invariant!("face position index {i} out of range"));
                }
            }
            let [a, b, c] = p.map(|i| positions[i as usize]);
            // Cross product length is twice the area: area weighting for free.
            let n = (b - a).cross(&(c - a));
            for &i in p {
                acc[i as usize] += n;
            }
        }
        let normals = acc
            .into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vec3::z()
                }
            })
            .collect();
        let faces = faces
            .iter()
            .map(|&(p, t)| Face { pos: p, nrm: p, uv: t })
            .collect();
        Self::new(positions, normals, uvs, faces)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, uv) in self.uvs.iter().enumerate() {
            if !(uv.x >= -UV_TOL && uv.x <= 1.0 + UV_TOL && uv.y >= -UV_TOL && uv.y <= 1.0 + UV_TOL) {
                return Err(invariant!("uv {i} = ({}, {}) outside [0,1]^2", uv.x, uv.y));
            }
        }
        for (i, n) in self.normals.iter().enumerate() {
            if (n.norm() - 1.0).abs() > NORMAL_TOL {
                return Err(invariant!("normal {i} has length {}", n.norm()));
            }
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(invariant!("position {i} is not finite"));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            let ok = f.pos.iter().all(|&i| (i as usize) < self.positions.len())
                && f.nrm.iter().all(|&i| (i as usize) < self.normals.len())
                && f.uv.iter().all(|&i| (i as usize) < self.uvs.len());
            if !ok {
                return Err(invariant!("face {fi} indexes out of range"));
            }
            if self.uv_area(fi) == 0.0 {
                return Err(invariant!(
                    "face {fi} is degenerate in UV (3D area {})",
                    self.area(fi)
                ));
            }
        }
        self.check_chart_overlap()
    }

    pub fn face_positions(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].pos.map(|i| self.positions[i as usize])
    }

    pub fn face_uvs(&self, f: usize) -> [Vec2; 3] {
        self.faces[f].uv.map(|i| self.uvs[i as usize])
    }

    pub fn face_normals(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].nrm.map(|i| self.normals[i as usize])
    }

    /// Unnormalized geometric normal (counter-clockwise winding is front).
    pub fn geometric_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.face_positions(f);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self, f: usize) -> f64 {
        0.5 * self.geometric_normal(f).norm()
    }

    pub fn uv_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.face_uvs(f);
        0.5 * ((b - a).perp(&(c - a))).abs()
    }

    pub fn total_uv_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.uv_area(f)).sum()
    }

    pub fn aabb(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    /// UV chart id per face: faces sharing a UV edge belong to the same chart.
    /// Ids are dense and ordered by first face.
    pub fn uv_charts(&self) -> Vec<usize> {
        let n = self.faces.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut edge_owner: HashMap<(u32, u32), usize> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (f.uv[e], f.uv[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                if let Some(&other) = edge_owner.get(&key) {
                    let (ra, rb) = (find(&mut parent, fi), find(&mut parent, other));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                } else {
                    edge_owner.insert(key, fi);
                }
            }
        }
        let mut ids = HashMap::new();
        (0..n)
            .map(|f| {
                let r = find(&mut parent, f);
                let next = ids.len();
                *ids.entry(r).or_insert(next)
            })
            .collect()
    }

    pub fn chart_count(&self) -> usize {
        self.uv_charts().iter().max().map_or(0, |m| m + 1)
    }

    fn check_chart_overlap(&self) -> Result<()> {
        let charts = self.uv_charts();
        let res = OVERLAP_RES;
        let mut owner: Vec<Option<usize>> = vec![None; res * res];
        for f in 0..self.faces.len() {
            let [a, b, c] = self.face_uvs(f).map(|t| uv_to_raster(t, res, res));
            let Some(cov) = Coverage::new(a, b, c) else {
                continue;
            };
            let (Some((r0, r1)), Some((c0, c1))) = (cov.row_span(res), cov.col_span(res)) else {
                continue;
            };
            for i in r0..=r1 {
                for j in c0..=c1 {
                    if cov.at([j as f64 + 0.5, i as f64 + 0.5]).is_none() {
                        continue;
                    }
                    let slot = &mut owner[i * res + j];
                    match *slot {
                        Some(other) if other != charts[f] => {
                            return Err(invariant!(
                                "UV charts {other} and {} overlap near texel ({i}, {j})",
                                charts[f]
                            ));
                        }
                        _ => *slot = Some(charts[f]),
                    }
                }
            }
        }
        Ok(())
    }
}

/// UV to raster coordinates: `u` grows right, `v` grows up, row 0 is `v ≈ 1`.
pub fn uv_to_raster(uv: Vec2, width: usize, height: usize) -> [f64; 2] {
    [uv.x * width as f64, (1.0 - uv.y) * height as f64]
}

/// Reads the `v`/`vt`/`vn`/`f` subset of Wavefront OBJ. Polygons are fan
/// triangulated; negative (relative) indices are accepted.
pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut pos: Vec<Vec3> = Vec::new();
    let mut uvs: Vec<Vec2> = Vec::new();
    let mut nrm: Vec<Vec3> = Vec::new();
    // (line, [(p, t, n)])
    let mut faces: Vec<(usize, [(u32, Option<u32>, Option<u32>); 3])> = Vec::new();

    let perr = |line: usize, msg: String| Error::Parse { line, msg };

    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut it = content.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let nums = |it: std::str::SplitWhitespace, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = it
                .take(n)
                .map(|s| s.parse::<f64>().map_err(|e| perr(line, format!("bad number {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() < n {
                return Err(perr(line, format!("expected {n} components")));
            }
            Ok(v)
        };
        match tag {
            "v" => {
                let v = nums(it, 3)?;
                pos.push(Vec3::new(v[0], v[1], v[2]));
            }
            "vt" => {
                let v = nums(it, 2)?;
                uvs.push(Vec2::new(v[0], v[1]));
            }
            "vn" => {
                let v = nums(it, 3)?;
                nrm.push(Vec3::new(v[0], v[1], v[2]));
            }
            "f" => {
                let mut corners = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let resolve = |s: Option<&str>, count: usize, what: &str| -> Result<Option<u32>> {
                        match s {
                            None | Some("") => Ok(None),
                            Some(s) => {
                                let i: i64 = s
                                    .parse()
                                    .map_err(|_| perr(line, format!("bad {what} index {s:?}")))?;
                                let idx = if i > 0 {
                                    i - 1
                                } else if i < 0 {
                                    count as i64 + i
                                } else {
                                    return Err(perr(line, format!("{what} index 0 is invalid")));
                                };
                                if idx < 0 || idx as usize >= count {
                                    return Err(perr(
                                        line,
                                        format!("{what} index {i} out of range (have {count})"),
                                    ));
                                }
                                Ok(Some(idx as u32))
                            }
                        }
                    };
                    let p = resolve(parts.next(), pos.len(), "vertex")?
                        .ok_or_else(|| perr(line, "face corner without vertex index".into()))?;
                    let t = resolve(parts.next(), uvs.len(), "texcoord")?;
                    let n = resolve(parts.next(), nrm.len(), "normal")?;
                    corners.push((p, t, n));
                }
                if corners.len() < 3 {
                    return Err(perr(line, "face with fewer than 3 corners".into()));
                }
                for k in 1..corners.len() - 1 {
                    faces.push((line, [corners[0], corners[k], corners[k + 1]]));
                }
            }
            // Groups, objects, materials and smoothing are ignored.
            "g" | "o" | "s" | "usemtl" | "mtllib" | "l" | "p" => {}
            other => return Err(perr(line, format!("unsupported statement {other:?}"))),
        }
    }

    let mut tri = Vec::with_capacity(faces.len());
    let all_normals = !faces.is_empty() && faces.iter().all(|(_, c)| c.iter().all(|x| x.2.is_some()));
    for (line, c) in &faces {
        if c.iter().any(|x| x.1.is_none()) {
            return Err(invariant!("face on line {line} has no texture coordinates"));
        }
        tri.push((
            c.map(|x| x.0),
            c.map(|x| x.1.unwrap_or(0)),
            c.map(|x| x.2.unwrap_or(0)),
        ));
    }
    if all_normals {
        let faces = tri
            .into_iter()
            .map(|(p, t, n)| Face { pos: p, nrm: n, uv: t })
            .collect();
        TriMesh::new(pos, nrm, uvs, faces)
    } else {
        let pt: Vec<_> = tri.into_iter().map(|(p, t, _)| (p, t)).collect();
        TriMesh::with_computed_normals(pos, uvs, &pt)
    }
}

pub fn load_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

/// Writes the mesh as OBJ. Floats use the shortest representation that
/// parses back to the same bits.
pub fn to_obj(mesh: &TriMesh) -> String {
    let mut s = String::new();
    for p in &mesh.positions {
        let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
    }
    for t in &mesh.uvs {
        let _ = writeln!(s, "vt {} {}", t.x, t.y);
    }
    for n in &mesh.normals {
        let _ = writeln!(s, "vn {} {} {}", n.x, n.y, n.z);
    }
    for f in &mesh.faces {
        let _ = write!(s, "f");
        for k in 0..3 {
            let _ = write!(s, " {}/{}/{}", f.pos[k] + 1, f.uv[k] + 1, f.nrm[k] + 1);
        }
        s.push('\n');
    }
    s
}
