//! Deterministic software rasterization into the UV atlas and camera views.
//!
//! Every texel or pixel is written by exactly one worker and faces are visited
//! in ascending index order, so output never depends on the thread count.
//! Sample `(i, j)` sits at raster point `(j + 0.5, i + 0.5)`; ownership of
//! samples on shared edges follows the top-left rule.

mod corrupt;
mod visibility;

pub use corrupt::{corrupt_view, hue_rotate, luminance, Corruption};
pub use visibility::{compute_visibility, VisMaps, DEFAULT_DEPTH_EPS_REL};

use serde::{Deserialize, Serialize};

use crate::error::{invariant, Result};
use crate::geometry::tri2d::Coverage;
use crate::geometry::{barycentric_query, uv_to_raster, Camera, SceneNorm, TriMesh, Vec3};
use crate::par;
use crate::texture::Shader;

pub const NO_FACE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    UvAtlas,
    View(usize),
}

/// Per-sample geometry of one domain. Position and normal are zero wherever
/// `coverage` is false.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoMaps {
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    pub norm: SceneNorm,
    pub position: Vec<[f32; 3]>,
    pub normal: Vec<[f32; 3]>,
    pub coverage: Vec<bool>,
    /// Face owning each covered sample, [`NO_FACE`] elsewhere.
    pub face_id: Vec<u32>,
    pub color: Option<Vec<[f32; 3]>>,
    /// View domain only: distance along the camera's viewing axis.
    pub depth: Option<Vec<f32>>,
}

impl GeoMaps {
    fn empty(domain: Domain, width: usize, height: usize, norm: SceneNorm) -> Self {
        let n = width * height;
        Self {
            domain,
            width,
            height,
            norm,
            position: vec![[0.0; 3]; n],
            normal: vec![[0.0; 3]; n],
            coverage: vec![false; n],
            face_id: vec![NO_FACE; n],
            color: None,
            depth: None,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    pub fn color(&self) -> Result<&[[f32; 3]]> {
        self.color
            .as_deref()
            .ok_or_else(|| invariant!("{:?} maps carry no color", self.domain))
    }
}

#[derive(Clone, Copy, Default)]
struct Sample {
    face: u32,
    position: [f32; 3],
    normal: [f32; 3],
    color: [f32; 3],
    depth: f32,
}

fn to_f32(v: Vec3) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

/// Assembles maps from per-row sample buffers.
fn assemble(
    mut maps: GeoMaps,
    rows: Vec<Vec<Option<Sample>>>,
    with_color: bool,
    with_depth: bool,
) -> GeoMaps {
    let n = maps.len();
    let mut color = with_color.then(|| vec![[0.0f32; 3]; n]);
    let mut depth = with_depth.then(|| vec![0.0f32; n]);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, s) in row.into_iter().enumerate() {
            let Some(s) = s else { continue };
            let k = i * maps.width + j;
            maps.coverage[k] = true;
            maps.face_id[k] = s.face;
            maps.position[k] = s.position;
            maps.normal[k] = s.normal;
            if let Some(c) = color.as_mut() {
                c[k] = s.color;
            }
            if let Some(d) = depth.as_mut() {
                d[k] = s.depth;
            }
        }
    }
    maps.color = color;
    maps.depth = depth;
    maps
}

/// Buckets faces by the sample rows their bounding boxes touch.
fn bucket_rows(tris: &[Option<Coverage>], rows: usize) -> Vec<Vec<u32>> {
    let mut buckets = vec![Vec::new(); rows];
    for (f, t) in tris.iter().enumerate() {
        if let Some((r0, r1)) = t.as_ref().and_then(|t| t.row_span(rows)) {
            for b in &mut buckets[r0..=r1] {
                b.push(f as u32);
            }
        }
    }
    buckets
}

/// Rasterizes the mesh's UV layout. `mesh` must already be in the normalized
/// frame described by `norm`.
pub fn bake_uv(
    mesh: &TriMesh,
    norm: SceneNorm,
    width: usize,
    height: usize,
    shader: Option<&dyn Shader>,
) -> GeoMaps {
    let tris: Vec<Option<Coverage>> = (0..mesh.faces.len())
        .map(|f| {
            let t = mesh.face_uvs(f).map(|uv| uv_to_raster(uv, width, height));
            Coverage::new(t[0], t[1], t[2])
        })
        .collect();
    let buckets = bucket_rows(&tris, height);
    let rows = par::map_range(height, |i| {
        let mut row = vec![None; width];
        let y = i as f64 + 0.5;
        for &f in &buckets[i] {
            let tri = tris[f as usize].as_ref().expect("bucketed faces exist");
            let Some((c0, c1)) = tri.col_span(width) else { continue };
            for (j, slot) in row.iter_mut().enumerate().take(c1 + 1).skip(c0) {
                if slot.is_some() {
                    continue;
                }
                if let Some(bary) = tri.at([j as f64 + 0.5, y]) {
                    let sp = barycentric_query(mesh, f as usize, bary);
                    *slot = Some(Sample {
                        face: f,
                        position: to_f32(sp.position),
                        normal: to_f32(sp.normal),
                        color: shader.map_or([0.0; 3], |s| s.shade(&sp)),
                        depth: 0.0,
                    });
                }
            }
        }
        row
    });
    assemble(
        GeoMaps::empty(Domain::UvAtlas, width, height, norm),
        rows,
        shader.is_some(),
        false,
    )
}

struct ViewTri {
    cov: Coverage,
    inv_depth: [f64; 3],
}

/// Z-buffered perspective rendering of the normalized mesh. Back faces are
/// culled and faces with a vertex behind the camera are skipped. Attributes
/// use perspective-correct interpolation; equal depths keep the lower face.
pub fn render_view(
    mesh: &TriMesh,
    norm: SceneNorm,
    cam: &Camera,
    shader: Option<&dyn Shader>,
) -> GeoMaps {
    let (width, height) = (cam.width, cam.height);
    let eye = cam.eye();
    let tris: Vec<Option<ViewTri>> = (0..mesh.faces.len())
        .map(|f| {
            let p = mesh.face_positions(f);
            if mesh.geometric_normal(f).dot(&(eye - p[0])) <= 0.0 {
                return None;
            }
            let pr: Vec<_> = p.iter().filter_map(|&v| cam.project(v)).collect();
            if pr.len() < 3 {
                return None;
            }
            let cov = Coverage::new([pr[0].x, pr[0].y], [pr[1].x, pr[1].y], [pr[2].x, pr[2].y])?;
            Some(ViewTri {
                cov,
                inv_depth: [1.0 / pr[0].depth, 1.0 / pr[1].depth, 1.0 / pr[2].depth],
            })
        })
        .collect();
    let covs: Vec<Option<Coverage>> = tris.iter().map(|t| t.as_ref().map(|t| t.cov)).collect();
    let buckets = bucket_rows(&covs, height);
    let rows = par::map_range(height, |i| {
        let mut best: Vec<Option<(f64, u32, [f64; 3])>> = vec![None; width];
        let y = i as f64 + 0.5;
        for &f in &buckets[i] {
            let t = tris[f as usize].as_ref().expect("bucketed faces exist");
            let Some((c0, c1)) = t.cov.col_span(width) else { continue };
            for (j, slot) in best.iter_mut().enumerate().take(c1 + 1).skip(c0) {
                let Some(b) = t.cov.at([j as f64 + 0.5, y]) else { continue };
                let w = [b[0] * t.inv_depth[0], b[1] * t.inv_depth[1], b[2] * t.inv_depth[2]];
                let s = w[0] + w[1] + w[2];
                let depth = 1.0 / s;
                if slot.map_or(true, |(d, _, _)| depth < d) {
                    *slot = Some((depth, f, [w[0] / s, w[1] / s, w[2] / s]));
                }
            }
        }
        best.into_iter()
            .map(|s| {
                s.map(|(depth, f, bary)| {
                    let sp = barycentric_query(mesh, f as usize, bary);
                    Sample {
                        face: f,
                        position: to_f32(sp.position),
                        normal: to_f32(sp.normal),
                        color: shader.map_or([0.0; 3], |sh| sh.shade(&sp)),
                        depth: depth as f32,
                    }
                })
            })
            .collect()
    });
    assemble(
        GeoMaps::empty(Domain::View(cam.id), width, height, norm),
        rows,
        shader.is_some(),
        true,
    )
}

/// Grows colors `iterations` texels into uncovered space, each new texel
/// taking the mean of its already-colored 8-neighbors. Used only on final
/// textures to hide seams under bilinear lookup.
pub fn dilate(color: &[[f32; 3]], filled: &[bool], width: usize, height: usize, iterations: usize) -> Vec<[f32; 3]> {
    let mut color = color.to_vec();
    let mut filled = filled.to_vec();
    for _ in 0..iterations {
        let mut next_c = color.clone();
        let mut next_f = filled.clone();
        for i in 0..height {
            for j in 0..width {
                let k = i * width + j;
                if filled[k] {
                    continue;
                }
                let mut acc = [0.0f32; 3];
                let mut n = 0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (y, x) = (i as i64 + di, j as i64 + dj);
                        if y < 0 || x < 0 || y >= height as i64 || x >= width as i64 {
                            continue;
                        }
                        let q = y as usize * width + x as usize;
                        if filled[q] {
                            for c in 0..3 {
                                acc[c] += color[q][c];
                            }
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    next_c[k] = acc.map(|v| v / n as f32);
                    next_f[k] = true;
                }
            }
        }
        color = next_c;
        filled = next_f;
    }
    color
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cube6chart, fixed_rig, quad, two_plane_occluder, RigParams};

    #[test]
    fn quad_bake_is_full_and_linear() {
        let m = quad().unwrap();
        let g = bake_uv(&m, SceneNorm::IDENTITY, 8, 8, None);
        assert!(g.coverage.iter().all(|&c| c));
        for i in 0..8 {
            for j in 0..8 {
                let p = g.position[i * 8 + j];
                let x = (j as f32 + 0.5) / 4.0 - 1.0;
                let y = 1.0 - (i as f32 + 0.5) / 4.0;
                assert!((p[0] - x).abs() < 1e-6 && (p[1] - y).abs() < 1e-6 && p[2] == 0.0);
            }
        }
    }

    #[test]
    fn cube_coverage_tracks_uv_area() {
        let m = cube6chart().unwrap();
        let g = bake_uv(&m, SceneNorm::IDENTITY, 128, 128, None);
        let frac = g.covered_count() as f64 / (128.0 * 128.0);
        assert!((frac - m.total_uv_area()).abs() <= 2.0 / 128.0, "{frac}");
    }

    #[test]
    fn camera_looking_away_sees_nothing() {
        let m = quad().unwrap();
        let cam = Camera::look_at(0, Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, 6.0), Vec3::y(), 60.0, 16, 16)
            .unwrap();
        let g = render_view(&m, SceneNorm::IDENTITY, &cam, None);
        assert_eq!(g.covered_count(), 0);
    }

    #[test]
    fn near_plane_wins_on_the_occluder() {
        let m = two_plane_occluder(0.1, 0.5).unwrap();
        let cam = &fixed_rig(&RigParams::default(), Vec3::zeros()).unwrap()[0];
        let g = render_view(&m, SceneNorm::IDENTITY, cam, None);
        let center = (cam.height / 2) * cam.width + cam.width / 2;
        assert!(g.coverage[center]);
        assert!((g.position[center][2] - 0.1).abs() < 1e-6);
        assert!(g.depth.as_ref().unwrap()[center] > 0.0);
    }

    #[test]
    fn dilation_extends_by_the_requested_width() {
        let mut filled = vec![false; 25];
        filled[12] = true;
        let mut color = vec![[0.0; 3]; 25];
        color[12] = [1.0, 0.5, 0.25];
        let out = dilate(&color, &filled, 5, 5, 1);
        assert_eq!(out[6], [1.0, 0.5, 0.25]);
        assert_eq!(out[0], [0.0; 3]);
        let out = dilate(&color, &filled, 5, 5, 2);
        assert_eq!(out[0], [1.0, 0.5, 0.25]);
    }
}
