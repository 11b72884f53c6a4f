use std::collections::BTreeSet;

use super::{Domain, GeoMaps, NO_FACE};
use crate::error::{invariant, Result};
use crate::geometry::{raycast, Camera, TriMesh, Vec3};
use crate::par;

pub const DEFAULT_DEPTH_EPS_REL: f64 = 1e-3;

/// Which cameras see each UV texel.
#[derive(Clone, Debug, PartialEq)]
pub struct VisMaps {
    pub width: usize,
    pub height: usize,
    /// `visible[v][texel]`
    pub visible: Vec<Vec<bool>>,
    /// True where no view sees the texel (including uncovered texels).
    pub occlusion: Vec<bool>,
}

impl VisMaps {
    pub fn views(&self) -> usize {
        self.visible.len()
    }

    pub fn seen_by(&self, texel: usize) -> usize {
        self.visible.iter().filter(|v| v[texel]).count()
    }

    /// Covered texels that no view sees.
    pub fn occluded_covered(&self, coverage: &[bool]) -> Vec<bool> {
        self.occlusion
            .iter()
            .zip(coverage)
            .map(|(&o, &c)| o && c)
            .collect()
    }
}

/// Visibility of every covered UV texel in every view.
///
/// A texel is visible in view `v` when its surface faces the camera, it
/// projects inside the image, and its camera depth is at most the depth in
/// front of it times `1 + depth_eps_rel`. The depth in front of it is taken
/// from the exact ray toward the texel, intersected with the texel's own face
/// and the faces the view's z-buffer stored in the 3×3 pixel neighborhood of
/// the projection. When none of those faces is hit, the z-buffer value at the
/// pixel is used directly.
pub fn compute_visibility(
    mesh: &TriMesh,
    cams: &[Camera],
    uv: &GeoMaps,
    views: &[GeoMaps],
    depth_eps_rel: f64,
) -> Result<VisMaps> {
    if uv.domain != Domain::UvAtlas {
        return Err(invariant!("visibility needs UV-atlas maps, got {:?}", uv.domain));
    }
    if cams.len() != views.len() {
        return Err(invariant!("{} cameras but {} view maps", cams.len(), views.len()));
    }
    for (cam, view) in cams.iter().zip(views) {
        if view.norm != uv.norm {
            return Err(invariant!(
                "view {} was rendered with a different scene normalization",
                cam.id
            ));
        }
        if view.domain != Domain::View(cam.id) || view.width != cam.width || view.height != cam.height {
            return Err(invariant!("view maps do not belong to camera {}", cam.id));
        }
        if view.depth.is_none() {
            return Err(invariant!("view {} has no depth buffer", cam.id));
        }
    }

    let visible: Vec<Vec<bool>> = cams
        .iter()
        .zip(views)
        .map(|(cam, view)| {
            let eye = cam.eye();
            let depth = view.depth.as_ref().expect("checked above");
            let rows = par::map_range(uv.height, |i| {
                (0..uv.width)
                    .map(|j| {
                        let k = i * uv.width + j;
                        uv.coverage[k]
                            && texel_visible(mesh, cam, eye, view, depth, uv, k, depth_eps_rel)
                    })
                    .collect::<Vec<_>>()
            });
            rows.concat()
        })
        .collect();

    let occlusion = (0..uv.len())
        .map(|k| !visible.iter().any(|v| v[k]))
        .collect();
    Ok(VisMaps {
        width: uv.width,
        height: uv.height,
        visible,
        occlusion,
    })
}

#[allow(clippy::too_many_arguments)]
fn texel_visible(
    mesh: &TriMesh,
    cam: &Camera,
    eye: Vec3,
    view: &GeoMaps,
    depth: &[f32],
    uv: &GeoMaps,
    k: usize,
    eps: f64,
) -> bool {
    let p = Vec3::from(uv.position[k].map(f64::from));
    let face = uv.face_id[k] as usize;
    if mesh.geometric_normal(face).dot(&(eye - p)) <= 0.0 {
        return false;
    }
    let Some(pr) = cam.project(p) else { return false };
    if !cam.in_image(&pr) {
        return false;
    }
    let (px, py) = (pr.x.floor() as usize, pr.y.floor() as usize);

    let mut candidates = BTreeSet::from([face]);
    for y in py.saturating_sub(1)..=(py + 1).min(view.height - 1) {
        for x in px.saturating_sub(1)..=(px + 1).min(view.width - 1) {
            let f = view.face_id[y * view.width + x];
            if f != NO_FACE {
                candidates.insert(f as usize);
            }
        }
    }
    // Ray parameterized so that t = 1 lands on the texel.
    let dir = p - eye;
    let nearest = candidates
        .iter()
        .filter_map(|&f| raycast::intersect(eye, dir, mesh.face_positions(f), true))
        .map(|(t, _)| t)
        .fold(f64::INFINITY, f64::min);
    if nearest.is_finite() {
        return 1.0 <= nearest * (1.0 + eps);
    }
    let pix = py * view.width + px;
    !view.coverage[pix] || pr.depth <= depth[pix] as f64 * (1.0 + eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quad, SceneNorm};
    use crate::raster::{bake_uv, render_view};

    #[test]
    fn frontal_quad_is_fully_visible() {
        let m = quad().unwrap();
        let cam = Camera::look_at(0, Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 60.0, 64, 64).unwrap();
        let uv = bake_uv(&m, SceneNorm::IDENTITY, 32, 32, None);
        let view = render_view(&m, SceneNorm::IDENTITY, &cam, None);
        let vis = compute_visibility(&m, &[cam], &uv, &[view], DEFAULT_DEPTH_EPS_REL).unwrap();
        assert!(vis.occluded_covered(&uv.coverage).iter().all(|&o| !o));
    }

    #[test]
    fn mismatched_normalization_is_rejected() {
        let m = quad().unwrap();
        let cam = Camera::look_at(0, Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 60.0, 16, 16).unwrap();
        let uv = bake_uv(&m, SceneNorm::IDENTITY, 8, 8, None);
        let other = SceneNorm {
            center: [1.0, 0.0, 0.0],
            half_extent: 2.0,
        };
        let view = render_view(&m, other, &cam, None);
        assert!(matches!(
            compute_visibility(&m, &[cam], &uv, &[view], 1e-3),
            Err(crate::Error::Invariant(_))
        ));
    }
}
