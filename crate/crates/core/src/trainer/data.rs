//! Procedural training scenes: geometry shared per mesh kind, colors per
//! texture.

use serde::{Deserialize, Serialize};

use crate::encoding::fourier_embed;
use crate::error::{invariant, Result};
use crate::geometry::{fixed_rig, normalize_scene, Camera, MeshKind, RigParams, SceneNorm, TriMesh, Vec3};
use crate::raster::{bake_uv, compute_visibility, render_view, GeoMaps, VisMaps, DEFAULT_DEPTH_EPS_REL};
use crate::tensor::Tensor;
use crate::texture::{ProceduralTexture, TextureKind};

/// Texture seeds at or above this value are never drawn during training.
pub const HELD_OUT_SEED_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub mesh: MeshKind,
    pub texture: TextureKind,
    pub seed: u64,
}

impl SceneSpec {
    pub fn name(&self) -> String {
        format!("{}_{}_{}", self.mesh.name(), self.texture.name(), self.seed)
    }

    pub fn shader(&self) -> ProceduralTexture {
        ProceduralTexture::new(self.texture, self.seed)
    }
}

/// Uncolored maps, visibility and Fourier embeddings of one mesh under one rig.
#[derive(Clone, Debug)]
pub struct SceneGeometry {
    /// `None` for meshes loaded from a file.
    pub kind: Option<MeshKind>,
    pub name: String,
    /// Mesh in the normalized frame.
    pub mesh: TriMesh,
    pub norm: SceneNorm,
    pub cams: Vec<Camera>,
    pub uv: GeoMaps,
    pub views: Vec<GeoMaps>,
    pub vis: VisMaps,
    pub uv_embed: Tensor<f32>,
    pub view_embeds: Vec<Tensor<f32>>,
}

impl SceneGeometry {
    pub fn build(kind: MeshKind, rig: &RigParams, uv_size: usize, bands: usize) -> Result<Self> {
        Self::from_mesh(Some(kind), kind.name(), &kind.build()?, rig, uv_size, bands)
    }

    pub fn from_mesh(
        kind: Option<MeshKind>,
        name: &str,
        mesh: &TriMesh, rig: &RigParams, uv_size: usize, bands: usize) -> Result<Self> {
        let (mesh, norm) = normalize_scene(mesh)?;
        let cams = fixed_rig(rig, Vec3::zeros())?;
        let uv = bake_uv(&mesh, norm, uv_size, uv_size, None);
        let views: Vec<GeoMaps> = cams.iter().map(|c| render_view(&mesh, norm, c, None)).collect();
        let vis = compute_visibility(&mesh, &cams, &uv, &views, DEFAULT_DEPTH_EPS_REL)?;
        let uv_embed = fourier_embed(&uv, bands)?;
        let view_embeds = views
            .iter()
            .map(|v| fourier_embed(v, bands))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            name: name.to_string(),
            mesh,
            norm,
            cams,
            uv,
            views,
            vis,
            uv_embed,
            view_embeds,
        })
    }

    /// Ground-truth UV colors and rendered view colors of a textured scene.
    pub fn shade(&self, spec: &SceneSpec) -> Result<TrainSample> {
        if Some(spec.mesh) != self.kind {
            return Err(invariant!("scene {} shaded on {} geometry", spec.name(), self.name));
        }
        let (target, view_colors) = self.paint(&spec.shader())?;
        Ok(TrainSample {
            spec: *spec,
            target,
            view_colors,
        })
    }

    /// UV colors and per-view colors of this geometry under `shader`.
    pub fn paint(&self, shader: &ProceduralTexture) -> Result<(Vec<[f32; 3]>, Vec<Vec<[f32; 3]>>)> {
        let uv = bake_uv(&self.mesh, self.norm, self.uv.width, self.uv.height, Some(shader));
        let views = self
            .cams
            .iter()
            .map(|c| render_view(&self.mesh, self.norm, c, Some(shader)))
            .collect::<Vec<_>>();
        let view_colors = views.iter().map(|v| v.color().map(<[_]>::to_vec)).collect::<Result<_>>()?;
        Ok((uv.color()?.to_vec(), view_colors))
    }
}

/// One textured scene: ground-truth UV colors and per-view colors. The
/// geometry lives in the matching [`SceneGeometry`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub spec: SceneSpec,
    /// Ground truth, zero on uncovered texels.
    pub target: Vec<[f32; 3]>,
    pub view_colors: Vec<Vec<[f32; 3]>>,
}

impl TrainSample {
    /// View maps of `geo` carrying this sample's (possibly replaced) colors.
    pub fn colored_views(&self, geo: &SceneGeometry) -> Vec<GeoMaps> {
        geo.views
            .iter()
            .zip(&self.view_colors)
            .map(|(g, c)| {
                let mut g = g.clone();
                g.color = Some(c.clone());
                g
            })
            .collect()
    }

    pub fn colored_uv(&self, geo: &SceneGeometry) -> GeoMaps {
        let mut g = geo.uv.clone();
        g.color = Some(self.target.clone());
        g
    }
}

/// Geometry cache keyed by mesh kind.
#[derive(Clone, Debug, Default)]
pub struct GeometrySet {
    pub scenes: Vec<SceneGeometry>,
}

impl GeometrySet {
    pub fn build(kinds: &[MeshKind], rig: &RigParams, uv_size: usize, bands: usize) -> Result<Self> {
        let mut scenes: Vec<SceneGeometry> = Vec::new();
        for &k in kinds {
            if scenes.iter().all(|s| s.kind != Some(k)) {
                scenes.push(SceneGeometry::build(k, rig, uv_size, bands)?);
            }
        }
        Ok(Self { scenes })
    }

    pub fn get(&self, kind: MeshKind) -> Result<&SceneGeometry> {
        self.scenes
            .iter()
            .find(|s| s.kind == Some(kind))
            .ok_or_else(|| invariant!("no geometry for {}", kind.name()))
    }
}

/// Renders every scene. Samples come back in input order.
pub fn make_dataset(scenes: &[SceneSpec], geos: &GeometrySet) -> Result<Vec<TrainSample>> {
    crate::par::map_range(scenes.len(), |i| geos.get(scenes[i].mesh)?.shade(&scenes[i]))
        .into_iter()
        .collect()
}

/// `count` held-out scenes per (mesh, texture) pair with seeds outside the
/// training range.
pub fn held_out_scenes(meshes: &[MeshKind], textures: &[TextureKind], count: usize) -> Vec<SceneSpec> {
    let mut out = Vec::new();
    for &mesh in meshes {
        for &texture in textures {
            for i in 0..count as u64 {
                out.push(SceneSpec {
                    mesh,
                    texture,
                    seed: HELD_OUT_SEED_BASE + i,
                });
            }
        }
    }
    out
}
