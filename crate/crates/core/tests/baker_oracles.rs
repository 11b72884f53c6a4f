//! Back-projection and oracle attention against analytic fixtures.

use uvforge::attention::oracle_attend;
use uvforge::baker::{backproject_bake, contributions, detect_conflicts, BakeResult};
use uvforge::geometry::{
    fixed_rig, normalize_scene, quad, uv_sphere, Camera, RigParams, SceneNorm, SurfacePoint, TriMesh, Vec3,
};
use uvforge::metrics::psnr;
use uvforge::raster::{
    bake_uv, compute_visibility, corrupt_view, render_view, Corruption, GeoMaps, VisMaps, DEFAULT_DEPTH_EPS_REL,
};
use uvforge::texture::{ProceduralTexture, Shader, TextureKind};

struct Scene {
    cams: Vec<Camera>,
    uv: GeoMaps,
    views: Vec<GeoMaps>,
    vis: VisMaps,
    truth: Vec<[f32; 3]>,
}

fn scene(mesh: &TriMesh, rig: &RigParams, uv_size: usize, shader: &dyn Shader) -> Scene {
    let (mesh, norm) = normalize_scene(mesh).unwrap();
    let cams = fixed_rig(rig, Vec3::zeros()).unwrap();
    let uv = bake_uv(&mesh, norm, uv_size, uv_size, Some(shader));
    let views: Vec<GeoMaps> = cams.iter().map(|c| render_view(&mesh, norm, c, Some(shader))).collect();
    let vis = compute_visibility(&mesh, &cams, &uv, &views, DEFAULT_DEPTH_EPS_REL).unwrap();
    let truth = uv.color().unwrap().to_vec();
    Scene { cams, uv, views, vis, truth }
}

fn bake(s: &Scene) -> BakeResult {
    backproject_bake(&s.uv, &s.cams, &s.views, &s.vis, 4, 0.1).unwrap()
}

fn seen(s: &Scene) -> Vec<bool> {
    (0..s.uv.len()).map(|k| s.uv.coverage[k] && s.vis.seen_by(k) > 0).collect()
}

fn front_rig(views: usize) -> RigParams {
    RigParams {
        views,
        ..RigParams::default()
    }
}

fn to_pixels(t: &uvforge::tensor::Tensor<f32>) -> Vec<[f32; 3]> {
    let hw = t.shape()[1] * t.shape()[2];
    (0..hw).map(|k| std::array::from_fn(|c| t.data()[c * hw + k])).collect()
}

#[test]
fn frontal_gradient_quad_is_reproduced_above_forty_db() {
    let tex = ProceduralTexture::new(TextureKind::Gradient, 3);
    let s = scene(&quad().unwrap(), &front_rig(1), 64, &tex);
    let r = bake(&s);
    let p = psnr(&r.texture, &s.truth, &seen(&s)).unwrap().unwrap();
    assert!(p >= 40.0, "{p}");
}

#[test]
fn duplicated_view_equals_single_view() {
    let tex = ProceduralTexture::new(TextureKind::Smooth, 1);
    let s = scene(&quad().unwrap(), &front_rig(1), 32, &tex);
    let one = bake(&s);
    let dup = Scene {
        cams: vec![s.cams[0].clone(), s.cams[0].clone()],
        views: vec![s.views[0].clone(), s.views[0].clone()],
        vis: VisMaps {
            visible: vec![s.vis.visible[0].clone(), s.vis.visible[0].clone()],
            ..s.vis.clone()
        },
        uv: s.uv.clone(),
        truth: s.truth.clone(),
    };
    let two = bake(&dup);
    assert_eq!(one.texture, two.texture);
    assert!(two.conflict.iter().all(|&c| !c));
}

/// Two views of the same quad, one painted red and one blue.
fn red_blue() -> Scene {
    let red = |_: &SurfacePoint| [1.0f32, 0.0, 0.0];
    let mut s = scene(&quad().unwrap(), &front_rig(6), 32, &red);
    // Views 0 and 1 both see the front of the quad.
    s.cams.truncate(2);
    s.views.truncate(2);
    s.vis.visible.truncate(2);
    let blue = s.views[1].color().unwrap().iter().map(|_| [0.0f32, 0.0, 1.0]).collect();
    s.views[1].color = Some(blue);
    s
}

#[test]
fn red_blue_conflict_blends_strictly_between_and_is_flagged() {
    let s = red_blue();
    let r = bake(&s);
    let mut both = 0;
    for k in 0..s.uv.len() {
        if s.vis.seen_by(k) == 2 && r.weight_sum[k] > 0.0 {
            let c = r.texture[k];
            let contribs = contributions(&s.uv, &s.cams, &s.views, &s.vis, 4).unwrap();
            if contribs[k].len() < 2 {
                continue;
            }
            both += 1;
            assert!(c[0] > 0.0 && c[0] < 1.0 && c[2] > 0.0 && c[2] < 1.0, "{c:?}");
            assert!((c[0] + c[2] - 1.0).abs() < 1e-5 && c[1] == 0.0);
            assert!(r.conflict[k]);
        }
    }
    assert!(both > 100, "{both}");
}

#[test]
fn bake_is_a_convex_combination_and_ignores_view_order() {
    let tex = ProceduralTexture::new(TextureKind::Checker, 5);
    let s = scene(&uv_sphere(32, 16).unwrap(), &RigParams::default(), 64, &tex);
    let r = bake(&s);
    let contribs = contributions(&s.uv, &s.cams, &s.views, &s.vis, 4).unwrap();
    for (k, cs) in contribs.iter().enumerate() {
        for ch in 0..3 {
            let lo = cs.iter().map(|c| c.color[ch]).fold(f32::MAX, f32::min);
            let hi = cs.iter().map(|c| c.color[ch]).fold(f32::MIN, f32::max);
            if !cs.is_empty() {
                assert!(r.texture[k][ch] >= lo - 1e-6 && r.texture[k][ch] <= hi + 1e-6);
            }
        }
    }
    let perm = [3, 0, 5, 1, 4, 2];
    let shuffled = Scene {
        cams: perm.iter().map(|&v| s.cams[v].clone()).collect(),
        views: perm.iter().map(|&v| s.views[v].clone()).collect(),
        vis: VisMaps {
            visible: perm.iter().map(|&v| s.vis.visible[v].clone()).collect(),
            ..s.vis.clone()
        },
        uv: s.uv.clone(),
        truth: s.truth.clone(),
    };
    let r2 = bake(&shuffled);
    assert_eq!(r.texture, r2.texture);
    assert_eq!(r.conflict, r2.conflict);
}

#[test]
fn clean_renders_do_not_conflict() {
    for kind in [TextureKind::Smooth, TextureKind::Gradient] {
        let tex = ProceduralTexture::new(kind, 2);
        let s = scene(&uv_sphere(32, 16).unwrap(), &RigParams::default(), 64, &tex);
        let r = bake(&s);
        let n = r.conflict.iter().filter(|&&c| c).count();
        assert_eq!(n, 0, "{kind:?}");
    }
}

#[test]
fn conflicts_grow_with_corruption_strength() {
    let tex = ProceduralTexture::new(TextureKind::Smooth, 4);
    let s = scene(&uv_sphere(32, 16).unwrap(), &RigParams::default(), 64, &tex);
    for mode in [Corruption::HueShift, Corruption::PatchSwap, Corruption::Noise] {
        let mut last = 0;
        for strength in [0.1, 0.25, 0.5] {
            let mut views = s.views.clone();
            views[1] = corrupt_view(&s.views[1], mode, strength, 9).unwrap();
            let c = contributions(&s.uv, &s.cams, &views, &s.vis, 4).unwrap();
            let n = detect_conflicts(&c, 0.1).iter().filter(|&&x| x).count();
            assert!(n >= last, "{mode:?} {strength}: {n} < {last}");
            last = n;
        }
        assert!(last > 0, "{mode:?}");
    }
}

#[test]
fn sharp_oracle_attention_matches_back_projection() {
    for (mesh, kind) in [(quad().unwrap(), TextureKind::Smooth), (uv_sphere(32, 16).unwrap(), TextureKind::Smooth)] {
        let tex = ProceduralTexture::new(kind, 7);
        let s = scene(&mesh, &RigParams::default(), 64, &tex);
        let r = bake(&s);
        let o = to_pixels(&oracle_attend(&s.uv, &s.views, 1e-4).unwrap());
        let mask: Vec<bool> = (0..s.uv.len()).map(|k| r.weight_sum[k] > 0.0).collect();
        let p = psnr(&o, &r.texture, &mask).unwrap().unwrap();
        assert!(p >= 35.0, "{p}");
    }
}

#[test]
fn flat_oracle_attention_is_the_mean_of_all_view_pixels() {
    let tex = ProceduralTexture::new(TextureKind::Checker, 1);
    let s = scene(&quad().unwrap(), &RigParams::default(), 16, &tex);
    let mut mean = [0.0f64; 3];
    let mut n = 0usize;
    for v in &s.views {
        for (k, c) in v.color().unwrap().iter().enumerate() {
            if v.coverage[k] {
                for ch in 0..3 {
                    mean[ch] += c[ch] as f64;
                }
                n += 1;
            }
        }
    }
    let mean = mean.map(|m| m / n as f64);
    for tau in [f64::INFINITY, 1e12] {
        let o = to_pixels(&oracle_attend(&s.uv, &s.views, tau).unwrap());
        for (k, c) in o.iter().enumerate() {
            if s.uv.coverage[k] {
                for ch in 0..3 {
                    assert!((c[ch] as f64 - mean[ch]).abs() < 1e-5, "tau {tau}: {c:?} vs {mean:?}");
                }
            }
        }
    }
}

#[test]
fn oracle_attention_on_conflicting_views_stays_on_the_segment() {
    let s = red_blue();
    let o = to_pixels(&oracle_attend(&s.uv, &s.views, 1e-4).unwrap());
    for (k, c) in o.iter().enumerate() {
        if s.uv.coverage[k] {
            assert!(c[1].abs() < 1e-6 && (c[0] + c[2] - 1.0).abs() < 1e-5 && c[0] >= 0.0 && c[2] >= 0.0, "{c:?}");
        }
    }
}

#[test]
fn normalization_mismatch_is_rejected() {
    let tex = ProceduralTexture::new(TextureKind::Smooth, 1);
    let mut s = scene(&quad().unwrap(), &front_rig(1), 16, &tex);
    s.views[0].norm = SceneNorm {
        half_extent: 2.0,
        ..SceneNorm::IDENTITY
    };
    assert!(oracle_attend(&s.uv, &s.views, 1e-4).is_err());
    assert!(backproject_bake(&s.uv, &s.cams, &s.views, &s.vis, 4, 0.1).is_err());
}
