//! Back-projection baseline: sample every view at the projection of each
//! visible texel, blend with angle weights, flag conflicts, and fill holes
//! with the nearest colored texel of the same UV island.

use std::collections::VecDeque;

use crate::error::{invariant, Result};
use crate::geometry::{Camera, Vec3};
use crate::par;
use crate::raster::{GeoMaps, VisMaps};

pub const DEFAULT_WEIGHT_POWER: i32 = 4;
pub const DEFAULT_CONFLICT_THRESHOLD: f32 = 0.1;

/// One view's sample at one texel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub view: usize,
    pub weight: f32,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BakeResult {
    pub width: usize,
    pub height: usize,
    pub texture: Vec<[f32; 3]>,
    pub weight_sum: Vec<f32>,
    pub conflict: Vec<bool>,
    /// Texels colored only by hole filling.
    pub filled: Vec<bool>,
}

/// Bilinear lookup of a per-pixel view attribute (colors, positions) at
/// raster point `(x, y)`, renormalized over covered neighbors. `None` if no
/// neighbor is covered.
pub fn sample_bilinear(view: &GeoMaps, color: &[[f32; 3]], x: f64, y: f64) -> Option<[f32; 3]> {
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let (tx, ty) = (fx - x0, fy - y0);
    let mut acc = [0.0f64; 3];
    let mut wsum = 0.0f64;
    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
            if xi < 0 || yi < 0 || xi >= view.width as i64 || yi >= view.height as i64 {
                continue;
            }
            let k = yi as usize * view.width + xi as usize;
            let w = wx * wy;
            if view.coverage[k] && w > 0.0 {
                for ch in 0..3 {
                    acc[ch] += w * color[k][ch] as f64;
                }
                wsum += w;
            }
        }
    }
    (wsum > 0.0).then(|| acc.map(|a| (a / wsum) as f32))
}

/// Per-texel view samples of every visible, covered texel.
pub fn contributions(
    uv: &GeoMaps,
    cams: &[Camera],
    views: &[GeoMaps],
    vis: &VisMaps,
    power: i32,
) -> Result<Vec<Vec<Contribution>>> {
    if cams.len() != views.len() || vis.views() != views.len() {
        return Err(invariant!(
            "{} cameras, {} views, {} visibility maps",
            cams.len(),
            views.len(),
            vis.views()
        ));
    }
    if views.iter().any(|v| v.norm != uv.norm) {
        return Err(invariant!("UV and view maps use different scene normalizations"));
    }
    let colors = views.iter().map(|v| v.color()).collect::<Result<Vec<_>>>()?;
    let eyes: Vec<Vec3> = cams.iter().map(|c| c.eye()).collect();
    Ok(par::map_range(uv.len(), |k| {
        let mut out = Vec::new();
        if !uv.coverage[k] {
            return out;
        }
        let p = Vec3::from(uv.position[k].map(f64::from));
        let n = Vec3::from(uv.normal[k].map(f64::from));
        for (v, cam) in cams.iter().enumerate() {
            if !vis.visible[v][k] {
                continue;
            }
            let Some(pr) = cam.project(p) else { continue };
            let to_eye = (eyes[v] - p).normalize();
            let w = n.dot(&to_eye).max(0.0).powi(power) as f32;
            if w <= 0.0 {
                continue;
            }
            if let Some(color) = sample_bilinear(&views[v], colors[v], pr.x, pr.y) {
                out.push(Contribution { view: v, weight: w, color });
            }
        }
        out
    }))
}

/// Texels whose contributing views disagree by more than `threshold`
/// (max over view pairs of the largest per-channel difference).
pub fn detect_conflicts(contribs: &[Vec<Contribution>], threshold: f32) -> Vec<bool> {
    contribs
        .iter()
        .map(|cs| {
            cs.iter().enumerate().any(|(i, a)| {
                cs[i + 1..].iter().any(|b| {
                    (0..3)
                        .map(|ch| (a.color[ch] - b.color[ch]).abs())
                        .fold(0.0f32, f32::max)
                        > threshold
                })
            })
        })
        .collect()
}

/// Weighted blend `Σ w_v c_v / Σ w_v` per texel, with conflict flags.
/// The sum over views is taken in ascending color order so the result does not
/// depend on view order.
pub fn backproject_bake(
    uv: &GeoMaps,
    cams: &[Camera],
    views: &[GeoMaps],
    vis: &VisMaps,
    power: i32,
    conflict_threshold: f32,
) -> Result<BakeResult> {
    let contribs = contributions(uv, cams, views, vis, power)?;
    Ok(blend(uv, &contribs, conflict_threshold))
}

pub fn blend(uv: &GeoMaps, contribs: &[Vec<Contribution>], conflict_threshold: f32) -> BakeResult {
    let n = uv.len();
    let mut texture = vec![[0.0f32; 3]; n];
    let mut weight_sum = vec![0.0f32; n];
    for (k, cs) in contribs.iter().enumerate() {
        let mut cs = cs.clone();
        cs.sort_by(|a, b| {
            (a.weight, a.color)
                .partial_cmp(&(b.weight, b.color))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut acc = [0.0f64; 3];
        let mut ws = 0.0f64;
        for c in &cs {
            ws += c.weight as f64;
            for ch in 0..3 {
                acc[ch] += c.weight as f64 * c.color[ch] as f64;
            }
        }
        if ws > 0.0 {
            texture[k] = acc.map(|a| (a / ws) as f32);
            weight_sum[k] = ws as f32;
        }
    }
    BakeResult {
        width: uv.width,
        height: uv.height,
        texture,
        weight_sum,
        conflict: detect_conflicts(contribs, conflict_threshold),
        filled: vec![false; n],
    }
}

/// Colors covered zero-weight texels with the nearest (Euclidean in UV)
/// colored texel of the same 4-connected island. Ties go to the lowest
/// texel index.
pub fn naive_fill(result: &BakeResult, coverage: &[bool]) -> BakeResult {
    let (w, h) = (result.width, result.height);
    let mut out = result.clone();
    let island = islands(coverage, w, h);
    let n_islands = island.iter().filter_map(|&i| i).max().map_or(0, |m| m + 1);
    let mut sources: Vec<Vec<usize>> = vec![Vec::new(); n_islands];
    for k in 0..w * h {
        if let Some(i) = island[k] {
            if result.weight_sum[k] > 0.0 {
                sources[i].push(k);
            }
        }
    }
    let fills: Vec<Option<[f32; 3]>> = par::map_range(w * h, |k| {
        let i = island[k]?;
        if result.weight_sum[k] > 0.0 {
            return None;
        }
        let (y, x) = ((k / w) as i64, (k % w) as i64);
        sources[i]
            .iter()
            .map(|&s| {
                let (sy, sx) = ((s / w) as i64, (s % w) as i64);
                ((sy - y).pow(2) + (sx - x).pow(2), s)
            })
            .min()
            .map(|(_, s)| result.texture[s])
    });
    for (k, f) in fills.into_iter().enumerate() {
        if let Some(c) = f {
            out.texture[k] = c;
            out.filled[k] = true;
        }
    }
    out
}

/// 4-connected components of covered texels.
pub fn islands(coverage: &[bool], w: usize, h: usize) -> Vec<Option<usize>> {
    let mut id = vec![None; w * h];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !coverage[start] || id[start].is_some() {
            continue;
        }
        id[start] = Some(next);
        queue.push_back(start);
        while let Some(k) = queue.pop_front() {
            let (y, x) = (k / w, k % w);
            let mut push = |q: usize| {
                if coverage[q] && id[q].is_none() {
                    id[q] = Some(next);
                    queue.push_back(q);
                }
            };
            if x > 0 {
                push(k - 1);
            }
            if x + 1 < w {
                push(k + 1);
            }
            if y > 0 {
                push(k - w);
            }
            if y + 1 < h {
                push(k + w);
            }
        }
        next += 1;
    }
    id
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(w: usize, h: usize) -> BakeResult {
        BakeResult {
            width: w,
            height: h,
            texture: vec![[0.3, 0.6, 0.9]; w * h],
            weight_sum: vec![1.0; w * h],
            conflict: vec![false; w * h],
            filled: vec![false; w * h],
        }
    }

    #[test]
    fn fill_without_holes_is_identity() {
        let r = result(4, 4);
        assert_eq!(naive_fill(&r, &[true; 16]), r);
    }

    #[test]
    fn single_hole_takes_surrounding_color() {
        let mut r = result(3, 3);
        r.texture[4] = [0.0; 3];
        r.weight_sum[4] = 0.0;
        let out = naive_fill(&r, &[true; 9]);
        assert_eq!(out.texture[4], [0.3, 0.6, 0.9]);
        assert!(out.filled[4]);
    }

    #[test]
    fn fill_does_not_cross_islands() {
        // Two islands separated by an uncovered column; the right one has no color.
        let mut r = result(3, 1);
        r.weight_sum[2] = 0.0;
        r.texture[2] = [0.0; 3];
        let out = naive_fill(&r, &[true, false, true]);
        assert!(!out.filled[2]);
        assert_eq!(out.texture[2], [0.0; 3]);
    }

    #[test]
    fn identical_contributions_do_not_conflict() {
        let c = Contribution {
            view: 0,
            weight: 1.0,
            color: [0.2, 0.2, 0.2],
        };
        let d = Contribution { view: 1, ..c };
        assert_eq!(detect_conflicts(&[vec![c, d]], 0.05), vec![false]);
        let e = Contribution {
            view: 1,
            color: [0.2, 0.5, 0.2],
            ..c
        };
        assert_eq!(detect_conflicts(&[vec![c, e]], 0.1), vec![true]);
    }
}
