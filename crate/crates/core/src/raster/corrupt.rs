//! Seeded color corruptions that stand in for inconsistent generated views.
//! Geometry channels are never touched. For a fixed seed the random draws do
//! not depend on `strength`, so a stronger corruption always contains the
//! weaker one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::GeoMaps;
use crate::error::{invariant, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Rotates hue by `strength · 180°` at constant luma.
    HueShift,
    /// Swaps pairs of 8×8 patches covering up to `strength` of the image.
    PatchSwap,
    /// Adds Gaussian noise with standard deviation `0.2 · strength`.
    Noise,
}

const PATCH: usize = 8;
const YIQ: [[f32; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [0.595_716, -0.274_453, -0.321_263],
    [0.211_456, -0.522_591, 0.311_135],
];
const RGB: [[f32; 3]; 3] = [
    [1.0, 0.956_3, 0.621_0],
    [1.0, -0.272_1, -0.647_4],
    [1.0, -1.107_0, 1.704_6],
];

fn mat3(m: &[[f32; 3]; 3], v: [f32; 3]) -> [f32; 3] {
    std::array::from_fn(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

/// Rec. 601 luma.
pub fn luminance(c: [f32; 3]) -> f32 {
    YIQ[0][0] * c[0] + YIQ[0][1] * c[1] + YIQ[0][2] * c[2]
}

/// Rotates the chroma of `c` by `angle` radians in the YIQ plane. Results
/// outside `[0,1]³` are pulled toward the gray of equal luma.
pub fn hue_rotate(c: [f32; 3], angle: f32) -> [f32; 3] {
    let [y, i, q] = mat3(&YIQ, c);
    let (s, co) = angle.sin_cos();
    let rotated = mat3(&RGB, [y, i * co - q * s, i * s + q * co]);
    let mut scale = 1.0f32;
    for v in rotated {
        let d = v - y;
        if v > 1.0 && d > 0.0 {
            scale = scale.min((1.0 - y) / d);
        } else if v < 0.0 && d < 0.0 {
            scale = scale.min(-y / d);
        }
    }
    rotated.map(|v| (y + scale.max(0.0) * (v - y)).clamp(0.0, 1.0))
}

pub fn corrupt_view(view: &GeoMaps, mode: Corruption, strength: f64, seed: u64) -> Result<GeoMaps> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(invariant!("corruption strength {strength} outside [0, 1]"));
    }
    let mut out = view.clone();
    let color = out
        .color
        .as_mut()
        .ok_or_else(|| invariant!("cannot corrupt a view without color"))?;
    if strength == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        Corruption::HueShift => {
            let angle = (strength * std::f64::consts::PI) as f32;
            for (c, &cov) in color.iter_mut().zip(&view.coverage) {
                if cov {
                    *c = hue_rotate(*c, angle);
                }
            }
        }
        Corruption::PatchSwap => {
            let (pw, ph) = (view.width / PATCH, view.height / PATCH);
            let mut patches: Vec<usize> = (0..pw * ph).collect();
            patches.shuffle(&mut rng);
            let pairs = (strength * (pw * ph) as f64 / 2.0).floor() as usize;
            let src = view.color.as_ref().expect("checked above");
            for pair in patches.chunks_exact(2).take(pairs) {
                let (a, b) = (pair[0], pair[1]);
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let at = |p: usize| {
                            ((p / pw) * PATCH + dy) * view.width + (p % pw) * PATCH + dx
                        };
                        color[at(a)] = src[at(b)];
                        color[at(b)] = src[at(a)];
                    }
                }
            }
        }
        Corruption::Noise => {
            let sigma = (0.2 * strength) as f32;
            for (c, &cov) in color.iter_mut().zip(&view.coverage) {
                for v in c.iter_mut() {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    if cov {
                        *v = (*v + sigma * z).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fixed_rig, quad, RigParams, SceneNorm, Vec3};
    use crate::raster::render_view;
    use crate::texture::{ProceduralTexture, TextureKind};

    fn view() -> GeoMaps {
        let m = quad().unwrap();
        let cam = &fixed_rig(&RigParams::default(), Vec3::zeros()).unwrap()[0];
        let tex = ProceduralTexture::new(TextureKind::Smooth, 3);
        render_view(&m, SceneNorm::IDENTITY, cam, Some(&tex))
    }

    fn hsv_hue(c: [f32; 3]) -> f32 {
        let max = c[0].max(c[1]).max(c[2]);
        let min = c[0].min(c[1]).min(c[2]);
        let d = max - min;
        if d == 0.0 {
            return 0.0;
        }
        let h = if max == c[0] {
            ((c[1] - c[2]) / d).rem_euclid(6.0)
        } else if max == c[1] {
            (c[2] - c[0]) / d + 2.0
        } else {
            (c[0] - c[1]) / d + 4.0
        };
        h * 60.0
    }

    #[test]
    fn zero_strength_is_identity() {
        let v = view();
        for mode in [Corruption::HueShift, Corruption::PatchSwap, Corruption::Noise] {
            assert_eq!(corrupt_view(&v, mode, 0.0, 1).unwrap(), v);
        }
    }

    #[test]
    fn hue_shift_rotates_red_at_constant_luma() {
        let red = [1.0, 0.0, 0.0];
        let out = hue_rotate(red, 0.5 * std::f32::consts::PI);
        let dh = (hsv_hue(out) - hsv_hue(red)).abs();
        assert!(dh.min(360.0 - dh) > 20.0, "hue moved only {dh}");
        assert!((luminance(out) - luminance(red)).abs() < 0.05);
    }

    #[test]
    fn patch_swap_touches_at_most_strength_of_pixels() {
        let v = view();
        for s in [0.1, 0.25, 0.5, 1.0] {
            let out = corrupt_view(&v, Corruption::PatchSwap, s, 9).unwrap();
            let same = out
                .color
                .as_ref()
                .unwrap()
                .iter()
                .zip(v.color.as_ref().unwrap())
                .filter(|(a, b)| a.map(f32::to_bits) == b.map(f32::to_bits))
                .count();
            assert!(same as f64 >= (1.0 - s) * v.len() as f64);
            assert_eq!(out.position, v.position);
        }
    }

    #[test]
    fn noise_grows_with_strength() {
        let v = view();
        let err = |s| {
            let out = corrupt_view(&v, Corruption::Noise, s, 4).unwrap();
            out.color
                .unwrap()
                .iter()
                .zip(v.color.as_ref().unwrap())
                .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f32>())
                .sum::<f32>()
        };
        assert!(err(0.1) < err(0.25) && err(0.25) < err(0.5));
    }
}
