//! Masked image metrics on `[0,1]` RGB data stored one `[r,g,b]` per pixel.

use crate::error::{dim_err, Result};

pub const PSNR_CAP_DB: f64 = 99.0;

/// `10·log10(1 / MSE)` over masked pixels and all channels; 99 dB when the
/// MSE is below `1e-10`. `None` for an empty mask.
pub fn psnr(a: &[[f32; 3]], b: &[[f32; 3]], mask: &[bool]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() != mask.len() {
        return Err(dim_err!("psnr on {} / {} pixels with a mask of {}", a.len(), b.len(), mask.len()));
    }
    let (mut se, mut n) = (0.0f64, 0usize);
    for k in 0..a.len() {
        if mask[k] {
            for ch in 0..3 {
                se += (a[k][ch] as f64 - b[k][ch] as f64).powi(2);
            }
            n += 3;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let mse = se / n as f64;
    Ok(Some(if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|x| x / s).collect();
    (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|k| g[k / SSIM_WINDOW] * g[k % SSIM_WINDOW])
        .collect()
}

/// Mean SSIM over every 11×11 window that lies inside the image and is fully
/// covered by `mask`, averaged over channels. Gaussian weights with σ = 1.5,
/// dynamic range 1. `None` when no window qualifies.
pub fn ssim(a: &[[f32; 3]], b: &[[f32; 3]], mask: &[bool], width: usize, height: usize) -> Result<Option<f64>> {
    let n = width * height;
    if a.len() != n || b.len() != n || mask.len() != n {
        return Err(dim_err!("ssim needs {n} pixels for {width}x{height}"));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Ok(None);
    }
    // Summed-area table of uncovered pixels for O(1) full-coverage tests.
    let mut holes = vec![0u32; (width + 1) * (height + 1)];
    for i in 0..height {
        for j in 0..width {
            holes[(i + 1) * (width + 1) + j + 1] = (!mask[i * width + j]) as u32
                + holes[i * (width + 1) + j + 1]
                + holes[(i + 1) * (width + 1) + j]
                - holes[i * (width + 1) + j];
        }
    }
    let win = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..=height - SSIM_WINDOW {
        for j in 0..=width - SSIM_WINDOW {
            let (i1, j1) = (i + SSIM_WINDOW, j + SSIM_WINDOW);
            let h = holes[i1 * (width + 1) + j1] + holes[i * (width + 1) + j]
                - holes[i * (width + 1) + j1]
                - holes[i1 * (width + 1) + j];
            if h != 0 {
                continue;
            }
            for ch in 0..3 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..SSIM_WINDOW {
                    for dj in 0..SSIM_WINDOW {
                        let w = win[di * SSIM_WINDOW + dj];
                        let k = (i + di) * width + j + dj;
                        let (x, y) = (a[k][ch] as f64, b[k][ch] as f64);
                        ma += w * x;
                        mb += w * y;
                        saa += w * x * x;
                        sbb += w * y * y;
                        sab += w * x * y;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            count += 3;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_hit_the_caps() {
        let a: Vec<[f32; 3]> = (0..256).map(|i| [(i % 7) as f32 / 7.0, 0.5, 0.1]).collect();
        let m = vec![true; 256];
        assert_eq!(psnr(&a, &a, &m).unwrap(), Some(99.0));
        assert!((ssim(&a, &a, &m, 16, 16).unwrap().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_of_a_tenth_is_twenty_db() {
        let a = vec![[0.0f32; 3]; 16];
        let b = vec![[0.1f32; 3]; 16];
        let p = psnr(&a, &b, &[true; 16]).unwrap().unwrap();
        assert!((p - 20.0).abs() < 1e-5);
    }

    #[test]
    fn partially_covered_windows_are_skipped() {
        let a = vec![[0.5f32; 3]; 144];
        let mut m = vec![true; 144];
        m[0] = true;
        m[12 * 6 + 6] = false;
        // Every 11x11 window of a 12x12 image contains texel (6,6).
        assert_eq!(ssim(&a, &a, &m, 12, 12).unwrap(), None);
    }
}
