//! Image metrics against a separable-filter SSIM and closed-form values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvforge::metrics::{psnr, ssim};

/// Valid-mode separable Gaussian filtering of one channel.
fn blur(x: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.into_iter().map(|v| v / s).collect();
    let (ow, oh) = (w - 10, h - 10);
    let rows: Vec<f64> = (0..h)
        .flat_map(|i| (0..ow).map(move |j| (i, j)))
        .map(|(i, j)| (0..11).map(|d| g[d] * x[i * w + j + d]).sum())
        .collect();
    let out = (0..oh)
        .flat_map(|i| (0..ow).map(move |j| (i, j)))
        .map(|(i, j)| (0..11).map(|d| g[d] * rows[(i + d) * ow + j]).sum())
        .collect();
    (out, ow, oh)
}

fn reference_ssim(a: &[[f32; 3]], b: &[[f32; 3]], w: usize, h: usize) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut n = 0;
    for ch in 0..3 {
        let x: Vec<f64> = a.iter().map(|p| p[ch] as f64).collect();
        let y: Vec<f64> = b.iter().map(|p| p[ch] as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let (mx, _, _) = blur(&x, w, h);
        let (my, _, _) = blur(&y, w, h);
        let (sxx, _, _) = blur(&prod(&x, &x), w, h);
        let (syy, _, _) = blur(&prod(&y, &y), w, h);
        let (sxy, _, _) = blur(&prod(&x, &y), w, h);
        for k in 0..mx.len() {
            let (vx, vy, cv) = (sxx[k] - mx[k] * mx[k], syy[k] - my[k] * my[k], sxy[k] - mx[k] * my[k]);
            total += ((2.0 * mx[k] * my[k] + c1) * (2.0 * cv + c2))
                / ((mx[k] * mx[k] + my[k] * my[k] + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    total / n as f64
}

fn image(r: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<[f32; 3]> {
    // Smooth base plus noise, so windows have structure at several scales.
    let phase: f32 = r.gen_range(0.0..6.0);
    (0..w * h)
        .map(|k| {
            let (i, j) = ((k / w) as f32, (k % w) as f32);
            std::array::from_fn(|c| {
                let base = 0.5 + 0.3 * ((i * 0.2 + j * 0.13 + phase + c as f32).sin());
                (base + r.gen_range(-0.15..0.15)).clamp(0.0, 1.0)
            })
        })
        .collect()
}

#[test]
fn ssim_matches_a_separable_reference_on_random_pairs() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let (w, h) = (40, 32);
    for _ in 0..5 {
        let a = image(&mut r, w, h);
        let b: Vec<[f32; 3]> = if r.gen_bool(0.5) {
            a.iter().map(|p| p.map(|x| (x + r.gen_range(-0.2f32..0.2)).clamp(0.0, 1.0))).collect()
        } else {
            image(&mut r, w, h)
        };
        let got = ssim(&a, &b, &vec![true; w * h], w, h).unwrap().unwrap();
        let want = reference_ssim(&a, &b, w, h);
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
}

#[test]
fn ssim_of_two_flat_images_is_the_luminance_term() {
    let a = vec![[0.3f32; 3]; 256];
    let b = vec![[0.5f32; 3]; 256];
    let got = ssim(&a, &b, &[true; 256], 16, 16).unwrap().unwrap();
    let (ma, mb) = (0.3f32 as f64, 0.5f32 as f64);
    let want = (2.0 * ma * mb + 1e-4) / (ma * ma + mb * mb + 1e-4);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn ssim_ignores_pixels_outside_fully_covered_windows() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (24, 24);
    let a = image(&mut r, w, h);
    let mut b = a.clone();
    let mut mask = vec![true; w * h];
    // Column 23 is uncovered: only windows ending before it count.
    for i in 0..h {
        mask[i * w + 23] = false;
        b[i * w + 23] = [0.0, 1.0, 0.0];
    }
    assert!((ssim(&a, &b, &mask, w, h).unwrap().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn psnr_closed_forms() {
    let a = vec![[0.25f32; 3]; 10];
    let mut b = a.clone();
    // One channel of one pixel off by 0.3 over 10 pixels: MSE = 0.09 / 30.
    b[4][1] = 0.55;
    let want = 10.0 * (30.0f64 / (0.55f32 as f64 - 0.25).powi(2)).log10();
    assert!((psnr(&a, &b, &[true; 10]).unwrap().unwrap() - want).abs() < 1e-9);
    // Masked out, the difference disappears.
    let mut m = [true; 10];
    m[4] = false;
    assert_eq!(psnr(&a, &b, &m).unwrap(), Some(99.0));
    assert_eq!(psnr(&a, &b, &[false; 10]).unwrap(), None);
    // Black versus white is 0 dB.
    let (k, wh) = (vec![[0.0f32; 3]; 4], vec![[1.0f32; 3]; 4]);
    assert!(psnr(&k, &wh, &[true; 4]).unwrap().unwrap().abs() < 1e-12);
}
