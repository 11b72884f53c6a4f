//! Procedural surface colors used as ground truth for baking and rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::SurfacePoint;

/// Anything that assigns a linear RGB color in `[0, 1]` to a surface point.
pub trait Shader: Sync {
    fn shade(&self, p: &SurfacePoint) -> [f32; 3];
}

impl<F> Shader for F
where
    F: Fn(&SurfacePoint) -> [f32; 3] + Sync,
{
    fn shade(&self, p: &SurfacePoint) -> [f32; 3] {
        self(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    /// Two-color checkerboard in UV space.
    Checker,
    /// Soft stripes along a random direction in object space.
    Stripes,
    /// Sum of low-frequency sinusoids in object space.
    Smooth,
    /// Linear blend between two colors along a random object-space axis.
    Gradient,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [
        TextureKind::Checker,
        TextureKind::Stripes,
        TextureKind::Smooth,
        TextureKind::Gradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Checker => "checker",
            TextureKind::Stripes => "stripes",
            TextureKind::Smooth => "smooth",
            TextureKind::Gradient => "gradient",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralTexture {
    pub kind: TextureKind,
    pub seed: u64,
    c0: [f64; 3],
    c1: [f64; 3],
    dir: [f64; 3],
    freq: f64,
    waves: Vec<([f64; 3], f64, [f64; 3])>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ]
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.2 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl ProceduralTexture {
    pub fn new(kind: TextureKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_0000 ^ (kind as u64) << 40);
        let c0 = random_color(&mut rng);
        let mut c1 = random_color(&mut rng);
        // Keep the two colors clearly distinguishable.
        while (0..3).map(|k| (c0[k] - c1[k]).abs()).sum::<f64>() < 0.6 {
            c1 = random_color(&mut rng);
        }
        let dir = random_unit(&mut rng);
        let freq = match kind {
            TextureKind::Checker => rng.gen_range(2..=4) as f64,
            TextureKind::Stripes => rng.gen_range(1.0..2.0),
            _ => 1.0,
        };
        let waves = (0..3)
            .map(|_| {
                let d = random_unit(&mut rng);
                let w = rng.gen_range(0.8..2.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = [
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                    rng.gen_range(-0.25..0.25),
                ];
                ([d[0] * w, d[1] * w, d[2] * w], phase, amp)
            })
            .collect();
        Self {
            kind,
            seed,
            c0,
            c1,
            dir,
            freq,
            waves,
        }
    }

    fn mix(&self, t: f64) -> [f32; 3] {
        let t = t.clamp(0.0, 1.0);
        std::array::from_fn(|k| (self.c0[k] * (1.0 - t) + self.c1[k] * t) as f32)
    }

    pub fn eval(&self, p: &SurfacePoint) -> [f32; 3] {
        let x = [p.position.x, p.position.y, p.position.z];
        match self.kind {
            TextureKind::Checker => {
                let n = self.freq;
                let a = (p.uv.x * n).floor() as i64 + (p.uv.y * n).floor() as i64;
                self.mix(a.rem_euclid(2) as f64)
            }
            TextureKind::Stripes => {
                let s = (std::f64::consts::PI * self.freq * dot(self.dir, x)).sin();
                self.mix(0.5 + 0.5 * (2.0 * s).tanh() / 2f64.tanh())
            }
            TextureKind::Smooth => {
                let mut c = [0.5; 3];
                for (w, phase, amp) in &self.waves {
                    let s = (dot(*w, x) + phase).sin();
                    for k in 0..3 {
                        c[k] += amp[k] * s;
                    }
                }
                let mid: [f64; 3] = std::array::from_fn(|k| (self.c0[k] + self.c1[k]) / 2.0);
                std::array::from_fn(|k| (0.5 * c[k] + 0.5 * mid[k]).clamp(0.0, 1.0) as f32)
            }
            TextureKind::Gradient => self.mix(0.5 + 0.5 * dot(self.dir, x) / 3f64.sqrt()),
        }
    }
}

impl Shader for ProceduralTexture {
    fn shade(&self, p: &SurfacePoint) -> [f32; 3] {
        self.eval(p)
    }
}
