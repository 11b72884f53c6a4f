//! Geometric position encoding shared by the UV and view domains.
//!
//! `fourier_embed` turns normalized position and normal maps into
//! `6 · 2 · L` channels. For input dimension `d ∈ (x, y, z, nx, ny, nz)` and
//! band `l ∈ 0..L` the channels `2·(d·L + l)` and `2·(d·L + l) + 1` hold
//! `sin(2^l π p_d)` and `cos(2^l π p_d)`. Uncovered samples are all zero.
//!
//! The learnable encoder pixel-unshuffles the embedding by 8 (channel
//! `c·64 + dy·8 + dx`), applies a 1×1 entry convolution, then for level `k`
//! applies `k − 1` stride-2 3×3 convolutions followed by a 3×3 convolution and
//! two residual blocks. Every convolution output is re-masked by the level's
//! coverage, so uncovered cells stay exactly zero.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, invariant, Result};
use crate::nn::{apply_mask, downsample_mask, mask_tensor, Conv, Init, ResBlock};
use crate::raster::{Domain, GeoMaps};
use crate::tensor::{ParamSet, Real, Tape, Tensor, Var};

pub const DEFAULT_BANDS: usize = 10;
pub const ENTRY_UNSHUFFLE: usize = 8;

pub fn embed_channels(bands: usize) -> usize {
    6 * 2 * bands
}

/// `[6·2·bands, H, W]` Fourier features of (position, normal).
pub fn fourier_embed(geo: &GeoMaps, bands: usize) -> Result<Tensor<f32>> {
    let hw = geo.len();
    let c = embed_channels(bands);
    let mut data = vec![0.0f32; c * hw];
    for k in 0..hw {
        if !geo.coverage[k] {
            continue;
        }
        let p = geo.position[k];
        if p.iter().any(|v| v.abs() > 1.0 + 1e-4) {
            return Err(invariant!(
                "position {:?} at sample {k} is outside the normalized box",
                p
            ));
        }
        let n = geo.normal[k];
        for (d, &x) in p.iter().chain(n.iter()).enumerate() {
            for l in 0..bands {
                let arg = std::f64::consts::PI * (1u64 << l) as f64 * x as f64;
                let ch = 2 * (d * bands + l);
                data[ch * hw + k] = arg.sin() as f32;
                data[(ch + 1) * hw + k] = arg.cos() as f32;
            }
        }
    }
    Tensor::new([c, geo.height, geo.width], data)
}

#[derive(Clone, Debug)]
struct Level {
    down: Option<Conv>,
    conv: Conv,
    res: [ResBlock; 2],
}

/// Parameters of the learnable position encoder.
#[derive(Clone, Debug)]
pub struct PosEncoderWeights {
    pub bands: usize,
    pub channels: Vec<usize>,
    entry: Conv,
    levels: Vec<Level>,
}

impl PosEncoderWeights {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, bands: usize, channels: &[usize]) -> Self {
        assert!(!channels.is_empty(), "encoder needs at least one level");
        let r2 = ENTRY_UNSHUFFLE * ENTRY_UNSHUFFLE;
        let entry = Conv::new(
            ps,
            rng,
            &format!("{name}.entry"),
            embed_channels(bands) * r2,
            channels[0],
            1,
            1,
            Init::Xavier,
            true,
        );
        let levels = channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let down = (k > 0).then(|| {
                    Conv::new(ps, rng, &format!("{name}.down{k}"), channels[k - 1], c, 3, 2, Init::Xavier, true)
                });
                Level {
                    down,
                    conv: Conv::new(ps, rng, &format!("{name}.l{k}.conv"), c, c, 3, 1, Init::Xavier, true),
                    res: [
                        ResBlock::new(ps, rng, &format!("{name}.l{k}.res0"), c, true),
                        ResBlock::new(ps, rng, &format!("{name}.l{k}.res1"), c, true),
                    ],
                }
            })
            .collect();
        Self {
            bands,
            channels: channels.to_vec(),
            entry,
            levels,
        }
    }

    /// Total downsampling of level `k` relative to the input maps.
    pub fn level_factor(k: usize) -> usize {
        ENTRY_UNSHUFFLE << k
    }

    /// Runs the encoder on the tape. `embed` is `[6·2·L, H, W]`; `coverage`
    /// is the `H×W` coverage of the source maps.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], embed: Var, coverage: &[bool]) -> Result<Vec<Var>> {
        let s = tape.shape(embed).to_vec();
        if s.len() != 3 || s[0] != embed_channels(self.bands) {
            return Err(dim_err!("encoder expects [{}, H, W], got {:?}", embed_channels(self.bands), s));
        }
        let (h, w) = (s[1], s[2]);
        let deepest = Self::level_factor(self.levels.len() - 1);
        if h % deepest != 0 || w % deepest != 0 {
            return Err(dim_err!("{h}x{w} maps are not divisible by {deepest}"));
        }
        let masks: Vec<Var> = (0..self.levels.len())
            .map(|k| {
                let r = Self::level_factor(k);
                let m = downsample_mask(coverage, h, w, r);
                mask_tensor(tape, &m, self.channels[k], h / r, w / r)
            })
            .collect();

        let x = tape.pixel_unshuffle(embed, ENTRY_UNSHUFFLE)?;
        let x = self.entry.forward(tape, p, x)?;
        let mut stem = apply_mask(tape, x, Some(masks[0]))?;
        let mut out = Vec::with_capacity(self.levels.len());
        for (k, lvl) in self.levels.iter().enumerate() {
            if let Some(down) = &lvl.down {
                let y = down.forward(tape, p, stem)?;
                stem = apply_mask(tape, y, Some(masks[k]))?;
            }
            let y = lvl.conv.forward(tape, p, stem)?;
            let mut y = apply_mask(tape, y, Some(masks[k]))?;
            for rb in &lvl.res {
                y = rb.forward(tape, p, y, Some(masks[k]))?;
            }
            out.push(y);
        }
        Ok(out)
    }
}

/// Multi-scale positional features of one domain; level `k` is
/// `[C_k, H / (8·2^k), W / (8·2^k)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosPyramid {
    pub domain: Domain,
    pub levels: Vec<Tensor<f32>>,
}

/// Evaluates the encoder outside of training and checks the result against
/// the declared `(C_k, H_k, W_k)` plan.
pub fn encode_positions(
    embed: &Tensor<f32>,
    coverage: &[bool],
    domain: Domain,
    weights: &PosEncoderWeights,
    params: &ParamSet,
    plan: &[(usize, usize, usize)],
) -> Result<PosPyramid> {
    if plan.len() != weights.channels.len() {
        return Err(dim_err!(
            "plan has {} levels, encoder has {}",
            plan.len(),
            weights.channels.len()
        ));
    }
    let mut tape = Tape::<f32>::new();
    let p = params.bind(&mut tape);
    let e = tape.constant(embed.clone());
    let levels = weights.forward(&mut tape, &p, e, coverage)?;
    let levels: Vec<Tensor<f32>> = levels.iter().map(|&v| tape.value(v).clone()).collect();
    for (k, (t, &(c, h, w))) in levels.iter().zip(plan).enumerate() {
        if t.shape() != [c, h, w] {
            return Err(dim_err!("level {k} is {:?}, plan says {:?}", t.shape(), [c, h, w]));
        }
    }
    Ok(PosPyramid { domain, levels })
}

/// Applies one encoder to the UV maps and every view.
pub fn shared_encode(
    uv: &GeoMaps,
    views: &[GeoMaps],
    weights: &PosEncoderWeights,
    params: &ParamSet,
) -> Result<(PosPyramid, Vec<PosPyramid>)> {
    if views.iter().any(|v| v.norm != uv.norm) {
        return Err(invariant!("UV and view maps use different scene normalizations"));
    }
    let plan = |g: &GeoMaps| -> Vec<(usize, usize, usize)> {
        weights
            .channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let r = PosEncoderWeights::level_factor(k);
                (c, g.height / r, g.width / r)
            })
            .collect()
    };
    let run = |g: &GeoMaps| -> Result<PosPyramid> {
        let e = fourier_embed(g, weights.bands)?;
        encode_positions(&e, &g.coverage, g.domain, weights, params, &plan(g))
    };
    let p_uv = run(uv)?;
    let p_view = views.iter().map(run).collect::<Result<Vec<_>>>()?;
    Ok((p_uv, p_view))
}
