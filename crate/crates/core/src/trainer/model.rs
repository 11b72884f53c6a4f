//! The toy UV generator: a pixel-unshuffle stem, parallel attention blocks at
//! two token resolutions, and a pixel-shuffle head.
//!
//! Layout (level 1 = map/8, level 2 = map/16):
//! stem → block₁ → down → block₂ → block₂ → up (+ skip) → block₁ → head.
//! Every block is followed by a residual feed-forward layer whose output
//! projection starts at zero, so an untrained model is the stem, the frozen
//! self-attention path and the head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::SceneGeometry;
use crate::attention::{parallel_block, BlockContext, BlockWeights, TokenGrid, ViewExtractor};
use crate::encoding::{PosEncoderWeights, ENTRY_UNSHUFFLE};
use crate::error::{invariant, Result};
use crate::nn::{downsample_mask, mask_tensor, Conv, Init, Linear};
use crate::raster::GeoMaps;
use crate::tensor::{ParamSet, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Positional features are not added anywhere.
    NoPosEnc,
    /// No reference attention; the front view is back-projected into the input.
    NoRefAttn,
    /// No UV self attention.
    NoUvAttn,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoPosEnc,
        Ablation::NoRefAttn,
        Ablation::NoUvAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPosEnc => "no_pos_enc",
            Ablation::NoRefAttn => "no_ref_attn",
            Ablation::NoUvAttn => "no_uv_attn",
        }
    }

    pub fn uses_positions(self) -> bool {
        self != Ablation::NoPosEnc
    }

    pub fn uses_views(self) -> bool {
        self != Ablation::NoRefAttn
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Attention widths at the two token levels.
    pub widths: [usize; 2],
    pub heads: usize,
    /// Fourier bands of the position embedding.
    pub bands: usize,
    /// Seed of the weight initialization (including the frozen path). Set
    /// from the run seed, never read from config files.
    #[serde(skip)]
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [64, 128],
            heads: 2,
            bands: crate::encoding::DEFAULT_BANDS,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Ffn {
    a: Linear,
    b: Linear,
}

impl Ffn {
    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            a: Linear::new(ps, rng, &format!("{name}.a"), c, 2 * c, true, Init::Xavier, true),
            b: Linear::new(ps, rng, &format!("{name}.b"), 2 * c, c, true, Init::Zero, true),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], h: Var) -> Result<Var> {
        let y = self.a.forward(tape, p, h)?;
        let y = tape.silu(y)?;
        let y = self.b.forward(tape, p, y)?;
        tape.add(h, y)
    }
}

pub const HEAD_UNSHUFFLE: usize = ENTRY_UNSHUFFLE;

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub params: ParamSet,
    stem: Conv,
    pos: Option<PosEncoderWeights>,
    extractor: Option<ViewExtractor>,
    blocks: Vec<BlockWeights>,
    ffns: Vec<Ffn>,
    down: Conv,
    up: Conv,
    head: Conv,
}

/// Positional features of one scene geometry, recorded on a tape.
#[derive(Clone, Debug)]
pub struct PosVars {
    /// `[T_k, C_k]` per level.
    pub uv: Vec<Var>,
    /// Per view, `[T'_k, C_k]` per level.
    pub views: Vec<Vec<Var>>,
}

/// Per-sample inputs of one forward pass.
pub struct ForwardInputs<'a> {
    pub geo: &'a SceneGeometry,
    pub pos: Option<&'a PosVars>,
    /// `[3,H',W']` view colors, indexed by original view id.
    pub colors: &'a [Var],
    /// Order in which views are flattened into key tokens.
    pub order: &'a [usize],
    /// Views that may act as keys, indexed by original view id.
    pub active: &'a [bool],
    /// `[3,H,W]` back-projected front view (only for [`Ablation::NoRefAttn`]).
    pub front: Option<Var>,
}

pub struct ForwardOutput {
    /// `[3,H,W]` predicted texture.
    pub pred: Var,
    /// Reference-attention nodes with their key layout, per block.
    pub ref_attention: Vec<(Var, TokenGrid)>,
    /// Query masks of the blocks in `ref_attention`.
    pub query_masks: Vec<Vec<bool>>,
}

impl ToyModel {
    pub fn new(config: ModelConfig, ablation: Ablation) -> Result<Self> {
        let [c1, c2] = config.widths;
        if config.heads == 0 || c1 % config.heads != 0 || c2 % config.heads != 0 {
            return Err(invariant!(
                "widths {:?} must be divisible by {} heads",
                config.widths,
                config.heads
            ));
        }
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let r2 = ENTRY_UNSHUFFLE * ENTRY_UNSHUFFLE;
        let stem_in = if ablation.uses_views() { STEM_GEO_CHANNELS } else { STEM_GEO_CHANNELS + 3 };
        let stem = Conv::new(&mut ps, &mut rng, "stem", stem_in * r2, c1, 1, 1, Init::Xavier, true);
        let pos = ablation
            .uses_positions()
            .then(|| PosEncoderWeights::new(&mut ps, &mut rng, "pos", config.bands, &config.widths));
        let extractor = if ablation.uses_views() {
            Some(ViewExtractor::new(
                &mut ps,
                &mut rng,
                "views",
                &[ENTRY_UNSHUFFLE, 2 * ENTRY_UNSHUFFLE],
                &config.widths,
            )?)
        } else {
            None
        };
        let with_ref = ablation.uses_views();
        let with_uv = ablation != Ablation::NoUvAttn;
        let widths = [c1, c2, c2, c1];
        let mut blocks = Vec::new();
        let mut ffns = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            blocks.push(BlockWeights::new(
                &mut ps,
                &mut rng,
                &format!("block{i}"),
                c,
                c,
                config.heads,
                with_ref,
                with_uv,
            ));
            ffns.push(Ffn::new(&mut ps, &mut rng, &format!("ffn{i}"), c));
        }
        let down = Conv::new(&mut ps, &mut rng, "down", c1, c2, 3, 2, Init::Xavier, true);
        let up = Conv::new(&mut ps, &mut rng, "up", c2, 4 * c1, 1, 1, Init::Xavier, true);
        let head = Conv::new(&mut ps, &mut rng, "head", c1, 3 * r2, 3, 1, Init::Xavier, true);
        // Start predictions at a flat mid-gray.
        ps.get_mut(head.w).data_mut().iter_mut().for_each(|w| *w = 0.0);
        ps.get_mut(head.b).data_mut().iter_mut().for_each(|b| *b = 0.5);
        Ok(Self {
            config,
            ablation,
            params: ps,
            stem,
            pos,
            extractor,
            blocks,
            ffns,
            down,
            up,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Runs the shared position encoder over one scene's UV and view maps.
    /// Every positional token is layer-normalized so attention logits start
    /// at a moderate scale; uncovered tokens stay zero.
    pub fn encode_positions<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], geo: &SceneGeometry) -> Result<Option<PosVars>> {
        let Some(enc) = &self.pos else { return Ok(None) };
        let mut run = |embed: &Tensor<f32>, cov: &[bool]| -> Result<Vec<Var>> {
            let e = tape.constant(embed.cast());
            let levels = enc.forward(tape, p, e, cov)?;
            levels
                .into_iter()
                .map(|l| {
                    let t = tape.to_tokens(l)?;
                    tape.layer_norm(t)
                })
                .collect()
        };
        let uv = run(&geo.uv_embed, &geo.uv.coverage)?;
        let views = geo
            .view_embeds
            .iter()
            .zip(&geo.views)
            .map(|(e, v)| run(e, &v.coverage))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(PosVars { uv, views }))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: &ForwardInputs) -> Result<ForwardOutput> {
        let geo = x.geo;
        let (h, w) = (geo.uv.height, geo.uv.width);
        let [c1, _] = self.config.widths;
        let factors = [ENTRY_UNSHUFFLE, 2 * ENTRY_UNSHUFFLE];
        if h % factors[1] != 0 || w % factors[1] != 0 {
            return Err(invariant!("UV size {h}x{w} must be divisible by {}", factors[1]));
        }
        let grids: Vec<(usize, usize)> = factors.iter().map(|&r| (h / r, w / r)).collect();
        let uv_masks: Vec<Vec<bool>> = factors
            .iter()
            .map(|&r| downsample_mask(&geo.uv.coverage, h, w, r))
            .collect();
        let uv_grids = (0..2)
            .map(|k| TokenGrid::single(grids[k].0, grids[k].1, uv_masks[k].clone()))
            .collect::<Result<Vec<_>>>()?;

        // Multiview keys, values and positional features per level.
        let mut view_grids = Vec::new();
        let mut f_view = Vec::new();
        let mut p_view: Vec<Option<Var>> = Vec::new();
        let p_uv: Vec<Option<Var>> = (0..2).map(|k| x.pos.map(|pv| pv.uv[k])).collect();
        if let Some(ex) = &self.extractor {
            let (vh, vw) = (geo.views[0].height, geo.views[0].width);
            let ordered: Vec<Var> = x.order.iter().map(|&v| x.colors[v]).collect();
            f_view = ex.forward_views(tape, p, &ordered)?;
            for (k, &r) in factors.iter().enumerate() {
                let masks: Vec<Vec<bool>> = x
                    .order
                    .iter()
                    .map(|&v| {
                        let m = downsample_mask(&geo.views[v].coverage, vh, vw, r);
                        if x.active[v] {
                            m
                        } else {
                            vec![false; m.len()]
                        }
                    })
                    .collect();
                view_grids.push(TokenGrid::multiview(vh / r, vw / r, &masks)?);
                p_view.push(match x.pos {
                    Some(pv) => {
                        let toks: Vec<Var> = x.order.iter().map(|&v| pv.views[v][k]).collect();
                        Some(tape.concat_rows(&toks)?)
                    }
                    None => None,
                });
            }
        }

        // Stem.
        let g = tape.constant(stem_geometry(&geo.uv)?.cast());
        let input = match x.front {
            Some(f) if !self.ablation.uses_views() => {
                let a = tape.reshape(g, [STEM_GEO_CHANNELS * h * w])?;
                let b = tape.reshape(f, [3 * h * w])?;
                let stacked = tape.concat_rows(&[a, b])?;
                tape.reshape(stacked, [STEM_GEO_CHANNELS + 3, h, w])?
            }
            None if self.ablation.uses_views() => g,
            _ => return Err(invariant!("front-view input must be given exactly for the no_ref_attn arm")),
        };
        let s = tape.pixel_unshuffle(input, ENTRY_UNSHUFFLE)?;
        let s = self.stem.forward(tape, p, s)?;
        let mut hcur = tape.to_tokens(s)?;

        let mut ref_attention = Vec::new();
        let mut query_masks = Vec::new();
        let empty = TokenGrid::single(0, 0, Vec::new())?;
        let mut run_block = |tape: &mut Tape<T>, i: usize, k: usize, hin: Var| -> Result<Var> {
            let ctx = BlockContext {
                uv_grid: &uv_grids[k],
                view_grid: view_grids.get(k).unwrap_or(&empty),
                f_view: f_view.get(k).copied().unwrap_or(hin),
                p_uv: p_uv[k],
                p_view: p_view.get(k).copied().flatten(),
            };
            let out = parallel_block(tape, p, &self.blocks[i], hin, &ctx)?;
            if let Some(a) = out.ref_attention {
                ref_attention.push((a, view_grids[k].clone()));
                query_masks.push(uv_masks[k].clone());
            }
            self.ffns[i].forward(tape, p, out.h)
        };

        hcur = run_block(tape, 0, 0, hcur)?;
        let skip = hcur;
        let m = tape.from_tokens(hcur, grids[0].0, grids[0].1)?;
        let m = self.down.forward(tape, p, m)?;
        hcur = tape.to_tokens(m)?;
        hcur = run_block(tape, 1, 1, hcur)?;
        hcur = run_block(tape, 2, 1, hcur)?;
        let m = tape.from_tokens(hcur, grids[1].0, grids[1].1)?;
        let m = self.up.forward(tape, p, m)?;
        let m = tape.pixel_shuffle(m, 2)?;
        let m = tape.to_tokens(m)?;
        hcur = tape.add(m, skip)?;
        hcur = run_block(tape, 3, 0, hcur)?;

        let m = tape.from_tokens(hcur, grids[0].0, grids[0].1)?;
        debug_assert_eq!(tape.shape(m)[0], c1);
        let m = self.head.forward(tape, p, m)?;
        let pred = tape.pixel_shuffle(m, HEAD_UNSHUFFLE)?;
        Ok(ForwardOutput {
            pred,
            ref_attention,
            query_masks,
        })
    }
}

/// Coverage, normalized position and normal of the UV maps.
pub const STEM_GEO_CHANNELS: usize = 7;

/// `[7,H,W]` stem input: coverage, xyz, normal (zero where uncovered).
pub fn stem_geometry(uv: &GeoMaps) -> Result<Tensor<f32>> {
    let hw = uv.len();
    let mut data = vec![0.0f32; STEM_GEO_CHANNELS * hw];
    for k in 0..hw {
        if uv.coverage[k] {
            data[k] = 1.0;
            for d in 0..3 {
                data[(1 + d) * hw + k] = uv.position[k][d];
                data[(4 + d) * hw + k] = uv.normal[k][d];
            }
        }
    }
    Tensor::new([STEM_GEO_CHANNELS, uv.height, uv.width], data)
}

/// Mean squared error over covered texels: `Σ_covered Σ_c (pred − target)² / (3·n)`.
pub fn masked_mse<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, coverage: &[bool]) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    let n = coverage.iter().filter(|&&c| c).count();
    if n == 0 {
        return Err(invariant!("loss over an empty coverage mask"));
    }
    let m = mask_tensor(tape, coverage, s[0], s[1], s[2]);
    let d = tape.sub(pred, target)?;
    let d = tape.mul(d, m)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq)?;
    tape.scale(total, T::from_f64(1.0 / (s[0] * n) as f64))
}
