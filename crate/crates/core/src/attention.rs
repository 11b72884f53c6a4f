//! The three attention branches and the parallel residual block, the view
//! feature extractor, and weight-free oracle attention over XYZ distance.
//!
//! Token layouts: a `[C,H,W]` map becomes `[H·W, C]` tokens in row-major
//! order. Multiview keys are flattened view-major: all tokens of view 0, then
//! view 1, and so on. Positional features are added to the full-width
//! projected queries/keys before the head split.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, invariant, Result};
use crate::nn::{Conv, Init, Linear};
use crate::raster::GeoMaps;
use crate::tensor::{AttentionSpec, ParamSet, Real, Tape, Tensor, Var};

/// Grid bookkeeping for a token sequence. `groups` partitions the tokens
/// (one group per view for multiview tokens); `mask` marks tokens that may
/// act as keys.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub groups: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenGrid {
    pub fn single(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(dim_err!("mask of {} for a {height}x{width} grid", mask.len()));
        }
        Ok(Self {
            height,
            width,
            groups: vec![height * width],
            mask,
        })
    }

    /// `n` views of `height × width` tokens each, flattened view-major.
    pub fn multiview(height: usize, width: usize, masks: &[Vec<bool>]) -> Result<Self> {
        let per = height * width;
        if masks.iter().any(|m| m.len() != per) {
            return Err(dim_err!("every view mask must hold {per} tokens"));
        }
        Ok(Self {
            height,
            width,
            groups: vec![per; masks.len()],
            mask: masks.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    fn spec(&self, heads: usize) -> AttentionSpec {
        AttentionSpec {
            heads,
            key_groups: self.groups.clone(),
            key_mask: self.mask.clone(),
        }
    }
}

/// Q/K/V/output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct AttnLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl AttnLayer {
    /// `dq` is the query-side width (also the output width), `dkv` the
    /// key/value source width. Attention runs at width `dq`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        dq: usize,
        dkv: usize,
        heads: usize,
        out_init: Init,
        trainable: bool,
    ) -> Self {
        assert!(heads > 0 && dq % heads == 0, "width {dq} not divisible by {heads} heads");
        Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), dq, dq, true, Init::Xavier, trainable),
            k: Linear::new(ps, rng, &format!("{name}.k"), dkv, dq, true, Init::Xavier, trainable),
            v: Linear::new(ps, rng, &format!("{name}.v"), dkv, dq, true, Init::Xavier, trainable),
            out: Linear::new(ps, rng, &format!("{name}.out"), dq, dq, true, out_init, trainable),
            heads,
        }
    }

    /// `out(softmax((q(x) + pq)(k(s) + pk)ᵀ / √d) · v(s))`. Returns the
    /// output and the attention node (for diagnostics).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        src: Var,
        pq: Option<Var>,
        pk: Option<Var>,
        keys: &TokenGrid,
    ) -> Result<(Var, Var)> {
        if tape.shape(src)[0] != keys.len() {
            return Err(dim_err!("{} key tokens but a grid of {}", tape.shape(src)[0], keys.len()));
        }
        let mut q = self.q.forward(tape, p, x)?;
        if let Some(pq) = pq {
            q = tape.add(q, pq)?;
        }
        let mut k = self.k.forward(tape, p, src)?;
        if let Some(pk) = pk {
            k = tape.add(k, pk)?;
        }
        let v = self.v.forward(tape, p, src)?;
        let a = tape.attention(q, k, v, &keys.spec(self.heads))?;
        Ok((self.out.forward(tape, p, a)?, a))
    }
}

/// Frozen base self attention without positional terms.
pub fn self_attn<T: Real>(tape: &mut Tape<T>, p: &[Var], w: &AttnLayer, h: Var, grid: &TokenGrid) -> Result<Var> {
    Ok(w.forward(tape, p, h, h, None, None, grid)?.0)
}

/// Reference attention from UV tokens to flattened multiview tokens.
#[allow(clippy::too_many_arguments)]
pub fn view_ref_attn<T: Real>(
    tape: &mut Tape<T>,
    p: &[Var],
    w: &AttnLayer,
    h: Var,
    f_view: Var,
    p_uv: Option<Var>,
    p_view: Option<Var>,
    view_grid: &TokenGrid,
) -> Result<(Var, Var)> {
    w.forward(tape, p, h, f_view, p_uv, p_view, view_grid)
}

/// UV self attention with the same positional features on queries and keys.
pub fn uv_self_attn<T: Real>(
    tape: &mut Tape<T>,
    p: &[Var],
    w: &AttnLayer,
    h: Var,
    p_uv: Option<Var>,
    grid: &TokenGrid,
) -> Result<Var> {
    Ok(w.forward(tape, p, h, h, p_uv, p_uv, grid)?.0)
}

/// Weights of one parallel block. `view_ref`/`uv_self` are `None` when the
/// branch is ablated.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub base: AttnLayer,
    pub view_ref: Option<AttnLayer>,
    pub uv_self: Option<AttnLayer>,
    pub width: usize,
}

impl BlockWeights {
    /// The base branch is frozen with fixed-seed weights; new branches have
    /// zero-initialized output projections.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        view_width: usize,
        heads: usize,
        with_view_ref: bool,
        with_uv_self: bool,
    ) -> Self {
        Self {
            base: AttnLayer::new(ps, rng, &format!("{name}.base"), width, width, heads, Init::Xavier, false),
            view_ref: with_view_ref.then(|| {
                AttnLayer::new(ps, rng, &format!("{name}.ref"), width, view_width, heads, Init::Zero, true)
            }),
            uv_self: with_uv_self
                .then(|| AttnLayer::new(ps, rng, &format!("{name}.uv"), width, width, heads, Init::Zero, true)),
            width,
        }
    }
}

/// Inputs of [`parallel_block`] other than `h`.
#[derive(Clone, Copy, Debug)]
pub struct BlockContext<'a> {
    pub uv_grid: &'a TokenGrid,
    pub view_grid: &'a TokenGrid,
    pub f_view: Var,
    pub p_uv: Option<Var>,
    pub p_view: Option<Var>,
}

/// Output of one parallel block with the reference-attention node kept for
/// diagnostics.
pub struct BlockOutput {
    pub h: Var,
    pub ref_attention: Option<Var>,
}

/// `h + SelfAttn(h) + ViewRefAttn(h, f_view, p) + UVSelfAttn(h, p)`.
pub fn parallel_block<T: Real>(
    tape: &mut Tape<T>,
    p: &[Var],
    w: &BlockWeights,
    h: Var,
    ctx: &BlockContext,
) -> Result<BlockOutput> {
    let s = self_attn(tape, p, &w.base, h, ctx.uv_grid)?;
    let mut out = tape.add(h, s)?;
    let mut ref_attention = None;
    if let Some(r) = &w.view_ref {
        let (y, a) = view_ref_attn(tape, p, r, h, ctx.f_view, ctx.p_uv, ctx.p_view, ctx.view_grid)?;
        out = tape.add(out, y)?;
        ref_attention = Some(a);
    }
    if let Some(u) = &w.uv_self {
        let y = uv_self_attn(tape, p, u, h, ctx.p_uv, ctx.uv_grid)?;
        out = tape.add(out, y)?;
    }
    Ok(BlockOutput { h: out, ref_attention })
}

/// Orthonormal 2-D DCT-II basis of an `r × r` block, ordered by `u + v`
/// then `u`. Returned as `(u, v)` pairs.
fn dct_order(r: usize) -> Vec<(usize, usize)> {
    let mut idx: Vec<(usize, usize)> = (0..r).flat_map(|u| (0..r).map(move |v| (u, v))).collect();
    idx.sort_by_key(|&(u, v)| (u + v, u));
    idx
}

/// `[out, 3·r², 1, 1]` frozen weights: output channel `k` is DCT coefficient
/// `k / 3` (low frequencies first) of color channel `k % 3`, reading the
/// pixel-unshuffled layout `c·r² + dy·r + dx`.
pub fn dct_weights(r: usize, out: usize) -> Result<Tensor<f32>> {
    if out > 3 * r * r {
        return Err(dim_err!("{out} DCT channels requested from {r}x{r} blocks"));
    }
    let order = dct_order(r);
    let alpha = |u: usize| if u == 0 { (1.0 / r as f64).sqrt() } else { (2.0 / r as f64).sqrt() };
    let pi = std::f64::consts::PI;
    let cin = 3 * r * r;
    let mut w = vec![0.0f32; out * cin];
    for k in 0..out {
        let c = k % 3;
        let (u, v) = order[k / 3];
        for dy in 0..r {
            for dx in 0..r {
                let b = alpha(u)
                    * alpha(v)
                    * (pi * (2 * dy + 1) as f64 * u as f64 / (2 * r) as f64).cos()
                    * (pi * (2 * dx + 1) as f64 * v as f64 / (2 * r) as f64).cos();
                w[k * cin + c * r * r + dy * r + dx] = b as f32;
            }
        }
    }
    Tensor::new([out, cin, 1, 1], w)
}

/// Frozen per-level feature extractor over view colors.
#[derive(Clone, Debug)]
pub struct ViewExtractor {
    pub factors: Vec<usize>,
    pub channels: Vec<usize>,
    convs: Vec<Conv>,
}

impl ViewExtractor {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, factors: &[usize], channels: &[usize]) -> Result<Self> {
        let mut convs = Vec::new();
        for (k, (&r, &c)) in factors.iter().zip(channels).enumerate() {
            let conv = Conv::new(ps, rng, &format!("{name}.l{k}"), 3 * r * r, c, 1, 1, Init::Zero, false);
            *ps.get_mut(conv.w) = dct_weights(r, c)?;
            convs.push(conv);
        }
        Ok(Self {
            factors: factors.to_vec(),
            channels: channels.to_vec(),
            convs,
        })
    }

    /// Per-level `[C_k, H/r_k, W/r_k]` features of one `[3,H,W]` color map.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], color: Var) -> Result<Vec<Var>> {
        self.factors
            .iter()
            .zip(&self.convs)
            .map(|(&r, conv)| {
                let x = tape.pixel_unshuffle(color, r)?;
                conv.forward(tape, p, x)
            })
            .collect()
    }

    /// Flattened view-major tokens `[N·T_k, C_k]` per level.
    pub fn forward_views<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], colors: &[Var]) -> Result<Vec<Var>> {
        let per_view = colors
            .iter()
            .map(|&c| self.forward(tape, p, c))
            .collect::<Result<Vec<_>>>()?;
        (0..self.factors.len())
            .map(|k| {
                let toks = per_view
                    .iter()
                    .map(|lv| tape.to_tokens(lv[k]))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&toks)
            })
            .collect()
    }
}

/// `[3,H,W]` color tensor of a map (zeros where uncovered).
pub fn color_tensor(g: &GeoMaps) -> Result<Tensor<f32>> {
    let color = g.color()?;
    let hw = g.len();
    let mut data = vec![0.0f32; 3 * hw];
    for (k, c) in color.iter().enumerate() {
        for ch in 0..3 {
            data[ch * hw + k] = c[ch];
        }
    }
    Tensor::new([3, g.height, g.width], data)
}

/// Mean over queries of the entropy (nats) of reference-attention mass
/// aggregated per key group, averaged over heads. `probs` is `[heads, Tq, Tk]`.
pub fn group_entropy(probs: &[f32], heads: usize, tq: usize, groups: &[usize], query_mask: &[bool]) -> f64 {
    let tk: usize = groups.iter().sum();
    let (mut total, mut n) = (0.0f64, 0usize);
    for h in 0..heads {
        for i in 0..tq {
            if !query_mask[i] {
                continue;
            }
            let row = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let mut start = 0;
            let mut e = 0.0;
            for &g in groups {
                let m: f64 = row[start..start + g].iter().map(|&x| x as f64).sum();
                if m > 0.0 {
                    e -= m * m.ln();
                }
                start += g;
            }
            total += e;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Weight-free attention from UV texels to view pixels: logits are
/// `−‖xyz_uv − xyz_view‖² / τ`, values are view colors, keys are all covered
/// pixels of all views. `τ = ∞` is the uniform limit. Returns `[3,H,W]`
/// (zeros on uncovered texels).
pub fn oracle_attend(uv: &GeoMaps, views: &[GeoMaps], tau: f64) -> Result<Tensor<f32>> {
    if !(tau > 0.0) {
        return Err(invariant!("oracle attention temperature must be positive, got {tau}"));
    }
    if views.iter().any(|v| v.norm != uv.norm) {
        return Err(invariant!("UV and view maps use different scene normalizations"));
    }
    let mut keys: Vec<([f64; 3], [f64; 3])> = Vec::new();
    for v in views {
        let color = v.color()?;
        for k in 0..v.len() {
            if v.coverage[k] {
                keys.push((v.position[k].map(f64::from), color[k].map(f64::from)));
            }
        }
    }
    let hw = uv.len();
    let mut out = vec![0.0f32; 3 * hw];
    if keys.is_empty() {
        return Tensor::new([3, uv.height, uv.width], out);
    }
    let texels: Vec<[f64; 3]> = if tau.is_infinite() {
        let mut mean = [0.0f64; 3];
        for (_, c) in &keys {
            for ch in 0..3 {
                mean[ch] += c[ch];
            }
        }
        let mean = mean.map(|m| m / keys.len() as f64);
        vec![mean; hw]
    } else {
        let grid = KeyGrid::new(&keys);
        crate::par::map_range(hw, |k| {
            if uv.coverage[k] {
                grid.attend(uv.position[k].map(f64::from), tau)
            } else {
                [0.0; 3]
            }
        })
    };
    for k in 0..hw {
        if uv.coverage[k] {
            for ch in 0..3 {
                out[ch * hw + k] = texels[k][ch] as f32;
            }
        }
    }
    Tensor::new([3, uv.height, uv.width], out)
}

/// Uniform bucketing of key positions over `[-1,1]³` so finite-temperature
/// attention only visits keys whose weight is not negligible.
struct KeyGrid<'a> {
    keys: &'a [([f64; 3], [f64; 3])],
    n: usize,
    cells: Vec<Vec<u32>>,
}

/// Keys with logit more than this below the maximum contribute less than
/// `e^-60` relative weight each and are skipped.
const LOGIT_CUTOFF: f64 = 60.0;

impl<'a> KeyGrid<'a> {
    fn new(keys: &'a [([f64; 3], [f64; 3])]) -> Self {
        let n = 32;
        let mut cells = vec![Vec::new(); n * n * n];
        for (i, (p, _)) in keys.iter().enumerate() {
            let c = Self::cell_of(n, *p);
            cells[(c[0] * n + c[1]) * n + c[2]].push(i as u32);
        }
        Self { keys, n, cells }
    }

    fn cell_of(n: usize, p: [f64; 3]) -> [usize; 3] {
        p.map(|x| (((x + 1.0) / 2.0 * n as f64).floor().max(0.0) as usize).min(n - 1))
    }

    fn cell_size(&self) -> f64 {
        2.0 / self.n as f64
    }

    fn d2(a: [f64; 3], b: [f64; 3]) -> f64 {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    }

    /// Keys in cells within Chebyshev ring radius `r` of `c`.
    fn visit(&self, c: [usize; 3], r: usize, mut f: impl FnMut(usize)) {
        let lo = |x: usize| x.saturating_sub(r);
        let hi = |x: usize| (x + r).min(self.n - 1);
        for x in lo(c[0])..=hi(c[0]) {
            for y in lo(c[1])..=hi(c[1]) {
                for z in lo(c[2])..=hi(c[2]) {
                    for &i in &self.cells[(x * self.n + y) * self.n + z] {
                        f(i as usize);
                    }
                }
            }
        }
    }

    fn attend(&self, q: [f64; 3], tau: f64) -> [f64; 3] {
        let c = Self::cell_of(self.n, q);
        // Nearest key: grow rings until the ring is farther than the best hit.
        let mut best = f64::INFINITY;
        let mut r = 0;
        loop {
            self.visit(c, r, |i| best = best.min(Self::d2(q, self.keys[i].0)));
            let reach = r as f64 * self.cell_size();
            if (best.is_finite() && reach * reach >= best) || r >= self.n {
                break;
            }
            r += 1;
        }
        let radius = (best + LOGIT_CUTOFF * tau).sqrt();
        let rings = (radius / self.cell_size()).ceil() as usize + 1;
        let mut num = [0.0f64; 3];
        let mut den = 0.0f64;
        self.visit(c, rings.min(self.n), |i| {
            let (p, col) = &self.keys[i];
            let w = (-(Self::d2(q, *p) - best) / tau).exp();
            den += w;
            for ch in 0..3 {
                num[ch] += w * col[ch];
            }
        });
        num.map(|x| x / den)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dct_basis_is_orthonormal() {
        let r = 4;
        let w = dct_weights(r, 3 * r * r).unwrap();
        let cin = 3 * r * r;
        for a in 0..cin {
            for b in 0..cin {
                let d: f64 = (0..cin)
                    .map(|i| w.data()[a * cin + i] as f64 * w.data()[b * cin + i] as f64)
                    .sum();
                assert!((d - if a == b { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn constant_block_lands_in_the_dc_coefficient() {
        let w = dct_weights(2, 3).unwrap();
        // channel 0 DC over a 2x2 block of ones = 2
        let dc: f32 = w.data()[0..4].iter().sum();
        assert!((dc - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_init_branches_leave_only_the_frozen_path() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = BlockWeights::new(&mut ps, &mut rng, "b", 8, 6, 2, true, true);
        let mut tape = Tape::<f32>::new();
        let p = ps.bind(&mut tape);
        let h = tape.constant(Tensor::from_fn([4, 8], |i| (i as f32 * 0.3).sin()));
        let f = tape.constant(Tensor::from_fn([6, 6], |i| (i as f32 * 0.7).cos()));
        let pu = tape.constant(Tensor::from_fn([4, 8], |i| (i as f32 * 0.1).cos()));
        let pv = tape.constant(Tensor::from_fn([6, 8], |i| (i as f32 * 0.2).sin()));
        let uv_grid = TokenGrid::single(2, 2, vec![true; 4]).unwrap();
        let view_grid = TokenGrid::multiview(1, 3, &[vec![true; 3], vec![true; 3]]).unwrap();
        let ctx = BlockContext {
            uv_grid: &uv_grid,
            view_grid: &view_grid,
            f_view: f,
            p_uv: Some(pu),
            p_view: Some(pv),
        };
        let out = parallel_block(&mut tape, &p, &w, h, &ctx).unwrap();
        let s = self_attn(&mut tape, &p, &w.base, h, &uv_grid).unwrap();
        let want = tape.add(h, s).unwrap();
        let (a, b) = (tape.value(out.h).data(), tape.value(want).data());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
