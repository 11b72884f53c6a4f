use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key layout for [`Tape::attention`].
///
/// Keys are split into contiguous groups (one per view for multiview keys, a
/// single group for self attention). Per-group partial sums are combined in an
/// order-independent way, so permuting whole groups leaves outputs bitwise
/// unchanged.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    pub key_groups: Vec<usize>,
    pub key_mask: Vec<bool>,
}

impl AttentionSpec {
    pub fn single_group(heads: usize, key_mask: Vec<bool>) -> Self {
        Self {
            heads,
            key_groups: vec![key_mask.len()],
            key_mask,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    PixelUnshuffle(Var, usize),
    PixelShuffle(Var, usize),
    Reshape(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// `[heads, Tq, Tk]` attention weights.
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and
/// [`Tape::backward`] visits nodes once, in reverse.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    empty_queries: usize,
}

fn check_finite<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            empty_queries: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        check_finite(&value, name)?;
        Ok(self.push(value, op, requires_grad))
    }

    /// A constant input: gradients are not tracked through it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Number of attention queries that had no unmasked key so far.
    pub fn empty_query_count(&self) -> usize {
        self.empty_queries
    }

    /// Attention weights `[heads, Tq, Tk]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push_checked(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push_checked(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push_checked(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push_checked(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| x * s).collect(),
        };
        let rg = self.rg(&[a]);
        self.push_checked(out, Op::Scale(a, s), rg, "scale")
    }

    /// `[M,N] + [N]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(dim_err!("add_row_bias {:?} + {:?}", sx, sb));
        }
        let n = sx[1];
        let b = self.value(bias).data().to_vec();
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let out = Tensor {
            shape: sx.to_vec(),
            data,
        };
        let rg = self.rg(&[x, bias]);
        self.push_checked(out, Op::AddRowBias(x, bias), rg, "add_row_bias")
    }

    /// `[C,H,W] + [C]`, one bias per channel plane.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 3 || sb != [sx[0]] {
            return Err(dim_err!("add_channel_bias {:?} + {:?}", sx, sb));
        }
        let plane = sx[1] * sx[2];
        let b = self.value(bias).data().to_vec();
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i / plane])
            .collect();
        let out = Tensor {
            shape: sx.to_vec(),
            data,
        };
        let rg = self.rg(&[x, bias]);
        self.push_checked(out, Op::AddChannelBias(x, bias), rg, "add_channel_bias")
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push_checked(out, Op::Relu(a), rg, "relu")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x / (T::one() + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push_checked(out, Op::Silu(a), rg, "silu")
    }

    /// Softmax over the last axis, computed after subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| dim_err!("softmax of a scalar"))?;
        if d == 0 {
            return Err(dim_err!("softmax over an empty axis"));
        }
        let mut data = t.data().to_vec();
        par::for_each_row(&mut data, d, |_, row| softmax_row(row));
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push_checked(out, Op::Softmax(a), rg, "softmax")
    }

    /// `(x − mean) / sqrt(var + 1e-5)` over the last axis, without affine
    /// parameters. An all-zero row stays zero.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| dim_err!("layer norm of a scalar"))?;
        if d == 0 {
            return Err(dim_err!("layer norm over an empty axis"));
        }
        let mut data = t.data().to_vec();
        par::for_each_row(&mut data, d, |_, row| {
            let (mean, inv) = row_stats(row);
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        });
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push_checked(out, Op::LayerNorm(a), rg, "layer_norm")
    }

    /// Cross-correlation of `x[C,H,W]` with `w[O,C,k,k]` (odd `k`), zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(dim_err!("conv2d input {:?} weight {:?}", sx, sw));
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(dim_err!("conv2d kernel size {k} must be odd"));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(dim_err!("conv2d bias {:?} for {} outputs", self.shape(b), sw[0]));
            }
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], k, stride, pad)
            .ok_or_else(|| dim_err!("conv2d kernel {k} stride {stride} pad {pad} on {:?}", sx))?;
        let o = sw[0];
        let ckk = sx[0] * k * k;
        let hw = geom.oh * geom.ow;
        let mut out = vec![T::zero(); o * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if geom.is_pointwise() {
                kernels::gemm_nn(wv, xv, &mut out, o, ckk, hw);
            } else {
                let cols = kernels::im2col(xv, &geom);
                kernels::gemm_nn(wv, &cols, &mut out, o, ckk, hw);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (oc, plane) in out.chunks_mut(hw).enumerate() {
                    for v in plane {
                        *v += bv[oc];
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push_checked(
            Tensor::new([o, geom.oh, geom.ow], out)?,
            Op::Conv2d { x, w, b, geom },
            rg,
            "conv2d",
        )
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || r == 0 || s[1] % r != 0 || s[2] % r != 0 {
            return Err(dim_err!("pixel_unshuffle {:?} by {r}", s));
        }
        let data = kernels::pixel_unshuffle(self.value(x).data(), s[0], s[1], s[2], r);
        let rg = self.rg(&[x]);
        self.push_checked(
            Tensor::new([s[0] * r * r, s[1] / r, s[2] / r], data)?,
            Op::PixelUnshuffle(x, r),
            rg,
            "pixel_unshuffle",
        )
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || r == 0 || s[0] % (r * r) != 0 {
            return Err(dim_err!("pixel_shuffle {:?} by {r}", s));
        }
        let data = kernels::pixel_shuffle(self.value(x).data(), s[0], s[1], s[2], r);
        let rg = self.rg(&[x]);
        self.push_checked(
            Tensor::new([s[0] / (r * r), s[1] * r, s[2] * r], data)?,
            Op::PixelShuffle(x, r),
            rg,
            "pixel_shuffle",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("transpose needs 2-D, got {:?}", s));
        }
        let data = kernels::transpose(self.value(x).data(), s[0], s[1]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([s[1], s[0]], data)?, Op::Transpose(x), rg))
    }

    /// Stacks tensors along axis 0; trailing dims must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(dim_err!("concat_rows {:?} with trailing {:?}", s, tail));
            }
            rows += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// `[C,H,W] -> [H·W, C]` token layout.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("to_tokens needs [C,H,W], got {:?}", s));
        }
        let flat = self.reshape(x, [s[0], s[1] * s[2]])?;
        self.transpose(flat)
    }

    /// `[H·W, C] -> [C,H,W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != h * w {
            return Err(dim_err!("from_tokens {:?} into {h}x{w}", s));
        }
        let t = self.transpose(x)?;
        self.reshape(t, [s[1], h, w])
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[x]);
        self.push_checked(Tensor::scalar(T::from_f64(s)), Op::Sum(x), rg, "sum")
    }

    /// Multi-head scaled dot-product attention `softmax(Q·Kᵀ/√d)·V` with a
    /// key mask. `q[Tq,C]`, `k[Tk,C]`, `v[Tk,C]`; `d = C / heads`.
    /// Queries with no unmasked key produce a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(dim_err!("attention q {:?} k {:?} v {:?}", sq, sk, sv));
        }
        let (tq, tk, c) = (sq[0], sk[0], sq[1]);
        let heads = spec.heads;
        if heads == 0 || c % heads != 0 {
            return Err(dim_err!("width {c} not divisible by {heads} heads"));
        }
        if spec.key_mask.len() != tk || spec.key_groups.iter().sum::<usize>() != tk {
            return Err(dim_err!(
                "attention key mask {} / groups {:?} for {tk} keys",
                spec.key_mask.len(),
                spec.key_groups
            ));
        }
        let d = c / heads;
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let mut bounds = Vec::with_capacity(spec.key_groups.len());
        let mut start = 0;
        for &g in &spec.key_groups {
            bounds.push((start, start + g));
            start += g;
        }

        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mask = &spec.key_mask;

        // Per-query results: probs for every head plus the output row.
        let rows: Vec<(Vec<T>, Vec<T>, bool)> = par::map_range(tq, |i| {
            let mut probs = vec![T::zero(); heads * tk];
            let mut out = vec![T::zero(); c];
            let mut empty = false;
            let mut num_parts = vec![T::zero(); bounds.len()];
            let mut den_parts = vec![T::zero(); bounds.len()];
            for h in 0..heads {
                let qi = &qv[i * c + h * d..i * c + (h + 1) * d];
                let p = &mut probs[h * tk..(h + 1) * tk];
                let mut mx = T::neg_infinity();
                for j in 0..tk {
                    if mask[j] {
                        let s = kernels::dot(qi, &kv[j * c + h * d..j * c + (h + 1) * d]) * scale;
                        p[j] = s;
                        if s > mx {
                            mx = s;
                        }
                    }
                }
                if mx == T::neg_infinity() {
                    empty = true;
                    p.iter_mut().for_each(|x| *x = T::zero());
                    continue;
                }
                for j in 0..tk {
                    p[j] = if mask[j] { (p[j] - mx).exp() } else { T::zero() };
                }
                for (gi, &(a, b)) in bounds.iter().enumerate() {
                    den_parts[gi] = p[a..b].iter().fold(T::zero(), |acc, &x| acc + x);
                }
                let den = kernels::order_free_sum(&mut den_parts);
                for ch in 0..d {
                    for (gi, &(a, b)) in bounds.iter().enumerate() {
                        let mut acc = T::zero();
                        for j in a..b {
                            if p[j] != T::zero() {
                                acc += p[j] * vv[j * c + h * d + ch];
                            }
                        }
                        num_parts[gi] = acc;
                    }
                    out[h * d + ch] = kernels::order_free_sum(&mut num_parts) / den;
                }
                for x in p.iter_mut() {
                    *x = *x / den;
                }
            }
            (probs, out, empty)
        });

        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out = Vec::with_capacity(tq * c);
        let mut empties = 0;
        for (i, (p, o, e)) in rows.into_iter().enumerate() {
            for h in 0..heads {
                probs[(h * tq + i) * tk..(h * tq + i + 1) * tk]
                    .copy_from_slice(&p[h * tk..(h + 1) * tk]);
            }
            out.extend(o);
            if e {
                empties += 1;
            }
        }
        self.empty_queries += empties;
        let rg = self.rg(&[q, k, v]);
        self.push_checked(
            Tensor::new([tq, c], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
            "attention",
        )
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Reverse sweep from a scalar output. Gradients accumulate into every
    /// node that requires them; previous gradients are discarded.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(dim_err!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(Tensor::full(self.shape(out).to_vec(), T::one()));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor {
                    shape: self.nodes[v.0].value.shape().to_vec(),
                    data: g,
                });
            }
        }
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor<T>) -> Result<()> {
        let gd = g.data();
        // Borrow juggling: compute input grads first, then accumulate.
        let mut updates: Vec<(Var, Vec<T>)> = Vec::new();
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(gd, self.value(*b).data(), &mut da, m, n, k);
                    updates.push((*a, da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(self.value(*a).data(), gd, &mut db, k, m, n);
                    updates.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                updates.push((*a, gd.to_vec()));
                updates.push((*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                updates.push((*a, gd.to_vec()));
                updates.push((*b, gd.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                updates.push((*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                updates.push((*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale(a, s) => {
                updates.push((*a, gd.iter().map(|&x| x * *s).collect()));
            }
            Op::AddRowBias(x, bias) => {
                let n = self.shape(*bias)[0];
                let mut db = vec![T::zero(); n];
                for row in gd.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                updates.push((*x, gd.to_vec()));
                updates.push((*bias, db));
            }
            Op::AddChannelBias(x, bias) => {
                let s = self.shape(*x);
                let plane = s[1] * s[2];
                let db = gd
                    .chunks(plane)
                    .map(|p| p.iter().fold(T::zero(), |a, &v| a + v))
                    .collect();
                updates.push((*x, gd.to_vec()));
                updates.push((*bias, db));
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                updates.push((
                    *a,
                    gd.iter()
                        .zip(va)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                updates.push((
                    *a,
                    gd.iter()
                        .zip(va)
                        .map(|(&g, &x)| {
                            let s = T::one() / (T::one() + (-x).exp());
                            g * s * (T::one() + x * (T::one() - s))
                        })
                        .collect(),
                ));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut da = vec![T::zero(); y.len()];
                par::for_each_row(&mut da, d, |r, row| {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &gd[r * d..(r + 1) * d];
                    let dot = kernels::dot(ys, gs);
                    for j in 0..d {
                        row[j] = ys[j] * (gs[j] - dot);
                    }
                });
                updates.push((*a, da));
            }
            Op::LayerNorm(a) => {
                let xv = self.value(*a).data();
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let n = T::from_f64(d as f64);
                let mut da = vec![T::zero(); y.len()];
                par::for_each_row(&mut da, d, |r, row| {
                    let (_, inv) = row_stats(&xv[r * d..(r + 1) * d]);
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &gd[r * d..(r + 1) * d];
                    let gm = gs.iter().fold(T::zero(), |s, &g| s + g) / n;
                    let gy = kernels::dot(gs, ys) / n;
                    for j in 0..d {
                        row[j] = inv * (gs[j] - gm - ys[j] * gy);
                    }
                });
                updates.push((*a, da));
            }
            Op::Conv2d { x, w, b, geom } => {
                let o = self.shape(*w)[0];
                let ckk = geom.c * geom.k * geom.k;
                let hw = geom.oh * geom.ow;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let cols_owned;
                let cols: &[T] = if geom.is_pointwise() {
                    xv
                } else {
                    cols_owned = kernels::im2col(xv, geom);
                    &cols_owned
                };
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); o * ckk];
                    kernels::gemm_nt(gd, cols, &mut dw, o, hw, ckk);
                    updates.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let db = gd
                            .chunks(hw)
                            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v))
                            .collect();
                        updates.push((*b, db));
                    }
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    kernels::gemm_tn(wv, gd, &mut dcols, ckk, o, hw);
                    if geom.is_pointwise() {
                        updates.push((*x, dcols));
                    } else {
                        let mut dx = vec![T::zero(); geom.c * geom.h * geom.w];
                        kernels::col2im(&dcols, geom, &mut dx);
                        updates.push((*x, dx));
                    }
                }
            }
            Op::PixelUnshuffle(x, r) => {
                let s = node.value.shape();
                updates.push((*x, kernels::pixel_shuffle(gd, s[0], s[1], s[2], *r)));
            }
            Op::PixelShuffle(x, r) => {
                let s = node.value.shape();
                updates.push((*x, kernels::pixel_unshuffle(gd, s[0], s[1], s[2], *r)));
            }
            Op::Reshape(x) => updates.push((*x, gd.to_vec())),
            Op::Transpose(x) => {
                let s = node.value.shape();
                updates.push((*x, kernels::transpose(gd, s[0], s[1])));
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    updates.push((x, gd[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                updates.push((*x, vec![gd[0]; n]));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    self.shape(*q)[0],
                    self.shape(*k)[0],
                    self.shape(*q)[1],
                    *heads,
                );
                updates.push((*q, dq));
                updates.push((*k, dk));
                updates.push((*v, dv));
            }
        }
        for (v, g) in updates {
            self.accumulate(v, g);
        }
        Ok(())
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Mean and `1 / sqrt(var + eps)` of one row.
fn row_stats<T: Real>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |s, &x| s + x) / n;
    let var = row.iter().fold(T::zero(), |s, &x| s + (x - mean) * (x - mean)) / n;
    (mean, T::one() / (var + T::from_f64(LAYER_NORM_EPS)).sqrt())
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let mx = row
        .iter()
        .fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    tq: usize,
    tk: usize,
    c: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = c / heads;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    // dS[h,i,j] = P ⊙ (dP − rowsum(dP ⊙ P)),  dP = dO·Vᵀ
    let mut ds = vec![T::zero(); heads * tq * tk];
    par::for_each_row(&mut ds, tk, |hi, row| {
        let h = hi / tq;
        let i = hi % tq;
        let p = &probs[hi * tk..(hi + 1) * tk];
        let go = &dout[i * c + h * d..i * c + (h + 1) * d];
        let mut acc = T::zero();
        for j in 0..tk {
            if p[j] != T::zero() {
                let dp = kernels::dot(go, &v[j * c + h * d..j * c + (h + 1) * d]);
                row[j] = dp;
                acc += dp * p[j];
            }
        }
        for j in 0..tk {
            row[j] = if p[j] != T::zero() { p[j] * (row[j] - acc) } else { T::zero() };
        }
    });

    let mut dq = vec![T::zero(); tq * c];
    par::for_each_row(&mut dq, c, |i, row| {
        for h in 0..heads {
            let dsr = &ds[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            for (j, &s) in dsr.iter().enumerate() {
                if s != T::zero() {
                    kernels::axpy(
                        s * scale,
                        &k[j * c + h * d..j * c + (h + 1) * d],
                        &mut row[h * d..(h + 1) * d],
                    );
                }
            }
        }
    });

    let mut dk = vec![T::zero(); tk * c];
    par::for_each_row(&mut dk, c, |j, row| {
        for h in 0..heads {
            for i in 0..tq {
                let s = ds[(h * tq + i) * tk + j];
                if s != T::zero() {
                    kernels::axpy(
                        s * scale,
                        &q[i * c + h * d..i * c + (h + 1) * d],
                        &mut row[h * d..(h + 1) * d],
                    );
                }
            }
        }
    });

    let mut dv = vec![T::zero(); tk * c];
    par::for_each_row(&mut dv, c, |j, row| {
        for h in 0..heads {
            for i in 0..tq {
                let p = probs[(h * tq + i) * tk + j];
                if p != T::zero() {
                    kernels::axpy(
                        p,
                        &dout[i * c + h * d..i * c + (h + 1) * d],
                        &mut row[h * d..(h + 1) * d],
                    );
                }
            }
        }
    });
    (dq, dk, dv)
}
