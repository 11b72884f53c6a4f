//! Parameterized layers over the tape. Layers own [`ParamId`]s into a
//! [`ParamSet`]; `forward` takes the `Var`s produced by [`ParamSet::bind`]
//! (or any substitute of the same length), so one definition serves training
//! in f32 and gradient checks in f64.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamSet, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Xavier-uniform from the supplied generator.
    Xavier,
    Zero,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..=a)).collect())
        .expect("shape matches element count")
}

fn init_tensor(rng: &mut ChaCha8Rng, init: Init, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<f32> {
    match init {
        Init::Xavier => xavier(rng, shape, fan_in, fan_out),
        Init::Zero => Tensor::zeros(shape.to_vec()),
    }
}

/// Token-wise affine map `x[T,in] · W[in,out] + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Init,
        trainable: bool,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_tensor(rng, init, &[din, dout], din, dout),
            trainable,
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros([dout]), trainable));
        Self { w, b, din, dout }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w.index()])?;
        match self.b {
            Some(b) => tape.add_row_bias(y, p[b.index()]),
            None => Ok(y),
        }
    }
}

/// 2-D convolution with odd square kernel and "same"-style padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        trainable: bool,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_tensor(rng, init, &[cout, cin, k, k], cin * k * k, cout * k * k),
            trainable,
        );
        let b = ps.add(format!("{name}.b"), Tensor::zeros([cout]), trainable);
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.w.index()], Some(p[self.b.index()]), self.stride, self.pad)
    }
}

/// `x + conv(silu(conv(x)))`, re-masked after each convolution.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
}

impl ResBlock {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c: usize, trainable: bool) -> Self {
        Self {
            c1: Conv::new(ps, rng, &format!("{name}.c1"), c, c, 3, 1, Init::Xavier, trainable),
            c2: Conv::new(ps, rng, &format!("{name}.c2"), c, c, 3, 1, Init::Xavier, trainable),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var, mask: Option<Var>) -> Result<Var> {
        let y = self.c1.forward(tape, p, x)?;
        let y = apply_mask(tape, y, mask)?;
        let y = tape.silu(y)?;
        let y = self.c2.forward(tape, p, y)?;
        let y = apply_mask(tape, y, mask)?;
        tape.add(x, y)
    }
}

/// Constant `[C,H,W]` tensor holding `mask[h,w]` in every channel.
pub fn mask_tensor<T: Real>(tape: &mut Tape<T>, mask: &[bool], c: usize, h: usize, w: usize) -> Var {
    debug_assert_eq!(mask.len(), h * w);
    let plane: Vec<T> = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    let data: Vec<T> = (0..c).flat_map(|_| plane.iter().copied()).collect();
    tape.constant(Tensor::new([c, h, w], data).expect("sizes agree"))
}

pub fn apply_mask<T: Real>(tape: &mut Tape<T>, x: Var, mask: Option<Var>) -> Result<Var> {
    match mask {
        Some(m) => tape.mul(x, m),
        None => Ok(x),
    }
}

/// A coarse cell is covered when any of its `r × r` fine samples is.
pub fn downsample_mask(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![false; oh * ow];
    for i in 0..oh * r {
        for j in 0..ow * r {
            if mask[i * w + j] {
                out[(i / r) * ow + j / r] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn downsampled_mask_is_any_of_block() {
        let mut m = vec![false; 16];
        m[5] = true;
        assert_eq!(downsample_mask(&m, 4, 4, 2), vec![true, false, false, false]);
    }

    #[test]
    fn xavier_is_seeded_and_bounded() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut ps, &mut rng, "l", 10, 6, true, Init::Xavier, true);
        let bound = (6.0f32 / 16.0).sqrt();
        assert!(ps.get(l.w).data().iter().all(|v| v.abs() <= bound));
        let mut ps2 = ParamSet::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut ps2, &mut rng2, "l", 10, 6, true, Init::Xavier, true);
        assert_eq!(ps, ps2);
    }
}
