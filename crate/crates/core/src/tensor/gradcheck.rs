use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per input; inputs with fewer are probed exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl GradcheckConfig {
    /// Step used when the tape runs in `f32`.
    pub fn f32_default() -> Self {
        Self {
            step: 1e-3,
            max_coords: 48,
            seed: 0,
        }
    }

    /// Step used for the `f64` shadow run.
    pub fn f64_default() -> Self {
        Self {
            step: 1e-6,
            max_coords: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `max |analytic − numeric| / max |numeric|` over all probed coordinates.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compares tape gradients of `f` against central finite differences.
///
/// `f` receives one differentiable [`Var`] per entry of `inputs`. When its
/// output is not a scalar it is contracted with fixed pseudo-random weights in
/// `[-1, 1]` so every output element participates.
pub fn gradcheck<T, F>(f: F, inputs: &[Tensor<f64>], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights: Option<Tensor<T>> = None;

    let mut run = |xs: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::<T>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.cast())).collect();
        let mut out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            let shape = tape.shape(out).to_vec();
            let w = weights
                .get_or_insert_with(|| {
                    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
                    Tensor::from_fn(shape.clone(), |_| T::from_f64(r.gen_range(-1.0..1.0)))
                })
                .clone();
            let wv = tape.constant(w);
            let prod = tape.mul(out, wv)?;
            out = tape.sum(prod)?;
        }
        let val = tape.value(out).item().as_f64();
        let mut grads = Vec::new();
        if want_grads {
            tape.backward(out)?;
            for (v, x) in vars.iter().zip(xs) {
                grads.push(
                    tape.grad(*v)
                        .map(|g| g.cast())
                        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())),
                );
            }
        }
        Ok((val, grads))
    };

    let (_, analytic) = run(inputs, true)?;
    let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_num = 0.0f64;
    let mut max_err = 0.0f64;
    let mut checked = 0;
    for (ii, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if x.len() <= cfg.max_coords {
            (0..x.len()).collect()
        } else {
            let mut c = sample(&mut rng, x.len(), cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            // Perturb in the tape's precision so the step is exactly representable.
            let base = T::from_f64(x.data()[c]);
            let h = T::from_f64(cfg.step);
            let (plus, minus) = (base + h, base - h);
            xs[ii].data_mut()[c] = plus.as_f64();
            let (fp, _) = run(&xs, false)?;
            xs[ii].data_mut()[c] = minus.as_f64();
            let (fm, _) = run(&xs, false)?;
            xs[ii].data_mut()[c] = x.data()[c];
            let numeric = (fp - fm) / (plus.as_f64() - minus.as_f64());
            let a = analytic[ii].data()[c];
            max_num = max_num.max(numeric.abs()).max(a.abs());
            max_err = max_err.max((a - numeric).abs());
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        max_rel_err: if max_num > 0.0 { max_err / max_num } else { max_err },
        max_abs_err: max_err,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let rep = gradcheck::<f32, _>(
            |t, v| t.sum(v[0]),
            &[x],
            &GradcheckConfig::f32_default(),
        )
        .unwrap();
        assert!(rep.max_abs_err < 1e-3, "{rep:?}");
        assert_eq!(rep.checked, 3);
    }

    #[test]
    fn square_sum_in_f64_shadow_mode() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let rep = gradcheck::<f64, _>(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            &GradcheckConfig::f64_default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep:?}");
    }
}
