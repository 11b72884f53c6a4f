//! Finite-difference gradient checks of every differentiable op, the parallel
//! block, the position encoder and the full model. Shared by the gradient
//! tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvforge::attention::{parallel_block, BlockContext, BlockWeights, TokenGrid};
use uvforge::encoding::PosEncoderWeights;
use uvforge::geometry::{MeshKind, RigParams};
use uvforge::tensor::{gradcheck, AttentionSpec, GradcheckConfig, GradcheckReport, ParamSet, Tape, Tensor, Var};
use uvforge::texture::TextureKind;
use uvforge::trainer::{batch_loss, make_dataset, Ablation, Augment, GeometrySet, ModelConfig, SceneSpec, ToyModel};
use uvforge::Result;

pub const REL_TOL: f64 = 1e-3;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn cfg(seed: u64) -> GradcheckConfig {
    GradcheckConfig {
        seed,
        ..GradcheckConfig::f32_default()
    }
}

fn check(seed: u64, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f32>, &[Var]) -> Result<Var>) -> GradcheckReport {
    gradcheck::<f32, _>(f, inputs, &cfg(seed)).expect("gradcheck runs")
}

type Case = fn(u64) -> GradcheckReport;

fn matmul(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4, 5])];
    check(seed, &xs, |t, v| t.matmul(v[0], v[1]))
}

fn add_sub_mul(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[2, 3, 4]), rand_t(&mut r, &[2, 3, 4]), rand_t(&mut r, &[2, 3, 4])];
    check(seed, &xs, |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.sub(a, v[2])?;
        t.mul(b, v[1])
    })
}

fn scale(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[7])];
    check(seed, &xs, |t, v| t.scale(v[0], -1.75))
}

fn biases(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [
        rand_t(&mut r, &[5, 3]),
        rand_t(&mut r, &[3]),
        rand_t(&mut r, &[3, 2, 2]),
        rand_t(&mut r, &[3]),
    ];
    check(seed, &xs, |t, v| {
        let a = t.add_row_bias(v[0], v[1])?;
        let b = t.add_channel_bias(v[2], v[3])?;
        let a = t.sum(a)?;
        let b = t.sum(b)?;
        t.mul(a, b)
    })
}

fn relu(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_away(&mut r, &[4, 6])];
    check(seed, &xs, |t, v| t.relu(v[0]))
}

fn silu(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[4, 6])];
    check(seed, &xs, |t, v| t.silu(v[0]))
}

fn softmax(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[3, 5])];
    check(seed, &xs, |t, v| t.softmax(v[0]))
}

fn layer_norm(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[3, 6])];
    check(seed, &xs, |t, v| t.layer_norm(v[0]))
}

fn conv2d(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[2, 6, 6]), rand_t(&mut r, &[3, 2, 3, 3]), rand_t(&mut r, &[3])];
    check(seed, &xs, |t, v| {
        let a = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let b = t.conv2d(v[0], v[1], None, 2, 1)?;
        let a = t.pixel_unshuffle(a, 2)?;
        let a = t.sum(a)?;
        let b = t.sum(b)?;
        t.mul(a, b)
    })
}

fn shuffles(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[2, 4, 4]), rand_t(&mut r, &[8, 2, 2])];
    check(seed, &xs, |t, v| {
        let a = t.pixel_unshuffle(v[0], 2)?;
        let b = t.pixel_shuffle(v[1], 2)?;
        let b = t.pixel_unshuffle(b, 2)?;
        t.mul(a, b)
    })
}

fn layout(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[3, 2, 2]), rand_t(&mut r, &[2, 3])];
    check(seed, &xs, |t, v| {
        let toks = t.to_tokens(v[0])?;
        let both = t.concat_rows(&[toks, v[1]])?;
        let tr = t.transpose(both)?;
        let flat = t.reshape(tr, [18])?;
        let back = t.from_tokens(toks, 2, 2)?;
        let s = t.sum(back)?;
        let sq = t.mul(flat, flat)?;
        let total = t.sum(sq)?;
        t.mul(total, s)
    })
}

fn attention(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[5, 4]), rand_t(&mut r, &[6, 4]), rand_t(&mut r, &[6, 4])];
    let spec = AttentionSpec {
        heads: 2,
        key_groups: vec![3, 3],
        key_mask: vec![true, false, true, true, true, false],
    };
    check(seed, &xs, move |t, v| t.attention(v[0], v[1], v[2], &spec))
}

/// Every parameter of `ps` as an f64 input, zero-initialized ones randomized.
fn randomized(ps: &ParamSet, r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    ps.iter().map(|(_, t)| {
        let mut x = t.cast::<f64>();
        for v in x.data_mut() {
            *v = 0.5 * *v + 0.3 * r.gen_range(-1.0..1.0);
        }
        x
    }).collect()
}

/// 8 UV tokens, 2 views × 4 tokens, 2 heads.
fn parallel_block_case(seed: u64) -> GradcheckReport {
    let c = 4;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let w = BlockWeights::new(&mut ps, &mut r, "b", c, c, 2, true, true);
    let np = ps.len();
    let mut xs = randomized(&ps, &mut r);
    for _ in 0..4 {
        xs.push(rand_t(&mut r, &[8, c]));
    }
    let uv_grid = TokenGrid::single(2, 4, vec![true, true, true, false, true, true, true, true]).unwrap();
    let view_grid = TokenGrid::multiview(2, 2, &[vec![true, true, false, true], vec![true; 4]]).unwrap();
    check(seed, &xs, move |t, v| {
        let (p, x) = v.split_at(np);
        let ctx = BlockContext {
            uv_grid: &uv_grid,
            view_grid: &view_grid,
            f_view: x[1],
            p_uv: Some(x[2]),
            p_view: Some(x[3]),
        };
        Ok(parallel_block(t, p, &w, x[0], &ctx)?.h)
    })
}

fn encoder(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let enc = PosEncoderWeights::new(&mut ps, &mut r, "pos", 1, &[4, 4]);
    let np = ps.len();
    let mut xs = randomized(&ps, &mut r);
    xs.push(rand_t(&mut r, &[12, 16, 16]));
    let coverage: Vec<bool> = (0..256).map(|k| (k % 16) < 12 || k < 64).collect();
    check(seed, &xs, move |t, v| {
        let (p, x) = v.split_at(np);
        let levels = enc.forward(t, p, x[0], &coverage)?;
        let a = t.sum(levels[0])?;
        let b = t.to_tokens(levels[1])?;
        let b = t.layer_norm(b)?;
        let b = t.sum(b)?;
        let sq = t.mul(a, a)?;
        t.add(sq, b)
    })
}

/// Masked loss of the full model on a 32×32 atlas. Checks a handful of
/// parameters spread over every component.
fn full_model(seed: u64) -> GradcheckReport {
    let rig = RigParams {
        width: 32,
        height: 32,
        ..RigParams::default()
    };
    let geos = GeometrySet::build(&[MeshKind::Uvsphere], &rig, 32, 2).unwrap();
    let geo = geos.get(MeshKind::Uvsphere).unwrap();
    let spec = SceneSpec {
        mesh: MeshKind::Uvsphere,
        texture: TextureKind::Smooth,
        seed,
    };
    let samples = make_dataset(&[spec], &geos).unwrap();
    let model = ToyModel::new(
        ModelConfig {
            widths: [4, 8],
            heads: 2,
            bands: 2,
            init_seed: seed,
        },
        Ablation::Full,
    )
    .unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let all = randomized(&model.params, &mut r);
    let names = ["stem.w", "pos.entry.w", "block0.ref.q.w", "block1.uv.k.w", "ffn2.b.w", "up.w", "head.w"];
    let picked: Vec<usize> = names
        .iter()
        .map(|n| model.params.id_of(n).unwrap_or_else(|| panic!("no parameter {n}")).index())
        .collect();
    let xs: Vec<Tensor<f64>> = picked.iter().map(|&i| all[i].clone()).collect();
    let augs = [Augment::none(geo.views.len())];
    let cfg = GradcheckConfig {
        max_coords: 6,
        ..cfg(seed)
    };
    gradcheck::<f32, _>(
        |t, v| {
            let mut p: Vec<Var> = all.iter().map(|x| t.constant(x.cast())).collect();
            for (&i, &var) in picked.iter().zip(v) {
                p[i] = var;
            }
            let loss = batch_loss(&model, t, &p, geo, &samples, &augs)?;
            t.scale(loss, 100.0)
        },
        &xs,
        &cfg,
    )
    .expect("gradcheck runs")
}

pub const CASES: [(&str, Case); 16] = [
    ("matmul", matmul),
    ("add_sub_mul", add_sub_mul),
    ("scale", scale),
    ("biases", biases),
    ("relu", relu),
    ("silu", silu),
    ("softmax", softmax),
    ("layer_norm", layer_norm),
    ("conv2d", conv2d),
    ("shuffles", shuffles),
    ("layout", layout),
    ("attention", attention),
    ("parallel_block", parallel_block_case),
    ("encoder", encoder),
    ("full_model", full_model),
    ("masked_attention_all_keys_masked", all_masked),
];

/// A query whose keys are all masked contributes nothing and passes no
/// gradient, while the other queries still differentiate normally.
fn all_masked(seed: u64) -> GradcheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let xs = [rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4, 4]), rand_t(&mut r, &[4, 4])];
    let spec = AttentionSpec {
        heads: 1,
        key_groups: vec![2, 2],
        key_mask: vec![false, true, false, true],
    };
    check(seed, &xs, move |t, v| t.attention(v[0], v[1], v[2], &spec))
}

/// Worst relative error of each case over seeds `0..seeds`.
pub fn run_all(seeds: u64) -> Vec<(&'static str, f64)> {
    CASES
        .iter()
        .map(|(name, case)| {
            let worst = (0..seeds).map(case).map(|r| r.max_rel_err).fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}
