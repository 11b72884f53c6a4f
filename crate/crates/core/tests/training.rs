//! Training loop: determinism, resume, augmentation and loss behavior.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvforge::geometry::{MeshKind, RigParams};
use uvforge::tensor::{Tape, Tensor};
use uvforge::texture::TextureKind;
use uvforge::trainer::{
    make_dataset, masked_mse, predict, Ablation, Augment, GeometrySet, ModelConfig, SampleSource, SceneSpec, TrainConfig,
    Trainer, ToyModel,
};

fn rig() -> RigParams {
    RigParams {
        width: 32,
        height: 32,
        ..RigParams::default()
    }
}

fn geos() -> GeometrySet {
    GeometrySet::build(&[MeshKind::Quad, MeshKind::Uvsphere], &rig(), 32, 2).unwrap()
}

fn model(seed: u64, ablation: Ablation) -> ToyModel {
    ToyModel::new(
        ModelConfig {
            widths: [8, 16],
            heads: 2,
            bands: 2,
            init_seed: seed,
        },
        ablation,
    )
    .unwrap()
}

fn train_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed: 11,
        lr: 3e-3,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn source() -> SampleSource {
    SampleSource::Procedural {
        meshes: vec![MeshKind::Quad, MeshKind::Uvsphere],
        textures: vec![TextureKind::Checker, TextureKind::Smooth],
    }
}

fn param_bits(m: &ToyModel) -> Vec<u32> {
    m.params.iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

fn trained(steps: u64) -> Trainer {
    let cfg = train_cfg(steps);
    let mut t = Trainer::new(model(5, Ablation::Full), &cfg);
    t.run(&cfg, &source(), &geos(), None, |_| {}).unwrap();
    t
}

#[test]
fn zero_steps_leave_the_model_untouched() {
    let t = trained(0);
    assert_eq!(param_bits(&t.model), param_bits(&model(5, Ablation::Full)));
    assert!(t.log.is_empty());
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let (a, b) = (trained(6), trained(6));
    assert_eq!(param_bits(&a.model), param_bits(&b.model));
    let losses = |t: &Trainer| t.log.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert!(a.log.iter().all(|e| e.loss.is_finite()));
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let full = trained(6);
    let first = trained(3);
    let bytes = first.checkpoint_bytes();
    let cfg = train_cfg(6);
    let mut resumed = Trainer::new(model(5, Ablation::Full), &cfg);
    resumed.restore(&bytes).unwrap();
    assert_eq!(resumed.step, 3);
    resumed.run(&cfg, &source(), &geos(), None, |_| {}).unwrap();
    assert_eq!(param_bits(&resumed.model), param_bits(&full.model));
    let tail: Vec<u64> = full.log[3..].iter().map(|e| e.loss.to_bits()).collect();
    assert_eq!(resumed.log.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>(), tail);
}

#[test]
fn mismatched_arm_is_rejected() {
    let cfg = TrainConfig {
        ablation: Ablation::NoUvAttn,
        ..train_cfg(1)
    };
    let mut t = Trainer::new(model(5, Ablation::Full), &cfg);
    let err = t.run(&cfg, &source(), &geos(), None, |_| {}).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn view_dropout_never_masks_every_view(seed in any::<u64>(), views in 1usize..8, p in 0.0f64..0.999) {
        let cfg = TrainConfig { drop_view_p: p, ..TrainConfig::default() };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Augment::draw(&cfg, views, &mut r);
        prop_assert!(a.active.iter().any(|&x| x));
        let mut order = a.order.clone();
        order.sort_unstable();
        prop_assert_eq!(order, (0..views).collect::<Vec<_>>());
        if let Some((v, _, s, _)) = a.corruption {
            prop_assert!(v < views);
            prop_assert!(cfg.corruption_strengths.contains(&s));
        }
    }
}

fn mse(pred: &Tensor<f32>, target: &Tensor<f32>, coverage: &[bool]) -> f32 {
    let mut t = Tape::<f32>::new();
    let (p, q) = (t.constant(pred.clone()), t.constant(target.clone()));
    let l = masked_mse(&mut t, p, q, coverage).unwrap();
    t.value(l).item()
}

#[test]
fn masked_loss_examples() {
    let target = Tensor::from_fn([3, 2, 2], |k| k as f32 / 12.0);
    let cov = [true, true, false, true];
    assert_eq!(mse(&target, &target, &cov), 0.0);
    let shifted = Tensor::from_fn([3, 2, 2], |k| k as f32 / 12.0 + 0.1);
    assert!((mse(&shifted, &target, &cov) - 0.01).abs() < 1e-6);
    // Uncovered texels do not count, whatever they hold.
    let mut wild = target.clone();
    for ch in 0..3 {
        wild.data_mut()[ch * 4 + 2] = 9.0;
    }
    assert_eq!(mse(&wild, &target, &cov), 0.0);
}

#[test]
fn empty_coverage_is_an_error() {
    let t0 = Tensor::<f32>::zeros([3, 2, 2]);
    let mut t = Tape::<f32>::new();
    let (p, q) = (t.constant(t0.clone()), t.constant(t0));
    assert!(masked_mse(&mut t, p, q, &[false; 4]).is_err());
}

/// A model with every parameter perturbed so that all branches contribute.
fn busy_model(ablation: Ablation) -> ToyModel {
    let mut m = model(9, ablation);
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for id in m.params.ids().collect::<Vec<_>>() {
        m.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.2..0.2));
    }
    m
}

fn scene() -> (GeometrySet, uvforge::trainer::TrainSample) {
    let g = geos();
    let s = make_dataset(
        &[SceneSpec {
            mesh: MeshKind::Uvsphere,
            texture: TextureKind::Checker,
            seed: 4,
        }],
        &g,
    )
    .unwrap()
    .remove(0);
    (g, s)
}

fn texture_bits(t: &[[f32; 3]]) -> Vec<u32> {
    t.iter().flatten().map(|x| x.to_bits()).collect()
}

#[test]
fn prediction_ignores_view_order() {
    let (g, s) = scene();
    let geo = g.get(MeshKind::Uvsphere).unwrap();
    for arm in [Ablation::Full, Ablation::NoPosEnc, Ablation::NoUvAttn, Ablation::NoRefAttn] {
        let m = busy_model(arm);
        let n = geo.views.len();
        let base = predict(&m, geo, &s.view_colors, &Augment::none(n)).unwrap();
        let shuffled = Augment {
            order: vec![3, 5, 0, 2, 4, 1],
            ..Augment::none(n)
        };
        let other = predict(&m, geo, &s.view_colors, &shuffled).unwrap();
        assert_eq!(texture_bits(&base.texture), texture_bits(&other.texture), "{}", arm.name());
    }
}

#[test]
fn dropped_views_have_no_influence() {
    let (g, s) = scene();
    let geo = g.get(MeshKind::Uvsphere).unwrap();
    let m = busy_model(Ablation::Full);
    let mut aug = Augment::none(geo.views.len());
    aug.active[2] = false;
    let a = predict(&m, geo, &s.view_colors, &aug).unwrap();
    let mut colors = s.view_colors.clone();
    colors[2].iter_mut().for_each(|c| *c = [1.0, 0.0, 1.0]);
    let b = predict(&m, geo, &colors, &aug).unwrap();
    assert_eq!(texture_bits(&a.texture), texture_bits(&b.texture));
    // With the view active the recoloring is visible.
    let c = predict(&m, geo, &colors, &Augment::none(geo.views.len())).unwrap();
    assert_ne!(texture_bits(&a.texture), texture_bits(&c.texture));
}
