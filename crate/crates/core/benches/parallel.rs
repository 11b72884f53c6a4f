//! Data-parallel kernels on a one-thread pool versus the default pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;
use uvforge::geometry::{MeshKind, RigParams};
use uvforge::tensor::{AttentionSpec, Tape, Tensor};
use uvforge::trainer::SceneGeometry;

fn attention_forward(q: &Tensor<f32>, k: &Tensor<f32>, spec: &AttentionSpec) -> f32 {
    let mut t = Tape::<f32>::new();
    let (qv, kv) = (t.constant(q.clone()), t.constant(k.clone()));
    let out = t.attention(qv, kv, kv, spec).unwrap();
    t.value(out).data()[0]
}

fn bench(c: &mut Criterion) {
    let pools = [
        ("sequential", ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("rayon", ThreadPoolBuilder::new().build().unwrap()),
    ];

    let mut r = ChaCha8Rng::seed_from_u64(0);
    let q = Tensor::from_fn([256, 64], |_| r.gen_range(-1.0f32..1.0));
    let k = Tensor::from_fn([6 * 144, 64], |_| r.gen_range(-1.0f32..1.0));
    let spec = AttentionSpec {
        heads: 2,
        key_groups: vec![144; 6],
        key_mask: (0..6 * 144).map(|i| i % 5 != 0).collect(),
    };
    let mut g = c.benchmark_group("attention_256x864");
    for (name, pool) in &pools {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| attention_forward(&q, &k, &spec)))
        });
    }
    g.finish();

    let rig = RigParams {
        width: 96,
        height: 96,
        ..RigParams::default()
    };
    let mut g = c.benchmark_group("scene_geometry_uvsphere_128");
    g.sample_size(10);
    for (name, pool) in &pools {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| SceneGeometry::build(MeshKind::Uvsphere, &rig, 128, 4).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
