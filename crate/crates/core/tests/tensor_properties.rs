//! Layout and normalization properties of tensor ops.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvforge::tensor::{AttentionSpec, Tape, Tensor};

fn random(seed: u64, shape: &[usize], scale: f32) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| scale * r.gen_range(-1.0f32..1.0))
}

#[test]
fn shuffle_inverts_unshuffle_at_factor_eight() {
    let x = random(0, &[120, 16, 16], 1.0);
    let mut t = Tape::<f32>::new();
    let v = t.constant(x.clone());
    let u = t.pixel_unshuffle(v, 8).unwrap();
    assert_eq!(t.shape(u), &[7680, 2, 2]);
    let back = t.pixel_shuffle(u, 8).unwrap();
    assert_eq!(t.value(back), &x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unshuffle_and_shuffle_are_inverse(seed in 0u64..1000, r_pow in 0u32..4, c in 1usize..4, bh in 1usize..3, bw in 1usize..3) {
        let r = 1usize << r_pow;
        let x = random(seed, &[c, bh * r, bw * r], 1.0);
        let mut t = Tape::<f32>::new();
        let v = t.constant(x.clone());
        let u = t.pixel_unshuffle(v, r).unwrap();
        let back = t.pixel_shuffle(u, r).unwrap();
        prop_assert_eq!(t.value(back), &x);
        let y = random(seed + 1, &[c * r * r, bh, bw], 1.0);
        let w = t.constant(y.clone());
        let s = t.pixel_shuffle(w, r).unwrap();
        let again = t.pixel_unshuffle(s, r).unwrap();
        prop_assert_eq!(t.value(again), &y);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_row_shifts(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..9, shift in -50.0f32..50.0) {
        let x = random(seed, &[rows, cols], 8.0);
        let mut t = Tape::<f32>::new();
        let v = t.constant(x.clone());
        let s = t.softmax(v).unwrap();
        for row in t.value(s).data().chunks(cols) {
            let total: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
        // A shift that is exact in f32 leaves the max-subtracted logits, and
        // hence the output, bit-identical.
        let shift = shift.round();
        let shifted = Tensor::from_fn([rows, cols], |k| x.data()[k] + shift);
        let exact = shifted.data().iter().zip(x.data()).all(|(a, b)| a - shift == *b);
        prop_assume!(exact);
        let w = t.constant(shifted);
        let s2 = t.softmax(w).unwrap();
        prop_assert_eq!(t.value(s2), t.value(s));
    }

    #[test]
    fn attention_rows_are_convex_and_masked_keys_get_nothing(seed in 0u64..1000, tq in 1usize..6, per in 1usize..4, heads in 1usize..3) {
        let c = 2 * heads;
        let tk = 2 * per;
        let q = random(seed, &[tq, c], 2.0);
        let k = random(seed + 1, &[tk, c], 2.0);
        let v = random(seed + 2, &[tk, c], 1.0);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut mask: Vec<bool> = (0..tk).map(|_| r.gen_bool(0.7)).collect();
        mask[0] = true;
        let spec = AttentionSpec { heads, key_groups: vec![per, per], key_mask: mask.clone() };
        let mut t = Tape::<f32>::new();
        let (qv, kv, vv) = (t.constant(q), t.constant(k), t.constant(v.clone()));
        let a = t.attention(qv, kv, vv, &spec).unwrap();
        let probs = t.attention_probs(a).unwrap().to_vec();
        for (idx, p) in probs.iter().enumerate() {
            if !mask[idx % tk] {
                prop_assert_eq!(*p, 0.0);
            }
        }
        let out = t.value(a).data().to_vec();
        for i in 0..tq {
            for ch in 0..c {
                let vals: Vec<f32> = (0..tk).filter(|&j| mask[j]).map(|j| v.data()[j * c + ch]).collect();
                let lo = vals.iter().cloned().fold(f32::MAX, f32::min);
                let hi = vals.iter().cloned().fold(f32::MIN, f32::max);
                let o = out[i * c + ch];
                prop_assert!(o >= lo - 1e-5 && o <= hi + 1e-5);
            }
        }
    }
}
