use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidswin::attention::{
    cyclic_shift_3d, scaled_dot_product_attention, window_partition_3d, window_reverse_3d, ShiftDirection, WindowSpec,
};
use vidswin::data::Manifest;
use vidswin::embedding::{patch_merging, tubelet_embed};
use vidswin::tensor::ops;
use vidswin::train::{train_test_split, EpochMetrics, RunMetrics};
use vidswin::{Tape, Tensor};

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..12, seed: u64) {
        let x = random(&[rows, cols], seed, 1e3);
        let p = ops::softmax(&x, -1).unwrap();
        for r in p.data().chunks(cols) {
            prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        // shift invariance
        let shifted = Tensor::from_fn(&[rows, cols], |i| x.data()[i] + 123.0).unwrap();
        prop_assert!(ops::softmax(&shifted, -1).unwrap().max_abs_diff(&p) <= 1e-12);
    }

    #[test]
    fn identity_matmul_is_exact(n in 1usize..10, m in 1usize..10, seed: u64) {
        let a = random(&[n, m], seed, 5.0);
        let mut tape = Tape::detached();
        prop_assert!(tape.matmul(&a, &Tensor::eye(m)).unwrap().bitwise_eq(&a));
        prop_assert!(tape.matmul(&Tensor::eye(n), &a).unwrap().bitwise_eq(&a));
    }

    #[test]
    fn gradients_are_linear_in_the_loss(n in 1usize..8, seed: u64) {
        let a = random(&[n, n], seed, 1.0);
        let b = random(&[n, n], seed ^ 1, 1.0);
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.watch(&a);
            let bb = tape.watch(&b);
            let l1 = |tape: &mut Tape| {
                let prod = tape.matmul(&x, &bb).unwrap();
                tape.sum(&prod).unwrap()
            };
            let l2 = |tape: &mut Tape| {
                let sq = tape.mul(&x, &x).unwrap();
                tape.sum(&sq).unwrap()
            };
            let loss = match which {
                1 => l1(&mut tape),
                2 => l2(&mut tape),
                _ => {
                    let (a, b) = (l1(&mut tape), l2(&mut tape));
                    tape.add(&a, &b).unwrap()
                }
            };
            tape.backward(&loss).unwrap().get_or_zeros(&x)
        };
        let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
        for i in 0..g12.len() {
            prop_assert!((g12[i] - g1[i] - g2[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn partition_reverse_roundtrip(
        wt in 1usize..4, wh in 1usize..4, ww in 1usize..4,
        nt in 1usize..3, nh in 1usize..3, nw in 1usize..3,
        d in 1usize..4, seed: u64,
    ) {
        let spec = WindowSpec::unshifted([wt, wh, ww]).unwrap();
        let grid = [wt * nt, wh * nh, ww * nw];
        let x = random(&[grid[0], grid[1], grid[2], d], seed, 1.0);
        let mut tape = Tape::detached();
        let w = window_partition_3d(&mut tape, &x, &spec).unwrap();
        prop_assert_eq!(w.shape(), &[nt * nh * nw, wt * wh * ww, d][..]);
        prop_assert!(window_reverse_3d(&mut tape, &w, &spec, grid).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn shift_roundtrip(t in 1usize..5, h in 1usize..9, w in 1usize..9, s in (0usize..10, 0usize..10, 0usize..10), seed: u64) {
        let x = random(&[t, h, w, 2], seed, 1.0);
        let shift = [s.0, s.1, s.2];
        let mut tape = Tape::detached();
        let f = cyclic_shift_3d(&mut tape, &x, shift, ShiftDirection::Forward).unwrap();
        prop_assert!(cyclic_shift_3d(&mut tape, &f, shift, ShiftDirection::Reverse).unwrap().bitwise_eq(&x));
        // The forward roll brings the token at `shift` to the origin.
        let src = [s.0 % t, s.1 % h, s.2 % w];
        prop_assert_eq!(f.at(&[0, 0, 0, 1]), x.at(&[src[0], src[1], src[2], 1]));
    }

    #[test]
    fn sdpa_output_is_a_convex_combination(n in 1usize..8, m in 1usize..8, dk in 1usize..16, dv in 1usize..5, seed: u64) {
        let q = random(&[n, dk], seed, 2.0);
        let k = random(&[m, dk], seed ^ 1, 2.0);
        let v = random(&[m, dv], seed ^ 2, 2.0);
        let mut tape = Tape::detached();
        let w = vidswin::attention::attention_weights(&mut tape, &q, &k, None).unwrap();
        for r in w.data().chunks(m) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let out = scaled_dot_product_attention(&mut tape, &q, &k, &v, None).unwrap();
        for c in 0..dv {
            let col: Vec<f64> = (0..m).map(|j| v.at(&[j, c])).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let o = out.at(&[i, c]);
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn sdpa_is_permutation_equivariant(n in 2usize..8, dk in 1usize..8, seed: u64) {
        let q = random(&[n, dk], seed, 1.0);
        let k = random(&[n, dk], seed ^ 1, 1.0);
        let v = random(&[n, 3], seed ^ 2, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1 + (seed as usize) % (n - 1));
        let rows = |t: &Tensor, cols: usize| {
            Tensor::from_fn(&[n, cols], |i| t.data()[perm[i / cols] * cols + i % cols]).unwrap()
        };
        let mut tape = Tape::detached();
        let out = scaled_dot_product_attention(&mut tape, &q, &k, &v, None).unwrap();
        // Permuting queries permutes outputs; permuting key/value pairs jointly changes nothing.
        let pq = scaled_dot_product_attention(&mut tape, &rows(&q, dk), &k, &v, None).unwrap();
        prop_assert!(pq.max_abs_diff(&rows(&out, 3)) <= 1e-12);
        let pkv = scaled_dot_product_attention(&mut tape, &q, &rows(&k, dk), &rows(&v, 3), None).unwrap();
        prop_assert!(pkv.max_abs_diff(&out) <= 1e-12);
    }

    #[test]
    fn split_is_an_exact_partition(items in proptest::collection::vec(0u32..50, 2..60), seed: u64) {
        let (a, b) = train_test_split(&items, 0.8, seed).unwrap();
        prop_assert_eq!(a.len(), ((0.8 * items.len() as f64).ceil() as usize).min(items.len() - 1));
        let mut all: Vec<u32> = a.iter().chain(&b).cloned().collect();
        all.sort();
        let mut orig = items.clone();
        orig.sort();
        prop_assert_eq!(all, orig);
        prop_assert_eq!(train_test_split(&items, 0.8, seed).unwrap(), (a, b));
    }

    #[test]
    fn manifest_save_load_is_idempotent(rows in proptest::collection::vec(("[a-z0-9_,\" ]{1,12}", 0usize..9, 0u8..3), 0..20)) {
        let mut text = String::from("path,label,split\n");
        let mut seen = std::collections::HashSet::new();
        for (p, l, s) in &rows {
            if !seen.insert(p.clone()) {
                continue;
            }
            let split = ["", "train", "test"][*s as usize];
            text.push_str(&format!("\"{}\",{l},{split}\n", p.replace('"', "\"\"")));
        }
        let m = Manifest::from_csv(&text).unwrap();
        let again = Manifest::from_csv(&m.to_csv().unwrap()).unwrap();
        prop_assert_eq!(&again, &m);
        prop_assert_eq!(again.to_csv().unwrap(), m.to_csv().unwrap());
    }

    #[test]
    fn metrics_csv_roundtrip(vals in proptest::collection::vec((0.0f64..1e4, 0.0f64..1e4, 0.0f64..=1.0, 0.0f64..=1.0, 0u64..100_000), 1..15)) {
        let mut m = RunMetrics::default();
        for (i, v) in vals.iter().enumerate() {
            m.push(EpochMetrics { epoch: i + 1, train_loss: v.0, val_loss: v.1, train_acc: v.2, val_acc: v.3, wall_ms: v.4 });
        }
        let back = RunMetrics::from_csv(&m.to_csv().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn token_count_is_conserved(t in 1usize..4, h in 1usize..5, w in 1usize..5, seed: u64) {
        // Frames sized so the grid has t×2h×2w tubelets of 2×4×4.
        let dims = [2 * t, 8 * h, 8 * w];
        let frames = random(&[dims[0], dims[1], dims[2], 3], seed, 0.5);
        let proj = random(&[96, 6], seed ^ 1, 0.1);
        let mut tape = Tape::detached();
        let g = tubelet_embed(&mut tape, &frames, [2, 4, 4], &proj, &Tensor::zeros(&[6]), false).unwrap();
        prop_assert_eq!(g.grid(), [t, 2 * h, 2 * w]);
        prop_assert_eq!(g.num_tokens() * 2 * 4 * 4 * 3, frames.len());
        let merged = patch_merging(&mut tape, &g, &Tensor::ones(&[24]), &Tensor::zeros(&[24]), &random(&[24, 12], seed ^ 2, 0.1)).unwrap();
        prop_assert_eq!(merged.grid(), [t, h, w]);
        prop_assert_eq!(merged.num_tokens() * 4, g.num_tokens());
        prop_assert_eq!(merged.dim(), 12);
    }
}
