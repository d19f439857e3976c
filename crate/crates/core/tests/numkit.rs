//! Tensor kernels and tape ops against naive oracles.

use deconfound::numkit::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows_are_distributions(row in row_strategy()) {
        let t = Tensor::new(vec![1, row.len()], row.clone()).unwrap();
        let s = t.softmax_rows().unwrap();
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (a, b) in s.data().iter().zip(naive_softmax(&row)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn softmax_is_shift_stable(row in row_strategy(), c in -1e3f64..1e3) {
        let a = Tensor::new(vec![1, row.len()], row.clone()).unwrap().softmax_rows().unwrap();
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        let b = Tensor::new(vec![1, row.len()], shifted).unwrap().softmax_rows().unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..7, k in 1usize..9, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                prop_assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance(row in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let spread = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - row.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let w = row.len();
        let t = Tensor::new(vec![1, w], row).unwrap();
        let y = t.layer_norm(&vec![1.0; w], &vec![0.0; w]).unwrap();
        let mean = y.data().iter().sum::<f64>() / w as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gather_then_backward_scatters_counts(ids in prop::collection::vec(0usize..5, 1..12)) {
        let mut g = Graph::new();
        let table = g.param(&Tensor::filled(&[5, 3], 1.0)).unwrap();
        let rows = g.gather_rows(table, &ids).unwrap();
        let s = g.sum(rows).unwrap();
        let grads = g.backward(s).unwrap();
        let gt = grads.wrt(table).unwrap();
        for r in 0..5 {
            let n = ids.iter().filter(|&&i| i == r).count() as f64;
            prop_assert!(gt.row(r).iter().all(|&v| v == n));
        }
    }
}

fn run_sequence(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[8, 8], 0.5, &mut rng);
    let mut g = Graph::new();
    let (xv, wv) = (g.param(&x).unwrap(), g.param(&w).unwrap());
    let h = g.matmul(xv, wv).unwrap();
    let h = g.gelu(h).unwrap();
    let att = g.segment_attention(h, h, h, &[(0, 4), (4, 2)], 0.3).unwrap();
    let loss = g.cross_entropy(att, &[0, 1, 2, 3, 4, 5]).unwrap();
    let value = g.value(att).data().to_vec();
    let grads = g.backward(loss).unwrap();
    (value, grads.wrt(wv).unwrap().data().to_vec())
}

#[test]
fn identical_op_sequences_are_bitwise_identical() {
    let (a, ga) = run_sequence(4);
    let (b, gb) = run_sequence(4);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn non_finite_values_are_rejected_at_construction() {
    let mut g = Graph::new();
    assert!(g.constant(Tensor::new(vec![1, 2], vec![1.0, f64::NAN]).unwrap()).is_err());
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}
