//! Adjustment math against full-joint enumeration of a generative model.

use deconfound::causal_core::{
    approximation_gap_report, backdoor_adjust_exact, nwgm_predict, observational, wgm, DiscreteSCM, LogLinearModel,
    Table,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{max_diff, random_dist, random_generative};

fn assert_normalized(t: &Table) {
    for row in t {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn adjustment_matches_enumeration_on_fuzzed_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (nx, nz, ny) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(2..=4));
        let m = random_generative(nx, nz, ny, &mut rng);
        let scm = m.scm();
        let obs = observational(&scm).unwrap();
        let int = backdoor_adjust_exact(&scm).unwrap();
        assert_normalized(&obs);
        assert_normalized(&int);
        worst = worst.max(max_diff(&obs, &m.observational_oracle()));
        worst = worst.max(max_diff(&int, &m.interventional_oracle()));
    }
    assert!(worst < 1e-12, "max error {worst:e}");
}

#[test]
fn small_fixed_shapes_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let two = random_generative(2, 2, 2, &mut rng);
    assert!(max_diff(&observational(&two.scm()).unwrap(), &two.observational_oracle()) < 1e-12);
    let three = random_generative(3, 3, 3, &mut rng);
    assert!(max_diff(&backdoor_adjust_exact(&three.scm()).unwrap(), &three.interventional_oracle()) < 1e-12);
}

#[test]
fn unnormalized_rows_are_rejected() {
    let bad = DiscreteSCM::new(vec![0.5, 0.6], vec![vec![0.5, 0.5]], vec![vec![vec![1.0], vec![1.0]]]);
    assert!(bad.is_err());
    let bad = DiscreteSCM::new(vec![1.0], vec![vec![1.0]], vec![vec![vec![0.7, 0.2]]]);
    assert!(bad.is_err());
}

#[test]
fn single_confounder_value_makes_nwgm_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let (nx, ny) = (rng.random_range(1..=4), rng.random_range(2..=5));
        let model = LogLinearModel {
            g_x: (0..nx).map(|_| (0..ny).map(|_| rng.random_range(-3.0..3.0)).collect()).collect(),
            g_z: vec![(0..ny).map(|_| rng.random_range(-3.0..3.0)).collect()],
            p_z: vec![1.0],
            p_z_given_x: vec![vec![1.0]; nx],
        };
        let r = approximation_gap_report(&model).unwrap();
        assert!(r.max_gap < 1e-12, "{}", r.max_gap);
    }
}

#[test]
fn small_score_spread_gives_small_gap() {
    let model = LogLinearModel {
        g_x: vec![vec![0.3, -0.2, 1.0], vec![-1.0, 0.5, 0.0]],
        g_z: vec![vec![0.0, 0.1, 0.05], vec![0.1, 0.0, -0.0]],
        p_z: vec![0.5, 0.5],
        p_z_given_x: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
    };
    let r = approximation_gap_report(&model).unwrap();
    assert!(r.max_gap < 0.01, "{}", r.max_gap);
    assert!(r.max_gap > 0.0);
    assert_normalized(&r.nwgm);
}

#[test]
fn nwgm_gap_is_reported_for_a_random_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Table = (0..3).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let p_z = random_dist(3, &mut rng);
    let approx = nwgm_predict(&scores, &p_z).unwrap();
    // Exact adjustment of softmax(f(z, ·)) under the prior.
    let exact: Vec<f64> = (0..4)
        .map(|y| {
            scores
                .iter()
                .zip(&p_z)
                .map(|(row, p)| {
                    let z: f64 = row.iter().map(|s| s.exp()).sum();
                    p * row[y].exp() / z
                })
                .sum()
        })
        .collect();
    let gap = approx.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap.is_finite());
    assert!((approx.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

fn dist_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    })
}

proptest! {
    #[test]
    fn unconfounded_models_have_no_adjustment(
        (nx, nz, ny) in (1usize..=4, 1usize..=4, 2usize..=4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p_z = random_dist(nz, &mut rng);
        let p_y = (0..nx).map(|_| (0..nz).map(|_| random_dist(ny, &mut rng)).collect()).collect();
        let scm = DiscreteSCM::new(p_z.clone(), vec![p_z; nx], p_y).unwrap();
        let d = max_diff(&observational(&scm).unwrap(), &backdoor_adjust_exact(&scm).unwrap());
        prop_assert!(d < 1e-12, "{}", d);
    }

    #[test]
    fn wgm_of_exponentials_is_exponential_of_mean(
        f in prop::collection::vec(-5.0f64..5.0, 1..8),
        seed in any::<u64>(),
    ) {
        let p = random_dist(f.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        let values: Vec<f64> = f.iter().map(|v| v.exp()).collect();
        let expected = f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>().exp();
        let got = wgm(&values, &p).unwrap();
        prop_assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn z_invariant_scores_make_nwgm_exact(
        row in prop::collection::vec(-4.0f64..4.0, 2..6),
        p_z in (1usize..6).prop_flat_map(dist_strategy),
    ) {
        let scores: Table = vec![row.clone(); p_z.len()];
        let nwgm = nwgm_predict(&scores, &p_z).unwrap();
        let z: f64 = row.iter().map(|s| s.exp()).sum();
        for (a, s) in nwgm.iter().zip(&row) {
            prop_assert!((a - s.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn nwgm_output_is_a_distribution(
        p_z in (1usize..5).prop_flat_map(dist_strategy),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Table = p_z.iter().map(|_| (0..4).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let out = nwgm_predict(&scores, &p_z).unwrap();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(out.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn wgm_rejects_nonpositive_values() {
    assert!(wgm(&[1.0, 0.0], &[0.5, 0.5]).is_err());
    assert!((wgm(&[2.0, 8.0], &[0.5, 0.5]).unwrap() - 4.0).abs() < 1e-15);
    assert!((wgm(&[3.0; 4], &[0.25; 4]).unwrap() - 3.0).abs() < 1e-15);
}
