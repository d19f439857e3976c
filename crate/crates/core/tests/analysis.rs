//! Entanglement metrics and PCA export.

use deconfound::analysis::{
    all_taps, capture_means, entanglement_metrics, layer_profile, pca3, TapCapture, TapId,
};
use deconfound::model::{
    ConfounderDictionary, DictionarySet, Modality, ModelBundle, ModelConfig, Placement,
};
use deconfound::numkit::Tensor;
use deconfound::par::Exec;
use deconfound::world::{build_world, cooccurrence_counts, CooccurrenceMatrix, World, WorldConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn gaussian_rows(n: usize, w: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| (0..w).map(|_| normal.sample(&mut rng)).collect()).collect()
}

fn cooc() -> CooccurrenceMatrix {
    let w = build_world(&WorldConfig::default()).unwrap();
    cooccurrence_counts(w.k(), &w.sample_scenes(2000, 1)).unwrap()
}

fn orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let rows = gaussian_rows(n, n, seed);
    DMatrix::from_fn(n, n, |i, j| rows[i][j]).qr().q()
}

fn transform(means: &[Vec<f64>], q: &DMatrix<f64>, scale: f64) -> Vec<Vec<f64>> {
    means
        .iter()
        .map(|r| {
            (0..q.ncols())
                .map(|j| scale * r.iter().enumerate().map(|(i, v)| v * q[(i, j)]).sum::<f64>())
                .collect()
        })
        .collect()
}

proptest! {
    #[test]
    fn metrics_ignore_rotation_and_positive_scaling(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let m = cooc();
        let means = gaussian_rows(12, 8, seed);
        let q = orthogonal(8, seed ^ 0xabc);
        let a = entanglement_metrics(&TapCapture::from_means(TapId::PreHead, Modality::Visual, means.clone()), &m, 0, 3)
            .unwrap();
        let b = entanglement_metrics(
            &TapCapture::from_means(TapId::PreHead, Modality::Visual, transform(&means, &q, scale)),
            &m,
            0,
            3,
        )
        .unwrap();
        prop_assert!((a.separation_ratio - b.separation_ratio).abs() < 1e-9);
        prop_assert!((a.spearman_rho - b.spearman_rho).abs() < 1e-9);
    }

    #[test]
    fn projected_distances_never_exceed_full_distances(seed in any::<u64>(), k in 4usize..16, w in 3usize..10) {
        let means = gaussian_rows(k, w, seed);
        let p = pca3(&means).unwrap();
        for i in 0..k {
            for j in 0..k {
                let full: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let low: f64 = (0..3).map(|c| (p.coords[i][c] - p.coords[j][c]).powi(2)).sum::<f64>().sqrt();
                prop_assert!(low <= full + 1e-9);
            }
        }
        prop_assert!(p.explained[0] >= p.explained[1] && p.explained[1] >= p.explained[2]);
    }
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations, sorted by
/// descending eigenvalue.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> Vec<(f64, Vec<f64>)> {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|i| (a[i][i], v.iter().map(|r| r[i]).collect())).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs
}

#[test]
fn pca_matches_covariance_eigendecomposition() {
    for seed in 0..10 {
        let (k, w) = (12, 7);
        let means = gaussian_rows(k, w, seed);
        let mu: Vec<f64> = (0..w).map(|j| means.iter().map(|r| r[j]).sum::<f64>() / k as f64).collect();
        let x: Vec<Vec<f64>> = means.iter().map(|r| r.iter().zip(&mu).map(|(a, b)| a - b).collect()).collect();
        let cov: Vec<Vec<f64>> =
            (0..w).map(|i| (0..w).map(|j| x.iter().map(|r| r[i] * r[j]).sum::<f64>()).collect()).collect();
        let eig = jacobi_eigen(cov);
        let total: f64 = eig.iter().map(|e| e.0).sum();
        let p = pca3(&means).unwrap();
        for c in 0..3 {
            let axis = &eig[c].1;
            let proj: Vec<f64> = x.iter().map(|r| r.iter().zip(axis).map(|(a, b)| a * b).sum()).collect();
            let sign = if proj.iter().zip(&p.coords).map(|(a, b)| a * b[c]).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            for (i, v) in proj.iter().enumerate() {
                assert!((sign * v - p.coords[i][c]).abs() < 1e-8, "seed {seed} comp {c}");
            }
            assert!((eig[c].0 / total - p.explained[c]).abs() < 1e-10);
        }
    }
}

#[test]
fn data_in_a_three_dimensional_subspace_is_reproduced_exactly() {
    let low = gaussian_rows(9, 3, 4);
    let q = orthogonal(6, 5);
    let padded: Vec<Vec<f64>> = low.iter().map(|r| r.iter().copied().chain([0.0; 3]).collect()).collect();
    let means = transform(&padded, &q, 1.0);
    let p = pca3(&means).unwrap();
    assert!((p.explained.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for i in 0..9 {
        for j in 0..9 {
            let full: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let low: f64 = (0..3).map(|c| (p.coords[i][c] - p.coords[j][c]).powi(2)).sum::<f64>().sqrt();
            assert!((full - low).abs() < 1e-9);
        }
    }
}

#[test]
fn rank_deficient_data_is_padded_and_flagged() {
    let base = gaussian_rows(6, 2, 8);
    let means: Vec<Vec<f64>> = base.iter().map(|r| vec![r[0], r[1], r[0] + r[1], 0.0]).collect();
    let p = pca3(&means).unwrap();
    assert!(p.rank_deficient);
    assert!(p.coords.iter().all(|c| c[2] == 0.0));
}

#[test]
fn isotropic_clouds_spread_variance_evenly() {
    let p = pca3(&gaussian_rows(20_000, 6, 9)).unwrap();
    for e in p.explained {
        assert!((e - 1.0 / 6.0).abs() < 0.02, "{:?}", p.explained);
    }
}

#[test]
fn nearer_partners_give_a_ratio_below_one() {
    let m = cooc();
    let mut means = gaussian_rows(12, 8, 3);
    for p in [1, 2, 3] {
        means[p] = means[0].iter().enumerate().map(|(i, v)| v + 0.01 * (i as f64 + p as f64)).collect();
    }
    let r = entanglement_metrics(&TapCapture::from_means(TapId::PreHead, Modality::Visual, means), &m, 0, 3).unwrap();
    let mut partners = r.partners.clone();
    partners.sort_unstable();
    assert_eq!(partners, vec![1, 2, 3]);
    assert!(r.separation_ratio < 1.0);
}

fn world(noise: f64) -> World {
    build_world(&WorldConfig {
        noise_std: noise,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn causal(w: &World, seed: u64) -> ModelBundle {
    let cfg = ModelConfig::default().with_placement(Placement::Both);
    let mut b = ModelBundle::init(&cfg, w, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut d = |m| ConfounderDictionary {
        modality: m,
        entries: Tensor::randn(&[w.k(), cfg.sigma], 1.0, &mut rng),
        sample_counts: vec![1; w.k()],
    };
    b.attach_dictionaries(&DictionarySet {
        projector_visual: Some(d(Modality::Visual)),
        final_visual: Some(d(Modality::Visual)),
        final_textual: Some(d(Modality::Textual)),
    })
    .unwrap();
    b
}

#[test]
fn encoder_tap_is_the_prototypes_and_arm_independent() {
    let w = world(0.0);
    let scenes = w.sample_scenes(600, 2);
    let base = ModelBundle::init(&ModelConfig::default(), &w, 7).unwrap();
    let caps = capture_means(&base, &scenes, &[TapId::EncoderOut], Modality::Visual, Exec::Sequential).unwrap();
    for c in 0..w.k() {
        assert_eq!(caps[0].means[c].as_slice(), w.prototypes.row(c));
    }
    let m = cooc();
    let a = layer_profile(&base, &scenes, &m, 0, 3, Exec::Parallel).unwrap();
    let b = layer_profile(&causal(&w, 7), &scenes, &m, 0, 3, Exec::Parallel).unwrap();
    assert_eq!(a.len(), all_taps(4).len());
    assert_eq!(a[0], b[0]);
}

#[test]
fn disjoint_halves_give_matching_means() {
    let w = world(0.1);
    let b = ModelBundle::init(&ModelConfig::default(), &w, 3).unwrap();
    // Pre-head states have roughly unit spread per coordinate, so each half
    // needs a few thousand samples of a category for 0.05 RMS.
    let scenes = w.sample_scenes(12_000, 5);
    let (l, r) = scenes.split_at(6000);
    let taps = [TapId::ProjectorOut, TapId::Layer(2), TapId::PreHead];
    let cl = capture_means(&b, l, &taps, Modality::Visual, Exec::Parallel).unwrap();
    let cr = capture_means(&b, r, &taps, Modality::Visual, Exec::Parallel).unwrap();
    assert_eq!(cl.len(), 3);
    for (a, b) in cl.iter().zip(&cr) {
        for c in 0..w.k() {
            let rms = (a.means[c].iter().zip(&b.means[c]).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                / a.means[c].len() as f64)
                .sqrt();
            assert!(rms < 0.05, "{} category {c}: {rms}", a.tap);
        }
    }
}

#[test]
fn textual_positions_have_no_encoder_tap() {
    let w = world(0.1);
    let b = ModelBundle::init(&ModelConfig::default(), &w, 3).unwrap();
    let scenes = w.sample_scenes(5, 5);
    assert!(capture_means(&b, &scenes, &[TapId::EncoderOut], Modality::Textual, Exec::Sequential).is_err());
    assert!(capture_means(&b, &scenes, &[TapId::Layer(9)], Modality::Visual, Exec::Sequential).is_err());
}
