//! Hallucination metrics against brute-force oracles.

use deconfound::evalkit::{
    aggregate_grid, build_pope_probes, chair_metrics, evaluate, grid_csv, partner_probes, partner_scene_sample,
    CaptionSample, EvalSettings, HallucinationReport, PopeRegime,
};
use deconfound::model::{ModelBundle, ModelConfig};
use deconfound::par::Exec;
use deconfound::world::{build_world, cooccurrence_counts, SceneInstance, World, WorldConfig, BOS, EOS};
use proptest::prelude::*;

fn world() -> World {
    build_world(&WorldConfig::default()).unwrap()
}

/// Counts with plain vectors: (hallucinated captions, mentions, hallucinated
/// mentions, truth, covered truth).
fn oracle(w: &World, caps: &[CaptionSample]) -> (usize, usize, usize, usize, usize) {
    let (mut hc, mut m, mut hm, mut t, mut cov) = (0, 0, 0, 0, 0);
    for c in caps {
        let mut mentioned: Vec<usize> = Vec::new();
        for &tok in &c.tokens {
            if let Some(cat) = w.vocabulary.token_category(tok) {
                if !mentioned.contains(&cat) {
                    mentioned.push(cat);
                }
            }
        }
        let bad = mentioned.iter().filter(|x| !c.truth.contains(x)).count();
        hc += usize::from(bad > 0);
        m += mentioned.len();
        hm += bad;
        t += c.truth.len();
        cov += c.truth.iter().filter(|x| mentioned.contains(x)).count();
    }
    (hc, m, hm, t, cov)
}

fn caption_strategy() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<usize>)>> {
    let one = (
        prop::collection::vec(0usize..12, 0..6),
        prop::collection::btree_set(0usize..12, 1..5),
    )
        .prop_map(|(mentions, truth)| (mentions, truth.into_iter().collect::<Vec<_>>()));
    prop::collection::vec(one, 1..20)
}

proptest! {
    #[test]
    fn chair_matches_set_arithmetic(raw in caption_strategy()) {
        let w = world();
        let caps: Vec<CaptionSample> = raw
            .into_iter()
            .map(|(mentions, truth)| {
                let mut tokens = vec![BOS];
                tokens.extend(mentions.iter().map(|&c| w.vocabulary.category_token(c)));
                tokens.push(EOS);
                CaptionSample { tokens, truth }
            })
            .collect();
        let s = chair_metrics(&w.vocabulary, &caps).unwrap();
        let (hc, m, hm, t, cov) = oracle(&w, &caps);
        prop_assert_eq!(s.chair_s, hc as f64 / caps.len() as f64);
        prop_assert_eq!(s.chair_i, if m == 0 { 0.0 } else { hm as f64 / m as f64 });
        prop_assert_eq!(s.recall, cov as f64 / t as f64);
        prop_assert!(s.chair_i <= 1.0 && s.recall <= 1.0 && s.chair_s <= 1.0);
    }

    #[test]
    fn negative_probes_never_name_a_present_category(seed in any::<u64>(), per_scene in 1usize..4) {
        let w = world();
        let scenes = w.sample_scenes(40, seed);
        let cooc = cooccurrence_counts(w.k(), &w.sample_scenes(300, seed ^ 1)).unwrap();
        for regime in PopeRegime::ALL {
            let probes = build_pope_probes(&scenes, &cooc, regime, per_scene, seed).unwrap();
            for p in &probes {
                prop_assert_eq!(scenes[p.scene].present.contains(&p.category), p.expect_yes);
            }
            let yes = probes.iter().filter(|p| p.expect_yes).count();
            prop_assert_eq!(yes * 2, probes.len());
        }
    }
}

#[test]
fn out_of_vocabulary_captions_count_as_no_mentions() {
    let w = world();
    let caps = vec![CaptionSample {
        tokens: vec![BOS, w.vocabulary.category_token(2), 9999],
        truth: vec![2],
    }];
    let s = chair_metrics(&w.vocabulary, &caps).unwrap();
    assert_eq!((s.n_mentions, s.n_unparseable, s.recall), (0, 1, 0.0));
}

fn scene(present: &[usize]) -> SceneInstance {
    SceneInstance {
        present: present.to_vec(),
        objects: present.to_vec(),
        features: vec![vec![0.0; 16]; present.len()],
        caption: Vec::new(),
    }
}

#[test]
fn regimes_pick_popular_and_adversarial_negatives() {
    let w = world();
    // Category 1 co-occurs with 0 most often; 3 is the most frequent overall.
    let mut support = vec![scene(&[0, 1]); 5];
    support.extend(vec![scene(&[3]); 9]);
    support.push(scene(&[0, 2]));
    let cooc = cooccurrence_counts(w.k(), &support).unwrap();
    let target = [scene(&[0])];
    let adv = build_pope_probes(&target, &cooc, PopeRegime::Adv, 1, 0).unwrap();
    assert_eq!(adv.iter().find(|p| !p.expect_yes).unwrap().category, 1);
    let pop = build_pope_probes(&target, &cooc, PopeRegime::Pop, 1, 0).unwrap();
    assert_eq!(pop.iter().find(|p| !p.expect_yes).unwrap().category, 3);
    let a = build_pope_probes(&support, &cooc, PopeRegime::Rnd, 2, 5).unwrap();
    assert_eq!(a, build_pope_probes(&support, &cooc, PopeRegime::Rnd, 2, 5).unwrap());
}

#[test]
fn partner_sample_scenes_all_admit_a_partner_probe() {
    let w = world();
    let sample = partner_scene_sample(&w, 50, 3).unwrap();
    assert_eq!(sample.len(), 50);
    for s in &sample {
        assert!(s.present.contains(&0));
        assert!(!partner_probes(&w, std::slice::from_ref(s)).is_empty());
    }
    let null = build_world(&WorldConfig::default().unbiased()).unwrap();
    assert!(partner_scene_sample(&null, 50, 3).unwrap().is_empty());
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let w = world();
    let b = ModelBundle::init(&ModelConfig::default(), &w, 0).unwrap();
    let scenes = w.sample_scenes(30, 6);
    let cooc = cooccurrence_counts(w.k(), &w.sample_scenes(500, 7)).unwrap();
    let settings = EvalSettings {
        n_scenes: 30,
        partner_scenes: 20,
        ..EvalSettings::default()
    };
    let a = evaluate(&b, &w, &scenes, &cooc, &settings, Exec::Sequential).unwrap();
    let p = evaluate(&b, &w, &scenes, &cooc, &settings, Exec::Parallel).unwrap();
    assert_eq!(a, p);
    for m in ["chair_s", "chair_i", "recall", "pope_rnd", "pope_pop", "pope_adv", "partner_false_yes"] {
        let v = a.metric(m).unwrap();
        assert!((0.0..=1.0).contains(&v), "{m} = {v}");
    }
    assert_eq!(a.n_eval, 30);
}

fn report(x: f64) -> HallucinationReport {
    HallucinationReport {
        chair_s: x,
        chair_i: x / 2.0,
        recall: 1.0 - x,
        pope_rnd: 0.9,
        pope_pop: 0.8,
        pope_adv: 0.7,
        partner_false_yes: x,
        n_partner_probes: 10,
        n_eval: 100,
        n_mentions: 50,
        n_unparseable: 0,
    }
}

#[test]
fn grid_aggregation_is_reproducible() {
    let arms = vec!["baseline".to_string(), "both/shared_kv".to_string()];
    let runs = vec![
        (arms[0].clone(), Some(report(0.2))),
        (arms[1].clone(), Some(report(0.1))),
        (arms[0].clone(), Some(report(0.4))),
        (arms[1].clone(), None),
    ];
    let rows = aggregate_grid(&arms, &runs);
    assert_eq!((rows[0].n_ok, rows[1].n_ok, rows[1].n_failed), (2, 1, 1));
    let (name, mean, _) = &rows[0].stats[0];
    assert_eq!(name, "chair_s");
    assert!((mean - 0.3).abs() < 1e-15);
    let csv = grid_csv(&rows);
    assert_eq!(csv, grid_csv(&aggregate_grid(&arms, &runs)));
    assert!(csv.lines().nth(2).unwrap().starts_with("both,shared_kv,1,1,"));
}
