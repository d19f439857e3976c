//! Hallucination metrics.
//!
//! CHAIR scores generated captions against the scene's ground truth:
//! `chair_s` is the fraction of captions with at least one hallucinated
//! category, `chair_i` the fraction of mentions that are hallucinated, and
//! `recall` the fraction of ground-truth categories mentioned. Mentions are
//! deduplicated per caption. POPE asks yes/no presence questions with
//! negatives drawn at random, by global frequency, or by co-occurrence with
//! the present objects.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Answer, ModelBundle};
use crate::par::{self, Exec};
use crate::world::{CooccurrenceMatrix, SceneInstance, Vocabulary, World};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub n_captions: usize,
    pub n_mentions: usize,
    pub n_truth: usize,
    /// Captions containing tokens outside the vocabulary.
    pub n_unparseable: usize,
}

/// CHAIR over already-extracted mention and truth sets.
///
/// With no mentions at all `chair_i` is reported as 0.
pub fn chair_from_sets(items: &[(BTreeSet<usize>, BTreeSet<usize>)]) -> Result<ChairScores> {
    if items.is_empty() {
        return Err(Error::Argument("no captions to score".into()));
    }
    let mut hallucinated_caps = 0usize;
    let mut mentions = 0usize;
    let mut hallucinated = 0usize;
    let mut truth_total = 0usize;
    let mut covered = 0usize;
    for (m, t) in items {
        let h = m.difference(t).count();
        if h > 0 {
            hallucinated_caps += 1;
        }
        mentions += m.len();
        hallucinated += h;
        truth_total += t.len();
        covered += m.intersection(t).count();
    }
    if truth_total == 0 {
        return Err(Error::Argument("ground truth is empty for every caption".into()));
    }
    Ok(ChairScores {
        chair_s: hallucinated_caps as f64 / items.len() as f64,
        chair_i: if mentions == 0 { 0.0 } else { hallucinated as f64 / mentions as f64 },
        recall: covered as f64 / truth_total as f64,
        n_captions: items.len(),
        n_mentions: mentions,
        n_truth: truth_total,
        n_unparseable: 0,
    })
}

/// A generated caption with the categories truly present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub tokens: Vec<usize>,
    pub truth: Vec<usize>,
}

/// CHAIR over token captions. A caption holding a token outside the
/// vocabulary counts as mentioning nothing.
pub fn chair_metrics(vocab: &Vocabulary, captions: &[CaptionSample]) -> Result<ChairScores> {
    let mut unparseable = 0;
    let items: Vec<_> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mentions: BTreeSet<usize> = if c.tokens.iter().any(|&t| t >= vocab.len()) {
                unparseable += 1;
                log::warn!("caption {i} holds out-of-vocabulary tokens; scored as no mentions");
                BTreeSet::new()
            } else {
                c.tokens.iter().filter_map(|&t| vocab.token_category(t)).collect()
            };
            (mentions, c.truth.iter().copied().collect())
        })
        .collect();
    let mut s = chair_from_sets(&items)?;
    s.n_unparseable = unparseable;
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopeRegime {
    Rnd,
    Pop,
    Adv,
}

impl PopeRegime {
    pub const ALL: [PopeRegime; 3] = [PopeRegime::Rnd, PopeRegime::Pop, PopeRegime::Adv];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeProbe {
    pub scene: usize,
    pub category: usize,
    pub expect_yes: bool,
    pub regime: PopeRegime,
}

/// Ranks `candidates` by descending `score`, ties by ascending id.
fn top_by(candidates: &[usize], n: usize, score: impl Fn(usize) -> u64) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| score(b).cmp(&score(a)).then(a.cmp(&b)));
    c.truncate(n);
    c
}

/// Balanced probes: per scene `n = min(per_scene, |present|, |absent|)`
/// positives drawn uniformly from the present categories and `n` negatives
/// chosen by `regime` among the absent ones. Scenes covering every
/// category are skipped.
pub fn build_pope_probes(
    scenes: &[SceneInstance],
    cooc: &CooccurrenceMatrix,
    regime: PopeRegime,
    per_scene: usize,
    seed: u64,
) -> Result<Vec<PopeProbe>> {
    if per_scene == 0 {
        return Err(Error::Argument("per_scene must be at least 1".into()));
    }
    let k = cooc.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_scene * scenes.len());
    for (si, s) in scenes.iter().enumerate() {
        if let Some(&bad) = s.present.iter().find(|&&c| c >= k) {
            return Err(Error::Index(format!("scene {si} holds category {bad} outside 0..{k}")));
        }
        let absent: Vec<usize> = (0..k).filter(|c| s.present.binary_search(c).is_err()).collect();
        if absent.is_empty() {
            log::info!("scene {si} covers all {k} categories; skipped");
            continue;
        }
        let n = per_scene.min(s.present.len()).min(absent.len());
        for i in sample(&mut rng, s.present.len(), n).into_vec() {
            out.push(PopeProbe {
                scene: si,
                category: s.present[i],
                expect_yes: true,
                regime,
            });
        }
        let negatives = match regime {
            PopeRegime::Rnd => sample(&mut rng, absent.len(), n)
                .into_vec()
                .into_iter()
                .map(|i| absent[i])
                .collect(),
            PopeRegime::Pop => top_by(&absent, n, |c| cooc.totals[c]),
            PopeRegime::Adv => top_by(&absent, n, |c| {
                s.present.iter().map(|&p| cooc.counts[p][c]).max().unwrap_or(0)
            }),
        };
        for c in negatives {
            out.push(PopeProbe {
                scene: si,
                category: c,
                expect_yes: false,
                regime,
            });
        }
    }
    Ok(out)
}

/// Fraction of probes answered correctly.
pub fn pope_accuracy(bundle: &ModelBundle, scenes: &[SceneInstance], probes: &[PopeProbe], exec: Exec) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Argument("no probes".into()));
    }
    let answers = par::map(exec, probes, |p| {
        let s = scenes
            .get(p.scene)
            .ok_or_else(|| Error::Index(format!("probe scene {} out of range", p.scene)))?;
        bundle.answer_probe(s, p.category)
    });
    let mut correct = 0usize;
    for (p, a) in probes.iter().zip(answers) {
        if (a? == Answer::Yes) == p.expect_yes {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}

/// Negative probes on every bias partner absent from a scene that holds
/// its center.
pub fn partner_probes(world: &World, scenes: &[SceneInstance]) -> Vec<PopeProbe> {
    let mut out = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        let mut seen = BTreeSet::new();
        for bp in &world.config.bias_pairs {
            if s.present.binary_search(&bp.center).is_ok()
                && s.present.binary_search(&bp.partner).is_err()
                && seen.insert(bp.partner)
            {
                out.push(PopeProbe {
                    scene: si,
                    category: bp.partner,
                    expect_yes: false,
                    regime: PopeRegime::Adv,
                });
            }
        }
    }
    out
}

/// Fraction of absent-partner probes answered "yes", and the probe count.
pub fn partner_false_yes_rate(bundle: &ModelBundle, world: &World, scenes: &[SceneInstance], exec: Exec) -> Result<(f64, usize)> {
    let probes = partner_probes(world, scenes);
    if probes.is_empty() {
        return Ok((0.0, 0));
    }
    let acc = pope_accuracy(bundle, scenes, &probes, exec)?;
    Ok((1.0 - acc, probes.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_scenes: usize,
    pub seed: u64,
    pub pope_per_scene: usize,
    pub caption_max_len: usize,
    /// Size of the dedicated partner-probe sample; 0 probes the evaluation
    /// scenes instead.
    #[serde(default)]
    pub partner_scenes: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_scenes: 1000,
            seed: 0,
            pope_per_scene: 2,
            caption_max_len: 12,
            partner_scenes: 0,
        }
    }
}

const PARTNER_STREAM: u64 = 0x9a27_0e55;

/// `n` scenes from the world's own distribution, kept only when they hold
/// a bias center together with at least one absent partner. Empty for a
/// world without bias pairs.
pub fn partner_scene_sample(world: &World, n: usize, seed: u64) -> Result<Vec<SceneInstance>> {
    if world.config.bias_pairs.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PARTNER_STREAM);
    let mut out = Vec::with_capacity(n);
    let budget = n.saturating_mul(10_000).max(10_000);
    for _ in 0..budget {
        if out.len() == n {
            break;
        }
        let s = world.sample_scene(&mut rng);
        if !partner_probes(world, std::slice::from_ref(&s)).is_empty() {
            out.push(s);
        }
    }
    if out.len() < n {
        return Err(Error::Argument(format!(
            "only {} of {n} partner scenes found; bias partners are almost never absent",
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub pope_rnd: f64,
    pub pope_pop: f64,
    pub pope_adv: f64,
    /// Adversarial false-"yes" rate on absent bias partners.
    pub partner_false_yes: f64,
    pub n_partner_probes: usize,
    pub n_eval: usize,
    pub n_mentions: usize,
    pub n_unparseable: usize,
}

impl HallucinationReport {
    pub const CSV_HEADER: &'static str =
        "chair_s,chair_i,recall,pope_rnd,pope_pop,pope_adv,partner_false_yes,n_partner_probes,n_eval";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.chair_s,
            self.chair_i,
            self.recall,
            self.pope_rnd,
            self.pope_pop,
            self.pope_adv,
            self.partner_false_yes,
            self.n_partner_probes,
            self.n_eval
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let s = format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row());
        crate::io::write_bytes(path, s.as_bytes())
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "chair_s" => self.chair_s,
            "chair_i" => self.chair_i,
            "recall" => self.recall,
            "pope_rnd" => self.pope_rnd,
            "pope_pop" => self.pope_pop,
            "pope_adv" => self.pope_adv,
            "partner_false_yes" => self.partner_false_yes,
            _ => return None,
        })
    }
}

/// Full evaluation of one bundle on `scenes`, with POPE negatives ranked
/// by `cooc`.
pub fn evaluate(
    bundle: &ModelBundle,
    world: &World,
    scenes: &[SceneInstance],
    cooc: &CooccurrenceMatrix,
    settings: &EvalSettings,
    exec: Exec,
) -> Result<HallucinationReport> {
    let captions = par::map(exec, scenes, |s| bundle.generate_caption(s, settings.caption_max_len));
    let samples = captions
        .into_iter()
        .zip(scenes)
        .map(|(c, s)| {
            Ok(CaptionSample {
                tokens: c?,
                truth: s.present.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let chair = chair_metrics(&world.vocabulary, &samples)?;
    let mut pope = [0.0; 3];
    for (i, regime) in PopeRegime::ALL.into_iter().enumerate() {
        let probes = build_pope_probes(scenes, cooc, regime, settings.pope_per_scene, settings.seed.wrapping_add(i as u64))?;
        pope[i] = pope_accuracy(bundle, scenes, &probes, exec)?;
    }
    let (fy, n_fy) = if settings.partner_scenes > 0 {
        let ps = partner_scene_sample(world, settings.partner_scenes, settings.seed)?;
        partner_false_yes_rate(bundle, world, &ps, exec)?
    } else {
        partner_false_yes_rate(bundle, world, scenes, exec)?
    };
    Ok(HallucinationReport {
        chair_s: chair.chair_s,
        chair_i: chair.chair_i,
        recall: chair.recall,
        pope_rnd: pope[0],
        pope_pop: pope[1],
        pope_adv: pope[2],
        partner_false_yes: fy,
        n_partner_probes: n_fy,
        n_eval: scenes.len(),
        n_mentions: chair.n_mentions,
        n_unparseable: chair.n_unparseable,
    })
}

pub const GRID_METRICS: [&str; 7] = [
    "chair_s",
    "chair_i",
    "recall",
    "pope_rnd",
    "pope_pop",
    "pope_adv",
    "partner_false_yes",
];

/// One grid cell aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub arm: String,
    pub n_ok: usize,
    pub n_failed: usize,
    /// Metric name → (mean, sample standard deviation).
    pub stats: Vec<(String, f64, f64)>,
}

pub fn mean_and_spread(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates per-seed reports of each arm, in the given arm order.
pub fn aggregate_grid(arms: &[String], runs: &[(String, Option<HallucinationReport>)]) -> Vec<GridRow> {
    arms.iter()
        .map(|arm| {
            let reports: Vec<&HallucinationReport> = runs
                .iter()
                .filter(|(a, _)| a == arm)
                .filter_map(|(_, r)| r.as_ref())
                .collect();
            let n_failed = runs.iter().filter(|(a, r)| a == arm && r.is_none()).count();
            let stats = GRID_METRICS
                .iter()
                .map(|m| {
                    let xs: Vec<f64> = reports.iter().filter_map(|r| r.metric(m)).collect();
                    let (mu, sd) = mean_and_spread(&xs);
                    (m.to_string(), mu, sd)
                })
                .collect();
            GridRow {
                arm: arm.clone(),
                n_ok: reports.len(),
                n_failed,
                stats,
            }
        })
        .collect()
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut buf = Vec::new();
    let mut header = vec!["placement".to_string(), "variant".to_string(), "n_ok".into(), "n_failed".into()];
    for m in GRID_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_spread"));
    }
    writeln!(buf, "{}", header.join(",")).expect("vec write");
    for r in rows {
        let (placement, variant) = r.arm.split_once('/').unwrap_or((r.arm.as_str(), ""));
        let mut cells = vec![placement.to_string(), variant.to_string(), r.n_ok.to_string(), r.n_failed.to_string()];
        for (_, mu, sd) in &r.stats {
            cells.push(format!("{mu}"));
            cells.push(format!("{sd}"));
        }
        writeln!(buf, "{}", cells.join(",")).expect("vec write");
    }
    String::from_utf8(buf).expect("ascii")
}

/// Runs every placement × variant cell (plus the baseline) over `seeds`.
pub fn ablation_grid(
    cfg: &crate::trainer::ExperimentConfig,
    seeds: &[u64],
    out: Option<&Path>,
    exec: Exec,
) -> Result<(Vec<GridRow>, crate::trainer::RunManifest)> {
    if seeds.len() < 3 {
        return Err(Error::Argument(format!("ablation grid needs at least 3 seeds, got {}", seeds.len())));
    }
    let mut cfg = cfg.clone();
    cfg.seeds = seeds.to_vec();
    cfg.arms = crate::trainer::Arm::grid();
    let manifest = crate::trainer::run_experiment(&cfg, out, exec)?;
    let names: Vec<String> = cfg.arms.iter().map(|a| a.name()).collect();
    let runs: Vec<(String, Option<HallucinationReport>)> = manifest
        .runs
        .iter()
        .map(|r| (r.arm.clone(), r.report().cloned()))
        .collect();
    let rows = aggregate_grid(&names, &runs);
    if let Some(dir) = out {
        crate::io::write_bytes(&dir.join("ablation_grid.csv"), grid_csv(&rows).as_bytes())?;
    }
    Ok((rows, manifest))
}
