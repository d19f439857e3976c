//! Synthetic object universe with controllable co-occurrence bias.
//!
//! Presence is sampled independently per category at `base_rate`, then each
//! bias pair forces its partner into scenes that contain its center with
//! probability `p_co`. Scenes are truncated to `max_objects`, keeping bias
//! centers and their partners ahead of incidental objects.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const WORLD_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasPair {
    pub center: usize,
    pub partner: usize,
    pub p_co: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub k: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub bias_pairs: Vec<BiasPair>,
    pub base_rate: f64,
    pub max_objects: usize,
    pub seed: u64,
    pub category_names: Option<Vec<String>>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            k: 12,
            feature_dim: 16,
            noise_std: 0.1,
            bias_pairs: (1..=3)
                .map(|p| BiasPair {
                    center: 0,
                    partner: p,
                    p_co: 0.8,
                })
                .collect(),
            base_rate: 0.15,
            max_objects: 4,
            seed: 0,
            category_names: None,
        }
    }
}

impl WorldConfig {
    /// The same universe with every bias pair removed.
    pub fn unbiased(&self) -> Self {
        Self {
            bias_pairs: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("need at least 2 categories, got {}", self.k)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and nonnegative".into()));
        }
        if !(self.base_rate > 0.0 && self.base_rate <= 1.0) {
            return Err(Error::Config("base_rate must lie in (0, 1]".into()));
        }
        if self.max_objects == 0 {
            return Err(Error::Config("max_objects must be at least 1".into()));
        }
        for bp in &self.bias_pairs {
            if bp.center >= self.k || bp.partner >= self.k {
                return Err(Error::Config(format!("bias pair {bp:?} outside 0..{}", self.k)));
            }
            if bp.center == bp.partner {
                return Err(Error::Config(format!("bias pair {bp:?} links a category to itself")));
            }
            if !(bp.p_co > 0.0 && bp.p_co <= 1.0) {
                return Err(Error::Config(format!("p_co of {bp:?} must lie in (0, 1]")));
            }
        }
        if let Some(names) = &self.category_names {
            if names.len() != self.k {
                return Err(Error::Config(format!("{} names for {} categories", names.len(), self.k)));
            }
        }
        Ok(())
    }

    /// Partners of `center` across all bias pairs, in configuration order.
    pub fn partners_of(&self, center: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for bp in &self.bias_pairs {
            if bp.center == center && !out.contains(&bp.partner) {
                out.push(bp.partner);
            }
        }
        out
    }
}

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const QUERY: usize = 2;
pub const YES: usize = 3;
pub const NO: usize = 4;
const SPECIALS: [&str; 5] = ["<bos>", "<eos>", "<query>", "<yes>", "<no>"];
pub const TEMPLATE: [&str; 3] = ["a", "photo", "of"];

/// Specials, then template words, then one token per category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    k: usize,
}

impl Vocabulary {
    pub fn new(category_names: &[String]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(TEMPLATE.iter().map(|s| s.to_string()));
        tokens.extend(category_names.iter().cloned());
        Self {
            tokens,
            k: category_names.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn category_offset(&self) -> usize {
        SPECIALS.len() + TEMPLATE.len()
    }

    pub fn template_ids(&self) -> Vec<usize> {
        (SPECIALS.len()..SPECIALS.len() + TEMPLATE.len()).collect()
    }

    pub fn category_token(&self, c: usize) -> usize {
        self.category_offset() + c
    }

    pub fn token_category(&self, token: usize) -> Option<usize> {
        let off = self.category_offset();
        (token >= off && token < off + self.k).then(|| token - off)
    }

    pub fn n_categories(&self) -> usize {
        self.k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub prototypes: Tensor,
    pub category_names: Vec<String>,
    pub vocabulary: Vocabulary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    /// Present categories, ascending.
    pub present: Vec<usize>,
    /// Category of each feature row, in presentation order.
    pub objects: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub caption: Vec<usize>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

const MAX_PROTOTYPE_RESAMPLES: usize = 1000;
const MAX_PROTOTYPE_COSINE: f64 = 0.5;

/// Draws unit-norm prototypes, rejecting any candidate whose cosine with an
/// accepted prototype reaches 0.5.
pub fn build_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(cfg.k);
    let mut resamples = 0;
    while protos.len() < cfg.k {
        let mut v: Vec<f64> = (0..cfg.feature_dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        if protos.iter().all(|p| cosine(p, &v) < MAX_PROTOTYPE_COSINE) {
            protos.push(v);
        } else {
            resamples += 1;
            if resamples > MAX_PROTOTYPE_RESAMPLES {
                return Err(Error::Generation(format!(
                    "could not separate {} prototypes in {} dimensions",
                    cfg.k, cfg.feature_dim
                )));
            }
        }
    }
    let category_names = cfg
        .category_names
        .clone()
        .unwrap_or_else(|| (0..cfg.k).map(|c| format!("obj{c}")).collect());
    Ok(World {
        config: cfg.clone(),
        prototypes: Tensor::from_rows(&protos)?,
        vocabulary: Vocabulary::new(&category_names),
        category_names,
    })
}

impl World {
    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn caption_for(&self, present: &[usize]) -> Vec<usize> {
        let mut caption = vec![BOS];
        caption.extend(self.vocabulary.template_ids());
        caption.extend(present.iter().map(|&c| self.vocabulary.category_token(c)));
        caption.push(EOS);
        caption
    }

    /// Category ids mentioned by a token sequence, ascending and deduplicated.
    pub fn parse_mentions(&self, tokens: &[usize]) -> Vec<usize> {
        let set: BTreeSet<usize> = tokens
            .iter()
            .filter_map(|&t| self.vocabulary.token_category(t))
            .collect();
        set.into_iter().collect()
    }

    /// Draws one scene. Empty draws are resampled.
    pub fn sample_scene<R: Rng + ?Sized>(&self, rng: &mut R) -> SceneInstance {
        let cfg = &self.config;
        let present = loop {
            let mut present = vec![false; cfg.k];
            for p in present.iter_mut() {
                *p = rng.random::<f64>() < cfg.base_rate;
            }
            for bp in &cfg.bias_pairs {
                // The draw happens unconditionally so streams stay aligned
                // across worlds that differ only in bias strength.
                let u = rng.random::<f64>();
                if present[bp.center] && u < bp.p_co {
                    present[bp.partner] = true;
                }
            }
            if present.iter().any(|&p| p) {
                break present;
            }
        };

        let mut priority: Vec<usize> = Vec::new();
        for bp in &cfg.bias_pairs {
            if present[bp.center] && !priority.contains(&bp.center) {
                priority.push(bp.center);
            }
        }
        for bp in &cfg.bias_pairs {
            if present[bp.center] && present[bp.partner] && !priority.contains(&bp.partner) {
                priority.push(bp.partner);
            }
        }
        let mut rest: Vec<usize> = (0..cfg.k)
            .filter(|&c| present[c] && !priority.contains(&c))
            .collect();
        rest.shuffle(rng);
        priority.extend(rest);
        priority.truncate(cfg.max_objects);

        let mut kept = priority;
        kept.sort_unstable();
        let mut objects = kept.clone();
        objects.shuffle(rng);

        let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let features = objects
            .iter()
            .map(|&c| {
                self.prototypes
                    .row(c)
                    .iter()
                    .map(|&p| if cfg.noise_std > 0.0 { p + noise.sample(rng) } else { p })
                    .collect()
            })
            .collect();
        let caption = self.caption_for(&kept);
        SceneInstance {
            present: kept,
            objects,
            features,
            caption,
        }
    }

    pub fn sample_scenes(&self, n: usize, seed: u64) -> Vec<SceneInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_scene(&mut rng)).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            format_version: u32,
            config: &'a WorldConfig,
            category_names: &'a [String],
            vocabulary: &'a [String],
            prototypes: Vec<Vec<f64>>,
        }
        let out = Out {
            format_version: WORLD_FORMAT_VERSION,
            config: &self.config,
            category_names: &self.category_names,
            vocabulary: self.vocabulary.tokens(),
            prototypes: self.prototypes.to_rows(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&out)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<World> {
        #[derive(Deserialize)]
        struct In {
            format_version: u32,
            config: WorldConfig,
            category_names: Vec<String>,
            prototypes: Vec<Vec<f64>>,
        }
        let raw: In = serde_json::from_slice(&std::fs::read(path)?)?;
        if raw.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported world version {}", raw.format_version)));
        }
        raw.config.validate()?;
        Ok(World {
            prototypes: Tensor::from_rows(&raw.prototypes)?,
            vocabulary: Vocabulary::new(&raw.category_names),
            category_names: raw.category_names,
            config: raw.config,
        })
    }
}

/// Line-delimited JSON, one scene per line.
pub fn write_scenes_jsonl(path: &Path, scenes: &[SceneInstance]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenes_jsonl(path: &Path) -> Result<Vec<SceneInstance>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    /// `counts[i][j]`: scenes containing both i and j; the diagonal holds totals.
    pub counts: Vec<Vec<u64>>,
    pub totals: Vec<u64>,
    pub n_scenes: u64,
}

impl CooccurrenceMatrix {
    pub fn k(&self) -> usize {
        self.totals.len()
    }
}

pub fn cooccurrence_counts(k: usize, scenes: &[SceneInstance]) -> Result<CooccurrenceMatrix> {
    if scenes.is_empty() {
        return Err(Error::Argument("co-occurrence needs at least one scene".into()));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for s in scenes {
        for &i in &s.present {
            if i >= k {
                return Err(Error::Index(format!("category {i} outside 0..{k}")));
            }
            for &j in &s.present {
                counts[i][j] += 1;
            }
        }
    }
    let totals = (0..k).map(|i| counts[i][i]).collect();
    Ok(CooccurrenceMatrix {
        counts,
        totals,
        n_scenes: scenes.len() as u64,
    })
}

/// The `k` categories co-occurring most with `center`, by descending count
/// with ties broken by ascending id.
pub fn top_k_cooccurring(m: &CooccurrenceMatrix, center: usize, k: usize) -> Result<Vec<usize>> {
    let n = m.k();
    if k >= n {
        return Err(Error::Argument(format!("k = {k} must be below K = {n}")));
    }
    if center >= n {
        return Err(Error::Index(format!("center {center} outside 0..{n}")));
    }
    let mut ids: Vec<usize> = (0..n).filter(|&c| c != center).collect();
    ids.sort_by(|&a, &b| m.counts[center][b].cmp(&m.counts[center][a]).then(a.cmp(&b)));
    ids.truncate(k);
    Ok(ids)
}
