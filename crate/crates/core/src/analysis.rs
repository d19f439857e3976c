//! Representation entanglement between co-occurring categories.
//!
//! Per-category mean activations are captured at a series of taps through
//! the model. Metrics are computed on cosine distances in the full-width
//! mean space; PCA coordinates are exported for plotting only.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, ModelBundle};
use crate::par::{self, Exec};
use crate::world::{top_k_cooccurring, CooccurrenceMatrix, SceneInstance};

/// Minimum samples per category for its mean to be reported.
pub const MIN_SAMPLES: u64 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapId {
    EncoderOut,
    ProjectorOut,
    /// Output of decoder block `ℓ`, 1-based.
    Layer(usize),
    PreHead,
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapId::EncoderOut => f.write_str("encoder_out"),
            TapId::ProjectorOut => f.write_str("projector_out"),
            TapId::Layer(l) => write!(f, "layer{l}"),
            TapId::PreHead => f.write_str("pre_head"),
        }
    }
}

/// Encoder, projector, every decoder layer, then the pre-head state.
pub fn all_taps(n_layers: usize) -> Vec<TapId> {
    let mut t = vec![TapId::EncoderOut, TapId::ProjectorOut];
    t.extend((1..=n_layers).map(TapId::Layer));
    t.push(TapId::PreHead);
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapCapture {
    pub tap: TapId,
    pub modality: Modality,
    /// `K×width`; rows of excluded categories are zero.
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
    /// Categories with fewer than [`MIN_SAMPLES`] samples.
    pub excluded: Vec<usize>,
}

impl TapCapture {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    /// Builds a capture from ready-made means, e.g. for synthetic checks.
    pub fn from_means(tap: TapId, modality: Modality, means: Vec<Vec<f64>>) -> Self {
        let k = means.len();
        Self {
            tap,
            modality,
            means,
            counts: vec![MIN_SAMPLES; k],
            excluded: Vec::new(),
        }
    }
}

fn tap_rows(
    bundle: &ModelBundle,
    scene: &SceneInstance,
    taps: &[TapId],
    modality: Modality,
) -> Result<Vec<Vec<(usize, Vec<f64>)>>> {
    let h = bundle.hidden_states(&scene.features, &scene.caption)?;
    let m = scene.features.len();
    let positions: Vec<(usize, usize)> = match modality {
        Modality::Visual => scene.objects.iter().enumerate().map(|(i, &c)| (i, c)).collect(),
        Modality::Textual => {
            let off = bundle.vocab_category_offset();
            let k = bundle.config().n_categories;
            scene
                .caption
                .iter()
                .enumerate()
                .filter(|(_, &t)| t >= off && t < off + k)
                .map(|(i, &t)| (m + i, t - off))
                .collect()
        }
    };
    taps.iter()
        .map(|tap| {
            let src: &dyn Fn(usize) -> Vec<f64> = match tap {
                TapId::EncoderOut => &|i| scene.features[i].clone(),
                TapId::ProjectorOut => &|i| h.soft.as_ref().expect("scene has objects").row(i).to_vec(),
                TapId::Layer(l) => &|i| h.layers[*l - 1].row(i).to_vec(),
                TapId::PreHead => &|i| h.pre_head.row(i).to_vec(),
            };
            Ok(positions.iter().map(|&(p, c)| (c, src(p))).collect())
        })
        .collect()
}

/// Per-category means at each tap, one forward pass per scene.
pub fn capture_means(
    bundle: &ModelBundle,
    scenes: &[SceneInstance],
    taps: &[TapId],
    modality: Modality,
    exec: Exec,
) -> Result<Vec<TapCapture>> {
    let cfg = bundle.config();
    for tap in taps {
        match (tap, modality) {
            (TapId::EncoderOut | TapId::ProjectorOut, Modality::Textual) => {
                return Err(Error::Argument(format!("tap {tap} has no textual positions")));
            }
            (TapId::Layer(l), _) if *l == 0 || *l > cfg.n_layers => {
                return Err(Error::Argument(format!("layer tap {l} outside 1..={}", cfg.n_layers)));
            }
            _ => {}
        }
    }
    let k = cfg.n_categories;
    let width = |t: &TapId| if *t == TapId::EncoderOut { cfg.feature_dim } else { cfg.sigma };
    let per_scene = par::map(exec, scenes, |s| tap_rows(bundle, s, taps, modality));
    let mut means: Vec<Vec<Vec<f64>>> = taps.iter().map(|t| vec![vec![0.0; width(t)]; k]).collect();
    let mut counts = vec![vec![0u64; k]; taps.len()];
    for rows in per_scene {
        for (ti, tap_rows) in rows?.into_iter().enumerate() {
            for (c, r) in tap_rows {
                counts[ti][c] += 1;
                // Running mean: a constant input stays exact.
                let n = counts[ti][c] as f64;
                for (a, b) in means[ti][c].iter_mut().zip(&r) {
                    *a += (b - *a) / n;
                }
            }
        }
    }
    Ok(taps
        .iter()
        .zip(means.into_iter().zip(counts))
        .map(|(&tap, (mut s, n))| {
            let mut excluded = Vec::new();
            for c in 0..k {
                if n[c] < MIN_SAMPLES {
                    log::warn!("tap {tap}: category {c} has {} samples, excluded", n[c]);
                    excluded.push(c);
                    s[c].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            TapCapture {
                tap,
                modality,
                means: s,
                counts: n,
                excluded,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca3 {
    /// `K×3` projections of the column-centered data.
    pub coords: Vec<[f64; 3]>,
    /// Share of total variance per component, nonincreasing.
    pub explained: [f64; 3],
    /// Set when fewer than three components carry variance; the missing
    /// ones are zero.
    pub rank_deficient: bool,
}

const RANK_TOL: f64 = 1e-10;

/// Projection onto the top three principal axes. Each axis is signed so
/// that its largest-magnitude loading is positive.
pub fn pca3(means: &[Vec<f64>]) -> Result<Pca3> {
    let k = means.len();
    if k < 4 {
        return Err(Error::Argument(format!("PCA needs at least 4 rows, got {k}")));
    }
    let w = means[0].len();
    if w == 0 || means.iter().any(|r| r.len() != w) {
        return Err(crate::error::shape_err("pca3", "rows must share a nonzero width"));
    }
    let mut x = DMatrix::from_fn(k, w, |i, j| means[i][j]);
    for j in 0..w {
        let mu = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mu);
    }
    let total: f64 = x.iter().map(|v| v * v).sum();
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut coords = vec![[0.0; 3]; k];
    let mut explained = [0.0; 3];
    let mut rank_deficient = false;
    let smax = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    for comp in 0..3 {
        let Some(&idx) = order.get(comp) else {
            rank_deficient = true;
            continue;
        };
        let s = svd.singular_values[idx];
        if total == 0.0 || s <= RANK_TOL * smax.max(1.0) {
            rank_deficient = true;
            continue;
        }
        let mut axis: Vec<f64> = v_t.row(idx).iter().copied().collect();
        let lead = axis
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if lead < 0.0 {
            axis.iter_mut().for_each(|a| *a = -*a);
        }
        for (i, c) in coords.iter_mut().enumerate() {
            c[comp] = x.row(i).iter().zip(&axis).map(|(a, b)| a * b).sum();
        }
        explained[comp] = s * s / total;
    }
    if rank_deficient {
        log::warn!("pca3: fewer than three nonzero components; padded with zeros");
    }
    Ok(Pca3 {
        coords,
        explained,
        rank_deficient,
    })
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine distance of a zero vector".into()));
    }
    Ok(1.0 - (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Argument("spearman needs two equal-length series of length >= 2".into()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("rank correlation of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntanglementReport {
    pub tap: TapId,
    pub modality: Modality,
    pub center: usize,
    pub partners: Vec<usize>,
    /// Mean distance to partners over mean distance to the other categories.
    pub separation_ratio: f64,
    /// Rank correlation between pairwise distance and co-occurrence count.
    pub spearman_rho: f64,
    pub pca3: Vec<[f64; 3]>,
    pub explained_variance: [f64; 3],
    pub pca_rank_deficient: bool,
}

/// Separation ratio of `center` against its `k` most frequent
/// co-occurrence partners (`k` clamped to `K − 2`), plus the global rank
/// correlation between distance and co-occurrence.
pub fn entanglement_metrics(
    capture: &TapCapture,
    cooc: &CooccurrenceMatrix,
    center: usize,
    k: usize,
) -> Result<EntanglementReport> {
    let n = capture.k();
    if n != cooc.k() {
        return Err(Error::Argument(format!("capture has {n} categories, co-occurrence {}", cooc.k())));
    }
    if !capture.excluded.is_empty() {
        return Err(Error::Validation(format!(
            "tap {} lacks categories {:?}",
            capture.tap, capture.excluded
        )));
    }
    if center >= n || n < 3 {
        return Err(Error::Argument(format!("center {center} invalid for {n} categories")));
    }
    let k = k.clamp(1, n - 2);
    let partners = top_k_cooccurring(cooc, center, k)?;
    let m = &capture.means;
    let mut d_part = 0.0;
    let mut d_rest = 0.0;
    let mut n_rest = 0usize;
    for c in 0..n {
        if c == center {
            continue;
        }
        let d = cosine_distance(&m[center], &m[c])?;
        if partners.contains(&c) {
            d_part += d;
        } else {
            d_rest += d;
            n_rest += 1;
        }
    }
    d_part /= partners.len() as f64;
    d_rest /= n_rest as f64;
    if d_rest <= 0.0 || d_part <= 0.0 {
        return Err(Error::Numeric(format!(
            "separation ratio undefined at tap {} (degenerate means)",
            capture.tap
        )));
    }
    let mut dist = Vec::new();
    let mut co = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            dist.push(cosine_distance(&m[i], &m[j])?);
            co.push(cooc.counts[i][j] as f64);
        }
    }
    let rho = spearman(&dist, &co)?;
    let p = pca3(m)?;
    Ok(EntanglementReport {
        tap: capture.tap,
        modality: capture.modality,
        center,
        partners,
        separation_ratio: d_part / d_rest,
        spearman_rho: rho,
        pca3: p.coords,
        explained_variance: p.explained,
        pca_rank_deficient: p.rank_deficient,
    })
}

/// Entanglement at every tap from the encoder to the pre-head state.
pub fn layer_profile(
    bundle: &ModelBundle,
    scenes: &[SceneInstance],
    cooc: &CooccurrenceMatrix,
    center: usize,
    k: usize,
    exec: Exec,
) -> Result<Vec<EntanglementReport>> {
    let taps = all_taps(bundle.config().n_layers);
    let caps = capture_means(bundle, scenes, &taps, Modality::Visual, exec)?;
    caps.iter().map(|c| entanglement_metrics(c, cooc, center, k)).collect()
}

/// Labelled profiles, e.g. a baseline and a causal arm of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileExport {
    pub label: String,
    pub reports: Vec<EntanglementReport>,
}

pub fn profiles_csv(profiles: &[ProfileExport]) -> String {
    let mut s = String::from("label,tap,modality,center,partners,separation_ratio,spearman_rho,ev1,ev2,ev3\n");
    for p in profiles {
        for r in &p.reports {
            let partners: Vec<String> = r.partners.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!(
                "{},{},{:?},{},{},{},{},{},{},{}\n",
                p.label,
                r.tap,
                r.modality,
                r.center,
                partners.join(" "),
                r.separation_ratio,
                r.spearman_rho,
                r.explained_variance[0],
                r.explained_variance[1],
                r.explained_variance[2]
            ));
        }
    }
    s
}
