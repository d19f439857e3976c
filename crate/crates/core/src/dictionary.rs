//! Confounder-dictionary estimation from category-averaged activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConfounderDictionary, DictionarySet, Modality, ModelBundle};
use crate::numkit::Tensor;
use crate::par::{self, Exec};
use crate::trainer::TrainState;
use crate::world::{SceneInstance, World};

/// Where activations are read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Soft tokens leaving the projector.
    PostProjector,
    /// Final decoder layer output at soft-token positions.
    FinalHiddenVisual,
    /// Final decoder layer output at caption category-token positions.
    FinalHiddenTextual,
}

impl Tap {
    pub fn modality(self) -> Modality {
        match self {
            Tap::PostProjector | Tap::FinalHiddenVisual => Modality::Visual,
            Tap::FinalHiddenTextual => Modality::Textual,
        }
    }
}

/// Per-category running sums. Merging is associative and commutative up to
/// floating-point reassociation.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryAccumulator {
    pub tap: Tap,
    pub sums: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
}

impl CategoryAccumulator {
    pub fn new(tap: Tap, k: usize, width: usize) -> Self {
        Self {
            tap,
            sums: vec![vec![0.0; width]; k],
            counts: vec![0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> usize {
        self.sums.first().map_or(0, Vec::len)
    }

    pub fn add(&mut self, category: usize, row: &[f64]) -> Result<()> {
        if category >= self.k() {
            return Err(Error::Index(format!("category {category} outside 0..{}", self.k())));
        }
        if row.len() != self.width() {
            return Err(crate::error::shape_err(
                "CategoryAccumulator::add",
                format!("row of {} into width {}", row.len(), self.width()),
            ));
        }
        for (s, v) in self.sums[category].iter_mut().zip(row) {
            *s += v;
        }
        self.counts[category] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &CategoryAccumulator) -> Result<()> {
        if other.tap != self.tap || other.k() != self.k() || other.width() != self.width() {
            return Err(Error::Argument("cannot merge accumulators of different taps or shapes".into()));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Categories with no samples.
    pub fn missing(&self) -> Vec<usize> {
        (0..self.k()).filter(|&c| self.counts[c] == 0).collect()
    }
}

fn scene_contribution(bundle: &ModelBundle, scene: &SceneInstance, tap: Tap) -> Result<Vec<(usize, Vec<f64>)>> {
    let m = scene.features.len();
    match tap {
        Tap::PostProjector => {
            let f = ModelBundle::encode_visual(scene)?;
            let s = bundle.causal_projector(&f)?;
            Ok(scene.objects.iter().enumerate().map(|(i, &c)| (c, s.row(i).to_vec())).collect())
        }
        Tap::FinalHiddenVisual => {
            let h = bundle.hidden_states(&scene.features, &scene.caption)?;
            let last = h.layers.last().expect("at least one layer");
            Ok(scene.objects.iter().enumerate().map(|(i, &c)| (c, last.row(i).to_vec())).collect())
        }
        Tap::FinalHiddenTextual => {
            let h = bundle.hidden_states(&scene.features, &scene.caption)?;
            let last = h.layers.last().expect("at least one layer");
            let offset = bundle.vocab_category_offset();
            let k = bundle.config().n_categories;
            Ok(scene
                .caption
                .iter()
                .enumerate()
                .filter(|(_, &t)| t >= offset && t < offset + k)
                .map(|(i, &t)| (t - offset, last.row(m + i).to_vec()))
                .collect())
        }
    }
}

/// Sums activations per category over `scenes` at `tap`.
///
/// The bundle must be non-causal. Categories never observed keep a zero
/// count and are reported through the log.
pub fn collect_category_activations(bundle: &ModelBundle, scenes: &[SceneInstance], tap: Tap) -> Result<CategoryAccumulator> {
    collect_category_activations_with(Exec::default(), bundle, scenes, tap)
}

pub fn collect_category_activations_with(
    exec: Exec,
    bundle: &ModelBundle,
    scenes: &[SceneInstance],
    tap: Tap,
) -> Result<CategoryAccumulator> {
    if bundle.config().is_causal() {
        return Err(Error::State(
            "dictionaries are estimated from a non-causal checkpoint".into(),
        ));
    }
    let cfg = bundle.config();
    // Per-scene contributions are folded in scene order, so the result does
    // not depend on the thread count.
    let parts = par::map(exec, scenes, |s| scene_contribution(bundle, s, tap));
    let mut acc = CategoryAccumulator::new(tap, cfg.n_categories, cfg.sigma);
    for part in parts {
        for (c, row) in part? {
            acc.add(c, &row)?;
        }
    }
    for c in acc.missing() {
        log::warn!("category {c} has no samples at tap {tap:?}");
    }
    Ok(acc)
}

/// Row `k` is the mean of category `k`'s activations.
pub fn build_dictionary(acc: &CategoryAccumulator, modality: Modality) -> Result<ConfounderDictionary> {
    build_dictionary_named(acc, modality, None)
}

pub fn build_dictionary_named(
    acc: &CategoryAccumulator,
    modality: Modality,
    names: Option<&[String]>,
) -> Result<ConfounderDictionary> {
    if acc.tap.modality() != modality {
        return Err(Error::Argument(format!(
            "tap {:?} yields {:?} activations, not {modality:?}",
            acc.tap,
            acc.tap.modality()
        )));
    }
    if let Some(&c) = acc.missing().first() {
        let name = names
            .and_then(|n| n.get(c).cloned())
            .unwrap_or_else(|| format!("#{c}"));
        return Err(Error::Coverage { category: c, name });
    }
    let mut data = Vec::with_capacity(acc.k() * acc.width());
    for (s, &n) in acc.sums.iter().zip(&acc.counts) {
        data.extend(s.iter().map(|v| v / n as f64));
    }
    Ok(ConfounderDictionary {
        modality,
        entries: Tensor::new(vec![acc.k(), acc.width()], data)?,
        sample_counts: acc.counts.clone(),
    })
}

/// Builds the projector and both final-layer dictionaries from one
/// non-causal checkpoint.
pub fn build_dictionary_set(bundle: &ModelBundle, world: &World, scenes: &[SceneInstance], exec: Exec) -> Result<DictionarySet> {
    let names = Some(world.category_names.as_slice());
    let mk = |tap: Tap| -> Result<ConfounderDictionary> {
        let acc = collect_category_activations_with(exec, bundle, scenes, tap)?;
        build_dictionary_named(&acc, tap.modality(), names)
    };
    Ok(DictionarySet {
        projector_visual: Some(mk(Tap::PostProjector)?),
        final_visual: Some(mk(Tap::FinalHiddenVisual)?),
        final_textual: Some(mk(Tap::FinalHiddenTextual)?),
    })
}

/// Optimizer step at which a `fraction`-of-an-epoch snapshot is taken.
pub fn estimation_step(fraction: f64, steps_per_epoch: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("fraction {fraction} outside (0, 1]")));
    }
    if steps_per_epoch == 0 {
        return Err(Error::Argument("steps_per_epoch must be positive".into()));
    }
    Ok(((fraction * steps_per_epoch as f64).ceil() as usize).max(1))
}

/// The snapshot of a non-causal run after `⌈fraction × steps_per_epoch⌉`
/// optimizer steps. The run must have been configured to retain it.
pub fn estimation_checkpoint(state: &TrainState, fraction: f64) -> Result<ModelBundle> {
    let step = estimation_step(fraction, state.config().steps_per_epoch)?;
    if state.step() == 0 {
        return Err(Error::State("estimation checkpoint requested before training started".into()));
    }
    if state.bundle().config().is_causal() {
        return Err(Error::State("estimation checkpoint must come from a non-causal run".into()));
    }
    if step == state.step() {
        return Ok(state.bundle().clone());
    }
    state.snapshot(step).cloned().ok_or_else(|| {
        Error::State(format!(
            "no snapshot retained at step {step} (run is at step {})",
            state.step()
        ))
    })
}
