//! The toy vision-language model.
//!
//! Visual features pass through an identity encoder (the scene already holds
//! prototype-plus-noise vectors), a two-layer GELU projector `g_f`, and then
//! a pre-norm decoder-only transformer over `[soft tokens; text tokens]`.
//! The LM head is tied to the token embeddings.
//!
//! Two causal modules can be switched on independently:
//!
//! * the causal-driven projector adds a confounder-attention term over the
//!   visual dictionary to `g_f`'s output, with queries lifted to `σ` by
//!   `g_f`'s first linear layer;
//! * the intervention module adds a visual and a textual confounder-attention
//!   branch to the residual stream at the output of the top decoder layer(s).
//!
//! Every branch's output map starts at zero, so a freshly built causal model
//! computes exactly the baseline function.

mod attention;
mod config;
mod params;

use serde::{Deserialize, Serialize};

pub use attention::{confounder_cross_attention, cross_attention, CrossAttentionParams, CrossAttnVars};
pub use config::{AttnVariant, ModelConfig, Placement};
pub use params::{
    final_branch_prefix, output_map_name, projector_branch_prefix, Bound, CrossAttnIds, FinalIntervention,
    LayerIds, ParamEntry, ParamGroup, ParamIds, ParamStore, DICT_FINAL_TEXTUAL, DICT_FINAL_VISUAL,
    DICT_PROJECTOR_VISUAL,
};

use crate::error::{shape_err, Error, Result};
use crate::numkit::{Graph, Tensor, Var};
use crate::world::{SceneInstance, World, BOS, EOS, NO, QUERY, YES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
}

/// Category-averaged activations used as keys and values of the
/// confounder attention. Frozen once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderDictionary {
    pub modality: Modality,
    /// `K×σ`
    pub entries: Tensor,
    pub sample_counts: Vec<u64>,
}

impl ConfounderDictionary {
    pub fn k(&self) -> usize {
        self.entries.rows()
    }

    pub fn width(&self) -> usize {
        self.entries.cols()
    }
}

/// The three dictionaries a fully causal model consumes.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DictionarySet {
    /// Post-projector visual dictionary, for the causal projector.
    pub projector_visual: Option<ConfounderDictionary>,
    /// Final-layer visual and textual dictionaries, for the intervention module.
    pub final_visual: Option<ConfounderDictionary>,
    pub final_textual: Option<ConfounderDictionary>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
}

/// A yes/no object-presence question with its correct answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeQuery {
    pub category: usize,
    pub expect_yes: bool,
}

/// One training item: a scene (captioned) plus presence probes about it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub scene: SceneInstance,
    pub probes: Vec<ProbeQuery>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub n_soft: usize,
    /// `m×feature_dim` encoder output (absent with no soft tokens).
    pub encoder: Option<Var>,
    /// `m×σ` soft tokens.
    pub soft: Option<Var>,
    /// Output of each decoder layer, after any intervention at that layer.
    pub layers: Vec<Var>,
    /// Final-layer-norm output consumed by the LM head.
    pub pre_head: Var,
    pub logits: Var,
}

/// Eager copy of a forward pass's activations.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub soft: Option<Tensor>,
    pub layers: Vec<Tensor>,
    pub pre_head: Tensor,
    pub logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    store: ParamStore,
    ids: ParamIds,
    vocab_category_offset: usize,
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

impl ModelBundle {
    /// Builds a fresh model for `world`. Size fields left at zero in `cfg`
    /// are filled from the world.
    pub fn init(cfg: &ModelConfig, world: &World, seed: u64) -> Result<Self> {
        let mut cfg = cfg.clone();
        if cfg.vocab_size == 0 {
            cfg.vocab_size = world.vocabulary.len();
        }
        if cfg.feature_dim == 0 {
            cfg.feature_dim = world.config.feature_dim;
        }
        if cfg.n_categories == 0 {
            cfg.n_categories = world.k();
        }
        if cfg.vocab_size != world.vocabulary.len()
            || cfg.feature_dim != world.config.feature_dim
            || cfg.n_categories != world.k()
        {
            return Err(Error::Config("model sizes disagree with the world".into()));
        }
        cfg.validate()?;
        let store = params::init_params(&cfg, &world.prototypes, seed);
        Self::from_store(cfg, store, world.vocabulary.category_offset())
    }

    pub fn from_store(config: ModelConfig, store: ParamStore, vocab_category_offset: usize) -> Result<Self> {
        config.validate()?;
        let ids = params::resolve_ids(&config, &store)?;
        Ok(Self {
            config,
            store,
            ids,
            vocab_category_offset,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable access to tensor values. Names and order are fixed.
    pub fn param_entries_mut(&mut self) -> &mut [ParamEntry] {
        self.store.entries_mut()
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn vocab_category_offset(&self) -> usize {
        self.vocab_category_offset
    }

    pub fn category_token(&self, c: usize) -> Result<usize> {
        if c >= self.config.n_categories {
            return Err(Error::Argument(format!(
                "category {c} outside 0..{}",
                self.config.n_categories
            )));
        }
        Ok(self.vocab_category_offset + c)
    }

    /// Installs (or replaces) frozen dictionaries.
    pub fn attach_dictionaries(&mut self, dicts: &DictionarySet) -> Result<()> {
        let slots = [
            (DICT_PROJECTOR_VISUAL, &dicts.projector_visual, Modality::Visual),
            (DICT_FINAL_VISUAL, &dicts.final_visual, Modality::Visual),
            (DICT_FINAL_TEXTUAL, &dicts.final_textual, Modality::Textual),
        ];
        for (name, d, modality) in slots {
            let Some(d) = d else { continue };
            if d.modality != modality {
                return Err(Error::Argument(format!("{name} expects a {modality:?} dictionary")));
            }
            if d.k() != self.config.n_categories || d.width() != self.config.sigma {
                return Err(shape_err(
                    "attach_dictionaries",
                    format!("{name} is {}x{}, expected {}x{}", d.k(), d.width(), self.config.n_categories, self.config.sigma),
                ));
            }
            match self.store.get_mut(name) {
                Some(t) => *t = d.entries.clone(),
                None => {
                    self.store.push(name, ParamGroup::Dictionary, d.entries.clone());
                }
            }
        }
        self.ids = params::resolve_ids(&self.config, &self.store)?;
        Ok(())
    }

    pub fn dictionary_tensor(&self, name: &str) -> Option<&Tensor> {
        self.store.get(name)
    }

    /// Zeroes the output map of every intervention branch.
    pub fn zero_intervention_outputs(&mut self) {
        let out = output_map_name(self.config.attn_variant);
        for e in self.store.entries_mut() {
            if e.group.is_intervention() && e.name.ends_with(&format!(".{out}")) {
                e.tensor.data_mut().fill(0.0);
            }
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> Result<Bound> {
        Bound::new(g, &self.store, trainable)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Bound> {
        Bound::new(g, &self.store, |_| false)
    }

    /// The dictionary in `slot` as attention keys and values: every entry
    /// minus the mean entry, divided by the root mean square of the
    /// centred entries.
    fn dict_var(&self, g: &mut Graph, b: &Bound, slot: Option<usize>, what: &str) -> Result<Var> {
        let i = slot.ok_or_else(|| Error::Config(format!("missing {what} dictionary")))?;
        let _ = b;
        g.constant(normalized_dictionary(self.store.tensor(i)))
    }

    /// Identity encoder over the scene's stored features.
    pub fn encode_visual(scene: &SceneInstance) -> Result<Tensor> {
        Tensor::from_rows(&scene.features)
    }

    /// Records `g_f` (plus the confounder term when enabled) for `features`.
    pub fn project_graph(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        let ids = &self.ids;
        let h = linear(g, features, b.var(ids.fc1_w), Some(b.var(ids.fc1_b)))?;
        let a = g.gelu(h)?;
        let base = linear(g, a, b.var(ids.fc2_w), Some(b.var(ids.fc2_b)))?;
        if !self.config.causal_projector {
            return Ok(base);
        }
        let ci = ids
            .projector_ci
            .as_ref()
            .ok_or_else(|| Error::Config("causal projector parameters missing".into()))?;
        let d = self.dict_var(g, b, ids.dict_projector_visual, "projector visual")?;
        let p = CrossAttnVars::from_ids(ci, |i| b.var(i));
        let (z, _) = cross_attention(g, h, d, &p, self.config.attn_variant)?;
        g.add(base, z)
    }

    /// Records the intervention module on `h` for the branch set `fi`:
    /// `h + visual(h) + textual(h)`.
    pub fn intervention_graph(&self, g: &mut Graph, b: &Bound, h: Var, fi: &FinalIntervention) -> Result<Var> {
        let dv = self.dict_var(g, b, self.ids.dict_final_visual, "final visual")?;
        let dt = self.dict_var(g, b, self.ids.dict_final_textual, "final textual")?;
        let pv = CrossAttnVars::from_ids(&fi.visual, |i| b.var(i));
        let pt = CrossAttnVars::from_ids(&fi.textual, |i| b.var(i));
        let (v, _) = cross_attention(g, h, dv, &pv, self.config.attn_variant)?;
        let (t, _) = cross_attention(g, h, dt, &pt, self.config.attn_variant)?;
        let ht = g.add(h, v)?;
        g.add(ht, t)
    }

    fn block(&self, g: &mut Graph, b: &Bound, x: Var, l: &LayerIds, segments: &[(usize, usize)]) -> Result<Var> {
        let cfg = &self.config;
        let n = g.value(x).rows();
        let a = g.layer_norm(x, b.var(l.ln1_g), b.var(l.ln1_b))?;
        let q = g.matmul(a, b.var(l.wq))?;
        let k = g.matmul(a, b.var(l.wk))?;
        let v = g.matmul(a, b.var(l.wv))?;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            heads.push(g.segment_attention(qh, kh, vh, segments, scale)?);
        }
        debug_assert_eq!(g.value(heads[0]).rows(), n);
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let att = g.matmul(cat, b.var(l.wo))?;
        let x = g.add(x, att)?;
        let c = g.layer_norm(x, b.var(l.ln2_g), b.var(l.ln2_b))?;
        let m = linear(g, c, b.var(l.w1), Some(b.var(l.b1)))?;
        let m = g.gelu(m)?;
        let m = linear(g, m, b.var(l.w2), Some(b.var(l.b2)))?;
        g.add(x, m)
    }

    /// Records the decoder over `[soft; embed(text)]`.
    pub fn decode_graph(&self, g: &mut Graph, b: &Bound, soft: Option<Var>, text: &[usize]) -> Result<(Vec<Var>, Var, Var)> {
        let ids = &self.ids;
        let m = soft.map_or(0, |s| g.value(s).rows());
        let n = m + text.len();
        if n == 0 {
            return Err(Error::Argument("empty input sequence".into()));
        }
        if n > self.config.max_len {
            return Err(Error::Argument(format!(
                "sequence of {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let mut parts = Vec::with_capacity(2);
        if let Some(s) = soft {
            parts.push(s);
        }
        if !text.is_empty() {
            if let Some(&bad) = text.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Index(format!("token {bad} outside vocabulary")));
            }
            parts.push(g.gather_rows(b.var(ids.tok_emb), text)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let positions: Vec<usize> = (0..n).collect();
        self.decode_packed(g, b, x, &positions, &[(0, n)])
    }

    /// Records the decoder over several sequences stacked row-wise in `x`.
    /// `segments` gives each sequence's `(start, len)` rows and `positions`
    /// each row's position inside its sequence. Attention never crosses a
    /// segment boundary, so every row's output equals the single-sequence
    /// result up to summation order.
    pub fn decode_packed(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        positions: &[usize],
        segments: &[(usize, usize)],
    ) -> Result<(Vec<Var>, Var, Var)> {
        let ids = &self.ids;
        if let Some(&(_, len)) = segments.iter().find(|&&(_, len)| len > self.config.max_len) {
            return Err(Error::Argument(format!(
                "sequence of {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let pos = g.gather_rows(b.var(ids.pos_emb), positions)?;
        let mut x = g.add(x, pos)?;

        let mut layers = Vec::with_capacity(self.config.n_layers);
        for (li, l) in ids.layers.iter().enumerate() {
            x = self.block(g, b, x, l, segments)?;
            if let Some(fi) = ids.final_ci.iter().find(|f| f.layer == li) {
                x = self.intervention_graph(g, b, x, fi)?;
            }
            layers.push(x);
        }
        let pre = g.layer_norm(x, b.var(ids.ln_f_g), b.var(ids.ln_f_b))?;
        let logits = g.matmul_nt(pre, b.var(ids.tok_emb))?;
        Ok((layers, pre, logits))
    }

    /// Full forward pass for a scene's features followed by `text`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, features: &[Vec<f64>], text: &[usize]) -> Result<Trace> {
        let (encoder, soft) = if features.is_empty() {
            (None, None)
        } else {
            let f = Tensor::from_rows(features)?;
            if f.cols() != self.config.feature_dim {
                return Err(shape_err(
                    "forward",
                    format!("features are {} wide, model expects {}", f.cols(), self.config.feature_dim),
                ));
            }
            let e = g.constant(f)?;
            (Some(e), Some(self.project_graph(g, b, e)?))
        };
        let (layers, pre_head, logits) = self.decode_graph(g, b, soft, text)?;
        Ok(Trace {
            n_soft: features.len(),
            encoder,
            soft,
            layers,
            pre_head,
            logits,
        })
    }

    /// Eager projector: soft tokens for `features` (`m×feature_dim`).
    pub fn causal_projector(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g)?;
        let f = g.constant(features.clone())?;
        let s = self.project_graph(&mut g, &b, f)?;
        Ok(g.value(s).clone())
    }

    /// Eager decoder over given soft tokens.
    pub fn decoder_forward(&self, soft: &Tensor, text: &[usize]) -> Result<HiddenStates> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g)?;
        let s = if soft.rows() == 0 || soft.is_empty() {
            None
        } else {
            Some(g.constant(soft.clone())?)
        };
        let (layers, pre, logits) = self.decode_graph(&mut g, &b, s, text)?;
        Ok(HiddenStates {
            soft: s.map(|s| g.value(s).clone()),
            layers: layers.iter().map(|&v| g.value(v).clone()).collect(),
            pre_head: g.value(pre).clone(),
            logits: g.value(logits).clone(),
        })
    }

    /// Eager intervention module applied to `h` (`m×σ`) with the top
    /// intervention layer's branches.
    pub fn causal_intervention(&self, h: &Tensor) -> Result<Tensor> {
        let fi = self
            .ids
            .final_ci
            .last()
            .ok_or_else(|| Error::Config("intervention module not enabled".into()))?
            .clone();
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g)?;
        let hv = g.constant(h.clone())?;
        let out = self.intervention_graph(&mut g, &b, hv, &fi)?;
        Ok(g.value(out).clone())
    }

    /// Branch outputs of the top intervention layer, separately.
    pub fn intervention_branches(&self, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let fi = self
            .ids
            .final_ci
            .last()
            .ok_or_else(|| Error::Config("intervention module not enabled".into()))?
            .clone();
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g)?;
        let hv = g.constant(h.clone())?;
        let dv = self.dict_var(&mut g, &b, self.ids.dict_final_visual, "final visual")?;
        let dt = self.dict_var(&mut g, &b, self.ids.dict_final_textual, "final textual")?;
        let pv = CrossAttnVars::from_ids(&fi.visual, |i| b.var(i));
        let pt = CrossAttnVars::from_ids(&fi.textual, |i| b.var(i));
        let (v, _) = cross_attention(&mut g, hv, dv, &pv, self.config.attn_variant)?;
        let (t, _) = cross_attention(&mut g, hv, dt, &pt, self.config.attn_variant)?;
        Ok((g.value(v).clone(), g.value(t).clone()))
    }

    /// LM head on pre-head states: `h · Eᵀ` with the tied embeddings.
    pub fn next_token_logits(&self, h: &Tensor) -> Result<Tensor> {
        h.matmul(&self.store.tensor(self.ids.tok_emb).transpose())
    }

    /// Eager full forward.
    pub fn hidden_states(&self, features: &[Vec<f64>], text: &[usize]) -> Result<HiddenStates> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g)?;
        let t = self.forward(&mut g, &b, features, text)?;
        Ok(HiddenStates {
            soft: t.soft.map(|s| g.value(s).clone()),
            layers: t.layers.iter().map(|&v| g.value(v).clone()).collect(),
            pre_head: g.value(t.pre_head).clone(),
            logits: g.value(t.logits).clone(),
        })
    }

    pub fn logits(&self, features: &[Vec<f64>], text: &[usize]) -> Result<Tensor> {
        Ok(self.hidden_states(features, text)?.logits)
    }

    /// Greedy decoding from `BOS` until `EOS` or `max_len` text tokens.
    pub fn generate_caption(&self, scene: &SceneInstance, max_len: usize) -> Result<Vec<usize>> {
        let budget = max_len.min(self.config.max_len.saturating_sub(scene.features.len()));
        let mut text = vec![BOS];
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g)?;
        while text.len() < budget {
            let t = self.forward(&mut g, &b, &scene.features, &text)?;
            let logits = g.value(t.logits);
            let row = logits.row(logits.rows() - 1);
            let next = argmax(row);
            text.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(text)
    }

    /// Asks whether `category` is present; the answer is the larger of the
    /// `YES`/`NO` logits after `[soft; QUERY, category]`.
    pub fn answer_probe(&self, scene: &SceneInstance, category: usize) -> Result<Answer> {
        let margin = self.probe_margin(scene, category)?;
        Ok(if margin > 0.0 { Answer::Yes } else { Answer::No })
    }

    /// `logit(YES) − logit(NO)` for a presence probe.
    pub fn probe_margin(&self, scene: &SceneInstance, category: usize) -> Result<f64> {
        let tok = self.category_token(category)?;
        let logits = self.logits(&scene.features, &[QUERY, tok])?;
        let row = logits.row(logits.rows() - 1);
        Ok(row[YES] - row[NO])
    }

    /// Caption loss plus mean probe loss for one example, recorded on `g`.
    pub fn example_loss(&self, g: &mut Graph, b: &Bound, ex: &TrainExample) -> Result<Var> {
        let scene = &ex.scene;
        let m = scene.features.len();
        let cap = &scene.caption;
        if cap.len() < 2 {
            return Err(Error::Argument("caption needs at least two tokens".into()));
        }
        let t = self.forward(g, b, &scene.features, cap)?;
        let rows: Vec<usize> = (0..cap.len() - 1).map(|i| m + i).collect();
        let sel = g.gather_rows(t.logits, &rows)?;
        let mut loss = g.cross_entropy(sel, &cap[1..])?;
        if !ex.probes.is_empty() {
            let mut probe_losses = Vec::with_capacity(ex.probes.len());
            for p in &ex.probes {
                let tok = self.category_token(p.category)?;
                let tp = self.forward(g, b, &scene.features, &[QUERY, tok])?;
                let last = g.gather_rows(tp.logits, &[m + 1])?;
                let target = if p.expect_yes { YES } else { NO };
                probe_losses.push(g.cross_entropy(last, &[target])?);
            }
            let mut sum = probe_losses[0];
            for &pl in &probe_losses[1..] {
                sum = g.add(sum, pl)?;
            }
            let mean = g.scale(sum, 1.0 / probe_losses.len() as f64)?;
            loss = g.add(loss, mean)?;
        }
        Ok(loss)
    }

    /// Mean example loss over a batch, recorded on one graph.
    ///
    /// Every caption and probe sequence of the batch is packed into one row
    /// stack and decoded together. The value equals the mean of
    /// [`Self::example_loss`] over the batch up to summation order.
    pub fn batch_loss(&self, g: &mut Graph, b: &Bound, batch: &[TrainExample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let fd = self.config.feature_dim;
        let mut features = Vec::new();
        let mut soft_start = Vec::with_capacity(batch.len());
        for ex in batch {
            soft_start.push(features.len() / fd.max(1));
            for f in &ex.scene.features {
                if f.len() != fd {
                    return Err(shape_err(
                        "batch_loss",
                        format!("features are {} wide, model expects {fd}", f.len()),
                    ));
                }
                features.extend_from_slice(f);
            }
        }
        let n_soft = features.len() / fd.max(1);

        // Row layout of the shared table: all soft tokens first, then every
        // text token of every sequence.
        let mut text = Vec::new();
        let mut gather = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        let mut targets = Vec::new();
        let mut target_rows = Vec::new();
        let mut weights = Vec::new();
        let inv_b = 1.0 / batch.len() as f64;
        let mut push_seq = |soft: std::ops::Range<usize>, tokens: &[usize], text: &mut Vec<usize>| -> usize {
            let start = gather.len();
            gather.extend(soft);
            for &t in tokens {
                gather.push(n_soft + text.len());
                text.push(t);
            }
            let len = gather.len() - start;
            positions.extend(0..len);
            segments.push((start, len));
            start
        };
        for (ex, &s0) in batch.iter().zip(&soft_start) {
            let m = ex.scene.features.len();
            let cap = &ex.scene.caption;
            if cap.len() < 2 {
                return Err(Error::Argument("caption needs at least two tokens".into()));
            }
            let start = push_seq(s0..s0 + m, cap, &mut text);
            let w = inv_b / (cap.len() - 1) as f64;
            for i in 0..cap.len() - 1 {
                target_rows.push(start + m + i);
                targets.push(cap[i + 1]);
                weights.push(w);
            }
            if !ex.probes.is_empty() {
                let w = inv_b / ex.probes.len() as f64;
                for p in &ex.probes {
                    let tok = self.category_token(p.category)?;
                    let start = push_seq(s0..s0 + m, &[QUERY, tok], &mut text);
                    target_rows.push(start + m + 1);
                    targets.push(if p.expect_yes { YES } else { NO });
                    weights.push(w);
                }
            }
        }
        if let Some(&bad) = text.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!("token {bad} outside vocabulary")));
        }

        let emb = g.gather_rows(b.var(self.ids.tok_emb), &text)?;
        let table = if n_soft > 0 {
            let f = g.constant(Tensor::new(vec![n_soft, fd], features)?)?;
            let soft = self.project_graph(g, b, f)?;
            g.concat_rows(&[soft, emb])?
        } else {
            emb
        };
        let x = g.gather_rows(table, &gather)?;
        let (_, pre, _) = self.decode_packed(g, b, x, &positions, &segments)?;
        let sel = g.gather_rows(pre, &target_rows)?;
        let logits = g.matmul_nt(sel, b.var(self.ids.tok_emb))?;
        g.weighted_cross_entropy(logits, &targets, &weights)
    }
}

/// Centres the rows of `d` on their mean and scales to unit root mean
/// square. A constant dictionary maps to zeros.
pub fn normalized_dictionary(d: &Tensor) -> Tensor {
    let (k, w) = (d.rows(), d.cols());
    let mut mean = vec![0.0; w];
    for r in 0..k {
        mean.iter_mut().zip(d.row(r)).for_each(|(m, v)| *m += v / k as f64);
    }
    let mut out = d.clone();
    for r in 0..k {
        out.row_mut(r).iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    let rms = (out.data().iter().map(|v| v * v).sum::<f64>() / out.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v /= rms);
    }
    out
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

