use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AttnVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::numkit::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Frozen encoder prototypes.
    Encoder,
    Projector,
    /// Confounder-attention branch inside the projector.
    ProjectorIntervention,
    /// Confounder-attention branches on decoder layer outputs.
    Intervention,
    Decoder,
    /// Confounder dictionaries; never trained.
    Dictionary,
}

impl ParamGroup {
    pub fn is_frozen(self) -> bool {
        matches!(self, ParamGroup::Encoder | ParamGroup::Dictionary)
    }

    pub fn is_intervention(self) -> bool {
        matches!(self, ParamGroup::ProjectorIntervention | ParamGroup::Intervention)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].tensor)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].tensor
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}

/// Indices of one confounder-attention branch. Under `shared_kv` the single
/// `W_kv` lives in `w_k` and `w_v` is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossAttnIds {
    pub w_q: Option<usize>,
    pub w_k: Option<usize>,
    pub w_v: Option<usize>,
    pub w_o: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinalIntervention {
    pub layer: usize,
    pub visual: CrossAttnIds,
    pub textual: CrossAttnIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub prototypes: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
    pub projector_ci: Option<CrossAttnIds>,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIds>,
    pub ln_f_g: usize,
    pub ln_f_b: usize,
    pub final_ci: Vec<FinalIntervention>,
    pub dict_projector_visual: Option<usize>,
    pub dict_final_visual: Option<usize>,
    pub dict_final_textual: Option<usize>,
}

pub const DICT_PROJECTOR_VISUAL: &str = "dict.projector.visual";
pub const DICT_FINAL_VISUAL: &str = "dict.final.visual";
pub const DICT_FINAL_TEXTUAL: &str = "dict.final.textual";

fn branch_names(prefix: &str, variant: AttnVariant) -> Vec<(&'static str, String)> {
    let names: &[&'static str] = match variant {
        AttnVariant::SharedKv => &["w_kv", "w_o"],
        AttnVariant::IndependentKv => &["w_k", "w_v", "w_o"],
        AttnVariant::QAndO => &["w_q", "w_o"],
        AttnVariant::QAndV => &["w_q", "w_v"],
    };
    names.iter().map(|n| (*n, format!("{prefix}.{n}"))).collect()
}

/// Output map of a branch: `W_o`, or `W_v` for the variant without `W_o`.
pub fn output_map_name(variant: AttnVariant) -> &'static str {
    match variant {
        AttnVariant::QAndV => "w_v",
        _ => "w_o",
    }
}

fn push_branch(
    store: &mut ParamStore,
    group: ParamGroup,
    prefix: &str,
    variant: AttnVariant,
    sigma: usize,
    rng: &mut ChaCha8Rng,
) {
    let std = 1.0 / (sigma as f64).sqrt();
    let out = output_map_name(variant);
    for (short, name) in branch_names(prefix, variant) {
        // Output maps start at zero so the causal model begins exactly at
        // the baseline function.
        let t = if short == out {
            Tensor::zeros(&[sigma, sigma])
        } else {
            Tensor::randn(&[sigma, sigma], std, rng)
        };
        store.push(name, group, t);
    }
}

fn branch_ids(store: &ParamStore, prefix: &str, variant: AttnVariant) -> Result<CrossAttnIds> {
    let get = |n: &str| store.require(&format!("{prefix}.{n}"));
    Ok(match variant {
        AttnVariant::SharedKv => CrossAttnIds {
            w_q: None,
            w_k: Some(get("w_kv")?),
            w_v: None,
            w_o: Some(get("w_o")?),
        },
        AttnVariant::IndependentKv => CrossAttnIds {
            w_q: None,
            w_k: Some(get("w_k")?),
            w_v: Some(get("w_v")?),
            w_o: Some(get("w_o")?),
        },
        AttnVariant::QAndO => CrossAttnIds {
            w_q: Some(get("w_q")?),
            w_k: None,
            w_v: None,
            w_o: Some(get("w_o")?),
        },
        AttnVariant::QAndV => CrossAttnIds {
            w_q: Some(get("w_q")?),
            w_k: None,
            w_v: Some(get("w_v")?),
            w_o: None,
        },
    })
}

pub fn projector_branch_prefix() -> &'static str {
    "projector.ci"
}

pub fn final_branch_prefix(layer: usize, modality: &str) -> String {
    format!("intervention.l{layer}.{modality}")
}

/// Shared parameters come from stream 0 of the seed; projector and decoder
/// intervention branches from streams 1 and 2. A baseline and a causal
/// model built from one seed therefore agree on every shared tensor.
pub fn init_params(cfg: &ModelConfig, prototypes: &Tensor, seed: u64) -> ParamStore {
    let s = cfg.sigma;
    let fd = cfg.feature_dim;
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let resid = lin(s) / ((2 * cfg.n_layers) as f64).sqrt();
    let hidden = 4 * s;

    store.push("encoder.prototypes", ParamGroup::Encoder, prototypes.clone());
    store.push("projector.fc1.w", ParamGroup::Projector, Tensor::randn(&[fd, s], lin(fd), &mut rng));
    store.push("projector.fc1.b", ParamGroup::Projector, Tensor::zeros(&[1, s]));
    store.push("projector.fc2.w", ParamGroup::Projector, Tensor::randn(&[s, s], lin(s), &mut rng));
    store.push("projector.fc2.b", ParamGroup::Projector, Tensor::zeros(&[1, s]));
    store.push("tok_emb", ParamGroup::Decoder, Tensor::randn(&[cfg.vocab_size, s], lin(s), &mut rng));
    store.push("pos_emb", ParamGroup::Decoder, Tensor::randn(&[cfg.max_len, s], 0.1 * lin(s), &mut rng));
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        store.push(p("ln1.g"), ParamGroup::Decoder, Tensor::filled(&[1, s], 1.0));
        store.push(p("ln1.b"), ParamGroup::Decoder, Tensor::zeros(&[1, s]));
        store.push(p("attn.wq"), ParamGroup::Decoder, Tensor::randn(&[s, s], lin(s), &mut rng));
        store.push(p("attn.wk"), ParamGroup::Decoder, Tensor::randn(&[s, s], lin(s), &mut rng));
        store.push(p("attn.wv"), ParamGroup::Decoder, Tensor::randn(&[s, s], lin(s), &mut rng));
        store.push(p("attn.wo"), ParamGroup::Decoder, Tensor::randn(&[s, s], resid, &mut rng));
        store.push(p("ln2.g"), ParamGroup::Decoder, Tensor::filled(&[1, s], 1.0));
        store.push(p("ln2.b"), ParamGroup::Decoder, Tensor::zeros(&[1, s]));
        store.push(p("mlp.w1"), ParamGroup::Decoder, Tensor::randn(&[s, hidden], lin(s), &mut rng));
        store.push(p("mlp.b1"), ParamGroup::Decoder, Tensor::zeros(&[1, hidden]));
        store.push(p("mlp.w2"), ParamGroup::Decoder, Tensor::randn(&[hidden, s], resid * (s as f64 / hidden as f64).sqrt(), &mut rng));
        store.push(p("mlp.b2"), ParamGroup::Decoder, Tensor::zeros(&[1, s]));
    }
    store.push("ln_f.g", ParamGroup::Decoder, Tensor::filled(&[1, s], 1.0));
    store.push("ln_f.b", ParamGroup::Decoder, Tensor::zeros(&[1, s]));

    if cfg.causal_projector {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(1);
        push_branch(&mut store, ParamGroup::ProjectorIntervention, projector_branch_prefix(), cfg.attn_variant, s, &mut r);
    }
    if cfg.causal_final_layer {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(2);
        for l in cfg.n_layers - cfg.intervention_layers..cfg.n_layers {
            push_branch(&mut store, ParamGroup::Intervention, &final_branch_prefix(l, "visual"), cfg.attn_variant, s, &mut r);
            push_branch(&mut store, ParamGroup::Intervention, &final_branch_prefix(l, "textual"), cfg.attn_variant, s, &mut r);
        }
    }
    store
}

pub fn resolve_ids(cfg: &ModelConfig, store: &ParamStore) -> Result<ParamIds> {
    let r = |n: &str| store.require(n);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        layers.push(LayerIds {
            ln1_g: r(&p("ln1.g"))?,
            ln1_b: r(&p("ln1.b"))?,
            wq: r(&p("attn.wq"))?,
            wk: r(&p("attn.wk"))?,
            wv: r(&p("attn.wv"))?,
            wo: r(&p("attn.wo"))?,
            ln2_g: r(&p("ln2.g"))?,
            ln2_b: r(&p("ln2.b"))?,
            w1: r(&p("mlp.w1"))?,
            b1: r(&p("mlp.b1"))?,
            w2: r(&p("mlp.w2"))?,
            b2: r(&p("mlp.b2"))?,
        });
    }
    let projector_ci = if cfg.causal_projector {
        Some(branch_ids(store, projector_branch_prefix(), cfg.attn_variant)?)
    } else {
        None
    };
    let mut final_ci = Vec::new();
    if cfg.causal_final_layer {
        for l in cfg.n_layers - cfg.intervention_layers..cfg.n_layers {
            final_ci.push(FinalIntervention {
                layer: l,
                visual: branch_ids(store, &final_branch_prefix(l, "visual"), cfg.attn_variant)?,
                textual: branch_ids(store, &final_branch_prefix(l, "textual"), cfg.attn_variant)?,
            });
        }
    }
    Ok(ParamIds {
        prototypes: r("encoder.prototypes")?,
        fc1_w: r("projector.fc1.w")?,
        fc1_b: r("projector.fc1.b")?,
        fc2_w: r("projector.fc2.w")?,
        fc2_b: r("projector.fc2.b")?,
        projector_ci,
        tok_emb: r("tok_emb")?,
        pos_emb: r("pos_emb")?,
        layers,
        ln_f_g: r("ln_f.g")?,
        ln_f_b: r("ln_f.b")?,
        final_ci,
        dict_projector_visual: store.index_of(DICT_PROJECTOR_VISUAL),
        dict_final_visual: store.index_of(DICT_FINAL_VISUAL),
        dict_final_textual: store.index_of(DICT_FINAL_TEXTUAL),
    })
}

/// Parameter handles on one graph, parallel to the store's entries.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Records every store entry as a leaf; entries for which `trainable`
    /// returns true will receive gradients.
    pub fn new(g: &mut Graph, store: &ParamStore, trainable: impl Fn(ParamGroup) -> bool) -> Result<Self> {
        let mut vars = Vec::with_capacity(store.len());
        for e in store.entries() {
            let v = if !e.group.is_frozen() && trainable(e.group) {
                g.param(&e.tensor)?
            } else {
                g.constant(e.tensor.clone())?
            };
            vars.push(v);
        }
        Ok(Self { vars })
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
