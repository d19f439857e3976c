use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projection-matrix parameterization of the confounder attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttnVariant {
    /// `softmax(X (D W_kv)ᵀ/√σ) (D W_kv) W_o`
    #[default]
    SharedKv,
    /// `softmax(X (D W_k)ᵀ/√σ) (D W_v) W_o`
    IndependentKv,
    /// `softmax((X W_q) Dᵀ/√σ) D W_o`
    QAndO,
    /// `softmax((X W_q) Dᵀ/√σ) D W_v`, no output map
    QAndV,
}

impl AttnVariant {
    pub const ALL: [AttnVariant; 4] = [
        AttnVariant::SharedKv,
        AttnVariant::IndependentKv,
        AttnVariant::QAndO,
        AttnVariant::QAndV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttnVariant::SharedKv => "shared_kv",
            AttnVariant::IndependentKv => "independent_kv",
            AttnVariant::QAndO => "q_and_o",
            AttnVariant::QAndV => "q_and_v",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown attention variant {s:?}")))
    }
}

/// Where the causal modules are installed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Baseline,
    OnlyTransformer,
    OnlyProjection,
    Both,
}

impl Placement {
    pub const ALL: [Placement; 4] = [
        Placement::Baseline,
        Placement::OnlyTransformer,
        Placement::OnlyProjection,
        Placement::Both,
    ];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Placement::Baseline => (false, false),
            Placement::OnlyTransformer => (false, true),
            Placement::OnlyProjection => (true, false),
            Placement::Both => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Placement::Baseline => "baseline",
            Placement::OnlyTransformer => "only_transformer",
            Placement::OnlyProjection => "only_projection",
            Placement::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown placement {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub sigma: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Filled from the world when left at zero.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub n_categories: usize,
    pub max_len: usize,
    pub causal_projector: bool,
    pub causal_final_layer: bool,
    pub attn_variant: AttnVariant,
    /// Number of top decoder layers that carry the intervention module.
    pub intervention_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sigma: 32,
            n_layers: 4,
            n_heads: 2,
            vocab_size: 0,
            feature_dim: 0,
            n_categories: 0,
            max_len: 16,
            causal_projector: false,
            causal_final_layer: false,
            attn_variant: AttnVariant::SharedKv,
            intervention_layers: 1,
        }
    }
}

impl ModelConfig {
    pub fn with_placement(mut self, placement: Placement) -> Self {
        let (p, f) = placement.flags();
        self.causal_projector = p;
        self.causal_final_layer = f;
        self
    }

    pub fn placement(&self) -> Placement {
        match (self.causal_projector, self.causal_final_layer) {
            (false, false) => Placement::Baseline,
            (false, true) => Placement::OnlyTransformer,
            (true, false) => Placement::OnlyProjection,
            (true, true) => Placement::Both,
        }
    }

    pub fn is_causal(&self) -> bool {
        self.causal_projector || self.causal_final_layer
    }

    pub fn head_dim(&self) -> usize {
        self.sigma / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma < 2 || self.n_heads == 0 || self.sigma % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "sigma {} must be >= 2 and divisible by n_heads {}",
                self.sigma, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("need at least one decoder layer".into()));
        }
        if self.vocab_size == 0 || self.feature_dim == 0 || self.n_categories == 0 {
            return Err(Error::Config("vocab_size, feature_dim and n_categories must be set".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.causal_final_layer && (self.intervention_layers == 0 || self.intervention_layers > self.n_layers) {
            return Err(Error::Config(format!(
                "intervention_layers {} must lie in 1..={}",
                self.intervention_layers, self.n_layers
            )));
        }
        Ok(())
    }
}
