//! Cross-attention from hidden rows onto a fixed confounder dictionary.

use super::config::AttnVariant;
use super::params::CrossAttnIds;
use crate::error::{shape_err, Error, Result};
use crate::numkit::{Graph, Tensor, Var};

/// Handles of one branch's projection matrices on a graph.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnVars {
    pub w_q: Option<Var>,
    pub w_k: Option<Var>,
    pub w_v: Option<Var>,
    pub w_o: Option<Var>,
}

impl CrossAttnVars {
    pub fn from_ids(ids: &CrossAttnIds, var: impl Fn(usize) -> Var) -> Self {
        Self {
            w_q: ids.w_q.map(&var),
            w_k: ids.w_k.map(&var),
            w_v: ids.w_v.map(&var),
            w_o: ids.w_o.map(&var),
        }
    }
}

fn need(v: Option<Var>, what: &str, variant: AttnVariant) -> Result<Var> {
    v.ok_or_else(|| Error::Config(format!("{} needs {what}", variant.name())))
}

fn forbid(v: Option<Var>, what: &str, variant: AttnVariant) -> Result<()> {
    match v {
        Some(_) => Err(Error::Config(format!("{} must not carry {what}", variant.name()))),
        None => Ok(()),
    }
}

/// Records one confounder-attention branch on `g`.
///
/// `x` is `m×σ`, `d` is `K×σ`. Returns the `m×σ` branch output and the
/// `m×K` attention weights.
pub fn cross_attention(
    g: &mut Graph,
    x: Var,
    d: Var,
    p: &CrossAttnVars,
    variant: AttnVariant,
) -> Result<(Var, Var)> {
    let sigma = g.value(d).cols();
    if g.value(x).cols() != sigma {
        return Err(shape_err(
            "cross_attention",
            format!("query width {} vs dictionary width {sigma}", g.value(x).cols()),
        ));
    }
    let scale = 1.0 / (sigma as f64).sqrt();
    match variant {
        AttnVariant::SharedKv => {
            forbid(p.w_q, "W_q", variant)?;
            forbid(p.w_v, "a separate W_v", variant)?;
            let m = g.matmul(d, need(p.w_k, "W_kv", variant)?)?;
            let s = g.matmul_nt(x, m)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax_rows(s)?;
            let ctx = g.matmul(a, m)?;
            let out = g.matmul(ctx, need(p.w_o, "W_o", variant)?)?;
            Ok((out, a))
        }
        AttnVariant::IndependentKv => {
            forbid(p.w_q, "W_q", variant)?;
            let k = g.matmul(d, need(p.w_k, "W_k", variant)?)?;
            let v = g.matmul(d, need(p.w_v, "W_v", variant)?)?;
            let s = g.matmul_nt(x, k)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax_rows(s)?;
            let ctx = g.matmul(a, v)?;
            let out = g.matmul(ctx, need(p.w_o, "W_o", variant)?)?;
            Ok((out, a))
        }
        AttnVariant::QAndO => {
            forbid(p.w_k, "W_k", variant)?;
            forbid(p.w_v, "W_v", variant)?;
            let q = g.matmul(x, need(p.w_q, "W_q", variant)?)?;
            let s = g.matmul_nt(q, d)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax_rows(s)?;
            let ctx = g.matmul(a, d)?;
            let out = g.matmul(ctx, need(p.w_o, "W_o", variant)?)?;
            Ok((out, a))
        }
        AttnVariant::QAndV => {
            forbid(p.w_k, "W_k", variant)?;
            forbid(p.w_o, "W_o", variant)?;
            let q = g.matmul(x, need(p.w_q, "W_q", variant)?)?;
            let s = g.matmul_nt(q, d)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax_rows(s)?;
            let v = g.matmul(d, need(p.w_v, "W_v", variant)?)?;
            let out = g.matmul(a, v)?;
            Ok((out, a))
        }
    }
}

/// Owned projection matrices of one branch, for eager evaluation.
///
/// Under [`AttnVariant::SharedKv`] the single `W_kv` is stored in `w_k`
/// and serves as both key and value map.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams {
    pub variant: AttnVariant,
    pub w_q: Option<Tensor>,
    pub w_k: Option<Tensor>,
    pub w_v: Option<Tensor>,
    pub w_o: Option<Tensor>,
}

impl CrossAttentionParams {
    pub fn shared_kv(w_kv: Tensor, w_o: Tensor) -> Self {
        Self {
            variant: AttnVariant::SharedKv,
            w_q: None,
            w_k: Some(w_kv),
            w_v: None,
            w_o: Some(w_o),
        }
    }

    pub fn independent_kv(w_k: Tensor, w_v: Tensor, w_o: Tensor) -> Self {
        Self {
            variant: AttnVariant::IndependentKv,
            w_q: None,
            w_k: Some(w_k),
            w_v: Some(w_v),
            w_o: Some(w_o),
        }
    }

    pub fn q_and_o(w_q: Tensor, w_o: Tensor) -> Self {
        Self {
            variant: AttnVariant::QAndO,
            w_q: Some(w_q),
            w_k: None,
            w_v: None,
            w_o: Some(w_o),
        }
    }

    pub fn q_and_v(w_q: Tensor, w_v: Tensor) -> Self {
        Self {
            variant: AttnVariant::QAndV,
            w_q: Some(w_q),
            w_k: None,
            w_v: Some(w_v),
            w_o: None,
        }
    }

    pub fn is_shared_kv(&self) -> bool {
        self.variant == AttnVariant::SharedKv
    }

    fn record(&self, g: &mut Graph) -> Result<CrossAttnVars> {
        let mut c = |t: &Option<Tensor>| -> Result<Option<Var>> {
            t.as_ref().map(|t| g.constant(t.clone())).transpose()
        };
        Ok(CrossAttnVars {
            w_q: c(&self.w_q)?,
            w_k: c(&self.w_k)?,
            w_v: c(&self.w_v)?,
            w_o: c(&self.w_o)?,
        })
    }
}

/// Eager branch evaluation: returns (output, attention weights).
pub fn confounder_cross_attention(
    x: &Tensor,
    dictionary: &Tensor,
    params: &CrossAttentionParams,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let dv = g.constant(dictionary.clone())?;
    let p = params.record(&mut g)?;
    let (out, a) = cross_attention(&mut g, xv, dv, &p, params.variant)?;
    Ok((g.value(out).clone(), g.value(a).clone()))
}
