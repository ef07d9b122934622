//! Span-level network: support/query cross-attention, O-subclass prototypes and
//! span classification over `{O, 1..N}`.

use crate::config::{AttentionMode, Distance};
use crate::error::{CdapError, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Graph, Matrix, Var};
use crate::token_net::{attention_aggregate, distance_logits, token_distribution};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameters of the shared enhancement block `LayerNorm(x + FFN(x̂))`.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionVars {
    /// 2d×d
    pub w1: Var,
    /// 1×2d
    pub b1: Var,
    /// d×2d
    pub w2: Var,
    /// 1×d
    pub b2: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// One hidden layer of width 2d with ReLU.
pub fn ffn<T: Scalar>(g: &mut Graph<T>, vars: &CrossAttentionVars, x: Var) -> Result<Var> {
    let hidden = g.matmul_nt(x, vars.w1)?;
    let hidden = g.add_row(hidden, vars.b1)?;
    let hidden = g.relu(hidden);
    let out = g.matmul_nt(hidden, vars.w2)?;
    g.add_row(out, vars.b2)
}

fn enhance<T: Scalar>(g: &mut Graph<T>, vars: &CrossAttentionVars, x: Var, attended: Option<Var>) -> Result<Var> {
    let pre = match attended {
        Some(a) => {
            let f = ffn(g, vars, a)?;
            g.add(x, f)?
        }
        None => x,
    };
    g.layer_norm(pre, vars.gamma, vars.beta, lit(LAYER_NORM_EPS))
}

/// `(S̄, Q̄)`. With `enabled = false` the attention and FFN are skipped and both
/// banks are only layer-normalized.
pub fn cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    vars: &CrossAttentionVars,
    support: Var,
    query: Var,
    enabled: bool,
) -> Result<(Var, Var)> {
    if g.shape(support).0 == 0 || g.shape(query).0 == 0 {
        return Err(CdapError::contract("cross-attention needs non-empty span banks"));
    }
    if !enabled {
        return Ok((enhance(g, vars, support, None)?, enhance(g, vars, query, None)?));
    }
    let s_hat = attention_aggregate(g, support, query, AttentionMode::Adaptive)?;
    let q_hat = attention_aggregate(g, query, support, AttentionMode::Adaptive)?;
    Ok((enhance(g, vars, support, Some(s_hat))?, enhance(g, vars, query, Some(q_hat))?))
}

/// `z⁰` for every row of `q_bar`: each non-empty subclass bank gives `ô_k = φ(q̄, O_k)`,
/// and `z⁰ = φ(q̄, [ô_k])` row by row.
pub fn o_prototype<T: Scalar>(g: &mut Graph<T>, q_bar: Var, o_banks: &[Var], mode: AttentionMode) -> Result<Var> {
    if o_banks.is_empty() {
        return Err(CdapError::contract("all O-subclass banks are empty"));
    }
    let subs = o_banks
        .iter()
        .map(|&b| attention_aggregate(g, q_bar, b, mode))
        .collect::<Result<Vec<_>>>()?;
    if subs.len() == 1 {
        return Ok(subs[0]);
    }
    let logits = match mode {
        AttentionMode::Adaptive => {
            let cols = subs
                .iter()
                .map(|&o| g.row_dot(q_bar, o))
                .collect::<Result<Vec<_>>>()?;
            g.concat_cols(&cols)?
        }
        AttentionMode::Mean => g.constant(Matrix::zeros(g.shape(q_bar).0, subs.len())),
    };
    let alpha = g.row_softmax(logits);
    let mut acc: Option<Var> = None;
    for (k, &o) in subs.iter().enumerate() {
        let w = g.column(alpha, k)?;
        let term = g.scale_rows(o, w)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    Ok(acc.expect("at least two sub-prototypes"))
}

/// Span logits over `{O, 1..N}` for every row of `q_bar`.
pub fn span_logits<T: Scalar>(
    g: &mut Graph<T>,
    q_bar: Var,
    o_banks: &[Var],
    entity_banks: &[Var],
    mode: AttentionMode,
    distance: Distance,
) -> Result<Var> {
    let mut prototypes = Vec::with_capacity(entity_banks.len() + 1);
    prototypes.push(o_prototype(g, q_bar, o_banks, mode)?);
    for &bank in entity_banks {
        prototypes.push(attention_aggregate(g, q_bar, bank, mode)?);
    }
    distance_logits(g, q_bar, &prototypes, distance)
}

/// Value-level distribution over fixed prototypes `Z = (z⁰, z¹..z^N)`.
pub fn span_distribution<T: Scalar>(q_bar: &[T], z: &Matrix<T>, distance: Distance) -> Vec<T> {
    token_distribution(q_bar, z, distance)
}
