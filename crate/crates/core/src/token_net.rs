//! Token-level adaptive prototypes.
//!
//! The aggregator φ(q, B) = Bᵀ·softmax(B·q) is shared with the span network. It
//! works row-wise, so a whole matrix of queries is aggregated in one pass.

use crate::config::{AttentionMode, Distance};
use crate::error::{CdapError, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{softmax, Graph, Matrix, Var};

/// Added under the square root of the unsquared distance; keeps its gradient finite.
pub const EUCLIDEAN_EPS: f64 = 1e-8;

/// Row `i` of the result is φ(queries_i, bank).
pub fn attention_aggregate<T: Scalar>(g: &mut Graph<T>, queries: Var, bank: Var, mode: AttentionMode) -> Result<Var> {
    let (m, d) = g.shape(queries);
    let (k, bd) = g.shape(bank);
    if k == 0 {
        return Err(CdapError::contract("attention over an empty bank"));
    }
    if d != bd {
        return Err(CdapError::Shape {
            op: "attention_aggregate",
            left: (m, d),
            right: (k, bd),
        });
    }
    let logits = match mode {
        AttentionMode::Adaptive => g.matmul_nt(queries, bank)?,
        AttentionMode::Mean => g.constant(Matrix::zeros(m, k)),
    };
    let alpha = g.row_softmax(logits);
    g.matmul(alpha, bank)
}

/// `−d(x_i, p_i)` as an m×1 column for row-aligned `x` and `p`.
pub fn neg_distance<T: Scalar>(g: &mut Graph<T>, x: Var, p: Var, distance: Distance) -> Result<Var> {
    let sq = g.row_sq_dist(x, p)?;
    let d = match distance {
        Distance::SquaredEuclidean => sq,
        Distance::Euclidean => {
            let eps = g.constant(Matrix::filled(g.shape(sq).0, 1, lit(EUCLIDEAN_EPS)));
            let shifted = g.add(sq, eps)?;
            g.sqrt(shifted)
        }
    };
    Ok(g.scale(d, -T::one()))
}

/// Logits `l[i, j] = −d(x_i, p^j_i)` where `prototypes[j]` holds one prototype per row of `x`.
pub fn distance_logits<T: Scalar>(g: &mut Graph<T>, x: Var, prototypes: &[Var], distance: Distance) -> Result<Var> {
    let cols = prototypes
        .iter()
        .map(|&p| neg_distance(g, x, p, distance))
        .collect::<Result<Vec<_>>>()?;
    g.concat_cols(&cols)
}

/// Token logits over the label space for every row of `h_query`. `banks[j]` stacks the
/// support token representations of class `j`, O first.
pub fn token_logits<T: Scalar>(
    g: &mut Graph<T>,
    h_query: Var,
    banks: &[Var],
    mode: AttentionMode,
    distance: Distance,
) -> Result<Var> {
    let prototypes = banks
        .iter()
        .map(|&b| attention_aggregate(g, h_query, b, mode))
        .collect::<Result<Vec<_>>>()?;
    distance_logits(g, h_query, &prototypes, distance)
}

/// Summed negative log-likelihood of `gold` under row-wise softmax of `logits`.
pub fn nll<T: Scalar>(g: &mut Graph<T>, logits: Var, gold: &[usize]) -> Result<Var> {
    let log_p = g.log_softmax(logits);
    let picked = g.pick_sum(log_p, gold)?;
    Ok(g.scale(picked, -T::one()))
}

/// Value-level distribution `p_j ∝ exp(−d(h, c_j))` over fixed prototypes.
pub fn token_distribution<T: Scalar>(h: &[T], prototypes: &Matrix<T>, distance: Distance) -> Vec<T> {
    let logits: Vec<T> = (0..prototypes.rows())
        .map(|j| {
            let sq: T = h
                .iter()
                .zip(prototypes.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            match distance {
                Distance::SquaredEuclidean => -sq,
                Distance::Euclidean => -(sq + lit(EUCLIDEAN_EPS)).sqrt(),
            }
        })
        .collect();
    softmax(&logits)
}
