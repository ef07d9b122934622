//! Token embeddings and the two input projections.
//!
//! A pluggable [`EmbeddingProvider`] produces the raw token matrix `U` (n×d1). The
//! token network sees `H = U·W_tᵀ + b_t`; a span `(i, j)` is represented by
//! `W_s·[u_i ⊕ u_j] + b_s`.

use std::collections::HashMap;
use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::data::Span;
use crate::error::{CdapError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Matrix, Var};

/// Maps token strings to fixed vectors of width `dim`.
#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    Hashed {
        dim: usize,
        seed: u64,
    },
    Pretrained {
        dim: usize,
        seed: u64,
        table: HashMap<String, Vec<f64>>,
    },
}

impl EmbeddingProvider {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        Self::Hashed { dim, seed }
    }

    /// Reads `word v1 … v_dim` lines. Unknown words later fall back to hashed vectors.
    pub fn pretrained<R: BufRead>(reader: R, dim: usize, seed: u64) -> Result<Self> {
        let mut table = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| CdapError::Parse {
                    line: idx + 1,
                    message: format!("bad vector component: {e}"),
                })?;
            if values.len() != dim {
                return Err(CdapError::Parse {
                    line: idx + 1,
                    message: format!("expected {dim} components, found {}", values.len()),
                });
            }
            table.insert(word.to_owned(), values);
        }
        Ok(Self::Pretrained { dim, seed, table })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Hashed { dim, .. } | Self::Pretrained { dim, .. } => *dim,
        }
    }

    pub fn embed(&self, token: &str) -> Vec<f64> {
        match self {
            Self::Hashed { dim, seed } => hashed_vector(token, *dim, *seed),
            Self::Pretrained { dim, seed, table } => table
                .get(token)
                .cloned()
                .unwrap_or_else(|| hashed_vector(token, *dim, *seed)),
        }
    }

    /// `U`: one row per token.
    pub fn embed_sentence<T: Scalar, S: AsRef<str>>(&self, tokens: &[S]) -> Matrix<T> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * dim);
        for t in tokens {
            data.extend(self.embed(t.as_ref()).into_iter().map(T::from_f64_lossy));
        }
        Matrix::from_vec(tokens.len(), dim, data).expect("embedding shape")
    }
}

/// Standard-normal vector seeded by SHA-256 of `(seed, token)`.
fn hashed_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Encoder parameters bound to one graph.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub w_t: Var,
    pub b_t: Var,
    pub w_s: Var,
    pub b_s: Var,
    /// Optional d1×d1 map applied to `U` before both projections.
    pub adapter: Option<Var>,
}

/// Applies the adapter, if any, to raw embeddings.
pub fn adapt<T: Scalar>(g: &mut Graph<T>, enc: &EncoderVars, u: Var) -> Result<Var> {
    match enc.adapter {
        Some(a) => g.matmul_nt(u, a),
        None => Ok(u),
    }
}

/// `H = U·W_tᵀ + b_t`.
pub fn project_tokens<T: Scalar>(g: &mut Graph<T>, enc: &EncoderVars, u: Var) -> Result<Var> {
    let (_, d1) = g.shape(u);
    let (_, w_cols) = g.shape(enc.w_t);
    if d1 != w_cols {
        return Err(CdapError::Shape {
            op: "project_tokens",
            left: g.shape(u),
            right: g.shape(enc.w_t),
        });
    }
    let lin = g.matmul_nt(u, enc.w_t)?;
    g.add_row(lin, enc.b_t)
}

/// Span representations `W_s·[u_start ⊕ u_end] + b_s`, one row per span, where the
/// span indices address rows of `u`.
pub fn span_repr<T: Scalar>(g: &mut Graph<T>, enc: &EncoderVars, u: Var, spans: &[Span]) -> Result<Var> {
    let rows = g.shape(u).0;
    if spans.is_empty() {
        return Err(CdapError::contract("span_repr needs at least one span"));
    }
    if let Some(bad) = spans.iter().find(|s| s.start > s.end || s.end >= rows) {
        return Err(CdapError::contract(format!(
            "span ({}, {}) out of range for {rows} tokens",
            bad.start, bad.end
        )));
    }
    let starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
    let ends: Vec<usize> = spans.iter().map(|s| s.end).collect();
    let left = g.gather_rows(u, &starts)?;
    let right = g.gather_rows(u, &ends)?;
    let both = g.concat_cols(&[left, right])?;
    let lin = g.matmul_nt(both, enc.w_s)?;
    g.add_row(lin, enc.b_s)
}
