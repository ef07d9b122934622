//! Dual token/span adaptive prototypical networks for few-shot sequence labeling.
//!
//! A token network classifies every query token against query-conditioned
//! prototypes; a span network does the same for enumerated spans after a
//! support/query cross-attention block. Training adds a bidirectional KL term that
//! aligns the two; decoding penalizes span scores by token disagreement and picks
//! non-overlapping spans greedily.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the usual choice.

pub mod config;
pub mod consistency;
pub mod data;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod scalar;
pub mod span_net;
pub mod tensor;
pub mod token_net;
pub mod training;

pub use config::Config;
pub use data::{ClassId, Corpus, EntitySpan, LabelSpace, LabeledSentence, OSubclass, Span, SpanLabel};
pub use episode::{Episode, SamplerConfig, ShotMode};
pub use error::{CdapError, Result};
pub use evaluation::{EpisodeMetrics, MetricsReport};
pub use inference::{SpanCandidate, Strategy};
pub use model::Cdap;
pub use scalar::Scalar;

/// Double-precision model.
pub type Model = Cdap<f64>;
/// Single-precision model.
pub type Model32 = Cdap<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Store64 = tensor::ParameterStore<f64>;
