//! The dual-network model: parameters, episode preparation and the shared forward pass.

use std::fs::File;
use std::io::{BufReader, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ProviderKind};
use crate::consistency::{consistent_loss, span_to_token_logits, total_loss, LossWeights};
use crate::data::{enumerate_spans, io_labels_from_spans, span_labels, LabeledSentence, Span, SpanLabel};
use crate::encoder::{adapt, project_tokens, span_repr, EmbeddingProvider, EncoderVars};
use crate::episode::Episode;
use crate::error::{CdapError, Result};
use crate::scalar::{lit, Scalar};
use crate::span_net::{cross_attention, span_logits, CrossAttentionVars};
use crate::tensor::{Gradients, Graph, Matrix, ParamGroup, ParamId, ParameterStore, Var};
use crate::token_net::{nll, token_logits};

#[derive(Clone, Copy, Debug)]
struct ParamIds {
    w_t: ParamId,
    b_t: ParamId,
    w_s: ParamId,
    b_s: ParamId,
    adapter: Option<ParamId>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Shapes `(name, group, rows, cols, fan_in)`; a zero fan-in marks a constant init.
fn layout(config: &Config) -> Vec<(&'static str, ParamGroup, usize, usize, usize)> {
    let (d1, d) = (config.d1, config.d);
    let mut v = vec![
        ("token.weight", ParamGroup::Head, d, d1, d1),
        ("token.bias", ParamGroup::Head, 1, d, d1),
        ("span.weight", ParamGroup::Head, d, 2 * d1, 2 * d1),
        ("span.bias", ParamGroup::Head, 1, d, 2 * d1),
        ("ffn.w1", ParamGroup::Head, 2 * d, d, d),
        ("ffn.b1", ParamGroup::Head, 1, 2 * d, d),
        ("ffn.w2", ParamGroup::Head, d, 2 * d, 2 * d),
        ("ffn.b2", ParamGroup::Head, 1, d, 2 * d),
        ("norm.gamma", ParamGroup::Head, 1, d, 0),
        ("norm.beta", ParamGroup::Head, 1, d, 0),
    ];
    if config.encoder_adapter {
        v.push(("encoder.adapter", ParamGroup::Encoder, d1, d1, 0));
    }
    v
}

/// Tokens and spans of a list of sentences stacked into one matrix. Span
/// coordinates address rows of the stacked matrix.
#[derive(Clone, Debug)]
pub struct PreparedSide<T> {
    pub embeddings: Matrix<T>,
    /// First row of each sentence.
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
    pub token_labels: Vec<usize>,
    pub spans: Vec<Span>,
    pub span_sentence: Vec<usize>,
    pub span_labels: Vec<SpanLabel>,
}

impl<T: Scalar> PreparedSide<T> {
    /// `extra_gold` also adds gold spans longer than `cap`.
    fn new(provider: &EmbeddingProvider, sentences: &[LabeledSentence], cap: usize, extra_gold: bool) -> Self {
        let total: usize = sentences.iter().map(LabeledSentence::len).sum();
        let dim = provider.dim();
        let mut data = Vec::with_capacity(total * dim);
        let (mut offsets, mut lengths, mut token_labels) = (Vec::new(), Vec::new(), Vec::new());
        let (mut spans, mut span_sentence, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        let mut offset = 0;
        for (idx, s) in sentences.iter().enumerate() {
            let u: Matrix<T> = provider.embed_sentence(s.tokens());
            data.extend_from_slice(u.as_slice());
            token_labels.extend(io_labels_from_spans(s).into_iter().map(|c| c.0));
            let mut local = enumerate_spans(s.len(), cap);
            if extra_gold {
                local.extend(s.entities().iter().map(|e| e.span).filter(|sp| sp.len() > cap));
            }
            labels.extend(span_labels(s.entities(), &local));
            for sp in local {
                spans.push(Span::new(sp.start + offset, sp.end + offset));
                span_sentence.push(idx);
            }
            offsets.push(offset);
            lengths.push(s.len());
            offset += s.len();
        }
        Self {
            embeddings: Matrix::from_vec(total, dim, data).expect("stacked embeddings"),
            offsets,
            lengths,
            token_labels,
            spans,
            span_sentence,
            span_labels: labels,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.token_labels.len()
    }

    /// Spans of sentence `idx` with sentence-local coordinates, in row order.
    pub fn sentence_spans(&self, idx: usize) -> impl Iterator<Item = (usize, Span)> + '_ {
        let offset = self.offsets[idx];
        self.spans
            .iter()
            .enumerate()
            .filter(move |(i, _)| self.span_sentence[*i] == idx)
            .map(move |(i, s)| (i, Span::new(s.start - offset, s.end - offset)))
    }
}

/// Everything about an episode that does not depend on the parameters.
#[derive(Clone, Debug)]
pub struct PreparedEpisode<T> {
    pub num_classes: usize,
    pub support: PreparedSide<T>,
    pub query: PreparedSide<T>,
}

/// Outputs of one forward pass over a query side.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    /// query tokens × (N+1)
    pub token_logits: Var,
    /// query spans × (N+1)
    pub span_logits: Var,
}

/// Scalar losses of one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub token: f64,
    pub span: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.token, self.span, self.consistency, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug)]
pub struct EpisodeLoss<T> {
    pub graph: Graph<T>,
    pub token: Var,
    pub span: Var,
    pub consistency: Var,
    pub total: Var,
}

impl<T: Scalar> EpisodeLoss<T> {
    pub fn values(&self) -> LossValues {
        let get = |v: Var| self.graph.value(v).item().map_or(f64::NAN, Scalar::as_f64);
        LossValues {
            token: get(self.token),
            span: get(self.span),
            consistency: get(self.consistency),
            total: get(self.total),
        }
    }

    pub fn backward(self) -> Result<Gradients<T>> {
        self.graph.backward(self.total)
    }
}

/// The model, generic over the scalar type.
#[derive(Clone, Debug)]
pub struct Cdap<T> {
    config: Config,
    store: ParameterStore<T>,
    ids: ParamIds,
    provider: EmbeddingProvider,
}

fn build_provider(config: &Config) -> Result<EmbeddingProvider> {
    match config.provider {
        ProviderKind::Hashed => Ok(EmbeddingProvider::hashed(config.d1, config.embedding_seed)),
        ProviderKind::Pretrained => {
            let path = config
                .embedding_path
                .as_ref()
                .ok_or_else(|| CdapError::validation("pretrained provider needs `embedding_path`"))?;
            EmbeddingProvider::pretrained(BufReader::new(File::open(path)?), config.d1, config.embedding_seed)
        }
    }
}

impl<T: Scalar> Cdap<T> {
    /// Fresh model with seeded uniform `±1/√fan_in` initialization.
    pub fn new(config: Config) -> Result<Self> {
        let provider = build_provider(&config)?;
        Self::with_provider(config, provider)
    }

    /// Fresh model with an explicit embedding provider of width `config.d1`.
    pub fn with_provider(config: Config, provider: EmbeddingProvider) -> Result<Self> {
        config.validate()?;
        if provider.dim() != config.d1 {
            return Err(CdapError::validation(format!(
                "provider width {} differs from d1 = {}",
                provider.dim(),
                config.d1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        for (name, group, rows, cols, fan_in) in layout(&config) {
            let value = match name {
                "norm.gamma" => Matrix::filled(rows, cols, T::one()),
                "encoder.adapter" => Matrix::identity(rows),
                _ if fan_in == 0 => Matrix::zeros(rows, cols),
                _ => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..rows * cols).map(|_| lit(rng.random_range(-bound..bound))).collect();
                    Matrix::from_vec(rows, cols, data)?
                }
            };
            store.insert(name, group, value)?;
        }
        let ids = resolve_ids(&store, &config)?;
        Ok(Self {
            config,
            store,
            ids,
            provider,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    pub fn provider(&self) -> &EmbeddingProvider {
        &self.provider
    }

    /// Parameter ids of the enhancement block's second layer, which make the FFN output zero
    /// when both are zero.
    pub fn ffn_output_params(&self) -> (ParamId, ParamId) {
        (self.ids.w2, self.ids.b2)
    }

    /// Support spans up to `cap` plus longer gold spans; query spans up to `cap`.
    pub fn prepare(&self, episode: &Episode, cap: usize) -> Result<PreparedEpisode<T>> {
        self.prepare_with_query(episode, episode.query(), cap)
    }

    pub fn prepare_with_query(
        &self,
        episode: &Episode,
        query: &[LabeledSentence],
        cap: usize,
    ) -> Result<PreparedEpisode<T>> {
        let num_classes = episode.label_space().len();
        if query.iter().flat_map(|s| s.entities()).any(|e| e.class.0 >= num_classes) {
            return Err(CdapError::validation("query class outside the episode label space"));
        }
        let support = PreparedSide::new(&self.provider, episode.support(), cap, true);
        if !support.token_labels.contains(&0) {
            return Err(CdapError::validation("support set has no O tokens"));
        }
        if !support.span_labels.iter().any(|l| matches!(l, SpanLabel::Outside(_))) {
            return Err(CdapError::validation("support set has no non-entity spans"));
        }
        Ok(PreparedEpisode {
            num_classes,
            support,
            query: PreparedSide::new(&self.provider, query, cap, false),
        })
    }

    /// `base` with its query side replaced by `query`.
    pub fn with_query_side(&self, base: &PreparedEpisode<T>, query: &[LabeledSentence], cap: usize) -> PreparedEpisode<T> {
        PreparedEpisode {
            num_classes: base.num_classes,
            support: base.support.clone(),
            query: PreparedSide::new(&self.provider, query, cap, false),
        }
    }

    fn encoder_vars(&self, g: &mut Graph<T>) -> EncoderVars {
        EncoderVars {
            w_t: g.param(&self.store, self.ids.w_t),
            b_t: g.param(&self.store, self.ids.b_t),
            w_s: g.param(&self.store, self.ids.w_s),
            b_s: g.param(&self.store, self.ids.b_s),
            adapter: self.ids.adapter.map(|a| g.param(&self.store, a)),
        }
    }

    fn block_vars(&self, g: &mut Graph<T>) -> CrossAttentionVars {
        CrossAttentionVars {
            w1: g.param(&self.store, self.ids.w1),
            b1: g.param(&self.store, self.ids.b1),
            w2: g.param(&self.store, self.ids.w2),
            b2: g.param(&self.store, self.ids.b2),
            gamma: g.param(&self.store, self.ids.gamma),
            beta: g.param(&self.store, self.ids.beta),
        }
    }

    /// Token and span logits for every query token and query span.
    pub fn forward(&self, prepared: &PreparedEpisode<T>) -> Result<ForwardPass<T>> {
        let (sup, qry) = (&prepared.support, &prepared.query);
        if qry.num_tokens() == 0 {
            return Err(CdapError::contract("forward pass over an empty query side"));
        }
        let mut g = Graph::new();
        let enc = self.encoder_vars(&mut g);
        let block = self.block_vars(&mut g);
        let (mode, distance) = (self.config.attention, self.config.distance);

        let u_s = g.constant(sup.embeddings.clone());
        let u_s = adapt(&mut g, &enc, u_s)?;
        let u_q = g.constant(qry.embeddings.clone());
        let u_q = adapt(&mut g, &enc, u_q)?;

        let h_s = project_tokens(&mut g, &enc, u_s)?;
        let h_q = project_tokens(&mut g, &enc, u_q)?;
        let mut token_banks = Vec::with_capacity(prepared.num_classes);
        for class in 0..prepared.num_classes {
            let rows: Vec<usize> = (0..sup.num_tokens()).filter(|&i| sup.token_labels[i] == class).collect();
            if rows.is_empty() {
                return Err(CdapError::validation(format!("class {class} has no support tokens")));
            }
            token_banks.push(g.gather_rows(h_s, &rows)?);
        }
        let token_logits = token_logits(&mut g, h_q, &token_banks, mode, distance)?;

        let s = span_repr(&mut g, &enc, u_s, &sup.spans)?;
        let q = span_repr(&mut g, &enc, u_q, &qry.spans)?;
        let (s_bar, q_bar) = cross_attention(&mut g, &block, s, q, self.config.cross_attention)?;
        let rows_with = |want: &dyn Fn(&SpanLabel) -> bool| -> Vec<usize> {
            (0..sup.spans.len()).filter(|&i| want(&sup.span_labels[i])).collect()
        };
        let mut o_banks = Vec::new();
        for sub in crate::data::OSubclass::ALL {
            let rows = rows_with(&|l| *l == SpanLabel::Outside(sub));
            if !rows.is_empty() {
                o_banks.push(g.gather_rows(s_bar, &rows)?);
            }
        }
        let mut entity_banks = Vec::with_capacity(prepared.num_classes - 1);
        for class in 1..prepared.num_classes {
            let rows = rows_with(&|l| l.coarse().0 == class && matches!(l, SpanLabel::Entity(_)));
            if rows.is_empty() {
                return Err(CdapError::validation(format!("class {class} has no support spans")));
            }
            entity_banks.push(g.gather_rows(s_bar, &rows)?);
        }
        let span_logits = span_logits(&mut g, q_bar, &o_banks, &entity_banks, mode, distance)?;
        Ok(ForwardPass {
            graph: g,
            token_logits,
            span_logits,
        })
    }

    /// `L_t`, `L_s`, `L_c` and the weighted total for one prepared episode.
    pub fn episode_loss(&self, prepared: &PreparedEpisode<T>, weights: &LossWeights) -> Result<EpisodeLoss<T>> {
        let ForwardPass {
            mut graph,
            token_logits,
            span_logits,
        } = self.forward(prepared)?;
        let qry = &prepared.query;
        let token = nll(&mut graph, token_logits, &qry.token_labels)?;
        let span_gold: Vec<usize> = qry.span_labels.iter().map(|l| l.coarse().0).collect();
        let span = nll(&mut graph, span_logits, &span_gold)?;
        let l_s = span_to_token_logits(&mut graph, span_logits, &qry.spans, qry.num_tokens())?;
        let consistency = consistent_loss(&mut graph, token_logits, l_s, weights.temperature)?;
        let total = total_loss(&mut graph, token, span, consistency, weights)?;
        Ok(EpisodeLoss {
            graph,
            token,
            span,
            consistency,
            total,
        })
    }

    /// Writes the parameters with the configuration as checkpoint metadata.
    pub fn save<W: Write>(&self, writer: W) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config });
        self.store.save(writer, meta)
    }

    pub fn load<R: Read>(reader: R) -> Result<Self> {
        let (store, meta) = ParameterStore::load(reader)?;
        let config: Config = serde_json::from_value(meta.get("config").cloned().unwrap_or_default())
            .map_err(|e| CdapError::validation(format!("checkpoint config: {e}")))?;
        config.validate()?;
        for (name, _, rows, cols, _) in layout(&config) {
            let id = store
                .id(name)
                .ok_or_else(|| CdapError::validation(format!("checkpoint lacks `{name}`")))?;
            if store.value(id).shape() != (rows, cols) {
                return Err(CdapError::validation(format!("checkpoint `{name}` has the wrong shape")));
            }
        }
        let ids = resolve_ids(&store, &config)?;
        let provider = build_provider(&config)?;
        Ok(Self {
            config,
            store,
            ids,
            provider,
        })
    }

    pub fn save_file(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(File::create(path)?);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?))
    }
}

fn resolve_ids<T: Scalar>(store: &ParameterStore<T>, config: &Config) -> Result<ParamIds> {
    let get = |name: &str| {
        store
            .id(name)
            .ok_or_else(|| CdapError::validation(format!("missing parameter `{name}`")))
    };
    Ok(ParamIds {
        w_t: get("token.weight")?,
        b_t: get("token.bias")?,
        w_s: get("span.weight")?,
        b_s: get("span.bias")?,
        adapter: if config.encoder_adapter {
            Some(get("encoder.adapter")?)
        } else {
            None
        },
        w1: get("ffn.w1")?,
        b1: get("ffn.b1")?,
        w2: get("ffn.w2")?,
        b2: get("ffn.b2")?,
        gamma: get("norm.gamma")?,
        beta: get("norm.beta")?,
    })
}
