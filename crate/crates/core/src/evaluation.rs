//! Entity-level scoring: exact-match TP/FP/FN, the FP-Span/FP-Type split, and the
//! pooled and episode-averaged F1 conventions.

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, LabeledSentence, Span};
use crate::error::{CdapError, Result};
use crate::inference::SpanCandidate;

/// A labeled span inside a sentence of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Extraction {
    pub sentence: usize,
    pub span: Span,
    pub class: ClassId,
}

impl From<&SpanCandidate> for Extraction {
    fn from(c: &SpanCandidate) -> Self {
        Self {
            sentence: c.sentence,
            span: c.span,
            class: c.class,
        }
    }
}

/// Gold entities of a list of sentences.
pub fn gold_extractions(sentences: &[LabeledSentence]) -> Vec<Extraction> {
    sentences
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.entities().iter().map(move |e| Extraction {
                sentence: i,
                span: e.span,
                class: e.class,
            })
        })
        .collect()
}

/// Counts for one episode. `fp = fp_span + fp_type`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp_span: usize,
    pub fp_type: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2PR/(P+R)`, or 0 when `P+R = 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

impl EpisodeMetrics {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            fp_span: self.fp_span + other.fp_span,
            fp_type: self.fp_type + other.fp_type,
        }
    }
}

/// Exact `(sentence, start, end, class)` matches are TP. Other predictions are FP-Type
/// when some gold span has the same boundaries, else FP-Span. Unmatched gold are FN.
pub fn match_predictions(gold: &[Extraction], predicted: &[Extraction]) -> Result<EpisodeMetrics> {
    for (i, a) in predicted.iter().enumerate() {
        if let Some(b) = predicted[i + 1..]
            .iter()
            .find(|b| b.sentence == a.sentence && b.span.overlaps(&a.span))
        {
            return Err(CdapError::contract(format!(
                "overlapping predictions ({}, {}) and ({}, {}) in sentence {}",
                a.span.start, a.span.end, b.span.start, b.span.end, a.sentence
            )));
        }
    }
    let mut m = EpisodeMetrics::default();
    for p in predicted {
        if gold.contains(p) {
            m.tp += 1;
        } else if gold.iter().any(|g| g.sentence == p.sentence && g.span == p.span) {
            m.fp_type += 1;
        } else {
            m.fp_span += 1;
        }
    }
    m.fp = m.fp_span + m.fp_type;
    m.fn_ = gold.iter().filter(|g| !predicted.contains(g)).count();
    Ok(m)
}

/// Scores one episode's per-sentence extractions against its query gold.
pub fn score_episode(query: &[LabeledSentence], extracted: &[Vec<SpanCandidate>]) -> Result<EpisodeMetrics> {
    let predicted: Vec<Extraction> = extracted.iter().flatten().map(Extraction::from).collect();
    match_predictions(&gold_extractions(query), &predicted)
}

/// F1 of the TP/FP/FN totals pooled over all episodes; 0 for no episodes.
pub fn micro_f1_pooled(episodes: &[EpisodeMetrics]) -> f64 {
    pooled(episodes).f1()
}

/// Mean of per-episode F1; 0 for no episodes.
pub fn episode_avg_f1(episodes: &[EpisodeMetrics]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().map(EpisodeMetrics::f1).sum::<f64>() / episodes.len() as f64
}

fn pooled(episodes: &[EpisodeMetrics]) -> EpisodeMetrics {
    episodes.iter().fold(EpisodeMetrics::default(), |a, b| a.merge(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledScores {
    pub convention: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedScores {
    pub convention: String,
    pub f1: f64,
}

/// Machine-readable metrics for a set of episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub pooled_micro: PooledScores,
    pub episode_averaged: AveragedScores,
    pub counts: EpisodeMetrics,
    /// Share of false positives with wrong boundaries.
    pub fp_span_ratio: f64,
    /// Share of false positives with right boundaries and wrong class.
    pub fp_type_ratio: f64,
}

impl MetricsReport {
    pub fn new(episodes: &[EpisodeMetrics]) -> Self {
        let counts = pooled(episodes);
        Self {
            episodes: episodes.len(),
            pooled_micro: PooledScores {
                convention: "micro-F1 over TP/FP/FN pooled across episodes".into(),
                precision: counts.precision(),
                recall: counts.recall(),
                f1: counts.f1(),
            },
            episode_averaged: AveragedScores {
                convention: "mean of per-episode F1".into(),
                f1: episode_avg_f1(episodes),
            },
            counts,
            fp_span_ratio: ratio(counts.fp_span, counts.fp),
            fp_type_ratio: ratio(counts.fp_type, counts.fp),
        }
    }
}
