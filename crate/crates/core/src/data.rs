//! Sentences, label spaces, IO conversions, span enumeration and O subclasses.
//!
//! Spans are 0-based with an inclusive end throughout the crate.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{CdapError, Result};

/// Index into a [`LabelSpace`]. Index 0 is always the non-entity class O.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub usize);

impl ClassId {
    pub const OUTSIDE: ClassId = ClassId(0);

    pub fn is_outside(self) -> bool {
        self == Self::OUTSIDE
    }
}

/// Token range, inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, token: usize) -> bool {
        self.start <= token && token <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        !(self.end < other.start || other.end < self.start)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub span: Span,
    pub class: ClassId,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, class: ClassId) -> Self {
        Self {
            span: Span::new(start, end),
            class,
        }
    }
}

/// Ordered class names with O reserved at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    classes: Vec<String>,
}

pub const OUTSIDE_LABEL: &str = "O";

impl LabelSpace {
    /// Builds `[O, entity_types...]`. Names must be unique and must not be `O`.
    pub fn new<S: AsRef<str>>(entity_types: &[S]) -> Result<Self> {
        let mut classes = vec![OUTSIDE_LABEL.to_owned()];
        for name in entity_types {
            let name = name.as_ref();
            if name.is_empty() {
                return Err(CdapError::validation("empty class name"));
            }
            if classes.iter().any(|c| c == name) {
                return Err(CdapError::validation(format!("duplicate class name `{name}`")));
            }
            classes.push(name.to_owned());
        }
        Ok(Self { classes })
    }

    /// Total number of classes including O.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of entity classes (N).
    pub fn num_entity_classes(&self) -> usize {
        self.classes.len() - 1
    }

    pub fn name(&self, id: ClassId) -> &str {
        &self.classes[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().position(|c| c == name).map(ClassId)
    }

    pub fn entity_types(&self) -> &[String] {
        &self.classes[1..]
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = ClassId> {
        (1..self.classes.len()).map(ClassId)
    }
}

/// Sub-classes of non-entity spans, by shared boundary tokens with gold entities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OSubclass {
    /// Shares its left boundary with some entity.
    O1,
    /// Shares its right boundary with some entity (and no left boundary).
    O2,
    /// Shares neither boundary.
    O3,
}

impl OSubclass {
    pub const ALL: [OSubclass; 3] = [OSubclass::O1, OSubclass::O2, OSubclass::O3];

    pub fn index(self) -> usize {
        match self {
            OSubclass::O1 => 0,
            OSubclass::O2 => 1,
            OSubclass::O3 => 2,
        }
    }
}

/// Training label of an enumerated span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpanLabel {
    Entity(ClassId),
    Outside(OSubclass),
}

impl SpanLabel {
    /// The label with O subclasses merged back into O.
    pub fn coarse(self) -> ClassId {
        match self {
            SpanLabel::Entity(c) => c,
            SpanLabel::Outside(_) => ClassId::OUTSIDE,
        }
    }
}

/// Tokens with their gold entity spans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    tokens: Vec<String>,
    entities: Vec<EntitySpan>,
}

impl LabeledSentence {
    /// Validates bounds, non-overlap and `class ≠ O`; entities are stored sorted.
    pub fn new(tokens: Vec<String>, mut entities: Vec<EntitySpan>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(CdapError::validation("sentence has no tokens"));
        }
        entities.sort();
        for e in &entities {
            if e.span.start > e.span.end || e.span.end >= tokens.len() {
                return Err(CdapError::validation(format!(
                    "entity span ({}, {}) out of range for {} tokens",
                    e.span.start,
                    e.span.end,
                    tokens.len()
                )));
            }
            if e.class.is_outside() {
                return Err(CdapError::validation("entity span labelled O"));
            }
        }
        if let Some(w) = entities.windows(2).find(|w| w[0].span.overlaps(&w[1].span)) {
            return Err(CdapError::validation(format!(
                "overlapping entity spans ({}, {}) and ({}, {})",
                w[0].span.start, w[0].span.end, w[1].span.start, w[1].span.end
            )));
        }
        Ok(Self { tokens, entities })
    }

    /// Builds a sentence from parallel IO labels.
    pub fn from_io(tokens: Vec<String>, labels: &[ClassId]) -> Result<Self> {
        if tokens.len() != labels.len() {
            return Err(CdapError::validation(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        let entities = spans_from_io_labels(labels);
        Self::new(tokens, entities)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn entities(&self) -> &[EntitySpan] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold spans longer than `max_len`, which span enumeration cannot reach.
    pub fn unreachable_entities(&self, max_len: usize) -> usize {
        self.entities.iter().filter(|e| e.span.len() > max_len).count()
    }

    /// The same sentence with every class id passed through `map`; `None` drops the entity.
    pub fn remap_classes(&self, map: impl Fn(ClassId) -> Option<ClassId>) -> Self {
        Self {
            tokens: self.tokens.clone(),
            entities: self
                .entities
                .iter()
                .filter_map(|e| map(e.class).map(|class| EntitySpan { span: e.span, class }))
                .collect(),
        }
    }
}

/// Per-token IO labels: the class of the covering entity, else O.
pub fn io_labels_from_spans(sentence: &LabeledSentence) -> Vec<ClassId> {
    let mut labels = vec![ClassId::OUTSIDE; sentence.len()];
    for e in sentence.entities() {
        labels[e.span.start..=e.span.end].fill(e.class);
    }
    labels
}

/// Maximal runs of one non-O class become spans. Adjacent same-class entities merge.
pub fn spans_from_io_labels(labels: &[ClassId]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let class = labels[i];
        let mut j = i;
        while j + 1 < labels.len() && labels[j + 1] == class {
            j += 1;
        }
        if !class.is_outside() {
            spans.push(EntitySpan::new(i, j, class));
        }
        i = j + 1;
    }
    spans
}

/// All spans of length ≤ `max_len` in `(start, end)` lexicographic order.
pub fn enumerate_spans(n: usize, max_len: usize) -> Vec<Span> {
    let mut spans = Vec::new();
    for start in 0..n {
        let last = n.min(start.saturating_add(max_len));
        for end in start..last {
            spans.push(Span::new(start, end));
        }
    }
    spans
}

/// O subclass for each candidate; `None` where the candidate is itself an entity.
///
/// A span that shares its start with one entity and its end with another is O1.
/// Boundaries match regardless of the entity's class.
pub fn assign_o_subclasses(entities: &[EntitySpan], candidates: &[Span]) -> Vec<Option<OSubclass>> {
    candidates
        .iter()
        .map(|c| {
            if entities.iter().any(|e| e.span == *c) {
                None
            } else if entities.iter().any(|e| e.span.start == c.start) {
                Some(OSubclass::O1)
            } else if entities.iter().any(|e| e.span.end == c.end) {
                Some(OSubclass::O2)
            } else {
                Some(OSubclass::O3)
            }
        })
        .collect()
}

/// Full training label for each candidate span.
pub fn span_labels(entities: &[EntitySpan], candidates: &[Span]) -> Vec<SpanLabel> {
    assign_o_subclasses(entities, candidates)
        .into_iter()
        .zip(candidates)
        .map(|(sub, c)| match sub {
            Some(s) => SpanLabel::Outside(s),
            None => {
                let class = entities
                    .iter()
                    .find(|e| e.span == *c)
                    .map(|e| e.class)
                    .expect("entity candidate");
                SpanLabel::Entity(class)
            }
        })
        .collect()
}

/// A tagged corpus with a global label space.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub label_space: LabelSpace,
    pub sentences: Vec<LabeledSentence>,
}

/// Reads `token<TAB>label` lines with blank lines between sentences.
///
/// Labels are `O` or bare class names under the IO scheme; classes are numbered in
/// order of first appearance.
pub fn read_conll<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut raw: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                raw.push((std::mem::take(&mut tokens), std::mem::take(&mut labels)));
            }
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(token), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(CdapError::Parse {
                line: idx + 1,
                message: "expected `token<TAB>label`".into(),
            });
        };
        if token.is_empty() || label.is_empty() {
            return Err(CdapError::Parse {
                line: idx + 1,
                message: "empty token or label".into(),
            });
        }
        tokens.push(token.to_owned());
        labels.push(label.trim().to_owned());
    }
    if !tokens.is_empty() {
        raw.push((tokens, labels));
    }

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, ClassId> = HashMap::new();
    for (_, labels) in &raw {
        for l in labels {
            if l != OUTSIDE_LABEL && !index.contains_key(l) {
                order.push(l.clone());
                index.insert(l.clone(), ClassId(order.len()));
            }
        }
    }
    let label_space = LabelSpace::new(&order)?;
    let sentences = raw
        .into_iter()
        .map(|(tokens, labels)| {
            let ids: Vec<ClassId> = labels
                .iter()
                .map(|l| index.get(l).copied().unwrap_or(ClassId::OUTSIDE))
                .collect();
            LabeledSentence::from_io(tokens, &ids)
        })
        .collect::<Result<_>>()?;
    Ok(Corpus {
        label_space,
        sentences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sentence(n: usize, spans: &[(usize, usize, usize)]) -> LabeledSentence {
        let tokens = (0..n).map(|i| format!("t{i}")).collect();
        let ents = spans.iter().map(|&(s, e, c)| EntitySpan::new(s, e, ClassId(c))).collect();
        LabeledSentence::new(tokens, ents).unwrap()
    }

    const O: ClassId = ClassId(0);

    #[test]
    fn io_labels_follow_spans() {
        let c = ClassId(1);
        assert_eq!(io_labels_from_spans(&sentence(4, &[(1, 2, 1)])), vec![O, c, c, O]);
        assert_eq!(io_labels_from_spans(&sentence(1, &[])), vec![O]);
        assert_eq!(
            io_labels_from_spans(&sentence(3, &[(0, 0, 1), (1, 2, 2)])),
            vec![ClassId(1), ClassId(2), ClassId(2)]
        );
    }

    #[test]
    fn spans_from_runs() {
        let (c1, c2) = (ClassId(1), ClassId(2));
        assert_eq!(spans_from_io_labels(&[O, c1, c1, O]), vec![EntitySpan::new(1, 2, c1)]);
        assert_eq!(
            spans_from_io_labels(&[c1, c2]),
            vec![EntitySpan::new(0, 0, c1), EntitySpan::new(1, 1, c2)]
        );
        // adjacent same-class gold entities cannot survive the IO scheme
        let merged = io_labels_from_spans(&sentence(2, &[(0, 0, 1), (1, 1, 1)]));
        assert_eq!(spans_from_io_labels(&merged), vec![EntitySpan::new(0, 1, c1)]);
    }

    #[test]
    fn enumeration_examples() {
        assert_eq!(enumerate_spans(1, 8), vec![Span::new(0, 0)]);
        assert_eq!(enumerate_spans(3, 8).len(), 6);
        assert_eq!(enumerate_spans(5, 3).len(), 12);
        assert_eq!(enumerate_spans(3, usize::MAX).len(), 6);
    }

    #[test]
    fn enumeration_count_formula_exhaustive() {
        for n in 1..=20 {
            for l in 1..=10 {
                let spans = enumerate_spans(n, l);
                let expected: usize = (1..=l.min(n)).map(|len| n - len + 1).sum();
                assert_eq!(spans.len(), expected, "n={n} L={l}");
                assert!(spans.windows(2).all(|w| w[0] < w[1]), "lexicographic order");
                assert!(spans.iter().all(|s| s.len() <= l && s.end < n));
            }
        }
    }

    #[test]
    fn o_subclass_rules() {
        let one = [EntitySpan::new(1, 3, ClassId(1))];
        let cands = [Span::new(1, 2), Span::new(2, 3), Span::new(0, 0), Span::new(1, 3)];
        assert_eq!(
            assign_o_subclasses(&one, &cands),
            vec![Some(OSubclass::O1), Some(OSubclass::O2), Some(OSubclass::O3), None]
        );
        let two = [EntitySpan::new(0, 1, ClassId(1)), EntitySpan::new(3, 4, ClassId(2))];
        assert_eq!(assign_o_subclasses(&two, &[Span::new(0, 4)]), vec![Some(OSubclass::O1)]);
    }

    #[test]
    fn invalid_sentences_are_rejected() {
        let toks = || vec!["a".to_string(), "b".to_string()];
        assert!(LabeledSentence::new(toks(), vec![EntitySpan::new(0, 2, ClassId(1))]).is_err());
        assert!(LabeledSentence::new(toks(), vec![EntitySpan::new(0, 0, O)]).is_err());
        assert!(LabeledSentence::new(
            toks(),
            vec![EntitySpan::new(0, 1, ClassId(1)), EntitySpan::new(1, 1, ClassId(2))]
        )
        .is_err());
        assert!(LabeledSentence::new(vec![], vec![]).is_err());
        assert!(LabeledSentence::from_io(toks(), &[O]).is_err());
    }

    #[test]
    fn label_space_reserves_outside() {
        let ls = LabelSpace::new(&["PER", "LOC"]).unwrap();
        assert_eq!(ls.name(ClassId(0)), "O");
        assert_eq!(ls.id("LOC"), Some(ClassId(2)));
        assert_eq!(ls.num_entity_classes(), 2);
        assert!(LabelSpace::new(&["PER", "PER"]).is_err());
        assert!(LabelSpace::new(&["O"]).is_err());
    }

    #[test]
    fn conll_reader() {
        let text = "John\tPER\nSmith\tPER\nruns\tO\n\nin\tO\nParis\tLOC\n";
        let corpus = read_conll(text.as_bytes()).unwrap();
        assert_eq!(corpus.label_space.entity_types(), &["PER".to_string(), "LOC".to_string()]);
        assert_eq!(corpus.sentences.len(), 2);
        assert_eq!(corpus.sentences[0].entities(), &[EntitySpan::new(0, 1, ClassId(1))]);
        assert_eq!(corpus.sentences[1].entities(), &[EntitySpan::new(1, 1, ClassId(2))]);

        let err = read_conll("a\tO\nbroken\n".as_bytes()).unwrap_err();
        assert!(matches!(err, CdapError::Parse { line: 2, .. }));
    }

    fn layout_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize, usize)>)> {
        // (gap, len, class) triples laid out left to right
        prop::collection::vec((0usize..3, 1usize..4, 1usize..4), 0..5).prop_map(|parts| {
            let mut spans = Vec::new();
            let mut pos = 0;
            let mut prev_class = None;
            for (gap, len, class) in parts {
                // same-class entities must be separated by at least one token
                let gap = if gap == 0 && prev_class == Some(class) { 1 } else { gap };
                let start = pos + gap;
                let end = start + len - 1;
                spans.push((start, end, class));
                prev_class = Some(class);
                pos = end + 1;
            }
            (pos + 1, spans)
        })
    }

    proptest! {
        #[test]
        fn io_round_trip((n, spans) in layout_strategy()) {
            let s = sentence(n, &spans);
            let back = spans_from_io_labels(&io_labels_from_spans(&s));
            prop_assert_eq!(back, s.entities().to_vec());
        }
    }
}
