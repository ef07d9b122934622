//! N-way K-shot episodes: JSONL ingestion and greedy sampling from a corpus.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{io_labels_from_spans, ClassId, Corpus, LabelSpace, LabeledSentence, OUTSIDE_LABEL};
use crate::error::{CdapError, Result};

/// One few-shot task: a labelled support set and a query set sharing a label space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    label_space: LabelSpace,
    support: Vec<LabeledSentence>,
    query: Vec<LabeledSentence>,
}

impl Episode {
    /// Checks that all classes are in range and every entity class occurs in the support set.
    pub fn new(label_space: LabelSpace, support: Vec<LabeledSentence>, query: Vec<LabeledSentence>) -> Result<Self> {
        if support.is_empty() {
            return Err(CdapError::validation("episode has an empty support set"));
        }
        let n = label_space.len();
        for s in support.iter().chain(&query) {
            if let Some(e) = s.entities().iter().find(|e| e.class.0 >= n) {
                return Err(CdapError::validation(format!("class id {} outside the label space", e.class.0)));
            }
        }
        for class in label_space.entity_ids() {
            if !support.iter().any(|s| s.entities().iter().any(|e| e.class == class)) {
                return Err(CdapError::validation(format!(
                    "class `{}` has no entity in the support set",
                    label_space.name(class)
                )));
            }
        }
        Ok(Self {
            label_space,
            support,
            query,
        })
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn support(&self) -> &[LabeledSentence] {
        &self.support
    }

    pub fn query(&self) -> &[LabeledSentence] {
        &self.query
    }

    /// The same support set with a different query set.
    pub fn with_query(&self, query: Vec<LabeledSentence>) -> Result<Self> {
        Self::new(self.label_space.clone(), self.support.clone(), query)
    }

    /// Serializes to the one-line JSON shape of the public FewNERD episode release.
    pub fn to_json_line(&self) -> String {
        let record = EpisodeRecord {
            types: self.label_space.entity_types().to_vec(),
            support: SentenceSet::from_sentences(&self.support, &self.label_space),
            query: SentenceSet::from_sentences(&self.query, &self.label_space),
        };
        serde_json::to_string(&record).expect("episode serializes")
    }

    fn from_record(record: EpisodeRecord) -> Result<Self> {
        let label_space = LabelSpace::new(&record.types)?;
        let support = record.support.into_sentences(&label_space)?;
        let query = record.query.into_sentences(&label_space)?;
        Self::new(label_space, support, query)
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    types: Vec<String>,
    support: SentenceSet,
    query: SentenceSet,
}

#[derive(Serialize, Deserialize)]
struct SentenceSet {
    word: Vec<Vec<String>>,
    label: Vec<Vec<String>>,
}

impl SentenceSet {
    fn from_sentences(sentences: &[LabeledSentence], ls: &LabelSpace) -> Self {
        Self {
            word: sentences.iter().map(|s| s.tokens().to_vec()).collect(),
            label: sentences
                .iter()
                .map(|s| io_labels_from_spans(s).into_iter().map(|c| ls.name(c).to_owned()).collect())
                .collect(),
        }
    }

    fn into_sentences(self, ls: &LabelSpace) -> Result<Vec<LabeledSentence>> {
        if self.word.len() != self.label.len() {
            return Err(CdapError::validation(format!(
                "{} word lists but {} label lists",
                self.word.len(),
                self.label.len()
            )));
        }
        self.word
            .into_iter()
            .zip(self.label)
            .map(|(words, labels)| {
                let ids = labels
                    .iter()
                    .map(|l| {
                        if l == OUTSIDE_LABEL {
                            Ok(ClassId::OUTSIDE)
                        } else {
                            ls.id(l)
                                .ok_or_else(|| CdapError::validation(format!("label `{l}` is not in `types`")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                LabeledSentence::from_io(words, &ids)
            })
            .collect()
    }
}

/// Streams episodes from JSONL, one per non-blank line.
pub struct EpisodeReader<R> {
    lines: std::iter::Enumerate<std::io::Lines<R>>,
}

impl<R: BufRead> EpisodeReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines().enumerate(),
        }
    }
}

impl<R: BufRead> Iterator for EpisodeReader<R> {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (idx, line) = self.lines.next()?;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<EpisodeRecord>(&line)
                .map_err(|e| CdapError::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })
                .and_then(|record| {
                    Episode::from_record(record).map_err(|e| match e {
                        CdapError::Validation(m) => CdapError::Validation(format!("line {}: {m}", idx + 1)),
                        other => other,
                    })
                });
            return Some(parsed);
        }
    }
}

/// Opens an episode JSONL file for streaming.
pub fn load_episodes(path: impl AsRef<Path>) -> Result<EpisodeReader<BufReader<File>>> {
    Ok(EpisodeReader::new(BufReader::new(File::open(path)?)))
}

/// Reads a whole episode file into memory.
pub fn read_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>> {
    load_episodes(path)?.collect()
}

pub fn write_episodes<W: Write>(mut writer: W, episodes: &[Episode]) -> Result<()> {
    for e in episodes {
        writeln!(writer, "{}", e.to_json_line())?;
    }
    Ok(())
}

/// Per-class cap used by the greedy sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShotMode {
    /// Cap K: a class stops receiving sentences once it holds K entities.
    ExactK,
    /// Cap 2K.
    KTo2K,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub mode: ShotMode,
    /// Query sentences drawn per class.
    pub query_per_class: usize,
}

/// Greedy passes tried before a sampling failure is reported.
const SAMPLING_ATTEMPTS: usize = 32;

/// One greedy pass over `order`; returns the per-class counts and the chosen sentences.
fn greedy_support(
    corpus: &Corpus,
    order: &[usize],
    local: &dyn Fn(ClassId) -> Option<ClassId>,
    n_way: usize,
    k_shot: usize,
    cap: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut counts = vec![0usize; n_way + 1];
    let mut picked = Vec::new();
    for &i in order {
        if counts[1..].iter().all(|&c| c >= k_shot) {
            break;
        }
        let mut add = vec![0usize; n_way + 1];
        for e in corpus.sentences[i].entities() {
            if let Some(c) = local(e.class) {
                add[c.0] += 1;
            }
        }
        let needed = (1..=n_way).any(|c| add[c] > 0 && counts[c] < k_shot);
        // the cap is checked before adding, so a class may overshoot by one sentence
        let fits = (1..=n_way).all(|c| add[c] == 0 || counts[c] < cap);
        if needed && fits {
            for c in 1..=n_way {
                counts[c] += add[c];
            }
            picked.push(i);
        }
    }
    (counts, picked)
}

/// Greedy N-way K-shot sampling.
///
/// Picks N classes with at least K occurrences, walks the shuffled corpus adding a
/// sentence to the support set when it contains a still-needed class and touches no
/// class already at the cap, and stops once all classes reach K. A pass that gets stuck
/// is retried with a fresh shuffle from the same generator. Query sentences are then
/// drawn from the remaining sentences. Entities of unselected classes become O.
pub fn sample_episode(corpus: &Corpus, config: SamplerConfig, seed: u64) -> Result<Episode> {
    let SamplerConfig {
        n_way,
        k_shot,
        mode,
        query_per_class,
    } = config;
    if n_way == 0 || k_shot == 0 {
        return Err(CdapError::validation("N and K must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ls = &corpus.label_space;

    let mut totals = vec![0usize; ls.len()];
    for s in &corpus.sentences {
        for e in s.entities() {
            totals[e.class.0] += 1;
        }
    }
    let mut eligible: Vec<ClassId> = ls.entity_ids().filter(|c| totals[c.0] >= k_shot).collect();
    if eligible.len() < n_way {
        let deficient = ls
            .entity_ids()
            .find(|c| totals[c.0] < k_shot)
            .map_or_else(|| "<none>".to_owned(), |c| ls.name(c).to_owned());
        return Err(CdapError::Sampling {
            class: deficient,
            message: format!(
                "only {} of {} classes have at least {k_shot} entities, {n_way} needed",
                eligible.len(),
                ls.num_entity_classes()
            ),
        });
    }
    eligible.shuffle(&mut rng);
    let chosen: Vec<ClassId> = eligible[..n_way].to_vec();
    let local = |c: ClassId| chosen.iter().position(|&x| x == c).map(|i| ClassId(i + 1));

    let cap = match mode {
        ShotMode::ExactK => k_shot,
        ShotMode::KTo2K => 2 * k_shot,
    };
    let mut order: Vec<usize> = (0..corpus.sentences.len()).collect();
    let mut support_idx = None;
    let mut shortfall = (1, 0);
    for _ in 0..SAMPLING_ATTEMPTS {
        order.shuffle(&mut rng);
        let (counts, picked) = greedy_support(corpus, &order, &local, n_way, k_shot, cap);
        match (1..=n_way).find(|&c| counts[c] < k_shot) {
            None => {
                support_idx = Some(picked);
                break;
            }
            Some(c) => shortfall = (c, counts[c]),
        }
    }
    let Some(support_idx) = support_idx else {
        let (c, reached) = shortfall;
        return Err(CdapError::Sampling {
            class: ls.name(chosen[c - 1]).to_owned(),
            message: format!(
                "support reached {reached} of {k_shot} entities within cap {cap} after {SAMPLING_ATTEMPTS} attempts"
            ),
        });
    };

    let used: HashSet<usize> = support_idx.iter().copied().collect();
    let mut query_idx: Vec<usize> = Vec::new();
    for (pos, &class) in chosen.iter().enumerate() {
        for _ in 0..query_per_class {
            let pick = order.iter().copied().find(|i| {
                !used.contains(i)
                    && !query_idx.contains(i)
                    && corpus.sentences[*i].entities().iter().any(|e| e.class == class)
            });
            match pick {
                Some(i) => query_idx.push(i),
                None => {
                    return Err(CdapError::Sampling {
                        class: ls.name(chosen[pos]).to_owned(),
                        message: "no sentence left for the query set".into(),
                    })
                }
            }
        }
    }

    let remap = |i: &usize| corpus.sentences[*i].remap_classes(local);
    let names: Vec<&str> = chosen.iter().map(|&c| ls.name(c)).collect();
    Episode::new(
        LabelSpace::new(&names)?,
        support_idx.iter().map(remap).collect(),
        query_idx.iter().map(remap).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_conll, EntitySpan};

    const LINE: &str = r#"{"types":["PER","LOC"],"support":{"word":[["John","in","Paris"]],"label":[["PER","O","LOC"]]},"query":{"word":[["Ann","Rome"]],"label":[["PER","LOC"]]}}"#;

    #[test]
    fn single_line_loads() {
        let eps: Vec<_> = EpisodeReader::new(LINE.as_bytes()).collect::<Result<_>>().unwrap();
        assert_eq!(eps.len(), 1);
        let e = &eps[0];
        assert_eq!(e.support().len(), 1);
        assert_eq!(e.query().len(), 1);
        assert_eq!(e.query()[0].entities(), &[EntitySpan::new(0, 0, ClassId(1)), EntitySpan::new(1, 1, ClassId(2))]);
        assert_eq!(e.to_json_line(), LINE);
    }

    #[test]
    fn empty_input_is_empty_stream() {
        assert_eq!(EpisodeReader::new("".as_bytes()).count(), 0);
        assert_eq!(EpisodeReader::new("\n\n".as_bytes()).count(), 0);
    }

    #[test]
    fn unknown_label_is_validation_error() {
        let bad = LINE.replace(r#"["Ann","Rome"]],"label":[["PER","LOC"]]"#, r#"["Ann","Rome"]],"label":[["PER","ORG"]]"#);
        let err = EpisodeReader::new(bad.as_bytes()).next().unwrap().unwrap_err();
        assert!(matches!(err, CdapError::Validation(ref m) if m.contains("ORG")), "{err}");
    }

    #[test]
    fn length_mismatch_and_garbage() {
        let bad = LINE.replace(r#"["John","in","Paris"]"#, r#"["John","in"]"#);
        assert!(matches!(
            EpisodeReader::new(bad.as_bytes()).next().unwrap(),
            Err(CdapError::Validation(_))
        ));
        let text = format!("{LINE}\n{{not json\n");
        let results: Vec<_> = EpisodeReader::new(text.as_bytes()).collect();
        assert!(results[0].is_ok());
        assert!(matches!(results[1], Err(CdapError::Parse { line: 2, .. })));
    }

    #[test]
    fn class_missing_from_support_is_rejected() {
        let bad = LINE.replace(r#""label":[["PER","O","LOC"]]"#, r#""label":[["PER","O","O"]]"#);
        assert!(matches!(
            EpisodeReader::new(bad.as_bytes()).next().unwrap(),
            Err(CdapError::Validation(_))
        ));
    }

    fn one_entity_per_sentence_corpus(classes: usize, per_class: usize) -> Corpus {
        let mut text = String::new();
        for c in 0..classes {
            for i in 0..per_class {
                text.push_str(&format!("w{i}\tO\ne{c}_{i}\tC{c}\nend\tO\n\n"));
            }
        }
        read_conll(text.as_bytes()).unwrap()
    }

    fn class_counts(e: &Episode) -> Vec<usize> {
        let mut counts = vec![0; e.label_space().len()];
        for s in e.support() {
            for ent in s.entities() {
                counts[ent.class.0] += 1;
            }
        }
        counts
    }

    #[test]
    fn one_way_one_shot_takes_a_single_sentence() {
        let corpus = one_entity_per_sentence_corpus(3, 1);
        let cfg = SamplerConfig {
            n_way: 1,
            k_shot: 1,
            mode: ShotMode::ExactK,
            query_per_class: 0,
        };
        let e = sample_episode(&corpus, cfg, 3).unwrap();
        assert_eq!(e.support().len(), 1);
    }

    /// Sentences with 0..=3 entities drawn from 6 classes.
    fn dense_corpus() -> (Corpus, usize) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut text = String::new();
        let mut max_per_sentence = 0;
        for i in 0..400usize {
            let k = i % 4;
            max_per_sentence = max_per_sentence.max(k);
            text.push_str("start\tO\n");
            for j in 0..k {
                let class = rng.random_range(0..6);
                text.push_str(&format!("x{i}_{j}\tT{class}\nsep\tO\n"));
            }
            text.push('\n');
        }
        (read_conll(text.as_bytes()).unwrap(), max_per_sentence)
    }

    #[test]
    fn exact_k_counts_stay_in_range() {
        let (corpus, max_per) = dense_corpus();
        let cfg = SamplerConfig {
            n_way: 3,
            k_shot: 5,
            mode: ShotMode::ExactK,
            query_per_class: 1,
        };
        for seed in 0..100 {
            let e = sample_episode(&corpus, cfg, seed).unwrap();
            for &c in &class_counts(&e)[1..] {
                assert!((5..5 + max_per).contains(&c), "seed {seed}: {c}");
            }
        }
    }

    #[test]
    fn k_to_2k_counts_stay_in_range() {
        let corpus = one_entity_per_sentence_corpus(6, 8);
        let cfg = SamplerConfig {
            n_way: 5,
            k_shot: 1,
            mode: ShotMode::KTo2K,
            query_per_class: 1,
        };
        for seed in 0..100 {
            let e = sample_episode(&corpus, cfg, seed).unwrap();
            for &c in &class_counts(&e)[1..] {
                assert!((1..=2).contains(&c), "seed {seed}: {c}");
            }
        }
    }

    #[test]
    fn support_and_query_disjoint_and_deterministic() {
        let (corpus, _) = dense_corpus();
        let cfg = SamplerConfig {
            n_way: 4,
            k_shot: 2,
            mode: ShotMode::KTo2K,
            query_per_class: 2,
        };
        for seed in 0..20 {
            let a = sample_episode(&corpus, cfg, seed).unwrap();
            let b = sample_episode(&corpus, cfg, seed).unwrap();
            assert_eq!(a.to_json_line(), b.to_json_line());
            // every sentence carries a unique token, so token lists identify sentences
            for q in a.query() {
                assert!(!a.support().iter().any(|s| s.tokens() == q.tokens()));
            }
            assert_eq!(a.query().len(), 8);
        }
    }

    #[test]
    fn too_small_corpus_names_the_class() {
        let corpus = one_entity_per_sentence_corpus(2, 1);
        let cfg = SamplerConfig {
            n_way: 2,
            k_shot: 2,
            mode: ShotMode::ExactK,
            query_per_class: 0,
        };
        match sample_episode(&corpus, cfg, 0) {
            Err(CdapError::Sampling { class, .. }) => assert_eq!(class, "C0"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
