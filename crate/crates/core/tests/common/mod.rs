//! Fixtures shared by the integration tests: a seeded toy corpus whose classes have
//! disjoint vocabularies, and a central-difference gradient oracle.

#![allow(dead_code)]

use cdap::consistency::LossWeights;
use cdap::data::{ClassId, Corpus, EntitySpan, LabelSpace, LabeledSentence};
use cdap::episode::{sample_episode, Episode, SamplerConfig, ShotMode};
use cdap::model::{Cdap, PreparedEpisode};
use cdap::Config;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_CLASSES: [&str; 5] = ["PER", "LOC", "ORG", "DATE", "PROD"];

/// Single-token words, then (begin, end) word pairs of two-token entities, per class.
fn class_vocab(class: usize) -> (Vec<String>, Vec<(String, String)>) {
    let name = TOY_CLASSES[class].to_lowercase();
    let single = (0..6).map(|i| format!("{name}{i}")).collect();
    let pairs = (0..3).map(|i| (format!("{name}b{i}"), format!("{name}e{i}"))).collect();
    (single, pairs)
}

/// `count` sentences of 1–2 entities of distinct classes, always separated by O words.
pub fn toy_corpus(count: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let vocab: Vec<_> = (0..TOY_CLASSES.len()).map(class_vocab).collect();
    let mut sentences = Vec::with_capacity(count);
    for _ in 0..count {
        let n_entities = rng.random_range(1..=2);
        let mut classes: Vec<usize> = (0..TOY_CLASSES.len()).collect();
        classes.shuffle(&mut rng);
        let mut tokens: Vec<String> = Vec::new();
        let mut entities = Vec::new();
        let push_fillers = |tokens: &mut Vec<String>, rng: &mut ChaCha8Rng, lo: usize| {
            for _ in 0..rng.random_range(lo..=3) {
                tokens.push(fillers.choose(rng).unwrap().clone());
            }
        };
        push_fillers(&mut tokens, &mut rng, 0);
        for (k, &class) in classes[..n_entities].iter().enumerate() {
            if k > 0 {
                push_fillers(&mut tokens, &mut rng, 1);
            }
            let (single, pairs) = &vocab[class];
            let start = tokens.len();
            if rng.random_bool(0.6) {
                tokens.push(single.choose(&mut rng).unwrap().clone());
            } else {
                let (b, e) = pairs.choose(&mut rng).unwrap();
                tokens.push(b.clone());
                tokens.push(e.clone());
            }
            entities.push(EntitySpan::new(start, tokens.len() - 1, ClassId(class + 1)));
        }
        push_fillers(&mut tokens, &mut rng, 1);
        sentences.push(LabeledSentence::new(tokens, entities).unwrap());
    }
    Corpus {
        label_space: LabelSpace::new(&TOY_CLASSES).unwrap(),
        sentences,
    }
}

pub fn toy_sampler() -> SamplerConfig {
    SamplerConfig {
        n_way: 5,
        k_shot: 1,
        mode: ShotMode::ExactK,
        query_per_class: 1,
    }
}

/// Training episodes from 150 sentences and held-out episodes from 50 others.
pub fn toy_split(corpus_seed: u64, train: usize, test: usize) -> (Vec<Episode>, Vec<Episode>) {
    let corpus = toy_corpus(200, corpus_seed);
    let (a, b) = corpus.sentences.split_at(150);
    let part = |s: &[LabeledSentence]| Corpus {
        label_space: corpus.label_space.clone(),
        sentences: s.to_vec(),
    };
    let (train_c, test_c) = (part(a), part(b));
    let sample = |c: &Corpus, n: usize, base: u64| -> Vec<Episode> {
        (0..n as u64)
            .map(|i| sample_episode(c, toy_sampler(), base + i).unwrap())
            .collect()
    };
    (sample(&train_c, train, 1_000), sample(&test_c, test, 9_000))
}

/// Optimization settings for 500 toy steps.
pub fn toy_config(seed: u64) -> Config {
    Config {
        seed,
        max_steps: 500,
        warmup_steps: 50,
        lr_head: 5e-3,
        ..Config::default()
    }
}

/// Max relative error `|a − n| / max(|a|, |n|, 1e-4)` between back-propagated and
/// central-difference gradients of the total loss, over every parameter entry.
pub fn finite_difference_error(model: &Cdap<f64>, prepared: &PreparedEpisode<f64>, weights: &LossWeights, eps: f64) -> f64 {
    let loss_at = |m: &Cdap<f64>| m.episode_loss(prepared, weights).unwrap().values().total;
    let grads = model.episode_loss(prepared, weights).unwrap().backward().unwrap();
    let mut probe = model.clone();
    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let len = model.store().value(id).len();
        for k in 0..len {
            let orig = model.store().value(id).as_slice()[k];
            probe.store_mut().value_mut(id).as_mut_slice()[k] = orig + eps;
            let plus = loss_at(&probe);
            probe.store_mut().value_mut(id).as_mut_slice()[k] = orig - eps;
            let minus = loss_at(&probe);
            probe.store_mut().value_mut(id).as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.param(id).map_or(0.0, |g| g.as_slice()[k]);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}
