mod common;

use cdap::consistency::LossWeights;
use cdap::training::train;
use cdap::{Model, Model32};

#[test]
fn single_precision_matches_double_on_the_initial_forward_pass() {
    let (episodes, _) = common::toy_split(3, 4, 0);
    let config = common::toy_config(5);
    let (wide, narrow) = (Model::new(config.clone()).unwrap(), Model32::new(config.clone()).unwrap());
    let weights = LossWeights::from(&config);
    for e in &episodes {
        let a = wide.episode_loss(&wide.prepare(e, 8).unwrap(), &weights).unwrap().values();
        let b = narrow.episode_loss(&narrow.prepare(e, 8).unwrap(), &weights).unwrap().values();
        assert!((a.total - b.total).abs() <= 1e-4 * a.total.abs(), "{a:?} vs {b:?}");
    }
}

#[test]
fn single_precision_training_stays_finite_and_improves() {
    let (episodes, _) = common::toy_split(3, 40, 0);
    let config = cdap::Config { max_steps: 60, warmup_steps: 5, ..common::toy_config(5) };
    let out = train::<f32>(&episodes, &config).unwrap();
    assert!(out.trace.iter().all(|r| r.losses.is_finite()));
    let head: f64 = out.trace[..10].iter().map(|r| r.losses.total).sum();
    let tail: f64 = out.trace[50..].iter().map(|r| r.losses.total).sum();
    assert!(tail < head, "{head} -> {tail}");
}
