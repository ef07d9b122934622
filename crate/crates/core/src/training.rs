//! Episodic training: each step averages the objective over a batch of episodes and
//! applies one AdamW update under the warmup/decay schedule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::consistency::LossWeights;
use crate::episode::Episode;
use crate::error::{CdapError, Result};
use crate::model::{Cdap, LossValues, PreparedEpisode};
use crate::scalar::{lit, Scalar};
use crate::tensor::{lr_at, AdamW, GroupRates};

/// One line of the loss trace, averaged over the step's batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub losses: LossValues,
    /// Learning rate of the head group.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct Training<T> {
    pub model: Cdap<T>,
    pub trace: Vec<TraceRow>,
}

/// Trains a freshly initialized model.
pub fn train<T: Scalar>(episodes: &[Episode], config: &Config) -> Result<Training<T>> {
    train_model(Cdap::new(config.clone())?, episodes, config)
}

/// Continues training `model` with the optimization settings of `config`.
///
/// Step `s` runs at `lr_at(s)` for `s = 1..=max_steps`. Episodes are visited in
/// seeded shuffled passes.
pub fn train_model<T: Scalar>(mut model: Cdap<T>, episodes: &[Episode], config: &Config) -> Result<Training<T>> {
    config.validate()?;
    if config.max_steps == 0 {
        return Ok(Training {
            model,
            trace: Vec::new(),
        });
    }
    if episodes.is_empty() {
        return Err(CdapError::validation("training needs at least one episode"));
    }
    let cap = config.train_span_cap();
    let prepared: Vec<PreparedEpisode<T>> = episodes
        .iter()
        .map(|e| model.prepare(e, cap))
        .collect::<Result<_>>()?;
    let weights = LossWeights::from(config);
    let optimizer = AdamW {
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let scale: T = lit(1.0 / config.batch_size as f64);
    let mut trace = Vec::with_capacity(config.max_steps);

    for step in 1..=config.max_steps {
        let mut sum = [0.0f64; 4];
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..episodes.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let idx = order.pop().expect("refilled above");
            let loss = model.episode_loss(&prepared[idx], &weights)?;
            let v = loss.values();
            if !v.is_finite() {
                return Err(CdapError::Divergence {
                    step,
                    episode: idx,
                    message: format!("non-finite loss {v:?}"),
                });
            }
            let grads = loss.backward()?;
            model.store_mut().accumulate(&grads, scale);
            for (s, x) in sum.iter_mut().zip([v.token, v.span, v.consistency, v.total]) {
                *s += x;
            }
        }
        let rates = GroupRates {
            encoder: lr_at(step, config.lr_encoder, config.warmup_steps, config.max_steps),
            head: lr_at(step, config.lr_head, config.warmup_steps, config.max_steps),
        };
        optimizer.step(model.store_mut(), rates).map_err(|e| match e {
            CdapError::Divergence { message, .. } => CdapError::Divergence {
                step,
                episode: order.last().copied().unwrap_or(0),
                message,
            },
            other => other,
        })?;
        let b = config.batch_size as f64;
        let row = TraceRow {
            step,
            losses: LossValues {
                token: sum[0] / b,
                span: sum[1] / b,
                consistency: sum[2] / b,
                total: sum[3] / b,
            },
            lr: rates.head,
        };
        log::debug!("step {step}: total {:.6} lr {:.3e}", row.losses.total, row.lr);
        trace.push(row);
    }
    Ok(Training { model, trace })
}

/// CSV with header `step,L_t,L_s,L_c,total,lr`.
pub fn write_trace_csv<W: Write>(mut writer: W, trace: &[TraceRow]) -> Result<()> {
    writeln!(writer, "step,L_t,L_s,L_c,total,lr")?;
    for r in trace {
        let l = r.losses;
        writeln!(
            writer,
            "{},{},{},{},{},{}",
            r.step, l.token, l.span, l.consistency, l.total, r.lr
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassId, EntitySpan, LabelSpace, LabeledSentence};

    fn sentence(tokens: &str, entities: &[(usize, usize, usize)]) -> LabeledSentence {
        LabeledSentence::new(
            tokens.split_whitespace().map(str::to_owned).collect(),
            entities.iter().map(|&(s, e, c)| EntitySpan::new(s, e, ClassId(c))).collect(),
        )
        .unwrap()
    }

    fn episodes() -> Vec<Episode> {
        let ls = LabelSpace::new(&["A", "B"]).unwrap();
        vec![
            Episode::new(
                ls.clone(),
                vec![sentence("the alpha went", &[(1, 1, 1)]), sentence("a beta came", &[(1, 1, 2)])],
                vec![sentence("alpha and beta", &[(0, 0, 1), (2, 2, 2)])],
            )
            .unwrap(),
            Episode::new(
                ls,
                vec![sentence("beta the", &[(0, 0, 2)]), sentence("on alpha", &[(1, 1, 1)])],
                vec![sentence("a beta the alpha", &[(1, 1, 2), (3, 3, 1)])],
            )
            .unwrap(),
        ]
    }

    fn config(steps: usize) -> Config {
        Config {
            d1: 8,
            d: 6,
            max_steps: steps,
            warmup_steps: steps.min(5),
            lr_head: 1e-2,
            ..Config::default()
        }
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let fresh = Cdap::<f64>::new(config(0)).unwrap();
        let out = train::<f64>(&episodes(), &config(0)).unwrap();
        assert!(out.trace.is_empty());
        for ((_, a), (_, b)) in fresh.store().iter().zip(out.model.store().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let a = train::<f64>(&episodes(), &config(20)).unwrap();
        let b = train::<f64>(&episodes(), &config(20)).unwrap();
        assert_eq!(a.trace, b.trace);
        let c = train::<f64>(&episodes(), &Config { seed: 7, ..config(20) }).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn loss_goes_down_and_csv_has_one_row_per_step() {
        let out = train::<f64>(&episodes(), &config(60)).unwrap();
        let first = out.trace[..5].iter().map(|r| r.losses.total).sum::<f64>();
        let last = out.trace[55..].iter().map(|r| r.losses.total).sum::<f64>();
        assert!(last < first, "{first} -> {last}");
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &out.trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("step,L_t,L_s,L_c,total,lr"));
        assert_eq!(text.lines().count(), 61);
    }

    #[test]
    fn non_finite_loss_reports_step_and_episode() {
        let mut model = Cdap::<f64>::new(config(3)).unwrap();
        let id = model.store().id("token.bias").unwrap();
        model.store_mut().value_mut(id).fill(f64::NAN);
        let err = train_model(model, &episodes(), &config(3)).unwrap_err();
        assert!(matches!(err, CdapError::Divergence { step: 1, .. }));
        assert_eq!(err.exit_code(), 3);
    }
}
