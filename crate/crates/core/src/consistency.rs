//! Agreement between the token and span networks, and the combined objective.

use crate::config::Config;
use crate::data::Span;
use crate::error::{CdapError, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{argmax, Graph, Matrix, Var};

/// Coefficients of `λL_t + βL_s + γL_c` and the consistency temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
}

impl From<&Config> for LossWeights {
    fn from(c: &Config) -> Self {
        Self {
            lambda: c.lambda,
            beta: c.beta,
            gamma: c.gamma,
            temperature: c.temperature,
        }
    }
}

/// For every token `0..n`, the index of the containing span whose largest class
/// probability is highest. Ties go to the smallest `(start, end)`.
pub fn span_for_each_token<T: Scalar>(span_logits: &Matrix<T>, spans: &[Span], n: usize) -> Result<Vec<usize>> {
    if span_logits.rows() != spans.len() {
        return Err(CdapError::contract(format!(
            "{} span logit rows for {} spans",
            span_logits.rows(),
            spans.len()
        )));
    }
    // max probability is 1/(1+r) with r = Σ_{j≠argmax} exp(l_j − l_max); r keeps its
    // relative precision where the probability itself rounds to 1
    let rest: Vec<T> = (0..spans.len())
        .map(|i| {
            let row = span_logits.row(i);
            let top = argmax(row);
            row.iter()
                .enumerate()
                .filter(|&(j, _)| j != top)
                .map(|(_, &l)| (l - row[top]).exp())
                .sum()
        })
        .collect();
    let mut best: Vec<Option<usize>> = vec![None; n];
    for (i, span) in spans.iter().enumerate() {
        if span.end >= n {
            return Err(CdapError::contract(format!("span ({}, {}) beyond {n} tokens", span.start, span.end)));
        }
        for slot in &mut best[span.start..=span.end] {
            let better = match *slot {
                None => true,
                Some(j) => {
                    rest[i] < rest[j]
                        || (rest[i] == rest[j] && (span.start, span.end) < (spans[j].start, spans[j].end))
                }
            };
            if better {
                *slot = Some(i);
            }
        }
    }
    best.into_iter()
        .enumerate()
        .map(|(t, b)| b.ok_or_else(|| CdapError::contract(format!("token {t} is covered by no span"))))
        .collect()
}

/// `l_s`: the selected span's logits copied to each token position.
pub fn span_to_token_logits<T: Scalar>(
    g: &mut Graph<T>,
    span_logits: Var,
    spans: &[Span],
    n: usize,
) -> Result<Var> {
    let chosen = span_for_each_token(g.value(span_logits), spans, n)?;
    g.gather_rows(span_logits, &chosen)
}

/// `Σ_t KL(σ(l_t/T) ‖ σ(l_s)) + KL(σ(l_s/T) ‖ σ(l_t))`. Both sides carry gradient.
pub fn consistent_loss<T: Scalar>(g: &mut Graph<T>, l_t: Var, l_s: Var, temperature: f64) -> Result<Var> {
    if g.shape(l_t) != g.shape(l_s) {
        return Err(CdapError::contract(format!(
            "token logits {:?} and span logits {:?} differ in shape",
            g.shape(l_t),
            g.shape(l_s)
        )));
    }
    let t = lit(temperature);
    let forward = g.kl_term(l_t, l_s, t)?;
    let backward = g.kl_term(l_s, l_t, t)?;
    g.add(forward, backward)
}

/// `λL_t + βL_s + γL_c`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, l_t: Var, l_s: Var, l_c: Var, w: &LossWeights) -> Result<Var> {
    g.weighted_sum(&[(l_t, lit(w.lambda)), (l_s, lit(w.beta)), (l_c, lit(w.gamma))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;
    use proptest::prelude::*;

    fn kl_value(a: &[f64], b: &[f64], t: f64) -> f64 {
        let mut g = Graph::new();
        let (x, y) = (g.constant(Matrix::row_vector(a)), g.constant(Matrix::row_vector(b)));
        let l = consistent_loss(&mut g, x, y, t).unwrap();
        g.value(l).item().unwrap()
    }

    fn scalar(g: &mut Graph<f64>, v: f64) -> Var {
        g.constant(Matrix::scalar(v))
    }

    #[test]
    fn selection_rules() {
        let one = Matrix::from_rows(&[vec![0.3, -1.0]]).unwrap();
        assert_eq!(span_for_each_token(&one, &[Span::new(0, 0)], 1).unwrap(), vec![0]);

        // (0,0) peaks at 0.6, (0,1) at 0.8
        let l = |p: f64| vec![p.ln(), (1.0 - p).ln()];
        let logits = Matrix::from_rows(&[l(0.6), l(0.8)]).unwrap();
        let spans = [Span::new(0, 0), Span::new(0, 1)];
        assert_eq!(span_for_each_token(&logits, &spans, 2).unwrap(), vec![1, 1]);

        let tied = Matrix::from_rows(&[l(0.7), l(0.7), l(0.7)]).unwrap();
        let spans = [Span::new(1, 1), Span::new(0, 1), Span::new(0, 0)];
        assert_eq!(span_for_each_token(&tied, &spans, 2).unwrap(), vec![2, 1]);

        // both maxima round to 1.0, the margins still differ
        let saturated = Matrix::from_rows(&[vec![0.0, -50.0], vec![0.0, -60.0]]).unwrap();
        assert_eq!(softmax(saturated.row(0))[0], softmax(saturated.row(1))[0]);
        let spans = [Span::new(0, 0), Span::new(0, 1)];
        assert_eq!(span_for_each_token(&saturated, &spans, 2).unwrap(), vec![1, 1]);

        let uncovered = span_for_each_token(&one, &[Span::new(0, 0)], 2);
        assert!(matches!(uncovered, Err(CdapError::Contract(_))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_value(&[0.4, -2.0, 1.0], &[0.4, -2.0, 1.0], 1.0), 0.0);
        for t in [0.5, 1.0, 4.0] {
            assert!(kl_value(&[0.0; 3], &[0.0; 3], t).abs() < 1e-15);
        }
        let e = std::f64::consts::E;
        let closed = 2.0 * (e - 1.0) / (e + 1.0);
        let v = kl_value(&[1.0, 0.0], &[0.0, 1.0], 1.0);
        assert!((v - closed).abs() < 1e-12 && (v - 0.9242).abs() < 1e-4);

        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(Matrix::zeros(2, 3)), g.constant(Matrix::zeros(2, 2)));
        assert!(matches!(consistent_loss(&mut g, a, b, 1.0), Err(CdapError::Contract(_))));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights {
            lambda: 0.1,
            beta: 1.0,
            gamma: 0.05,
            temperature: 1.0,
        };
        let mut g = Graph::new();
        let (a, b, c) = (scalar(&mut g, 2.0), scalar(&mut g, 3.0), scalar(&mut g, 4.0));
        let t = total_loss(&mut g, a, b, c, &w).unwrap();
        assert!((g.value(t).item().unwrap() - 3.4).abs() < 1e-12);
        let no_c = total_loss(&mut g, a, b, c, &LossWeights { gamma: 0.0, ..w }).unwrap();
        assert!((g.value(no_c).item().unwrap() - 3.2).abs() < 1e-12);
        let span_only = total_loss(&mut g, a, b, c, &LossWeights { lambda: 0.0, gamma: 0.0, ..w }).unwrap();
        assert_eq!(g.value(span_only).item().unwrap(), 3.0);
    }

    proptest! {
        #[test]
        fn identity_and_symmetry(a in prop::collection::vec(-6.0f64..6.0, 4), b in prop::collection::vec(-6.0f64..6.0, 4)) {
            prop_assert!(kl_value(&a, &a, 1.0).abs() < 1e-9);
            prop_assert!((kl_value(&a, &b, 1.0) - kl_value(&b, &a, 1.0)).abs() < 1e-9);
            prop_assert!(kl_value(&a, &b, 1.0) >= 0.0);
        }

        #[test]
        fn total_is_linear(x in prop::collection::vec(0.0f64..10.0, 3), y in prop::collection::vec(0.0f64..10.0, 3), k in -3.0f64..3.0) {
            let w = LossWeights { lambda: 0.3, beta: 0.7, gamma: 0.2, temperature: 1.0 };
            let eval = |v: &[f64]| {
                let mut g = Graph::new();
                let (a, b, c) = (scalar(&mut g, v[0]), scalar(&mut g, v[1]), scalar(&mut g, v[2]));
                let t = total_loss(&mut g, a, b, c, &w).unwrap();
                g.value(t).item().unwrap()
            };
            let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + k * b).collect();
            prop_assert!((eval(&mix) - (eval(&x) + k * eval(&y))).abs() < 1e-9);
        }
    }
}
