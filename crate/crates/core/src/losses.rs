//! Training objectives over n-best lists: MLM distillation (MD), MWER,
//! MWED and the fused discriminative + λ·MD loss.
//!
//! The graph builders take differentiable scores; the `*_value` functions
//! are conveniences over plain floats built on the same graph code.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default weight of the summed MD term in the fused loss.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// Smallest MWED temperature magnitude; smaller values are clamped.
pub const T_FLOOR: f64 = 1e-2;

/// Scores and word errors of one n-best list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestLossInput {
    pub scores: Vec<f64>,
    pub errors: Vec<u32>,
}

impl NBestLossInput {
    pub fn new(scores: Vec<f64>, errors: Vec<u32>) -> Result<Self> {
        let input = Self { scores, errors };
        check_list(&input.scores, &input.errors)?;
        Ok(input)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn check_list(scores: &[f64], errors: &[u32]) -> Result<()> {
    if scores.len() != errors.len() {
        return Err(Error::shape("n-best loss", &[scores.len()], &[errors.len()]));
    }
    if scores.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "discriminative losses need at least 2 hypotheses, got {}",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("score {i} is not finite")));
    }
    Ok(())
}

/// Scalar loss values of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Σ MD over the hypotheses (or sequences) in the batch.
    pub md_sum: Option<f64>,
    pub discriminative: Option<f64>,
    /// Value that was minimized: `discriminative + lambda * md_sum` for the
    /// fused objectives, whichever single term is present otherwise.
    pub total: f64,
    pub lambda: Option<f64>,
    /// Mean MWED temperature over the utterances that used one.
    pub temperature: Option<f64>,
}

/// Outcome of the MWED temperature rule for one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Temperature {
    Value(f64),
    /// `|Σs/Σε|` fell below [`T_FLOOR`]; carries the sign-preserving floor.
    Clamped(f64),
    /// `Σε = 0`: the utterance carries no MWED signal.
    Skip,
}

impl Temperature {
    pub fn value(self) -> Option<f64> {
        match self {
            Temperature::Value(t) | Temperature::Clamped(t) => Some(t),
            Temperature::Skip => None,
        }
    }
}

/// `T = Σ s_i / Σ ε_i` with the degenerate cases handled.
pub fn mwed_temperature(scores: &[f64], errors: &[u32]) -> Result<Temperature> {
    check_list(scores, errors)?;
    let se: u64 = errors.iter().map(|&e| u64::from(e)).sum();
    if se == 0 {
        return Ok(Temperature::Skip);
    }
    let t = scores.iter().sum::<f64>() / se as f64;
    if t.abs() < T_FLOOR {
        // 0.0 counts as positive
        Ok(Temperature::Clamped(if t < 0.0 { -T_FLOOR } else { T_FLOOR }))
    } else {
        Ok(Temperature::Value(t))
    }
}

/// `Σ_i (s^l_i − PLL_i)²` over every element of `scores`.
pub fn md_sum(g: &mut Graph, scores: Var, targets: &[f64]) -> Result<Var> {
    if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
        return Err(Error::InvalidInput(format!("PLL target {i} is not finite")));
    }
    let shape = g.shape(scores).to_vec();
    let target = g.constant(Tensor::new(shape, targets.to_vec())?);
    g.squared_error(scores, target)
}

fn as_row(g: &mut Graph, scores: Var, n: usize) -> Result<Var> {
    if g.value(scores).len() != n {
        return Err(Error::shape("n-best loss", g.shape(scores), &[n]));
    }
    g.reshape(scores, vec![1, n])
}

/// `Σ_i P_i (ε_i − ε̄)` with `P = softmax(−s)` and `ε̄` the mean error count.
pub fn mwer_loss(g: &mut Graph, scores: Var, errors: &[u32]) -> Result<Var> {
    check_list(g.value(scores).data(), errors)?;
    let n = errors.len();
    let row = as_row(g, scores, n)?;
    let neg = g.neg(row)?;
    let posterior = g.softmax(neg)?;
    let mean = errors.iter().map(|&e| f64::from(e)).sum::<f64>() / n as f64;
    let rel = errors.iter().map(|&e| f64::from(e) - mean).collect();
    let rel = g.constant(Tensor::matrix(1, n, rel)?);
    let weighted = g.mul(posterior, rel)?;
    g.sum(weighted)
}

/// `−Σ_i softmax(ε)_i · log softmax(s/T)_i`.
pub fn mwed_loss(g: &mut Graph, scores: Var, errors: &[u32], temperature: f64) -> Result<Var> {
    check_list(g.value(scores).data(), errors)?;
    if temperature == 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidInput(format!("invalid MWED temperature {temperature}")));
    }
    let n = errors.len();
    let row = as_row(g, scores, n)?;
    let scaled = g.scale(row, 1.0 / temperature)?;
    let log_ds = g.log_softmax(scaled)?;
    let de = g.constant(Tensor::matrix(1, n, error_distribution(errors))?);
    let weighted = g.mul(log_ds, de)?;
    let total = g.sum(weighted)?;
    g.neg(total)
}

/// `softmax(ε)` over the raw integer error counts.
pub fn error_distribution(errors: &[u32]) -> Vec<f64> {
    let raw: Vec<f64> = errors.iter().map(|&e| f64::from(e)).collect();
    let mut d = vec![0.0; raw.len()];
    crate::autodiff::softmax_row(&raw, &mut d);
    d
}

/// `discriminative + λ · md_sum`.
pub fn fused_loss(g: &mut Graph, discriminative: Var, md_sum: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda must be non-negative, got {lambda}")));
    }
    let md = g.scale(md_sum, lambda)?;
    g.add(discriminative, md)
}

fn eval(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.scalar(out))
}

pub fn md_value(score: f64, target: f64) -> Result<f64> {
    if !score.is_finite() {
        return Err(Error::InvalidInput(format!("score {score} is not finite")));
    }
    eval(|g| {
        let s = g.constant(Tensor::scalar(score));
        md_sum(g, s, &[target])
    })
}

pub fn mwer_value(scores: &[f64], errors: &[u32]) -> Result<f64> {
    eval(|g| {
        let s = g.constant(Tensor::vector(scores.to_vec()));
        mwer_loss(g, s, errors)
    })
}

pub fn mwed_value(scores: &[f64], errors: &[u32], temperature: f64) -> Result<f64> {
    eval(|g| {
        let s = g.constant(Tensor::vector(scores.to_vec()));
        mwed_loss(g, s, errors, temperature)
    })
}

pub fn fused_value(discriminative: f64, md_terms: &[f64], lambda: f64) -> Result<f64> {
    if !discriminative.is_finite() || md_terms.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite loss term".into()));
    }
    eval(|g| {
        let d = g.constant(Tensor::scalar(discriminative));
        let terms = g.constant(Tensor::vector(md_terms.to_vec()));
        let md = g.sum(terms)?;
        fused_loss(g, d, md, lambda)
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::grad_check;

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    }

    #[test]
    fn md_examples() {
        assert_eq!(md_value(2.5, 2.5).unwrap(), 0.0);
        assert_eq!(md_value(1.0, 3.0).unwrap(), 4.0);
        assert!(md_value(f64::NAN, 1.0).is_err());
        assert!(md_value(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn md_gradient_is_twice_the_residual() {
        for (s, t) in [(1.0, 3.0), (-2.0, 0.5), (7.0, 7.25)] {
            let mut g = Graph::new();
            let v = g.param(Tensor::scalar(s));
            let l = md_sum(&mut g, v, &[t]).unwrap();
            g.backward(l).unwrap();
            let analytic = g.grad(v).unwrap()[0];
            assert!((analytic - 2.0 * (s - t)).abs() < 1e-12);
            let err = grad_check(|g, p| md_sum(g, p[0], &[t]), &[Tensor::scalar(s)], 1e-5).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn mwer_examples() {
        assert_eq!(mwer_value(&[0.3, -1.2, 4.0], &[2, 2, 2]).unwrap(), 0.0);
        assert!(mwer_value(&[0.0, 0.0], &[0, 2]).unwrap().abs() < 1e-15);
        let v = mwer_value(&[0.0, 3f64.ln()], &[0, 2]).unwrap();
        assert!((v + 0.5).abs() < 1e-12, "{v}");
    }

    #[test]
    fn short_lists_are_rejected() {
        assert!(mwer_value(&[1.0], &[0]).is_err());
        assert!(mwed_temperature(&[1.0], &[1]).is_err());
        assert!(mwer_value(&[1.0, 2.0], &[0]).is_err());
        assert!(mwed_value(&[1.0, 2.0], &[0, 1], 0.0).is_err());
    }

    #[test]
    fn temperature_rules() {
        assert_eq!(mwed_temperature(&[2.0, 4.0], &[1, 2]).unwrap(), Temperature::Value(2.0));
        assert_eq!(mwed_temperature(&[1.0, 3.0], &[1, 1]).unwrap(), Temperature::Value(2.0));
        assert_eq!(mwed_temperature(&[1.0, 3.0], &[0, 0]).unwrap(), Temperature::Skip);
        assert_eq!(
            mwed_temperature(&[0.001, -0.002], &[1, 0]).unwrap(),
            Temperature::Clamped(-T_FLOOR)
        );
        assert_eq!(mwed_temperature(&[0.001, 0.0], &[1, 0]).unwrap(), Temperature::Clamped(T_FLOOR));
        assert_eq!(mwed_temperature(&[0.0, 0.0], &[1, 0]).unwrap().value(), Some(T_FLOOR));
    }

    #[test]
    fn mwed_examples() {
        let v = mwed_value(&[0.7; 4], &[3; 4], 1.3).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let v = mwed_value(&[1.0, 3.0], &[1, 1], 2.0).unwrap();
        assert!((v - 0.81326).abs() < 1e-5, "{v}");
    }

    #[test]
    fn fused_examples() {
        assert_eq!(fused_value(0.75, &[9.0, 1.0], 0.0).unwrap(), 0.75);
        let v = fused_value(1.0, &[2.0, 3.0], DEFAULT_LAMBDA).unwrap();
        assert!((v - 1.0005).abs() < 1e-12);
        assert!(fused_value(1.0, &[1.0], -1.0).is_err());
    }

    #[test]
    fn three_hypothesis_gradients_match_finite_differences() {
        let s = Tensor::vector(vec![0.4, -1.1, 2.3]);
        let e = [1u32, 0, 3];
        let err = grad_check(|g, p| mwer_loss(g, p[0], &e), &[s.clone()], 1e-5).unwrap();
        assert!(err < 1e-6, "mwer {err}");
        let err = grad_check(|g, p| mwed_loss(g, p[0], &e, 0.7), &[s], 1e-5).unwrap();
        assert!(err < 1e-6, "mwed {err}");
    }

    #[test]
    fn mwed_bound_is_attained_by_descent() {
        let errors = [2u32, 0, 1, 4];
        let t = 1.5;
        let target = entropy(&error_distribution(&errors));
        let mut s = Tensor::vector(vec![3.0, -1.0, 0.5, 2.0]);
        for _ in 0..3000 {
            let mut g = Graph::new();
            let v = g.param(s.clone());
            let l = mwed_loss(&mut g, v, &errors, t).unwrap();
            g.backward(l).unwrap();
            let grad = g.grad(v).unwrap().to_vec();
            for (x, d) in s.data_mut().iter_mut().zip(grad) {
                *x -= 2.0 * d;
            }
        }
        let gap = mwed_value(s.data(), &errors, t).unwrap() - target;
        assert!(gap > -1e-12 && gap < 1e-6, "{gap}");
    }

    fn list() -> impl Strategy<Value = (Vec<f64>, Vec<u32>)> {
        (2usize..8).prop_flat_map(|n| {
            (
                prop::collection::vec(-20.0f64..20.0, n),
                prop::collection::vec(0u32..6, n),
            )
        })
    }

    proptest! {
        #[test]
        fn mwer_is_shift_invariant((s, e) in list(), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let a = mwer_value(&s, &e).unwrap();
            let b = mwer_value(&shifted, &e).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn mwer_is_bounded((s, e) in list()) {
            let mean = e.iter().map(|&v| f64::from(v)).sum::<f64>() / e.len() as f64;
            let lo = e.iter().map(|&v| f64::from(v) - mean).fold(f64::INFINITY, f64::min);
            let hi = e.iter().map(|&v| f64::from(v) - mean).fold(f64::NEG_INFINITY, f64::max);
            let v = mwer_value(&s, &e).unwrap();
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn lowering_the_best_score_never_hurts((s, e) in list(), delta in 1e-3f64..5.0) {
            let best = (0..e.len()).min_by_key(|&i| e[i]).unwrap();
            let mut moved = s.clone();
            moved[best] -= delta;
            prop_assert!(mwer_value(&moved, &e).unwrap() <= mwer_value(&s, &e).unwrap() + 1e-12);
        }

        #[test]
        fn mwed_is_shift_invariant_at_fixed_temperature((s, e) in list(), c in -50.0f64..50.0, t in 0.1f64..5.0) {
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let a = mwed_value(&s, &e, t).unwrap();
            let b = mwed_value(&shifted, &e, t).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn mwed_is_bounded_below_by_the_error_entropy((s, e) in list(), t in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
            let h = entropy(&error_distribution(&e));
            prop_assert!(mwed_value(&s, &e, t).unwrap() >= h - 1e-12);
        }

        #[test]
        fn fused_is_an_exact_linear_combination(d in -10.0f64..10.0, md in prop::collection::vec(0.0f64..100.0, 1..6), lambda in 0.0f64..1.0) {
            let v = fused_value(d, &md, lambda).unwrap();
            let want = d + lambda * md.iter().sum::<f64>();
            prop_assert!((v - want).abs() < 1e-12);
        }
    }

    proptest! {
        // Fixed seed: the relative-error metric is sensitive to gradients
        // that cancel to near zero, so the sampled cases are pinned.
        #![proptest_config(ProptestConfig {
            rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed),
            ..ProptestConfig::default()
        })]

        #[test]
        fn discriminative_gradients_match_finite_differences((s, e) in list(), t in 0.5f64..3.0) {
            // Saturated posteriors have gradients near the finite-difference
            // noise floor, so keep the scores in a moderate range here.
            let p = [Tensor::vector(s.iter().map(|v| v / 10.0).collect())];
            let err = grad_check(|g, p| mwer_loss(g, p[0], &e), &p, 1e-5).unwrap();
            prop_assert!(err < 1e-6, "mwer {}", err);
            let err = grad_check(|g, p| mwed_loss(g, p[0], &e, t), &p, 1e-5).unwrap();
            prop_assert!(err < 1e-6, "mwed {}", err);
        }
    }
}
