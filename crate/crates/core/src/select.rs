//! Bound-guided threshold selection and its validation-tuned comparator.
//!
//! Each candidate threshold is scored on the training split alone by
//! `B(tau) = L + sqrt(2 ln 2 / n) sqrt(H_bits(D | tau))` plus the
//! tau-independent complexity term of [`explicit_bound`]. Losses are 0-1,
//! the bounded loss the bound is stated for.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{explicit_bound, BoundError, BoundInputs};
use crate::policy::{apply_policy, PolicyConfig, PolicyError};
use crate::stats::{depth_stats, exit_accuracy, mean_exit_loss, StatsError};
use crate::trace::{ExitTrace, LossKind};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("{0} trace is unlabeled")]
    Unlabeled(&'static str),
    #[error("trace headers differ: {0}")]
    HeaderMismatch(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Bound(#[from] BoundError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub tau: f64,
    pub p: Vec<f64>,
    /// H(D | tau) in nats.
    pub entropy: f64,
    pub expected_depth: f64,
    pub bound: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationComparison {
    pub validation_tau: f64,
    pub validation_losses: Vec<f64>,
    pub test_accuracy_bound: f64,
    pub test_accuracy_validation: f64,
    /// test accuracy at tau_star minus test accuracy at validation_tau
    pub test_accuracy_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub kind: String,
    pub delta: f64,
    pub n: usize,
    pub exits: usize,
    pub tau_star: f64,
    /// In the order the candidates were given.
    pub candidates: Vec<CandidateRow>,
    pub comparison: Option<ValidationComparison>,
}

impl SelectionResult {
    pub fn best(&self) -> &CandidateRow {
        self.candidates
            .iter()
            .find(|r| r.tau == self.tau_star)
            .expect("tau_star is one of the candidates")
    }

    /// Tab-separated candidate table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("tau\tp\tentropy_nats\texpected_depth\tbound\ttrain_loss\n");
        for r in &self.candidates {
            let p: Vec<String> = r.p.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.tau,
                p.join(","),
                r.entropy,
                r.expected_depth,
                r.bound,
                r.train_loss
            );
        }
        out
    }
}

/// The selection score for one candidate.
pub fn selection_bound(train_loss: f64, entropy: f64, n: usize, exits: usize, delta: f64) -> Result<f64, BoundError> {
    let inputs = BoundInputs {
        n,
        exits,
        delta,
        entropy,
        empirical_loss: train_loss,
        ..Default::default()
    };
    Ok(explicit_bound(&inputs)?.total)
}

/// Index of the smallest score; equal scores go to the smaller tau.
pub fn argmin_tau(scored: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (tau, score)) in scored.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (btau, bscore) = scored[b];
                if *score < bscore || (*score == bscore && *tau < btau) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

fn candidate_row(train: &ExitTrace, kind: &str, tau: f64, delta: f64) -> Result<CandidateRow, SelectError> {
    let assignment = apply_policy(train, &PolicyConfig::with_scalar(kind, tau)?)?;
    let stats = depth_stats(&assignment)?;
    let train_loss = mean_exit_loss(train, &assignment, LossKind::ZeroOne)?;
    let bound = selection_bound(train_loss, stats.entropy, train.n(), train.exits(), delta)?;
    Ok(CandidateRow {
        tau,
        p: stats.p,
        entropy: stats.entropy,
        expected_depth: stats.expected_depth,
        bound,
        train_loss,
    })
}

/// Scores every candidate on the training trace and returns the minimiser.
pub fn select_threshold(
    train: &ExitTrace,
    kind: &str,
    candidates: &[f64],
    delta: f64,
) -> Result<SelectionResult, SelectError> {
    if candidates.is_empty() {
        return Err(SelectError::NoCandidates);
    }
    if !train.is_labeled() {
        return Err(SelectError::Unlabeled("train"));
    }
    let rows = candidates
        .par_iter()
        .map(|tau| candidate_row(train, kind, *tau, delta))
        .collect::<Result<Vec<_>, _>>()?;
    let scored: Vec<(f64, f64)> = rows.iter().map(|r| (r.tau, r.bound)).collect();
    let best = argmin_tau(&scored).expect("nonempty");
    Ok(SelectionResult {
        kind: kind.to_string(),
        delta,
        n: train.n(),
        exits: train.exits(),
        tau_star: rows[best].tau,
        candidates: rows,
        comparison: None,
    })
}

fn check_header(train: &ExitTrace, other: &ExitTrace, name: &str) -> Result<(), SelectError> {
    let (a, b) = (train.header(), other.header());
    if a.exits != b.exits || a.classes != b.classes {
        return Err(SelectError::HeaderMismatch(format!(
            "train has K={} C={}, {name} has K={} C={}",
            a.exits, a.classes, b.exits, b.classes
        )));
    }
    Ok(())
}

/// [`select_threshold`] plus the validation-tuned choice and the test
/// accuracy difference between the two.
pub fn compare_with_validation(
    train: &ExitTrace,
    validation: &ExitTrace,
    test: &ExitTrace,
    kind: &str,
    candidates: &[f64],
    delta: f64,
) -> Result<SelectionResult, SelectError> {
    check_header(train, validation, "validation")?;
    check_header(train, test, "test")?;
    if !validation.is_labeled() {
        return Err(SelectError::Unlabeled("validation"));
    }
    if !test.is_labeled() {
        return Err(SelectError::Unlabeled("test"));
    }
    let mut result = select_threshold(train, kind, candidates, delta)?;
    let validation_losses = candidates
        .par_iter()
        .map(|tau| {
            let a = apply_policy(validation, &PolicyConfig::with_scalar(kind, *tau)?)?;
            Ok(mean_exit_loss(validation, &a, LossKind::ZeroOne)?)
        })
        .collect::<Result<Vec<f64>, SelectError>>()?;
    let scored: Vec<(f64, f64)> = candidates.iter().copied().zip(validation_losses.iter().copied()).collect();
    let validation_tau = candidates[argmin_tau(&scored).expect("nonempty")];
    let test_accuracy = |tau: f64| -> Result<f64, SelectError> {
        let a = apply_policy(test, &PolicyConfig::with_scalar(kind, tau)?)?;
        Ok(exit_accuracy(test, &a)?)
    };
    let test_accuracy_bound = test_accuracy(result.tau_star)?;
    let test_accuracy_validation = test_accuracy(validation_tau)?;
    result.comparison = Some(ValidationComparison {
        validation_tau,
        validation_losses,
        test_accuracy_bound,
        test_accuracy_validation,
        test_accuracy_delta: test_accuracy_bound - test_accuracy_validation,
    });
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::testing::{logits_with_entropy, trace_from_logits};
    use crate::policy::{CONFIDENCE, ENTROPY};

    /// Two exits; sample i has depth-1 entropy `h[i]` and predicts class 0
    /// at depth 1 and class `deep[i]` at depth 2.
    fn trace(h: &[f64], deep: &[usize], labels: &[usize]) -> ExitTrace {
        let logits = h
            .iter()
            .zip(deep)
            .map(|(h, d)| {
                let second = if *d == 0 { vec![3.0, 0.0] } else { vec![0.0, 3.0] };
                vec![logits_with_entropy(*h), second]
            })
            .collect();
        trace_from_logits(logits, Some(labels.to_vec()))
    }

    fn fixture() -> ExitTrace {
        trace(
            &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            &[0, 0, 1, 1, 1, 1],
            &[1, 1, 2, 2, 1, 2],
        )
    }

    #[test]
    fn hand_fixture_scores() {
        // B = L + sqrt(2 H / n) + sqrt((ln 6 + ln(2 sqrt(1000) / 0.05)) / 2000)
        let b_05 = selection_bound(0.02, 0.6, 1000, 6, 0.05).unwrap();
        let b_03 = selection_bound(0.05, 0.3, 1000, 6, 0.05).unwrap();
        assert!((b_05 - 0.121_478_567_583_312).abs() < 1e-12, "{b_05}");
        assert!((b_03 - 0.141_332_448_859_767).abs() < 1e-12, "{b_03}");
        assert_eq!(argmin_tau(&[(0.3, b_03), (0.5, b_05)]), Some(1));
    }

    #[test]
    fn argmin_tie_goes_to_smaller_tau() {
        assert_eq!(argmin_tau(&[(0.7, 1.0), (0.3, 1.0), (0.5, 2.0)]), Some(1));
        assert_eq!(argmin_tau(&[]), None);
    }

    #[test]
    fn single_candidate() {
        let r = select_threshold(&fixture(), ENTROPY, &[0.35], 0.05).unwrap();
        assert_eq!(r.tau_star, 0.35);
        assert_eq!(r.candidates.len(), 1);
        assert_eq!(r.best().tau, 0.35);
    }

    #[test]
    fn identical_assignments_tie_to_smaller_tau() {
        // both exceed every depth-1 entropy, so every sample exits at depth 1
        let r = select_threshold(&fixture(), ENTROPY, &[0.68, 0.65], 0.05).unwrap();
        assert_eq!(r.candidates[0].bound, r.candidates[1].bound);
        assert_eq!(r.tau_star, 0.65);
    }

    #[test]
    fn rows_follow_candidate_order_and_stats() {
        let t = fixture();
        let r = select_threshold(&t, ENTROPY, &[0.45, 0.05, 0.25], 0.05).unwrap();
        let taus: Vec<f64> = r.candidates.iter().map(|c| c.tau).collect();
        assert_eq!(taus, vec![0.45, 0.05, 0.25]);
        // tau 0.25: samples with h 0.1, 0.2 exit at 1
        let row = &r.candidates[2];
        assert!((row.p[0] - 2.0 / 6.0).abs() < 1e-15);
        assert!((row.expected_depth - 10.0 / 6.0).abs() < 1e-15);
        // depth-1 predictions are class 0 (label 1); depth-2 follow `deep`
        assert!((row.train_loss - 1.0 / 6.0).abs() < 1e-15);
        let min = r.candidates.iter().map(|c| c.bound).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best().bound, min);
        assert!(r.to_tsv().lines().count() == 4);
    }

    #[test]
    fn errors() {
        let t = fixture();
        assert!(matches!(select_threshold(&t, ENTROPY, &[], 0.05), Err(SelectError::NoCandidates)));
        let unlabeled = trace_from_logits(vec![vec![vec![1.0, 0.0]]], None);
        assert!(matches!(
            select_threshold(&unlabeled, ENTROPY, &[0.1], 0.05),
            Err(SelectError::Unlabeled("train"))
        ));
        assert!(matches!(select_threshold(&t, ENTROPY, &[0.1], 1.5), Err(SelectError::Bound(_))));
        assert!(matches!(select_threshold(&t, CONFIDENCE, &[2.0], 0.05), Err(SelectError::Policy(_))));
    }

    #[test]
    fn validation_agreement_gives_zero_delta() {
        let t = fixture();
        let r = compare_with_validation(&t, &t, &t, ENTROPY, &[0.05, 0.25, 0.65], 0.05).unwrap();
        let c = r.comparison.unwrap();
        assert_eq!(c.validation_losses.len(), 3);
        if c.validation_tau == r.tau_star {
            assert_eq!(c.test_accuracy_delta, 0.0);
        }
        let same = compare_with_validation(&t, &t, &t, ENTROPY, &[0.25], 0.05).unwrap();
        assert_eq!(same.comparison.unwrap().test_accuracy_delta, 0.0);
    }

    #[test]
    fn validation_choice_and_delta() {
        let t = fixture();
        let r = compare_with_validation(&t, &t, &t, ENTROPY, &[0.05, 0.25, 0.65], 0.05).unwrap();
        let c = r.comparison.unwrap();
        // depth 2 everywhere (tau 0.05): loss 1/6; tau 0.25: 1/6; tau 0.65: 3/6
        assert_eq!(c.validation_tau, 0.05);
        let acc = |tau: f64| 1.0 - c.validation_losses[[0.05, 0.25, 0.65].iter().position(|v| *v == tau).unwrap()];
        assert!((c.test_accuracy_delta - (acc(r.tau_star) - acc(0.05))).abs() < 1e-15);
    }

    #[test]
    fn header_mismatch() {
        let t = fixture();
        let three = trace_from_logits(vec![vec![vec![1.0, 0.0, 0.0]; 2]], Some(vec![1]));
        assert!(matches!(
            compare_with_validation(&t, &three, &t, ENTROPY, &[0.1], 0.05),
            Err(SelectError::HeaderMismatch(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_trace() -> impl Strategy<Value = ExitTrace> {
            (1usize..20).prop_flat_map(|n| {
                (
                    prop::collection::vec(0.0f64..0.69, n),
                    prop::collection::vec(0usize..2, n),
                    prop::collection::vec(1usize..3, n),
                )
                    .prop_map(|(h, d, l)| trace(&h, &d, &l))
            })
        }

        proptest! {
            #[test]
            fn permutation_invariant(t in arb_trace(), taus in prop::collection::vec(0.0f64..0.7, 1..8), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut shuffled = taus.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let a = select_threshold(&t, ENTROPY, &taus, 0.05).unwrap();
                let b = select_threshold(&t, ENTROPY, &shuffled, 0.05).unwrap();
                prop_assert_eq!(a.tau_star, b.tau_star);
            }

            #[test]
            fn extra_candidate_never_raises_minimum(t in arb_trace(), taus in prop::collection::vec(0.0f64..0.7, 1..6), extra in 0.0f64..0.7) {
                let a = select_threshold(&t, ENTROPY, &taus, 0.05).unwrap();
                let mut more = taus.clone();
                more.push(extra);
                let b = select_threshold(&t, ENTROPY, &more, 0.05).unwrap();
                prop_assert!(b.best().bound <= a.best().bound);
            }
        }
    }
}
