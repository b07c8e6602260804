//! Statistics of the exit-depth variable and related diagnostics.
//!
//! All entropies are in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{apply_policy, DepthAssignment, PolicyConfig, PolicyError};
use crate::trace::{argmax, softmax_unchecked, ExitTrace, LossKind, TraceError};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("assignment has no samples")]
    Empty,
    #[error("trace is unlabeled")]
    Unlabeled,
    #[error("operation needs a deterministic assignment")]
    Stochastic,
    #[error("assignment covers {assignment} samples but the trace has {trace}")]
    LengthMismatch { assignment: usize, trace: usize },
    #[error("trace headers differ: {0}")]
    HeaderMismatch(String),
    #[error("bin count must be at least 1")]
    Bins,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Shannon entropy in nats with 0 ln 0 = 0. No normalization check.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
    // a point mass sums to -0.0; report it as 0
    h + 0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub exits: usize,
    pub n: usize,
    /// Samples per depth; for stochastic assignments `round_half_even(n * p_k)`.
    pub counts: Vec<usize>,
    /// Marginal exit distribution p_k.
    pub p: Vec<f64>,
    pub expected_depth: f64,
    /// H(D)
    pub entropy: f64,
    /// H(D|X); zero for deterministic assignments.
    pub conditional_entropy: f64,
    /// I(D;X) = H(D) - H(D|X)
    pub mutual_information: f64,
}

impl DepthStats {
    /// K / E[D]
    pub fn speedup(&self) -> f64 {
        self.exits as f64 / self.expected_depth
    }
}

pub fn depth_stats(assignment: &DepthAssignment) -> Result<DepthStats, StatsError> {
    let n = assignment.n();
    if n == 0 {
        return Err(StatsError::Empty);
    }
    let k = assignment.exits;
    let (p, counts, conditional_entropy) = match assignment.depths() {
        Some(depths) => {
            let mut counts = vec![0usize; k];
            for d in depths {
                counts[d - 1] += 1;
            }
            let p = counts.iter().map(|c| *c as f64 / n as f64).collect();
            (p, counts, 0.0)
        }
        None => {
            let mut p = vec![0.0; k];
            let mut h_cond = 0.0;
            for i in 0..n {
                let row = assignment.row(i);
                for (acc, v) in p.iter_mut().zip(&row) {
                    *acc += v;
                }
                h_cond += entropy(&row);
            }
            for v in &mut p {
                *v /= n as f64;
            }
            let counts = p.iter().map(|v| (v * n as f64).round_ties_even() as usize).collect();
            (p, counts, h_cond / n as f64)
        }
    };
    let expected_depth = p.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
    let h = entropy(&p);
    Ok(DepthStats {
        exits: k,
        n,
        counts,
        expected_depth,
        entropy: h,
        conditional_entropy,
        mutual_information: h - conditional_entropy,
        p,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence of the bin; 0 for empty bins.
    pub mean_confidence: f64,
    /// Fraction correct in the bin; 0 for empty bins.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub n: usize,
    pub bins: Vec<CalibrationBin>,
}

pub const DEFAULT_ECE_BINS: usize = 15;

/// Index of the right-closed bin `(m/M, (m+1)/M]` holding `conf`; zero goes
/// to the first bin.
fn bin_index(conf: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut idx = ((conf * m).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while idx > 0 && conf <= idx as f64 / m {
        idx -= 1;
    }
    while idx + 1 < bins && conf > (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

fn check_labeled(trace: &ExitTrace, assignment: &DepthAssignment) -> Result<Vec<usize>, StatsError> {
    if !trace.is_labeled() {
        return Err(StatsError::Unlabeled);
    }
    if assignment.n() != trace.n() {
        return Err(StatsError::LengthMismatch {
            assignment: assignment.n(),
            trace: trace.n(),
        });
    }
    assignment.depths().ok_or(StatsError::Stochastic)
}

/// Expected calibration error of the prediction made at each sample's exit.
///
/// Confidence is the top softmax probability at the exit depth; bins are
/// equal-width and right-closed over [0, 1].
pub fn ece(trace: &ExitTrace, assignment: &DepthAssignment, bins: usize) -> Result<CalibrationReport, StatsError> {
    if bins == 0 {
        return Err(StatsError::Bins);
    }
    let depths = check_labeled(trace, assignment)?;
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (i, (sample, depth)) in trace.samples().iter().zip(&depths).enumerate() {
        let logits = &sample.exit(*depth).logits;
        let conf = softmax_unchecked(logits).into_iter().fold(0.0, f64::max);
        let b = bin_index(conf, bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if trace.correct_at(i, *depth)? {
            correct[b] += 1;
        }
    }
    let n = trace.n();
    let mut ece = 0.0;
    let bins_out = (0..bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] > 0 {
                (conf_sum[b] / count[b] as f64, correct[b] as f64 / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            ece += count[b] as f64 / n as f64 * (accuracy - mean_confidence).abs();
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(CalibrationReport {
        ece,
        n,
        bins: bins_out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    /// max over k, y of |P(D=k | Y=y) - P(D=k)|
    pub epsilon: f64,
    /// 1-based classes with no samples, left out of the maximum.
    pub excluded_classes: Vec<usize>,
}

/// Marginal proxy for the label-dependence of a deterministic policy.
pub fn epsilon_estimate(trace: &ExitTrace, assignment: &DepthAssignment) -> Result<EpsilonEstimate, StatsError> {
    let depths = check_labeled(trace, assignment)?;
    let k = assignment.exits;
    let c = trace.classes();
    let mut joint = vec![vec![0usize; k]; c];
    let mut marginal = vec![0usize; k];
    for (sample, d) in trace.samples().iter().zip(&depths) {
        let y = sample.class_index().ok_or(StatsError::Unlabeled)?;
        joint[y][d - 1] += 1;
        marginal[d - 1] += 1;
    }
    let n = trace.n() as f64;
    let mut epsilon: f64 = 0.0;
    let mut excluded_classes = Vec::new();
    for (y, row) in joint.iter().enumerate() {
        let ny: usize = row.iter().sum();
        if ny == 0 {
            excluded_classes.push(y + 1);
            continue;
        }
        for (count, m) in row.iter().zip(&marginal) {
            let diff = (*count as f64 / ny as f64 - *m as f64 / n).abs();
            epsilon = epsilon.max(diff);
        }
    }
    Ok(EpsilonEstimate {
        epsilon,
        excluded_classes,
    })
}

/// Mean per-sample loss at the assigned exits. Stochastic rows contribute
/// their expected loss.
pub fn mean_exit_loss(trace: &ExitTrace, assignment: &DepthAssignment, kind: LossKind) -> Result<f64, StatsError> {
    if assignment.n() != trace.n() {
        return Err(StatsError::LengthMismatch {
            assignment: assignment.n(),
            trace: trace.n(),
        });
    }
    let mut total = 0.0;
    for i in 0..trace.n() {
        total += match assignment.depth_at(i) {
            Some(d) => trace.loss_at(i, d, kind)?,
            None => {
                let mut expected = 0.0;
                for (k, w) in assignment.row(i).iter().enumerate() {
                    if *w > 0.0 {
                        expected += w * trace.loss_at(i, k + 1, kind)?;
                    }
                }
                expected
            }
        };
    }
    Ok(total / trace.n() as f64)
}

/// Fraction of samples whose exit prediction is correct.
pub fn exit_accuracy(trace: &ExitTrace, assignment: &DepthAssignment) -> Result<f64, StatsError> {
    Ok(1.0 - mean_exit_loss(trace, assignment, LossKind::ZeroOne)?)
}

fn check_pair(train: &ExitTrace, eval: &ExitTrace) -> Result<(), StatsError> {
    if !train.header().compatible_with(eval.header()) {
        return Err(StatsError::HeaderMismatch(format!(
            "K={} C={} {} vs K={} C={} {}",
            train.exits(),
            train.classes(),
            train.header().loss_kind,
            eval.exits(),
            eval.classes(),
            eval.header().loss_kind
        )));
    }
    if !(train.is_labeled() && eval.is_labeled()) {
        return Err(StatsError::Unlabeled);
    }
    Ok(())
}

/// Evaluation loss minus training loss under the same policy, using the
/// loss kind declared in the trace headers.
pub fn gap(train: &ExitTrace, eval: &ExitTrace, policy: &PolicyConfig) -> Result<f64, StatsError> {
    gap_with_loss(train, eval, policy, train.header().loss_kind)
}

pub fn gap_with_loss(
    train: &ExitTrace,
    eval: &ExitTrace,
    policy: &PolicyConfig,
    kind: LossKind,
) -> Result<f64, StatsError> {
    check_pair(train, eval)?;
    let train_loss = mean_exit_loss(train, &apply_policy(train, policy)?, kind)?;
    let eval_loss = mean_exit_loss(eval, &apply_policy(eval, policy)?, kind)?;
    Ok(eval_loss - train_loss)
}

/// Top-class index at `depth` for each sample.
pub fn predictions_at(trace: &ExitTrace, depth: usize) -> Vec<usize> {
    trace.samples().iter().map(|s| argmax(&s.exit(depth).logits)).collect()
}
