//! Exit policies and the depth assignments they induce on a trace.
//!
//! Every policy implements [`ExitPolicy`] and is registered by name in a
//! [`PolicyRegistry`]. A [`PolicyConfig`] names the policy and carries its
//! parameters; the registry turns it into a boxed strategy.
//!
//! Policies only ever see the per-exit logits of a sample, never its label.

mod confidence;
mod entropy;
mod fixed;
mod patience;
mod registry;
mod stochastic;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ExitRecord, ExitTrace, TraceHeader};

pub use confidence::ConfidenceThreshold;
pub use entropy::EntropyThreshold;
pub use fixed::FixedDepth;
pub use patience::Patience;
pub use registry::{PolicyFactory, PolicyRegistry};
pub use stochastic::StochasticTable;

pub const ENTROPY: &str = "entropy-threshold";
pub const CONFIDENCE: &str = "confidence-threshold";
pub const PATIENCE: &str = "patience";
pub const FIXED: &str = "fixed-depth";
pub const STOCHASTIC: &str = "stochastic-table";

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("unknown policy kind {0:?}")]
    UnknownKind(String),
    #[error("policy {kind}: missing parameter {param}")]
    MissingParam { kind: String, param: &'static str },
    #[error("policy {kind}: parameter {param} is not used by this policy")]
    UnexpectedParam { kind: String, param: &'static str },
    #[error("policy {kind}: {message}")]
    InvalidParam { kind: String, message: String },
    #[error("policy does not fit trace: {0}")]
    ConfigMismatch(String),
    #[error("probabilities sum to {0}, expected 1")]
    Normalization(f64),
    #[error("probability vector has a negative or non-finite entry")]
    InvalidProbability,
    #[error("sweep needs at least one value")]
    EmptySweep,
}

/// What a policy decides for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DepthEntry {
    /// A single 1-based exit depth.
    Exit(usize),
    /// A probability for each depth 1..=K.
    Distribution(Vec<f64>),
}

/// A strategy mapping the exits of one sample to an exit decision.
pub trait ExitPolicy: fmt::Debug + Send + Sync {
    fn kind(&self) -> &'static str;

    /// Rejects configurations that cannot apply to a trace with this header
    /// and sample count.
    fn check(&self, header: &TraceHeader, n: usize) -> Result<(), PolicyError>;

    /// Decision for the sample at `index`. `exits` holds depths 1..=K in order.
    fn decide(&self, index: usize, exits: &[ExitRecord]) -> DepthEntry;
}

/// Name plus parameters of a policy. Only the fields the named policy uses
/// may be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Vec<f64>>>,
}

impl PolicyConfig {
    pub fn entropy(tau: f64) -> Self {
        Self {
            kind: ENTROPY.into(),
            tau: Some(tau),
            ..Default::default()
        }
    }

    pub fn confidence(tau: f64) -> Self {
        Self {
            kind: CONFIDENCE.into(),
            tau: Some(tau),
            ..Default::default()
        }
    }

    pub fn patience(t: usize) -> Self {
        Self {
            kind: PATIENCE.into(),
            patience: Some(t),
            ..Default::default()
        }
    }

    pub fn fixed(k: usize) -> Self {
        Self {
            kind: FIXED.into(),
            fixed_k: Some(k),
            ..Default::default()
        }
    }

    pub fn stochastic(table: Vec<Vec<f64>>) -> Self {
        Self {
            kind: STOCHASTIC.into(),
            table: Some(table),
            ..Default::default()
        }
    }

    /// Config of `kind` whose single tunable parameter is `value`: the
    /// threshold for threshold policies, `t` for patience, `k` for fixed depth.
    pub fn with_scalar(kind: &str, value: f64) -> Result<Self, PolicyError> {
        let integral = |param: &'static str| -> Result<usize, PolicyError> {
            if value.fract() == 0.0 && value >= 1.0 {
                Ok(value as usize)
            } else {
                Err(PolicyError::InvalidParam {
                    kind: kind.into(),
                    message: format!("{param} must be a positive integer, got {value}"),
                })
            }
        };
        match kind {
            ENTROPY => Ok(Self::entropy(value)),
            CONFIDENCE => Ok(Self::confidence(value)),
            PATIENCE => Ok(Self::patience(integral("patience")?)),
            FIXED => Ok(Self::fixed(integral("fixed_k")?)),
            STOCHASTIC => Err(PolicyError::InvalidParam {
                kind: kind.into(),
                message: "a stochastic table has no scalar parameter".into(),
            }),
            other => Err(PolicyError::UnknownKind(other.into())),
        }
    }

    /// `key=value` lines, one per set parameter. A stochastic table is
    /// summarized by its row count.
    pub fn to_kv(&self) -> String {
        let mut out = format!("policy.kind={}\n", self.kind);
        if let Some(tau) = self.tau {
            out.push_str(&format!("policy.tau={tau}\n"));
        }
        if let Some(t) = self.patience {
            out.push_str(&format!("policy.patience={t}\n"));
        }
        if let Some(k) = self.fixed_k {
            out.push_str(&format!("policy.fixed_k={k}\n"));
        }
        if let Some(table) = &self.table {
            out.push_str(&format!("policy.table_rows={}\n", table.len()));
        }
        out
    }

    /// Inverse of [`PolicyConfig::to_kv`] for every kind except the stochastic
    /// table, whose rows are not part of the block.
    pub fn from_kv(text: &str) -> Result<Self, PolicyError> {
        let mut config = PolicyConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once('=').ok_or_else(|| PolicyError::InvalidParam {
                kind: config.kind.clone(),
                message: format!("malformed line {line:?}"),
            })?;
            let bad = |what: &str| PolicyError::InvalidParam {
                kind: config.kind.clone(),
                message: format!("cannot parse {what} from {value:?}"),
            };
            match key.trim() {
                "policy.kind" => config.kind = value.trim().to_string(),
                "policy.tau" => config.tau = Some(value.trim().parse().map_err(|_| bad("tau"))?),
                "policy.patience" => config.patience = Some(value.trim().parse().map_err(|_| bad("patience"))?),
                "policy.fixed_k" => config.fixed_k = Some(value.trim().parse().map_err(|_| bad("fixed_k"))?),
                "policy.table_rows" => {
                    return Err(PolicyError::InvalidParam {
                        kind: config.kind.clone(),
                        message: "stochastic tables cannot be restored from a key-value block".into(),
                    })
                }
                _ => {}
            }
        }
        if config.kind.is_empty() {
            return Err(PolicyError::UnknownKind(String::new()));
        }
        Ok(config)
    }
}

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(tau) = self.tau {
            write!(f, "(tau={tau})")?;
        }
        if let Some(t) = self.patience {
            write!(f, "(t={t})")?;
        }
        if let Some(k) = self.fixed_k {
            write!(f, "(k={k})")?;
        }
        if let Some(table) = &self.table {
            write!(f, "({} rows)", table.len())?;
        }
        Ok(())
    }
}

/// Exit decisions for every sample of a trace, in sample order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthAssignment {
    pub exits: usize,
    pub policy: PolicyConfig,
    pub entries: Vec<DepthEntry>,
}

impl DepthAssignment {
    pub fn n(&self) -> usize {
        self.entries.len()
    }

    pub fn is_deterministic(&self) -> bool {
        self.entries.iter().all(|e| matches!(e, DepthEntry::Exit(_)))
    }

    /// Exit depths when every entry is deterministic.
    pub fn depths(&self) -> Option<Vec<usize>> {
        self.entries
            .iter()
            .map(|e| match e {
                DepthEntry::Exit(d) => Some(*d),
                DepthEntry::Distribution(_) => None,
            })
            .collect()
    }

    /// Exit depth of one sample, if its entry is deterministic.
    pub fn depth_at(&self, index: usize) -> Option<usize> {
        match self.entries[index] {
            DepthEntry::Exit(d) => Some(d),
            DepthEntry::Distribution(_) => None,
        }
    }

    /// Probability of exiting at each depth for one sample.
    pub fn row(&self, index: usize) -> Vec<f64> {
        match &self.entries[index] {
            DepthEntry::Exit(d) => {
                let mut row = vec![0.0; self.exits];
                row[d - 1] = 1.0;
                row
            }
            DepthEntry::Distribution(p) => p.clone(),
        }
    }
}

/// Entropy in nats of a probability vector, with 0 ln 0 = 0.
///
/// Fails if an entry is negative or the entries do not sum to 1 within 1e-9.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64, PolicyError> {
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(PolicyError::InvalidProbability);
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(PolicyError::Normalization(sum));
    }
    Ok(crate::stats::entropy(probs))
}

/// Applies a policy from the built-in registry.
pub fn apply_policy(trace: &ExitTrace, policy: &PolicyConfig) -> Result<DepthAssignment, PolicyError> {
    PolicyRegistry::builtin().apply(trace, policy)
}

/// One assignment per value, each identical to an independent
/// [`apply_policy`] call with [`PolicyConfig::with_scalar`].
pub fn policy_sweep(trace: &ExitTrace, kind: &str, values: &[f64]) -> Result<Vec<DepthAssignment>, PolicyError> {
    if values.is_empty() {
        return Err(PolicyError::EmptySweep);
    }
    values
        .iter()
        .map(|v| apply_policy(trace, &PolicyConfig::with_scalar(kind, *v)?))
        .collect()
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    #[test]
    fn predictive_entropy_examples() {
        assert_eq!(predictive_entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((predictive_entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1) = 0.8018185525433373
        assert!((predictive_entropy(&[0.7, 0.2, 0.1]).unwrap() - 0.801818552543337).abs() < 1e-12);
        assert!(matches!(predictive_entropy(&[0.5, 0.6]), Err(PolicyError::Normalization(_))));
        assert!(predictive_entropy(&[-0.1, 1.1]).is_err());
    }

    fn entropy_profile_trace() -> ExitTrace {
        let row: Vec<Vec<f64>> = [1.2f64.min(0.69), 0.6, 0.3]
            .iter()
            .map(|h| logits_with_entropy(*h))
            .collect();
        trace_from_logits(vec![row], None)
    }

    #[test]
    fn entropy_threshold_first_crossing() {
        // two-class entropies are capped at ln 2, so depth 1 sits at 0.69 here
        let trace = entropy_profile_trace();
        let d = |tau: f64| apply_policy(&trace, &PolicyConfig::entropy(tau)).unwrap().depths().unwrap()[0];
        assert_eq!(d(0.5), 3);
        assert_eq!(d(0.65), 2);
        assert_eq!(d(0.0), 3);
        assert_eq!(d(0.7), 1);
    }

    #[test]
    fn entropy_threshold_three_class_example() {
        // three classes allow the depth-1 entropy 1.2 from the worked example
        let probs_for = |h: f64| {
            // p = (a, (1-a)/2, (1-a)/2); find a by bisection
            let ent = |a: f64| {
                let b = (1.0 - a) / 2.0;
                -(a * a.ln() + 2.0 * b * b.ln())
            };
            let (mut lo, mut hi) = (1.0 / 3.0, 1.0 - 1e-15);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if ent(mid) > h {
                    lo = mid
                } else {
                    hi = mid
                }
            }
            let a = 0.5 * (lo + hi);
            let b = (1.0 - a) / 2.0;
            vec![a.ln(), b.ln(), b.ln()]
        };
        let trace = trace_from_logits(vec![vec![probs_for(1.2), probs_for(0.6), probs_for(0.3)]], None);
        let d = |tau: f64| apply_policy(&trace, &PolicyConfig::entropy(tau)).unwrap().depths().unwrap()[0];
        assert_eq!(d(0.5), 3);
        assert_eq!(d(0.7), 2);
    }

    #[test]
    fn threshold_ties_continue_to_next_depth() {
        let trace = trace_from_logits(vec![vec![vec![0.0, 0.0], vec![5.0, 0.0]]], None);
        let a = apply_policy(&trace, &PolicyConfig::entropy(2f64.ln())).unwrap();
        assert_eq!(a.depths().unwrap(), vec![2]);
        let a = apply_policy(&trace, &PolicyConfig::confidence(0.5)).unwrap();
        assert_eq!(a.depths().unwrap(), vec![2]);
    }

    #[test]
    fn patience_example() {
        // argmax sequence A A B B B
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let trace = trace_from_logits(vec![vec![a.clone(), a, b.clone(), b.clone(), b]], None);
        let depth = |t| apply_policy(&trace, &PolicyConfig::patience(t)).unwrap().depths().unwrap()[0];
        assert_eq!(depth(1), 1);
        assert_eq!(depth(2), 2);
        assert_eq!(depth(3), 5);
        assert_eq!(depth(4), 5);
    }

    #[test]
    fn fixed_depth_and_mismatch() {
        let trace = entropy_profile_trace();
        let a = apply_policy(&trace, &PolicyConfig::fixed(2)).unwrap();
        assert_eq!(a.depths().unwrap(), vec![2]);
        assert!(matches!(
            apply_policy(&trace, &PolicyConfig::fixed(4)),
            Err(PolicyError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn stochastic_table_is_copied() {
        let trace = entropy_profile_trace();
        let table = vec![vec![0.25, 0.25, 0.5]];
        let a = apply_policy(&trace, &PolicyConfig::stochastic(table.clone())).unwrap();
        assert_eq!(a.entries, vec![DepthEntry::Distribution(table[0].clone())]);
        assert!(!a.is_deterministic());
        let bad = vec![vec![0.25, 0.25, 0.25]];
        assert!(apply_policy(&trace, &PolicyConfig::stochastic(bad)).is_err());
        let short = vec![vec![0.5, 0.5]];
        assert!(apply_policy(&trace, &PolicyConfig::stochastic(short)).is_err());
    }

    #[test]
    fn config_field_discipline() {
        let trace = entropy_profile_trace();
        let mut cfg = PolicyConfig::entropy(0.5);
        cfg.fixed_k = Some(1);
        assert!(matches!(
            apply_policy(&trace, &cfg),
            Err(PolicyError::UnexpectedParam { param: "fixed_k", .. })
        ));
        assert!(apply_policy(&trace, &PolicyConfig::entropy(-0.1)).is_err());
        assert!(apply_policy(&trace, &PolicyConfig::confidence(0.0)).is_err());
        assert!(apply_policy(&trace, &PolicyConfig::confidence(1.5)).is_err());
        assert!(apply_policy(&trace, &PolicyConfig::patience(0)).is_err());
        let missing = PolicyConfig {
            kind: ENTROPY.into(),
            ..Default::default()
        };
        assert!(matches!(
            apply_policy(&trace, &missing),
            Err(PolicyError::MissingParam { param: "tau", .. })
        ));
        let unknown = PolicyConfig {
            kind: "oracle".into(),
            ..Default::default()
        };
        assert!(matches!(apply_policy(&trace, &unknown), Err(PolicyError::UnknownKind(_))));
    }

    #[test]
    fn kv_round_trip() {
        for cfg in [
            PolicyConfig::entropy(0.35),
            PolicyConfig::confidence(0.9),
            PolicyConfig::patience(3),
            PolicyConfig::fixed(6),
        ] {
            assert_eq!(PolicyConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        }
        let st = PolicyConfig::stochastic(vec![vec![1.0]]);
        assert_eq!(st.to_kv(), "policy.kind=stochastic-table\npolicy.table_rows=1\n");
    }

    #[test]
    fn sweep_matches_independent_calls() {
        let trace = entropy_profile_trace();
        let taus = [0.3, 0.5, 0.7];
        let sweep = policy_sweep(&trace, ENTROPY, &taus).unwrap();
        assert_eq!(sweep.len(), 3);
        for (a, tau) in sweep.iter().zip(taus) {
            assert_eq!(a, &apply_policy(&trace, &PolicyConfig::entropy(tau)).unwrap());
        }
        let zero = policy_sweep(&trace, ENTROPY, &[0.0]).unwrap();
        assert!(zero[0].depths().unwrap().iter().all(|d| *d == 3));
        assert_eq!(policy_sweep(&trace, ENTROPY, &[]), Err(PolicyError::EmptySweep));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_trace() -> impl Strategy<Value = ExitTrace> {
            (1usize..5, 2usize..5).prop_flat_map(|(k, c)| {
                prop::collection::vec(prop::collection::vec(prop::collection::vec(-4.0f64..4.0, c), k), 20)
                    .prop_map(move |logits| {
                        let labels: Vec<usize> = (0..20).map(|i| 1 + i % c).collect();
                        trace_from_logits(logits, Some(labels))
                    })
            })
        }

        proptest! {
            #[test]
            fn entropy_depth_is_non_increasing_in_tau(trace in random_trace(), mut taus in prop::collection::vec(0.0f64..1.5, 2..8)) {
                taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let sweep = policy_sweep(&trace, ENTROPY, &taus).unwrap();
                for w in sweep.windows(2) {
                    let (a, b) = (w[0].depths().unwrap(), w[1].depths().unwrap());
                    for (x, y) in a.iter().zip(&b) {
                        prop_assert!(x >= y);
                    }
                }
                // brute force: first k with entropy < tau
                for (a, tau) in sweep.iter().zip(&taus) {
                    for (i, s) in trace.samples().iter().enumerate() {
                        let mut expect = trace.exits();
                        for e in &s.exits {
                            let p = crate::trace::stable_softmax(&e.logits).unwrap();
                            let h: f64 = p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
                            if h < *tau { expect = e.depth; break; }
                        }
                        prop_assert_eq!(a.depths().unwrap()[i], expect);
                    }
                }
            }

            #[test]
            fn policies_ignore_labels(trace in random_trace(), shift in 1usize..4, tau in 0.0f64..1.0, t in 1usize..4) {
                let c = trace.classes();
                let permuted = trace.map_labels(|_, l| (l - 1 + shift) % c + 1).unwrap();
                for cfg in [PolicyConfig::entropy(tau), PolicyConfig::confidence(tau.max(0.01)), PolicyConfig::patience(t), PolicyConfig::fixed(1)] {
                    prop_assert_eq!(apply_policy(&trace, &cfg).unwrap(), apply_policy(&permuted, &cfg).unwrap());
                }
            }
        }
    }
}
