//! Closed-form generalization bounds for adaptive-depth classifiers.
//!
//! Every bound has the shape `empirical loss + complexity term`, where the
//! complexity term depends on the exit-depth entropy H(D) instead of ln K.
//! Logs are natural throughout; the one conversion to bits happens inside
//! [`explicit_bound`].
//!
//! Bounds above 1 are returned as computed and flagged vacuous in reports.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{entropy, DepthStats};

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("{0}")]
    Domain(String),
    #[error("missing input: {0}")]
    MissingInput(&'static str),
    #[error("{name} has {got} entries, expected {expected}")]
    LengthMismatch {
        name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("depth {depth} has probability {p} but no samples")]
    ZeroCount { depth: usize, p: f64 },
}

fn domain(message: impl Into<String>) -> BoundError {
    BoundError::Domain(message.into())
}

/// Everything the bounds may consume. Optional fields feed only the
/// calculators that need them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub exits: usize,
    pub delta: f64,
    /// H(D) in nats.
    pub entropy: f64,
    pub expected_depth: f64,
    pub p: Vec<f64>,
    pub counts: Vec<usize>,
    pub empirical_loss: f64,
    /// KL(Q||P) of the posterior over policies.
    pub kl_total: f64,
    /// KL(Q_k||P_k) per depth.
    pub kl_per_depth: Option<Vec<f64>>,
    pub epsilon: f64,
    /// Rademacher complexity of the depth-k classifiers, k = 1..=K.
    pub per_depth_complexity: Option<Vec<f64>>,
    /// Effective dimension d.
    pub d_eff: Option<f64>,
    /// Fraction of easy inputs.
    pub alpha: Option<f64>,
    /// Depth at which easy inputs are resolved.
    pub k_easy: Option<usize>,
    /// Constant hidden in the early-exit advantage terms.
    pub constant_c: f64,
    /// Constant hidden in the sample-complexity rate.
    pub sc_constant: f64,
    /// Observed evaluation-minus-training loss, for the tightness ratio.
    pub observed_gap: Option<f64>,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            n: 1,
            exits: 1,
            delta: 0.05,
            entropy: 0.0,
            expected_depth: 1.0,
            p: vec![1.0],
            counts: vec![1],
            empirical_loss: 0.0,
            kl_total: 0.0,
            kl_per_depth: None,
            epsilon: 0.0,
            per_depth_complexity: None,
            d_eff: None,
            alpha: None,
            k_easy: None,
            constant_c: 1.0,
            sc_constant: 2.0,
            observed_gap: None,
        }
    }
}

impl BoundInputs {
    pub fn from_stats(stats: &DepthStats, empirical_loss: f64, delta: f64) -> Self {
        Self {
            n: stats.n,
            exits: stats.exits,
            delta,
            entropy: stats.entropy,
            expected_depth: stats.expected_depth,
            p: stats.p.clone(),
            counts: stats.counts.clone(),
            empirical_loss,
            ..Default::default()
        }
    }

    fn check(&self) -> Result<(), BoundError> {
        if self.n == 0 {
            return Err(domain("n must be at least 1"));
        }
        if self.exits == 0 {
            return Err(domain("K must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(domain(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.entropy.is_finite() && self.entropy >= 0.0) {
            return Err(domain(format!("H(D) must be finite and >= 0, got {}", self.entropy)));
        }
        if !(self.kl_total.is_finite() && self.kl_total >= 0.0) {
            return Err(domain(format!("KL must be finite and >= 0, got {}", self.kl_total)));
        }
        if !(self.empirical_loss.is_finite() && self.empirical_loss >= 0.0) {
            return Err(domain(format!(
                "empirical loss must be finite and >= 0, got {}",
                self.empirical_loss
            )));
        }
        Ok(())
    }

    fn check_distribution(&self) -> Result<(), BoundError> {
        if self.p.len() != self.exits {
            return Err(BoundError::LengthMismatch {
                name: "p",
                got: self.p.len(),
                expected: self.exits,
            });
        }
        if self.p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(domain("p has a negative or non-finite entry"));
        }
        let sum: f64 = self.p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(domain(format!("p sums to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// ln(2 sqrt(n) / delta)
fn confidence_term(n: f64, delta: f64) -> f64 {
    LN_2 + 0.5 * n.ln() - delta.ln()
}

/// Complexity term of [`main_bound`]:
/// sqrt((KL + H(D) + ln(2 sqrt(n)/delta)) / 2n).
pub fn main_gap_term(inputs: &BoundInputs) -> Result<f64, BoundError> {
    inputs.check()?;
    let n = inputs.n as f64;
    Ok(((inputs.kl_total + inputs.entropy + confidence_term(n, inputs.delta)) / (2.0 * n)).sqrt())
}

/// PAC-Bayes bound with the exit-depth entropy in place of ln K.
pub fn main_bound(inputs: &BoundInputs) -> Result<f64, BoundError> {
    Ok(inputs.empirical_loss + main_gap_term(inputs)?)
}

/// [`main_bound`] for deterministic policies; the KL term is dropped.
pub fn deterministic_bound(inputs: &BoundInputs) -> Result<f64, BoundError> {
    inputs.check()?;
    let n = inputs.n as f64;
    Ok(inputs.empirical_loss + ((inputs.entropy + confidence_term(n, inputs.delta)) / (2.0 * n)).sqrt())
}

/// [`deterministic_bound`] with ln K substituted for H(D).
pub fn naive_ln_k_bound(inputs: &BoundInputs) -> Result<f64, BoundError> {
    let naive = BoundInputs {
        entropy: (inputs.exits as f64).ln(),
        ..inputs.clone()
    };
    deterministic_bound(&naive)
}

/// Per-depth bounds weighted by p_k, each with its own sample count n_k and
/// confidence delta/K.
pub fn weighted_bound(inputs: &BoundInputs) -> Result<f64, BoundError> {
    inputs.check()?;
    inputs.check_distribution()?;
    let kl = inputs.kl_per_depth.as_ref().ok_or(BoundError::MissingInput("kl_per_depth"))?;
    let k = inputs.exits;
    for (name, len) in [("kl_per_depth", kl.len()), ("n_k", inputs.counts.len())] {
        if len != k {
            return Err(BoundError::LengthMismatch {
                name,
                got: len,
                expected: k,
            });
        }
    }
    if kl.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(domain("kl_per_depth has a negative or non-finite entry"));
    }
    let mut total = 0.0;
    for (depth, ((p, n_k), kl_k)) in inputs.p.iter().zip(&inputs.counts).zip(kl).enumerate() {
        if *p == 0.0 {
            continue;
        }
        if *n_k == 0 {
            return Err(BoundError::ZeroCount { depth: depth + 1, p: *p });
        }
        let n_k = *n_k as f64;
        let conf = (2.0 * k as f64).ln() + 0.5 * n_k.ln() - inputs.delta.ln();
        total += p * ((kl_k + conf) / (2.0 * n_k)).sqrt();
    }
    Ok(inputs.empirical_loss + total)
}

/// sqrt(2 ln 2), the leading coefficient of the entropy term.
pub fn explicit_coefficient() -> f64 {
    (2.0 * LN_2).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplicitBound {
    pub total: f64,
    pub entropy_term: f64,
    pub complexity_term: f64,
}

/// Bound with separated entropy and complexity terms:
/// `L + sqrt(2 ln 2 / n) sqrt(H_bits) + sqrt((ln K + ln(2 sqrt(n)/delta)) / 2n)`.
pub fn explicit_bound(inputs: &BoundInputs) -> Result<ExplicitBound, BoundError> {
    inputs.check()?;
    let n = inputs.n as f64;
    let h_bits = inputs.entropy / LN_2;
    let entropy_term = (2.0 * LN_2 / n).sqrt() * h_bits.sqrt();
    let complexity_term = (((inputs.exits as f64).ln() + confidence_term(n, inputs.delta)) / (2.0 * n)).sqrt();
    Ok(ExplicitBound {
        total: inputs.empirical_loss + entropy_term + complexity_term,
        entropy_term,
        complexity_term,
    })
}

/// [`main_bound`] plus the epsilon*K penalty for approximately
/// label-independent policies.
pub fn epsilon_bound(inputs: &BoundInputs) -> Result<f64, BoundError> {
    if !(inputs.epsilon.is_finite() && inputs.epsilon >= 0.0) {
        return Err(domain(format!("epsilon must be finite and >= 0, got {}", inputs.epsilon)));
    }
    Ok(main_bound(inputs)? + epsilon_penalty(inputs.epsilon, inputs.exits))
}

pub fn epsilon_penalty(epsilon: f64, exits: usize) -> f64 {
    epsilon * exits as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityCombination {
    /// sum_k p_k R_k
    pub weighted: f64,
    /// E[D] max_k R_k / k
    pub envelope: f64,
    /// False when R_k decreases somewhere, i.e. the classes are not nested.
    pub nested: bool,
}

/// Combines per-depth Rademacher complexities under the exit distribution.
pub fn depth_weighted_complexity(inputs: &BoundInputs) -> Result<ComplexityCombination, BoundError> {
    inputs.check_distribution()?;
    let r = inputs
        .per_depth_complexity
        .as_ref()
        .ok_or(BoundError::MissingInput("per_depth_complexity"))?;
    if r.len() != inputs.exits {
        return Err(BoundError::LengthMismatch {
            name: "per_depth_complexity",
            got: r.len(),
            expected: inputs.exits,
        });
    }
    if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(domain("per-depth complexities must be finite and >= 0"));
    }
    let weighted = inputs.p.iter().zip(r).map(|(p, r)| p * r).sum();
    let expected_depth: f64 = inputs.p.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
    let max_ratio = r
        .iter()
        .enumerate()
        .map(|(i, r)| r / (i + 1) as f64)
        .fold(0.0, f64::max);
    Ok(ComplexityCombination {
        weighted,
        envelope: expected_depth * max_ratio,
        nested: r.windows(2).all(|w| w[0] <= w[1]),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleComplexity {
    /// Target generalization gap the counts are computed for.
    pub target_eps: f64,
    pub n_adaptive: u64,
    pub n_fixed: u64,
    /// n_fixed / n_adaptive
    pub ratio: f64,
}

/// Samples needed to reach a generalization gap of `target_eps`, adaptive
/// versus always running all K blocks.
pub fn sample_complexity(inputs: &BoundInputs, target_eps: f64) -> Result<SampleComplexity, BoundError> {
    if !(target_eps.is_finite() && target_eps > 0.0) {
        return Err(domain(format!("target gap must be > 0, got {target_eps}")));
    }
    if !(inputs.delta > 0.0 && inputs.delta < 1.0) {
        return Err(domain(format!("delta must lie in (0, 1), got {}", inputs.delta)));
    }
    let d = inputs.d_eff.ok_or(BoundError::MissingInput("d_eff"))?;
    if !(d.is_finite() && d > 0.0) {
        return Err(domain(format!("d_eff must be > 0, got {d}")));
    }
    if !(inputs.sc_constant.is_finite() && inputs.sc_constant > 0.0) {
        return Err(domain("sample-complexity constant must be > 0"));
    }
    let eps2 = target_eps * target_eps;
    let adaptive = inputs.sc_constant * (inputs.expected_depth * d + inputs.entropy + (1.0 / inputs.delta).ln()) / eps2;
    let fixed = inputs.sc_constant * inputs.exits as f64 * d / eps2;
    let n_adaptive = adaptive.ceil() as u64;
    let n_fixed = fixed.ceil() as u64;
    Ok(SampleComplexity {
        target_eps,
        n_adaptive,
        n_fixed,
        ratio: n_fixed as f64 / n_adaptive as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Advantage {
    /// c alpha (sqrt K - sqrt k_E) sqrt(d/n)
    pub advantage: f64,
    /// alpha B_{k_E} + (1 - alpha) B_K
    pub composite: f64,
    pub easy_bound: f64,
    pub full_bound: f64,
    /// composite < B_K
    pub strictly_better: bool,
}

/// Bound improvement when a fraction alpha of inputs is resolved at depth
/// k_E < K, with B_k = c sqrt(k d / n).
pub fn advantage(inputs: &BoundInputs) -> Result<Advantage, BoundError> {
    let alpha = inputs.alpha.ok_or(BoundError::MissingInput("alpha"))?;
    let k_easy = inputs.k_easy.ok_or(BoundError::MissingInput("k_easy"))?;
    let d = inputs.d_eff.ok_or(BoundError::MissingInput("d_eff"))?;
    let k = inputs.exits;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if k_easy == 0 || k_easy >= k {
        return Err(domain(format!("k_easy must satisfy 1 <= k_easy < K = {k}, got {k_easy}")));
    }
    if !(d.is_finite() && d >= 0.0) || inputs.n == 0 {
        return Err(domain("d_eff must be >= 0 and n >= 1"));
    }
    let c = inputs.constant_c;
    let n = inputs.n as f64;
    let b = |depth: usize| c * (depth as f64 * d / n).sqrt();
    let easy_bound = b(k_easy);
    let full_bound = b(k);
    let composite = alpha * easy_bound + (1.0 - alpha) * full_bound;
    Ok(Advantage {
        advantage: c * alpha * ((k as f64).sqrt() - (k_easy as f64).sqrt()) * (d / n).sqrt(),
        composite,
        easy_bound,
        full_bound,
        strictly_better: composite < full_bound,
    })
}

/// KL(p || uniform over K) computed directly as sum_k p_k ln(p_k K).
/// Equals ln K - H(p).
pub fn depth_kl_identity(p: &[f64], exits: usize) -> Result<f64, BoundError> {
    if p.len() != exits {
        return Err(BoundError::LengthMismatch {
            name: "p",
            got: p.len(),
            expected: exits,
        });
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(domain("p has a negative or non-finite entry"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(domain(format!("p sums to {sum}, expected 1")));
    }
    let k = exits as f64;
    Ok(p.iter().filter(|v| **v > 0.0).map(|v| v * (v * k).ln()).sum())
}

/// ln K - H(p), the other route to [`depth_kl_identity`].
pub fn kl_to_uniform_via_entropy(p: &[f64]) -> f64 {
    (p.len() as f64).ln() - entropy(p)
}

/// x - ln(1 + x), accurate for small |x|.
fn x_minus_ln1p(x: f64) -> f64 {
    if x.abs() < 0.05 {
        // alternating series x^2/2 - x^3/3 + x^4/4 - ...
        let mut term = x * x;
        let mut sum = 0.0;
        for j in 2..40 {
            let t = term / j as f64;
            sum += if j % 2 == 0 { t } else { -t };
            term *= x;
            if t.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        sum
    } else {
        x - x.ln_1p()
    }
}

/// KL between isotropic Gaussians N(mu, posterior_var I) and N(0, prior_var I)
/// in `dim` dimensions, where `mean_sq_norm` = ||mu||^2.
pub fn gaussian_kl(mean_sq_norm: f64, dim: usize, prior_var: f64, posterior_var: f64) -> Result<f64, BoundError> {
    if !(prior_var > 0.0 && posterior_var > 0.0 && prior_var.is_finite() && posterior_var.is_finite()) {
        return Err(domain("variances must be finite and > 0"));
    }
    if dim == 0 {
        return Err(domain("dim must be at least 1"));
    }
    if !(mean_sq_norm.is_finite() && mean_sq_norm >= 0.0) {
        return Err(domain("mean squared norm must be finite and >= 0"));
    }
    // r - 1 - ln r with r = posterior_var / prior_var, written via x = r - 1
    let x = (posterior_var - prior_var) / prior_var;
    Ok(0.5 * (dim as f64 * x_minus_ln1p(x) + mean_sq_norm / prior_var))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    /// Above 1, i.e. uninformative for 0-1 loss.
    pub vacuous: bool,
}

impl From<f64> for BoundValue {
    fn from(value: f64) -> Self {
        Self {
            value,
            vacuous: value > 1.0,
        }
    }
}

/// Which optional calculators to run in [`BoundReport::compute`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundRequest {
    pub weighted: bool,
    pub complexity: bool,
    pub sample_complexity_target: Option<f64>,
    pub advantage: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub main_bound: BoundValue,
    pub deterministic_bound: BoundValue,
    pub explicit_bound: ExplicitBound,
    pub explicit_vacuous: bool,
    pub epsilon_bound: BoundValue,
    pub naive_ln_k_bound: BoundValue,
    pub weighted_bound: Option<BoundValue>,
    pub complexity: Option<ComplexityCombination>,
    pub sample_complexity: Option<SampleComplexity>,
    pub advantage: Option<Advantage>,
    /// main-bound complexity term / observed gap
    pub tightness_ratio: Option<f64>,
    pub warnings: Vec<String>,
}

impl BoundReport {
    pub fn compute(inputs: &BoundInputs, request: &BoundRequest) -> Result<Self, BoundError> {
        let explicit = explicit_bound(inputs)?;
        let mut warnings = Vec::new();
        let complexity = if request.complexity {
            let c = depth_weighted_complexity(inputs)?;
            if !c.nested {
                warnings.push("per-depth complexities decrease with depth; nesting precondition violated".into());
            }
            Some(c)
        } else {
            None
        };
        let tightness_ratio = match inputs.observed_gap {
            Some(g) if g > 0.0 => Some(main_gap_term(inputs)? / g),
            _ => None,
        };
        Ok(Self {
            main_bound: main_bound(inputs)?.into(),
            deterministic_bound: deterministic_bound(inputs)?.into(),
            explicit_vacuous: explicit.total > 1.0,
            explicit_bound: explicit,
            epsilon_bound: epsilon_bound(inputs)?.into(),
            naive_ln_k_bound: naive_ln_k_bound(inputs)?.into(),
            weighted_bound: if request.weighted {
                Some(weighted_bound(inputs)?.into())
            } else {
                None
            },
            complexity,
            sample_complexity: request
                .sample_complexity_target
                .map(|t| sample_complexity(inputs, t))
                .transpose()?,
            advantage: if request.advantage { Some(advantage(inputs)?) } else { None },
            tightness_ratio,
            warnings,
            inputs: inputs.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(n: usize, h: f64) -> BoundInputs {
        BoundInputs {
            n,
            entropy: h,
            ..Default::default()
        }
    }

    // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1)
    const H_721: f64 = 0.801818552543337;

    #[test]
    fn main_bound_reference_value() {
        let b = main_bound(&base(10_000, 0.0)).unwrap();
        assert!((b - (4000f64.ln() / 20000.0).sqrt()).abs() < 1e-15);
        assert!((b - 0.020365).abs() < 1e-6);
        let more = main_bound(&base(10_000, LN_2)).unwrap();
        assert!(more > b);
    }

    #[test]
    fn gap_term_scaling_in_n() {
        // the confidence term grows by ln 2 when n quadruples
        let small = base(2_500, 0.3);
        let big = base(10_000, 0.3);
        let a = main_gap_term(&small).unwrap();
        let b = main_gap_term(&big).unwrap();
        let shifted = BoundInputs {
            entropy: 0.3 + LN_2,
            ..small.clone()
        };
        assert!((b - 0.5 * main_gap_term(&shifted).unwrap()).abs() < 1e-12);
        assert!(b < a);
    }

    #[test]
    fn deterministic_bound_reference_values() {
        let b = deterministic_bound(&base(10_000, H_721)).unwrap();
        assert!((b - ((H_721 + 4000f64.ln()) / 20000.0).sqrt()).abs() < 1e-15);
        assert!((b - 0.021326).abs() < 1e-6);
        let with_kl = BoundInputs {
            kl_total: 0.0,
            ..base(10_000, H_721)
        };
        assert_eq!(main_bound(&with_kl).unwrap(), b);
        assert_eq!(deterministic_bound(&base(10_000, 0.0)).unwrap(), main_bound(&base(10_000, 0.0)).unwrap());
    }

    #[test]
    fn domain_errors() {
        for delta in [0.0, 1.0, -0.5, 1.5] {
            let bad = BoundInputs { delta, ..base(10, 0.0) };
            assert!(matches!(main_bound(&bad), Err(BoundError::Domain(_))));
        }
        assert!(main_bound(&base(0, 0.0)).is_err());
    }

    fn two_depth() -> BoundInputs {
        BoundInputs {
            n: 10_000,
            exits: 2,
            p: vec![0.5, 0.5],
            counts: vec![5000, 5000],
            kl_per_depth: Some(vec![0.0, 0.0]),
            ..Default::default()
        }
    }

    #[test]
    fn weighted_bound_reference_value() {
        let b = weighted_bound(&two_depth()).unwrap();
        let term = ((2.0 * 2.0 * 5000f64.sqrt() / 0.05).ln() / 10000.0).sqrt();
        assert!((b - term).abs() < 1e-15);
        assert!((b - 0.029395).abs() < 1e-6);
    }

    #[test]
    fn weighted_bound_zero_weight_and_errors() {
        let one_sided = BoundInputs {
            p: vec![1.0, 0.0],
            counts: vec![10_000, 0],
            ..two_depth()
        };
        let b = weighted_bound(&one_sided).unwrap();
        assert!((b - ((4.0 * 100.0 / 0.05f64).ln() / 20000.0).sqrt()).abs() < 1e-15);
        let zero = BoundInputs {
            counts: vec![10_000, 0],
            ..two_depth()
        };
        assert_eq!(weighted_bound(&zero), Err(BoundError::ZeroCount { depth: 2, p: 0.5 }));
        let missing = BoundInputs {
            kl_per_depth: None,
            ..two_depth()
        };
        assert_eq!(weighted_bound(&missing), Err(BoundError::MissingInput("kl_per_depth")));
    }

    #[test]
    fn explicit_bound_reference_values() {
        assert!((explicit_coefficient() - 1.177410).abs() < 1e-6);
        let zero = explicit_bound(&base(100, 0.0)).unwrap();
        assert_eq!(zero.entropy_term, 0.0);
        let inputs = BoundInputs {
            exits: 6,
            ..base(10_000, H_721)
        };
        let b = explicit_bound(&inputs).unwrap();
        assert!((H_721 / LN_2 - 1.156780).abs() < 1e-6);
        assert!((b.entropy_term - 0.012664).abs() < 1e-6);
        assert!((b.complexity_term - 0.022456).abs() < 1e-6);
        assert!((b.total - 0.035120).abs() < 1e-6);
        assert_eq!(b.total, b.entropy_term + b.complexity_term);
    }

    #[test]
    fn epsilon_bound_examples() {
        let inputs = base(500, 0.4);
        assert_eq!(epsilon_bound(&inputs).unwrap(), main_bound(&inputs).unwrap());
        assert!((epsilon_penalty(0.02, 12) - 0.24).abs() < 1e-15);
        let big = BoundInputs {
            epsilon: 0.5,
            exits: 4,
            ..inputs
        };
        let v: BoundValue = epsilon_bound(&big).unwrap().into();
        assert!((v.value - main_bound(&big).unwrap() - 2.0).abs() < 1e-15);
        assert!(v.vacuous);
    }

    #[test]
    fn complexity_combination_examples() {
        let inputs = BoundInputs {
            exits: 2,
            p: vec![0.5, 0.5],
            per_depth_complexity: Some(vec![0.1, 0.2]),
            ..Default::default()
        };
        let c = depth_weighted_complexity(&inputs).unwrap();
        assert!((c.weighted - 0.15).abs() < 1e-15);
        assert!((c.envelope - 0.15).abs() < 1e-15);
        let linear = BoundInputs {
            per_depth_complexity: Some(vec![0.05, 0.10]),
            ..inputs.clone()
        };
        let c = depth_weighted_complexity(&linear).unwrap();
        assert!((c.weighted - 0.075).abs() < 1e-15);
        assert!((c.envelope - 0.075).abs() < 1e-15);
        let shallow = BoundInputs {
            p: vec![1.0, 0.0],
            per_depth_complexity: Some(vec![0.1, 0.3]),
            ..inputs.clone()
        };
        let c = depth_weighted_complexity(&shallow).unwrap();
        assert_eq!(c.weighted, 0.1);
        assert!(c.envelope >= c.weighted);
        let decreasing = BoundInputs {
            per_depth_complexity: Some(vec![0.3, 0.1]),
            ..inputs.clone()
        };
        assert!(!depth_weighted_complexity(&decreasing).unwrap().nested);
        let short = BoundInputs {
            per_depth_complexity: Some(vec![0.3]),
            ..inputs
        };
        assert!(matches!(
            depth_weighted_complexity(&short),
            Err(BoundError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sample_complexity_examples() {
        let inputs = BoundInputs {
            exits: 6,
            expected_depth: 2.0,
            entropy: 1.0,
            d_eff: Some(100.0),
            ..Default::default()
        };
        let s = sample_complexity(&inputs, 0.1).unwrap();
        assert_eq!(s.n_adaptive, 40800);
        assert_eq!(s.n_fixed, 120_000);
        // K / E[D] limit when d dominates
        let limit = BoundInputs {
            exits: 6,
            expected_depth: 3.0,
            entropy: 0.0,
            delta: 0.5,
            d_eff: Some(1e9),
            ..Default::default()
        };
        let s = sample_complexity(&limit, 0.1).unwrap();
        assert!((s.ratio - 2.0).abs() < 1e-6);
        assert!(sample_complexity(&limit, 0.0).is_err());
        let no_d = BoundInputs { d_eff: None, ..limit };
        assert_eq!(sample_complexity(&no_d, 0.1), Err(BoundError::MissingInput("d_eff")));
    }

    #[test]
    fn sample_complexity_full_depth_slack() {
        let inputs = BoundInputs {
            exits: 4,
            expected_depth: 4.0,
            entropy: 0.0,
            d_eff: Some(50.0),
            ..Default::default()
        };
        let s = sample_complexity(&inputs, 0.05).unwrap();
        let slack = 2.0 * (1.0f64 / 0.05).ln() / 0.0025;
        assert!(s.n_adaptive as f64 - s.n_fixed as f64 <= slack + 1.0);
        assert!(s.n_adaptive >= s.n_fixed);
    }

    #[test]
    fn advantage_examples() {
        let inputs = BoundInputs {
            n: 10_000,
            exits: 16,
            alpha: Some(0.5),
            k_easy: Some(4),
            d_eff: Some(100.0),
            ..Default::default()
        };
        let a = advantage(&inputs).unwrap();
        assert!((a.advantage - 0.1).abs() < 1e-15);
        assert!(a.strictly_better);
        assert!((a.full_bound - a.composite - a.advantage).abs() < 1e-15);
        let none = advantage(&BoundInputs {
            alpha: Some(0.0),
            ..inputs.clone()
        })
        .unwrap();
        assert_eq!(none.advantage, 0.0);
        assert_eq!(none.composite, none.full_bound);
        let unit = advantage(&BoundInputs {
            n: 7,
            exits: 4,
            alpha: Some(1.0),
            k_easy: Some(1),
            d_eff: Some(7.0),
            constant_c: 1.5,
            ..Default::default()
        })
        .unwrap();
        assert!((unit.advantage - 1.5).abs() < 1e-15);
        let bad = BoundInputs {
            k_easy: Some(16),
            ..inputs.clone()
        };
        assert!(matches!(advantage(&bad), Err(BoundError::Domain(_))));
        let missing = BoundInputs { alpha: None, ..inputs };
        assert_eq!(advantage(&missing), Err(BoundError::MissingInput("alpha")));
    }

    #[test]
    fn kl_identity_examples() {
        assert!(depth_kl_identity(&[0.25; 4], 4).unwrap().abs() < 1e-15);
        assert!((depth_kl_identity(&[1.0, 0.0, 0.0, 0.0], 4).unwrap() - 4f64.ln()).abs() < 1e-15);
        let p = [0.7, 0.2, 0.1];
        let direct = depth_kl_identity(&p, 3).unwrap();
        assert!((direct - 0.296793).abs() < 1e-6);
        assert!((direct - kl_to_uniform_via_entropy(&p)).abs() < 1e-12);
        assert!(depth_kl_identity(&p, 4).is_err());
    }

    #[test]
    fn gaussian_kl_examples() {
        assert_eq!(gaussian_kl(0.0, 5, 0.1, 0.1).unwrap(), 0.0);
        let kl = gaussian_kl(0.0, 2, 0.1, 0.01).unwrap();
        assert!((kl - 0.5 * (0.2 - 2.0 + 2.0 * 10f64.ln())).abs() < 1e-14);
        assert!((kl - 1.402585).abs() < 1e-6);
        assert!(gaussian_kl(1.0, 2, 0.1, 0.01).unwrap() > kl);
        assert!(gaussian_kl(0.0, 2, 0.0, 0.01).is_err());
        assert!(gaussian_kl(0.0, 2, 0.1, -1.0).is_err());
        // near-equal variances keep full relative precision
        let tiny = gaussian_kl(0.0, 1, 1.0, 1.0 + 1e-6).unwrap();
        assert!((tiny / 2.5e-13 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn report_bundles_everything() {
        let inputs = BoundInputs {
            observed_gap: Some(0.01),
            d_eff: Some(10.0),
            alpha: Some(0.5),
            k_easy: Some(1),
            per_depth_complexity: Some(vec![0.1, 0.2]),
            ..two_depth()
        };
        let request = BoundRequest {
            weighted: true,
            complexity: true,
            sample_complexity_target: Some(0.1),
            advantage: true,
        };
        let r = BoundReport::compute(&inputs, &request).unwrap();
        assert!(r.weighted_bound.is_some() && r.complexity.is_some());
        assert!(r.sample_complexity.is_some() && r.advantage.is_some());
        let ratio = r.tightness_ratio.unwrap();
        assert!((ratio - main_gap_term(&inputs).unwrap() / 0.01).abs() < 1e-12);
        assert_eq!(r.inputs, inputs);
        let missing = BoundReport::compute(
            &BoundInputs { alpha: None, ..inputs },
            &BoundRequest {
                advantage: true,
                ..Default::default()
            },
        );
        assert_eq!(missing, Err(BoundError::MissingInput("alpha")));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dist(k: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.0f64..1.0, k).prop_map(|w| {
                let s: f64 = w.iter().sum::<f64>().max(1e-12);
                let mut p: Vec<f64> = w.iter().map(|v| v / s).collect();
                if p.iter().sum::<f64>() == 0.0 {
                    p[0] = 1.0;
                }
                p
            })
        }

        proptest! {
            #[test]
            fn bounds_are_monotone(n in 1usize..100_000, h in 0.0f64..3.0, kl in 0.0f64..10.0, eps in 0.0f64..0.1, delta in 0.001f64..0.5, dh in 0.0f64..1.0, dn in 1usize..1000) {
                let a = BoundInputs { n, entropy: h, kl_total: kl, epsilon: eps, delta, exits: 8, ..Default::default() };
                let more_h = BoundInputs { entropy: h + dh, ..a.clone() };
                let more_kl = BoundInputs { kl_total: kl + dh, ..a.clone() };
                let more_eps = BoundInputs { epsilon: eps + dh, ..a.clone() };
                let more_n = BoundInputs { n: n + dn, ..a.clone() };
                for f in [main_bound, deterministic_bound, epsilon_bound] {
                    prop_assert!(f(&more_h).unwrap() >= f(&a).unwrap());
                    prop_assert!(f(&more_n).unwrap() <= f(&a).unwrap());
                }
                prop_assert!(main_bound(&more_kl).unwrap() >= main_bound(&a).unwrap());
                prop_assert!(epsilon_bound(&more_eps).unwrap() >= epsilon_bound(&a).unwrap());
                prop_assert!(explicit_bound(&more_h).unwrap().total >= explicit_bound(&a).unwrap().total);
                prop_assert!(explicit_bound(&more_n).unwrap().total <= explicit_bound(&a).unwrap().total);
                let e0 = BoundInputs { epsilon: 0.0, ..a.clone() };
                prop_assert_eq!(epsilon_bound(&e0).unwrap().to_bits(), main_bound(&e0).unwrap().to_bits());
            }

            #[test]
            fn explicit_dominates_deterministic(k in 1usize..17, p in (1usize..17).prop_flat_map(dist), n in 1usize..1_000_000, delta in 0.001f64..0.99, loss in 0.0f64..1.0) {
                let h = entropy(&p);
                let inputs = BoundInputs { n, exits: k.max(p.len()), entropy: h, delta, empirical_loss: loss, ..Default::default() };
                prop_assert!(explicit_bound(&inputs).unwrap().total >= deterministic_bound(&inputs).unwrap() - 1e-15);
            }

            #[test]
            fn weighted_combination_below_envelope(p in (1usize..10).prop_flat_map(dist), mut r in prop::collection::vec(0.0f64..1.0, 10)) {
                let k = p.len();
                r.truncate(k);
                r.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let inputs = BoundInputs { exits: k, p, per_depth_complexity: Some(r), ..Default::default() };
                let c = depth_weighted_complexity(&inputs).unwrap();
                prop_assert!(c.weighted <= c.envelope + 1e-12);
            }
        }
    }
}
