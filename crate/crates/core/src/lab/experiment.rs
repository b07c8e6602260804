//! Seeded sweeps over exit policies on the synthetic lab.
//!
//! For every seed the network is trained once; each policy in the grid is
//! then applied to the train and test traces. Gaps and bounds use 0-1 loss.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{emit_trace, generate_dataset, train_model, LabError, MultiExitNet, SyntheticSpec, TrainConfig};
use crate::bounds::{advantage, deterministic_bound, explicit_bound, Advantage, BoundInputs};
use crate::policy::{apply_policy, PolicyConfig, ENTROPY};
use crate::select::compare_with_validation;
use crate::stats::{depth_stats, mean_exit_loss};
use crate::trace::{ExitTrace, LossKind, Split};

/// Seeds used when none are given.
pub const DEFAULT_SEEDS: [u64; 5] = [42, 123, 456, 789, 1024];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec: SyntheticSpec,
    pub train: TrainConfig,
    /// Entropy thresholds in nats. The fixed full-depth policy is always
    /// added as the last row.
    pub taus: Vec<f64>,
    /// Candidates for the bound-guided versus validation-tuned comparison.
    pub selection_taus: Vec<f64>,
    pub delta: f64,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::default(),
            train: TrainConfig::default(),
            taus: vec![0.69, 0.68, 0.67, 0.66, 0.64, 0.6, 0.5, 0.3],
            selection_taus: vec![0.3, 0.5, 0.7],
            delta: 0.05,
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

impl ExperimentConfig {
    /// Small, fast configuration for smoke runs.
    pub fn smoke() -> Self {
        let base = Self::default();
        Self {
            spec: SyntheticSpec {
                n_train: 500,
                n_val: 500,
                n_test: 5000,
                ..base.spec
            },
            taus: vec![0.66, 0.6, 0.5],
            seeds: DEFAULT_SEEDS[..2].to_vec(),
            ..base
        }
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.spec.validate()?;
        self.train.validate()?;
        if self.taus.is_empty() {
            return Err(LabError::Spec("need at least one entropy threshold besides the fixed policy".into()));
        }
        if self.taus.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(LabError::Spec("entropy thresholds must be finite and >= 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Spec("need at least one seed".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(LabError::Spec(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.spec.n_test == 0 {
            return Err(LabError::Spec("n_test must be at least 1".into()));
        }
        Ok(())
    }

    pub fn exits(&self) -> usize {
        self.train.widths.len()
    }

    /// Entropy thresholds as policies, then the fixed full-depth policy.
    pub fn policies(&self) -> Vec<PolicyConfig> {
        let mut out: Vec<PolicyConfig> = self.taus.iter().map(|t| PolicyConfig::entropy(*t)).collect();
        out.push(PolicyConfig::fixed(self.exits()));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub seed: u64,
    pub policy: String,
    pub tau: Option<f64>,
    pub expected_depth: f64,
    /// H(D) on the training split, nats.
    pub entropy: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub gap: f64,
    pub bound: f64,
    pub explicit_bound: f64,
    /// (bound - train loss) / gap, when the gap is positive.
    pub tightness: Option<f64>,
    pub speedup: f64,
    pub bound_holds: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub tau: Option<f64>,
    pub expected_depth: MeanStd,
    pub entropy: MeanStd,
    pub train_loss: MeanStd,
    pub test_loss: MeanStd,
    pub gap: MeanStd,
    pub bound: MeanStd,
    pub speedup: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub seed: Option<u64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub policy: String,
    pub gap: MeanStd,
    pub entropy: MeanStd,
    pub expected_depth: MeanStd,
    pub speedup: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// aggressive, moderate, conservative, fixed
    pub entries: Vec<AblationEntry>,
    /// Root mean of the per-policy gap variances.
    pub pooled_std: f64,
    /// Each mean gap is at most the next one plus `pooled_std`.
    pub ordering_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSelection {
    pub seed: u64,
    pub tau_star: f64,
    pub validation_tau: f64,
    pub test_accuracy_bound: f64,
    pub test_accuracy_validation: f64,
    pub test_accuracy_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageStudy {
    /// Bound comparison with alpha from the [`SyntheticSpec`], k_E = 1, d = mean
    /// per-depth parameter count and n = n_train.
    pub bound: Advantage,
    pub adaptive_policy: String,
    /// gap(adaptive) - gap(fixed) per seed.
    pub gap_differences: Vec<(u64, f64)>,
    /// Seeds where the adaptive gap is below the fixed gap.
    pub seeds_with_predicted_sign: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub rows: Vec<ExperimentRow>,
    pub summaries: Vec<PolicySummary>,
    /// Over the entropy-threshold rows of each seed.
    pub seed_correlations: Vec<Correlation>,
    pub mean_spearman: Option<f64>,
    pub mean_pearson: Option<f64>,
    /// Over the seed-averaged entropy-threshold rows.
    pub pooled_correlation: Correlation,
    pub ablation: Ablation,
    pub selection: Vec<SeedSelection>,
    pub advantage: Option<AdvantageStudy>,
    pub bound_violations: usize,
    pub warnings: Vec<String>,
    pub failures: Vec<SeedFailure>,
    pub partial: bool,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// 1-based ranks; tied values share their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[order[k]] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

struct SeedOutcome {
    rows: Vec<ExperimentRow>,
    selection: Option<SeedSelection>,
    warning: Option<String>,
    depth_params: f64,
}

/// Traces of the network trained for one seed, as used by [`run_experiment`].
pub struct SeedTraces {
    pub net: MultiExitNet,
    pub train: ExitTrace,
    /// Empty when the configuration has no validation split.
    pub validation: Option<ExitTrace>,
    pub test: ExitTrace,
    pub warning: Option<String>,
}

/// Generates the data for `seed`, trains on it and emits all split traces.
pub fn seed_traces(config: &ExperimentConfig, seed: u64) -> Result<SeedTraces, LabError> {
    config.validate()?;
    let spec = SyntheticSpec { seed, ..config.spec.clone() };
    let data = generate_dataset(&spec)?;
    let report = train_model(&data.train, &config.train, seed)?;
    let net = report.net;
    Ok(SeedTraces {
        train: emit_trace(&net, &data.train, Split::Train)?,
        validation: if data.validation.is_empty() {
            None
        } else {
            Some(emit_trace(&net, &data.validation, Split::Validation)?)
        },
        test: emit_trace(&net, &data.test, Split::Test)?,
        warning: report.warning,
        net,
    })
}

fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, LabError> {
    let SeedTraces {
        net,
        train,
        validation,
        test,
        warning,
    } = seed_traces(config, seed)?;
    let net = &net;
    let analysis = |e: &dyn std::fmt::Display| LabError::Analysis(format!("seed {seed}: {e}"));
    let k = net.exits();
    let mut rows = Vec::new();
    for policy in config.policies() {
        let on_train = apply_policy(&train, &policy).map_err(|e| analysis(&e))?;
        let on_test = apply_policy(&test, &policy).map_err(|e| analysis(&e))?;
        let stats = depth_stats(&on_train).map_err(|e| analysis(&e))?;
        let train_loss = mean_exit_loss(&train, &on_train, LossKind::ZeroOne).map_err(|e| analysis(&e))?;
        let test_loss = mean_exit_loss(&test, &on_test, LossKind::ZeroOne).map_err(|e| analysis(&e))?;
        let inputs = BoundInputs {
            delta: config.delta,
            ..BoundInputs::from_stats(&stats, train_loss, config.delta)
        };
        let bound = deterministic_bound(&inputs).map_err(|e| analysis(&e))?;
        let explicit = explicit_bound(&inputs).map_err(|e| analysis(&e))?.total;
        let gap = test_loss - train_loss;
        rows.push(ExperimentRow {
            seed,
            policy: policy.to_string(),
            tau: policy.tau,
            expected_depth: stats.expected_depth,
            entropy: stats.entropy,
            train_loss,
            test_loss,
            gap,
            bound,
            explicit_bound: explicit,
            tightness: (gap > 0.0).then(|| (bound - train_loss) / gap),
            speedup: k as f64 / stats.expected_depth,
            bound_holds: bound >= test_loss,
        });
    }
    let selection = if let (Some(validation), false) = (&validation, config.selection_taus.is_empty()) {
        let r = compare_with_validation(&train, validation, &test, ENTROPY, &config.selection_taus, config.delta)
            .map_err(|e| analysis(&e))?;
        let c = r.comparison.expect("comparison requested");
        Some(SeedSelection {
            seed,
            tau_star: r.tau_star,
            validation_tau: c.validation_tau,
            test_accuracy_bound: c.test_accuracy_bound,
            test_accuracy_validation: c.test_accuracy_validation,
            test_accuracy_delta: c.test_accuracy_delta,
        })
    } else {
        None
    };
    let depth_params = (1..=k).map(|d| net.depth_params(d) as f64).sum::<f64>() / k as f64;
    Ok(SeedOutcome {
        rows,
        selection,
        warning: warning.map(|w| format!("seed {seed}: {w}")),
        depth_params,
    })
}

fn summarize(policy: &PolicyConfig, rows: &[&ExperimentRow]) -> PolicySummary {
    let col = |f: fn(&ExperimentRow) -> f64| MeanStd::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
    PolicySummary {
        policy: policy.to_string(),
        tau: policy.tau,
        expected_depth: col(|r| r.expected_depth),
        entropy: col(|r| r.entropy),
        train_loss: col(|r| r.train_loss),
        test_loss: col(|r| r.test_loss),
        gap: col(|r| r.gap),
        bound: col(|r| r.bound),
        speedup: col(|r| r.speedup),
    }
}

/// Aggressive is the largest entropy threshold, conservative the smallest,
/// moderate the median of the sorted grid.
fn ablation(config: &ExperimentConfig, summaries: &[PolicySummary]) -> Ablation {
    let m = config.taus.len();
    let mut by_tau: Vec<usize> = (0..m).collect();
    by_tau.sort_by(|a, b| config.taus[*b].total_cmp(&config.taus[*a]));
    let picks = [
        ("aggressive", by_tau[0]),
        ("moderate", by_tau[m / 2]),
        ("conservative", by_tau[m - 1]),
        ("fixed", m),
    ];
    let entries: Vec<AblationEntry> = picks
        .iter()
        .map(|(label, i)| {
            let s = &summaries[*i];
            AblationEntry {
                label: label.to_string(),
                policy: s.policy.clone(),
                gap: s.gap,
                entropy: s.entropy,
                expected_depth: s.expected_depth,
                speedup: s.speedup,
            }
        })
        .collect();
    let pooled_std = (entries.iter().map(|e| e.gap.std * e.gap.std).sum::<f64>() / entries.len() as f64).sqrt();
    let ordering_holds = entries.windows(2).all(|w| w[0].gap.mean <= w[1].gap.mean + pooled_std);
    Ablation {
        entries,
        pooled_std,
        ordering_holds,
    }
}

/// Trains one network per seed (seeds run in parallel) and evaluates every
/// policy in the grid. A failing seed is recorded and the rest continue.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, LabError> {
    config.validate()?;
    let outcomes: Vec<(u64, Result<SeedOutcome, LabError>)> =
        config.seeds.par_iter().map(|s| (*s, run_seed(config, *s))).collect();
    let mut rows = Vec::new();
    let mut selection = Vec::new();
    let mut warnings = Vec::new();
    let mut failures = Vec::new();
    let mut depth_params = None;
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(o) => {
                rows.extend(o.rows);
                selection.extend(o.selection);
                warnings.extend(o.warning);
                depth_params.get_or_insert(o.depth_params);
            }
            Err(e) => failures.push(SeedFailure {
                seed,
                message: e.to_string(),
            }),
        }
    }
    if rows.is_empty() {
        return Err(LabError::Analysis(format!(
            "every seed failed: {}",
            failures.iter().map(|f| format!("seed {}: {}", f.seed, f.message)).collect::<Vec<_>>().join("; ")
        )));
    }
    let policies = config.policies();
    let per_policy = policies.len();
    let summaries: Vec<PolicySummary> = policies
        .iter()
        .enumerate()
        .map(|(i, p)| summarize(p, &rows.iter().skip(i).step_by(per_policy).collect::<Vec<_>>()))
        .collect();
    let m = config.taus.len();
    let seed_correlations: Vec<Correlation> = rows
        .chunks(per_policy)
        .map(|seed_rows| {
            let h: Vec<f64> = seed_rows[..m].iter().map(|r| r.entropy).collect();
            let g: Vec<f64> = seed_rows[..m].iter().map(|r| r.gap).collect();
            Correlation {
                seed: Some(seed_rows[0].seed),
                pearson: pearson(&h, &g),
                spearman: spearman(&h, &g),
            }
        })
        .collect();
    let mean_of = |f: fn(&Correlation) -> Option<f64>| {
        let v: Vec<f64> = seed_correlations.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let h_means: Vec<f64> = summaries[..m].iter().map(|s| s.entropy.mean).collect();
    let g_means: Vec<f64> = summaries[..m].iter().map(|s| s.gap.mean).collect();
    let ablation = ablation(config, &summaries);
    let moderate = ablation.entries[1].policy.clone();
    let adaptive_index = policies.iter().position(|p| p.to_string() == moderate).expect("moderate is in the grid");
    let gap_differences: Vec<(u64, f64)> = rows
        .chunks(per_policy)
        .map(|r| (r[0].seed, r[adaptive_index].gap - r[m].gap))
        .collect();
    let advantage = if config.spec.alpha > 0.0 && config.exits() > 1 {
        let inputs = BoundInputs {
            n: config.spec.n_train,
            exits: config.exits(),
            alpha: Some(config.spec.alpha),
            k_easy: Some(1),
            d_eff: depth_params,
            ..Default::default()
        };
        Some(AdvantageStudy {
            bound: advantage(&inputs).map_err(|e| LabError::Analysis(e.to_string()))?,
            adaptive_policy: moderate,
            seeds_with_predicted_sign: gap_differences.iter().filter(|(_, d)| *d < 0.0).count(),
            gap_differences,
        })
    } else {
        None
    };
    Ok(ExperimentResult {
        bound_violations: rows.iter().filter(|r| !r.bound_holds).count(),
        mean_spearman: mean_of(|c| c.spearman),
        mean_pearson: mean_of(|c| c.pearson),
        pooled_correlation: Correlation {
            seed: None,
            pearson: pearson(&h_means, &g_means),
            spearman: spearman(&h_means, &g_means),
        },
        seed_correlations,
        summaries,
        ablation,
        selection,
        advantage,
        warnings,
        partial: !failures.is_empty(),
        failures,
        rows,
        config: config.clone(),
    })
}

impl ExperimentResult {
    /// One line per seed and policy, tab-separated with a header.
    pub fn rows_tsv(&self) -> String {
        let mut out = String::from(
            "seed\tpolicy\texpected_depth\tentropy\ttrain_loss\ttest_loss\tgap\tbound\texplicit_bound\ttightness\tspeedup\tbound_holds\n",
        );
        for r in &self.rows {
            let tightness = r.tightness.map(|t| t.to_string()).unwrap_or_else(|| "NA".into());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.seed,
                r.policy,
                r.expected_depth,
                r.entropy,
                r.train_loss,
                r.test_loss,
                r.gap,
                r.bound,
                r.explicit_bound,
                tightness,
                r.speedup,
                r.bound_holds
            );
        }
        out
    }

    /// Two columns, H(D) and gap, one line per entropy-threshold row.
    pub fn gap_vs_entropy_tsv(&self) -> String {
        let mut out = String::from("entropy\tgap\n");
        for r in self.rows.iter().filter(|r| r.tau.is_some()) {
            let _ = writeln!(out, "{}\t{}", r.entropy, r.gap);
        }
        out
    }
}
