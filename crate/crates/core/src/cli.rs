//! Command-line front end.
//!
//! Settings resolve as flags, then the TOML file given with `--config`, then
//! built-in defaults. Every command prints its result to stdout and, when an
//! output directory is set, also writes `<command>.json` there.
//!
//! Exit codes: 0 success, 1 other failure, 2 unreadable or unparsable input,
//! 3 trace schema violation, 4 invalid or missing value, 5 partial lab result.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use thiserror::Error;

use crate::bounds::{BoundError, BoundInputs, BoundReport, BoundRequest};
use crate::lab::{run_experiment, seed_traces, ExperimentConfig, ExperimentResult, LabError};
use crate::policy::{apply_policy, PolicyConfig, PolicyError, CONFIDENCE, ENTROPY, FIXED, PATIENCE, STOCHASTIC};
use crate::report::{AnalyzeOutput, BoundsOutput, EceOutput, EpsilonOutput, Output, SweepOutput, TraceSource};
use crate::select::{compare_with_validation, select_threshold, SelectError};
use crate::stats::{
    depth_stats, ece, entropy, epsilon_estimate, mean_exit_loss, StatsError, DEFAULT_ECE_BINS,
};
use crate::trace::{load_trace, ExitTrace, LossKind, TraceError};

pub const OUT_DIR_ENV: &str = "EXITBOUND_OUT_DIR";
const DEFAULT_DELTA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
    #[error("missing input: {what} (pass {flag})")]
    Missing { what: String, flag: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("{failed} of {total} seeds failed; partial results were written")]
    Partial { failed: usize, total: usize },
}

fn bound_error(e: BoundError) -> CliError {
    match e {
        BoundError::MissingInput(field) => {
            let flag = match field {
                "kl_per_depth" => "--kl-per-depth",
                "per_depth_complexity" => "--complexity",
                "d_eff" => "--d-eff",
                "alpha" => "--alpha",
                "k_easy" => "--k-easy",
                _ => "the matching flag",
            };
            CliError::Missing {
                what: field.to_string(),
                flag,
            }
        }
        other => CliError::Invalid(other.to_string()),
    }
}

fn trace_code(e: &TraceError) -> i32 {
    match e {
        TraceError::Io { .. } | TraceError::Parse { .. } => 2,
        TraceError::Header(_)
        | TraceError::Schema { .. }
        | TraceError::DuplicateId { .. }
        | TraceError::Empty
        | TraceError::Unlabeled(_) => 3,
        TraceError::Domain(_) | TraceError::FractionSum(_) | TraceError::EmptySplit(_) => 4,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Read { .. } | CliError::Parse { .. } => 2,
            CliError::Write { .. } => 1,
            CliError::Missing { .. } | CliError::Invalid(_) | CliError::Policy(_) => 4,
            CliError::Trace(e) => trace_code(e),
            CliError::Stats(e) => match e {
                StatsError::Trace(t) => trace_code(t),
                StatsError::Unlabeled | StatsError::HeaderMismatch(_) => 3,
                _ => 4,
            },
            CliError::Select(e) => match e {
                SelectError::Unlabeled(_) | SelectError::HeaderMismatch(_) => 3,
                SelectError::Stats(StatsError::Trace(t)) => trace_code(t),
                _ => 4,
            },
            CliError::Lab(e) => match e {
                LabError::Spec(_) => 4,
                LabError::Trace(t) => trace_code(t),
                LabError::Divergence { .. } | LabError::Analysis(_) => 5,
            },
            CliError::Partial { .. } => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Smoke,
    Default,
}

#[derive(Debug, Parser)]
#[command(name = "exitbound", version, about = "Exit-depth statistics and generalization bounds for early-exit classifiers")]
pub struct Cli {
    /// TOML file with default settings for any command.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory for result files.
    #[arg(long, global = true, value_name = "DIR", env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    /// Text tables rounded to 4 significant digits, or full-precision JSON.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Depth distribution, entropy and optional calibration under a policy.
    Analyze(AnalyzeArgs),
    /// All bounds from a trace or from flag values alone.
    Bounds(BoundsArgs),
    /// Bound-guided threshold selection over a grid.
    Sweep(SweepArgs),
    /// Train the synthetic multi-exit network and run the policy studies.
    Simulate(SimulateArgs),
    /// Label-dependence estimate of a policy and its bound penalty.
    Epsilon(EpsilonArgs),
    /// Expected calibration error at the assigned exits.
    Ece(EceArgs),
    /// Re-render a JSON result file.
    Report(ReportArgs),
}

#[derive(Debug, Default, Args)]
pub struct PolicyArgs {
    /// entropy, confidence, patience, fixed or stochastic (full kind names work too).
    #[arg(long)]
    pub policy: Option<String>,
    /// Threshold for entropy (nats) or confidence policies.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Consecutive agreeing exits the patience policy waits for.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Exit depth of the fixed policy (1-based).
    #[arg(long)]
    pub fixed_k: Option<usize>,
    /// JSON file holding one exit distribution per sample.
    #[arg(long, value_name = "FILE")]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Exit trace (JSONL) to read.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Add a calibration report (labeled traces only).
    #[arg(long)]
    pub ece: bool,
    /// Equal-width confidence bins for calibration (default 15).
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// Exit trace (JSONL) to read.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// Held-out trace for the observed gap and tightness ratio.
    #[arg(long, value_name = "FILE")]
    pub eval_trace: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Confidence parameter delta in (0, 1) (default 0.05).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Sample count, when no trace is given.
    #[arg(long)]
    pub n: Option<usize>,
    /// Exit-depth distribution p_1..p_K, when no trace is given.
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<f64>>,
    /// Per-depth sample counts, when no trace is given (default round(n p_k)).
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Empirical loss; defaults to the 0-1 loss of the trace at its exits.
    #[arg(long)]
    pub empirical_loss: Option<f64>,
    /// KL(Q||P) of the whole posterior (default 0).
    #[arg(long)]
    pub kl: Option<f64>,
    /// Per-depth KL values, needed by --weighted.
    #[arg(long, value_delimiter = ',')]
    pub kl_per_depth: Option<Vec<f64>>,
    /// Label-dependence level epsilon of the policy (default 0).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Per-depth Rademacher complexities R_1..R_K.
    #[arg(long, value_delimiter = ',')]
    pub complexity: Option<Vec<f64>>,
    /// Effective parameter count per block, for --advantage and --target-eps.
    #[arg(long)]
    pub d_eff: Option<f64>,
    /// Share alpha of easy inputs, for --advantage.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Depth k_E at which easy inputs exit, for --advantage.
    #[arg(long)]
    pub k_easy: Option<usize>,
    /// Target excess risk for the sample-complexity comparison.
    #[arg(long)]
    pub target_eps: Option<f64>,
    /// Constant c of the per-depth bound c sqrt(k d / n) (default 1).
    #[arg(long = "c")]
    pub constant_c: Option<f64>,
    /// Constant of the sample-complexity comparison (default 2).
    #[arg(long)]
    pub sc_constant: Option<f64>,
    /// Also compute the bound with per-depth counts and KL.
    #[arg(long)]
    pub weighted: bool,
    /// Compare the composite bound with the full-depth one.
    #[arg(long)]
    pub advantage: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Training trace the bound is evaluated on.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    /// Comma-separated threshold grid.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    /// Threshold policy kind (default entropy).
    #[arg(long)]
    pub kind: Option<String>,
    /// Confidence parameter delta in (0, 1) (default 0.05).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Validation trace for the validation-tuned baseline.
    #[arg(long, value_name = "FILE", requires = "test_trace")]
    pub val_trace: Option<PathBuf>,
    /// Test trace on which both selections are scored.
    #[arg(long, value_name = "FILE", requires = "val_trace")]
    pub test_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Preset sizes; smoke is 2 seeds, 3 thresholds and n_train 500.
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// Comma-separated seeds (default 42,123,456,789,1024).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated threshold grid.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    /// Training samples per seed.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Test samples per seed.
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Share alpha of easy inputs in the synthetic data.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Confidence parameter delta in (0, 1) (default 0.05).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Also write the train, validation and test traces of every seed.
    #[arg(long)]
    pub emit_traces: bool,
}

#[derive(Debug, Args)]
pub struct EpsilonArgs {
    /// Exit trace (JSONL) to read.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Args)]
pub struct EceArgs {
    /// Exit trace (JSONL) to read.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Equal-width confidence bins for calibration (default 15).
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON file written by another command.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
}

/// Contents of the `--config` file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub trace: Option<PathBuf>,
    pub eval_trace: Option<PathBuf>,
    pub val_trace: Option<PathBuf>,
    pub test_trace: Option<PathBuf>,
    pub delta: Option<f64>,
    pub policy: Option<PolicyConfig>,
    pub bins: Option<usize>,
    pub bounds: BoundsFile,
    pub sweep: SweepFile,
    pub simulate: SimulateFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsFile {
    pub n: Option<usize>,
    pub p: Option<Vec<f64>>,
    pub counts: Option<Vec<usize>>,
    pub empirical_loss: Option<f64>,
    pub kl: Option<f64>,
    pub kl_per_depth: Option<Vec<f64>>,
    pub epsilon: Option<f64>,
    pub complexity: Option<Vec<f64>>,
    pub d_eff: Option<f64>,
    pub alpha: Option<f64>,
    pub k_easy: Option<usize>,
    pub target_eps: Option<f64>,
    pub c: Option<f64>,
    pub sc_constant: Option<f64>,
    pub weighted: Option<bool>,
    pub advantage: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFile {
    pub kind: Option<String>,
    pub taus: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateFile {
    pub profile: Option<Profile>,
    /// Full lab configuration; replaces the profile when present.
    pub experiment: Option<ExperimentConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| CliError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let err = |e: std::io::Error| CliError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(err)?;
    }
    fs::write(path, text).map_err(err)
}

/// Accepts short aliases for the built-in policy kinds.
pub fn canonical_kind(kind: &str) -> String {
    match kind {
        "entropy" => ENTROPY.into(),
        "confidence" => CONFIDENCE.into(),
        "fixed" => FIXED.into(),
        "patience" => PATIENCE.into(),
        "stochastic" => STOCHASTIC.into(),
        other => other.into(),
    }
}

fn resolve_policy(args: &PolicyArgs, file: &FileConfig) -> Result<PolicyConfig, CliError> {
    let mut config = match (&args.policy, &file.policy) {
        (Some(kind), Some(base)) if canonical_kind(kind) == canonical_kind(&base.kind) => PolicyConfig {
            kind: canonical_kind(kind),
            ..base.clone()
        },
        (Some(kind), _) => PolicyConfig {
            kind: canonical_kind(kind),
            ..Default::default()
        },
        (None, Some(base)) => PolicyConfig {
            kind: canonical_kind(&base.kind),
            ..base.clone()
        },
        (None, None) => {
            return Err(CliError::Missing {
                what: "exit policy".into(),
                flag: "--policy",
            })
        }
    };
    if args.tau.is_some() {
        config.tau = args.tau;
    }
    if args.patience.is_some() {
        config.patience = args.patience;
    }
    if args.fixed_k.is_some() {
        config.fixed_k = args.fixed_k;
    }
    if let Some(path) = &args.table {
        let text = read_text(path)?;
        config.table = Some(serde_json::from_str(&text).map_err(|e| CliError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?);
    }
    // surfaces missing or stray parameters before any trace is read
    crate::policy::PolicyRegistry::builtin().build(&config)?;
    Ok(config)
}

fn required_trace(flag: Option<&PathBuf>, file: Option<&PathBuf>, name: &'static str) -> Result<PathBuf, CliError> {
    flag.or(file).cloned().ok_or(CliError::Missing {
        what: "trace file".into(),
        flag: name,
    })
}

fn open(path: &Path) -> Result<(ExitTrace, TraceSource), CliError> {
    let trace = load_trace(path)?;
    let source = TraceSource {
        path: path.display().to_string(),
        header: trace.header().clone(),
        n: trace.n(),
    };
    Ok((trace, source))
}

fn check_delta(delta: f64) -> Result<f64, CliError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(delta)
    } else {
        Err(CliError::Invalid(format!("--delta must lie in (0, 1), got {delta}")))
    }
}

fn analyze(args: &AnalyzeArgs, file: &FileConfig) -> Result<Output, CliError> {
    let path = required_trace(args.trace.as_ref(), file.trace.as_ref(), "--trace")?;
    let policy = resolve_policy(&args.policy, file)?;
    let (trace, source) = open(&path)?;
    let assignment = apply_policy(&trace, &policy)?;
    let stats = depth_stats(&assignment)?;
    let zero_one_loss = if trace.is_labeled() {
        Some(mean_exit_loss(&trace, &assignment, LossKind::ZeroOne)?)
    } else {
        None
    };
    let calibration = if args.ece {
        Some(ece(&trace, &assignment, args.bins.or(file.bins).unwrap_or(DEFAULT_ECE_BINS))?)
    } else {
        None
    };
    Ok(Output::Analyze(AnalyzeOutput {
        trace: source,
        policy,
        speedup: stats.speedup(),
        stats,
        zero_one_loss,
        calibration,
    }))
}

fn bounds(args: &BoundsArgs, file: &FileConfig) -> Result<Output, CliError> {
    let b = &file.bounds;
    let delta = check_delta(args.delta.or(file.delta).unwrap_or(DEFAULT_DELTA))?;
    let trace_path = args.trace.as_ref().or(file.trace.as_ref());
    let empirical_loss = args.empirical_loss.or(b.empirical_loss);
    let mut trace_source = None;
    let mut eval_source = None;
    let mut policy_used = None;
    let mut inputs = if let Some(path) = trace_path {
        let policy = resolve_policy(&args.policy, file)?;
        let (trace, source) = open(path)?;
        let assignment = apply_policy(&trace, &policy)?;
        let stats = depth_stats(&assignment)?;
        let train_loss = if trace.is_labeled() {
            Some(mean_exit_loss(&trace, &assignment, LossKind::ZeroOne)?)
        } else {
            None
        };
        let loss = empirical_loss.or(train_loss).ok_or(CliError::Missing {
            what: "empirical loss of an unlabeled trace".into(),
            flag: "--empirical-loss",
        })?;
        let mut inputs = BoundInputs::from_stats(&stats, loss, delta);
        if let Some(eval_path) = args.eval_trace.as_ref().or(file.eval_trace.as_ref()) {
            let (eval, eval_src) = open(eval_path)?;
            let on_eval = apply_policy(&eval, &policy)?;
            let eval_loss = mean_exit_loss(&eval, &on_eval, LossKind::ZeroOne)?;
            let train_loss = train_loss.ok_or(StatsError::Unlabeled)?;
            inputs.observed_gap = Some(eval_loss - train_loss);
            eval_source = Some(eval_src);
        }
        trace_source = Some(source);
        policy_used = Some(policy);
        inputs
    } else {
        let n = args.n.or(b.n).ok_or(CliError::Missing {
            what: "sample count (or a trace)".into(),
            flag: "--n",
        })?;
        let p = args.p.clone().or_else(|| b.p.clone()).ok_or(CliError::Missing {
            what: "exit-depth distribution (or a trace)".into(),
            flag: "--p",
        })?;
        if p.is_empty() {
            return Err(CliError::Invalid("--p needs at least one entry".into()));
        }
        let counts = args
            .counts
            .clone()
            .or_else(|| b.counts.clone())
            .unwrap_or_else(|| p.iter().map(|v| (v * n as f64).round_ties_even().max(0.0) as usize).collect());
        BoundInputs {
            n,
            exits: p.len(),
            delta,
            entropy: entropy(&p),
            expected_depth: p.iter().enumerate().map(|(k, v)| (k + 1) as f64 * v).sum(),
            p,
            counts,
            empirical_loss: empirical_loss.unwrap_or(0.0),
            ..Default::default()
        }
    };
    inputs.kl_total = args.kl.or(b.kl).unwrap_or(0.0);
    inputs.kl_per_depth = args.kl_per_depth.clone().or_else(|| b.kl_per_depth.clone());
    inputs.epsilon = args.epsilon.or(b.epsilon).unwrap_or(0.0);
    inputs.per_depth_complexity = args.complexity.clone().or_else(|| b.complexity.clone());
    inputs.d_eff = args.d_eff.or(b.d_eff);
    inputs.alpha = args.alpha.or(b.alpha);
    inputs.k_easy = args.k_easy.or(b.k_easy);
    inputs.constant_c = args.constant_c.or(b.c).unwrap_or(1.0);
    inputs.sc_constant = args.sc_constant.or(b.sc_constant).unwrap_or(2.0);
    let request = BoundRequest {
        weighted: args.weighted || b.weighted.unwrap_or(false),
        complexity: inputs.per_depth_complexity.is_some(),
        sample_complexity_target: args.target_eps.or(b.target_eps),
        advantage: args.advantage || b.advantage.unwrap_or(false),
    };
    let report = BoundReport::compute(&inputs, &request).map_err(bound_error)?;
    Ok(Output::Bounds(BoundsOutput {
        trace: trace_source,
        eval_trace: eval_source,
        policy: policy_used,
        report,
    }))
}

fn sweep(args: &SweepArgs, file: &FileConfig) -> Result<Output, CliError> {
    let path = required_trace(args.trace.as_ref(), file.trace.as_ref(), "--trace")?;
    let delta = check_delta(args.delta.or(file.delta).unwrap_or(DEFAULT_DELTA))?;
    let kind = canonical_kind(args.kind.as_deref().or(file.sweep.kind.as_deref()).unwrap_or(ENTROPY));
    let taus = args.taus.clone().or_else(|| file.sweep.taus.clone()).ok_or(CliError::Missing {
        what: "threshold grid".into(),
        flag: "--taus",
    })?;
    let (train, source) = open(&path)?;
    let val_path = args.val_trace.as_ref().or(file.val_trace.as_ref());
    let test_path = args.test_trace.as_ref().or(file.test_trace.as_ref());
    let (selection, validation_trace, test_trace) = match (val_path, test_path) {
        (Some(v), Some(t)) => {
            let (val, val_src) = open(v)?;
            let (test, test_src) = open(t)?;
            let r = compare_with_validation(&train, &val, &test, &kind, &taus, delta)?;
            (r, Some(val_src), Some(test_src))
        }
        (None, None) => (select_threshold(&train, &kind, &taus, delta)?, None, None),
        (Some(_), None) => {
            return Err(CliError::Missing {
                what: "test trace for the validation comparison".into(),
                flag: "--test-trace",
            })
        }
        (None, Some(_)) => {
            return Err(CliError::Missing {
                what: "validation trace for the validation comparison".into(),
                flag: "--val-trace",
            })
        }
    };
    Ok(Output::Sweep(SweepOutput {
        trace: source,
        validation_trace,
        test_trace,
        selection,
    }))
}

/// Lab configuration after profile, config file and flags are applied.
pub fn experiment_config(args: &SimulateArgs, file: &FileConfig) -> ExperimentConfig {
    let from_profile = |p: Profile| match p {
        Profile::Smoke => ExperimentConfig::smoke(),
        Profile::Default => ExperimentConfig::default(),
    };
    let mut config = match (args.profile, &file.simulate.experiment, file.simulate.profile) {
        (Some(p), _, _) => from_profile(p),
        (None, Some(c), _) => c.clone(),
        (None, None, Some(p)) => from_profile(p),
        (None, None, None) => ExperimentConfig::default(),
    };
    if let Some(s) = &args.seeds {
        config.seeds = s.clone();
    }
    if let Some(t) = &args.taus {
        config.taus = t.clone();
    }
    if let Some(n) = args.n_train {
        config.spec.n_train = n;
    }
    if let Some(n) = args.n_test {
        config.spec.n_test = n;
    }
    if let Some(a) = args.alpha {
        config.spec.alpha = a;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    if let Some(d) = args.delta.or(file.delta) {
        config.delta = d;
    }
    config
}

/// Everything in a lab result except the per-run rows.
#[derive(serde::Serialize)]
struct SimulateSummary<'a> {
    summaries: &'a [crate::lab::experiment::PolicySummary],
    seed_correlations: &'a [crate::lab::experiment::Correlation],
    mean_spearman: Option<f64>,
    mean_pearson: Option<f64>,
    pooled_correlation: &'a crate::lab::experiment::Correlation,
    ablation: &'a crate::lab::experiment::Ablation,
    selection: &'a [crate::lab::experiment::SeedSelection],
    advantage: &'a Option<crate::lab::experiment::AdvantageStudy>,
    bound_violations: usize,
    partial: bool,
}

fn summary_json(r: &ExperimentResult) -> String {
    let s = SimulateSummary {
        summaries: &r.summaries,
        seed_correlations: &r.seed_correlations,
        mean_spearman: r.mean_spearman,
        mean_pearson: r.mean_pearson,
        pooled_correlation: &r.pooled_correlation,
        ablation: &r.ablation,
        selection: &r.selection,
        advantage: &r.advantage,
        bound_violations: r.bound_violations,
        partial: r.partial,
    };
    let mut text = serde_json::to_string_pretty(&s).expect("summary serializes");
    text.push('\n');
    text
}

fn write_seed_traces(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    for seed in &config.seeds {
        let t = seed_traces(config, *seed)?;
        let dir = out.join("traces");
        let mut splits = vec![("train", &t.train), ("test", &t.test)];
        if let Some(v) = &t.validation {
            splits.push(("validation", v));
        }
        for (name, trace) in splits {
            write_text(&dir.join(format!("seed-{seed}-{name}.jsonl")), &trace.to_text())?;
        }
    }
    Ok(())
}

/// Result of a command plus any extra files it produces.
pub struct Outcome {
    pub output: Option<Output>,
    pub text: String,
    pub files: Vec<(String, String)>,
    /// Raised after the files are written.
    pub deferred: Option<CliError>,
}

fn outcome(output: Output, format: Format) -> Outcome {
    let text = match format {
        Format::Text => output.to_text(),
        Format::Json => output.to_json(),
    };
    Outcome {
        files: vec![(format!("{}.json", output.command()), output.to_json())],
        output: Some(output),
        text,
        deferred: None,
    }
}

/// Runs a parsed command line without touching stdout.
pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let result = match &cli.command {
        Command::Analyze(a) => outcome(analyze(a, &file)?, cli.format),
        Command::Bounds(a) => outcome(bounds(a, &file)?, cli.format),
        Command::Sweep(a) => {
            let output = sweep(a, &file)?;
            let tsv = match &output {
                Output::Sweep(s) => s.selection.to_tsv(),
                _ => unreachable!(),
            };
            let mut o = outcome(output, cli.format);
            o.files.push(("sweep.tsv".into(), tsv));
            o
        }
        Command::Simulate(a) => {
            let config = experiment_config(a, &file);
            let result = run_experiment(&config)?;
            if a.emit_traces {
                let out = cli.out.as_ref().ok_or(CliError::Missing {
                    what: "output directory for traces".into(),
                    flag: "--out",
                })?;
                write_seed_traces(&config, out)?;
            }
            let deferred = result.partial.then(|| CliError::Partial {
                failed: result.failures.len(),
                total: config.seeds.len(),
            });
            let extra = vec![
                ("rows.tsv".to_string(), result.rows_tsv()),
                ("summary.json".to_string(), summary_json(&result)),
                ("gap_vs_entropy.tsv".to_string(), result.gap_vs_entropy_tsv()),
            ];
            let mut o = outcome(Output::Simulate(Box::new(result)), cli.format);
            o.files.extend(extra);
            o.deferred = deferred;
            o
        }
        Command::Epsilon(a) => {
            let path = required_trace(a.trace.as_ref(), file.trace.as_ref(), "--trace")?;
            let policy = resolve_policy(&a.policy, &file)?;
            let (trace, source) = open(&path)?;
            let assignment = apply_policy(&trace, &policy)?;
            let estimate = epsilon_estimate(&trace, &assignment)?;
            let output = Output::Epsilon(EpsilonOutput {
                trace: source,
                penalty: crate::bounds::epsilon_penalty(estimate.epsilon, trace.exits()),
                policy,
                estimate,
            });
            outcome(output, cli.format)
        }
        Command::Ece(a) => {
            let path = required_trace(a.trace.as_ref(), file.trace.as_ref(), "--trace")?;
            let policy = resolve_policy(&a.policy, &file)?;
            let (trace, source) = open(&path)?;
            let assignment = apply_policy(&trace, &policy)?;
            let calibration = ece(&trace, &assignment, a.bins.or(file.bins).unwrap_or(DEFAULT_ECE_BINS))?;
            outcome(
                Output::Ece(EceOutput {
                    trace: source,
                    policy,
                    calibration,
                }),
                cli.format,
            )
        }
        Command::Report(a) => {
            let text = read_text(&a.input)?;
            let output = Output::from_json(&text).map_err(|e| CliError::Parse {
                path: a.input.display().to_string(),
                message: e.to_string(),
            })?;
            let rendered = output.to_text();
            let text = match cli.format {
                Format::Text => rendered.clone(),
                Format::Json => output.to_json(),
            };
            Outcome {
                output: Some(output),
                text,
                files: vec![("report.txt".into(), rendered)],
                deferred: None,
            }
        }
    };
    Ok(result)
}

/// Parses `args`, runs the command, prints and writes its results, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli).and_then(|o| finish(&cli, o)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn finish(cli: &Cli, outcome: Outcome) -> Result<(), CliError> {
    print!("{}", outcome.text);
    if let Some(out) = &cli.out {
        for (name, text) in &outcome.files {
            write_text(&out.join(name), text)?;
        }
    }
    match outcome.deferred {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_kind_names() {
        assert_eq!(canonical_kind("entropy"), ENTROPY);
        assert_eq!(canonical_kind("fixed"), FIXED);
        assert_eq!(canonical_kind(PATIENCE), PATIENCE);
    }

    #[test]
    fn missing_inputs_name_their_flag() {
        let e = bound_error(BoundError::MissingInput("alpha"));
        assert_eq!(e.exit_code(), 4);
        assert!(e.to_string().contains("--alpha"));
        let e = resolve_policy(&PolicyArgs::default(), &FileConfig::default()).unwrap_err();
        assert!(e.to_string().contains("--policy"));
    }

    #[test]
    fn flags_override_config_policy() {
        let file = FileConfig {
            policy: Some(PolicyConfig::entropy(0.3)),
            ..Default::default()
        };
        let args = PolicyArgs {
            tau: Some(0.6),
            ..Default::default()
        };
        assert_eq!(resolve_policy(&args, &file).unwrap(), PolicyConfig::entropy(0.6));
        let other = PolicyArgs {
            policy: Some("fixed".into()),
            fixed_k: Some(2),
            ..Default::default()
        };
        assert_eq!(resolve_policy(&other, &file).unwrap(), PolicyConfig::fixed(2));
        let stray = PolicyArgs {
            policy: Some("fixed".into()),
            fixed_k: Some(2),
            tau: Some(0.1),
            ..Default::default()
        };
        assert!(matches!(resolve_policy(&stray, &file), Err(CliError::Policy(_))));
    }

    #[test]
    fn simulate_precedence() {
        let file: FileConfig = toml::from_str("delta = 0.1\n[simulate]\nprofile = \"smoke\"\n").unwrap();
        let args = SimulateArgs {
            profile: None,
            seeds: Some(vec![7]),
            taus: None,
            n_train: None,
            n_test: None,
            alpha: None,
            epochs: None,
            delta: None,
            emit_traces: false,
        };
        let c = experiment_config(&args, &file);
        assert_eq!(c.spec.n_train, ExperimentConfig::smoke().spec.n_train);
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.delta, 0.1);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("deltaa = 0.1").is_err());
    }
}
