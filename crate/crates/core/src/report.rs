//! Command outputs and their two renderings: JSON with shortest round-trip
//! numbers, and text tables rounded to 4 significant digits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bounds::BoundReport;
use crate::lab::ExperimentResult;
use crate::policy::PolicyConfig;
use crate::select::SelectionResult;
use crate::stats::{CalibrationReport, DepthStats, EpsilonEstimate};
use crate::trace::TraceHeader;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSource {
    pub path: String,
    pub header: TraceHeader,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub trace: TraceSource,
    pub policy: PolicyConfig,
    pub stats: DepthStats,
    pub speedup: f64,
    /// Mean 0-1 loss at the assigned exits, for labeled traces.
    pub zero_one_loss: Option<f64>,
    pub calibration: Option<CalibrationReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsOutput {
    pub trace: Option<TraceSource>,
    pub eval_trace: Option<TraceSource>,
    pub policy: Option<PolicyConfig>,
    pub report: BoundReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub trace: TraceSource,
    pub validation_trace: Option<TraceSource>,
    pub test_trace: Option<TraceSource>,
    pub selection: SelectionResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonOutput {
    pub trace: TraceSource,
    pub policy: PolicyConfig,
    pub estimate: EpsilonEstimate,
    /// epsilon * K
    pub penalty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceOutput {
    pub trace: TraceSource,
    pub policy: PolicyConfig,
    pub calibration: CalibrationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Output {
    Analyze(AnalyzeOutput),
    Bounds(BoundsOutput),
    Sweep(SweepOutput),
    Simulate(Box<ExperimentResult>),
    Epsilon(EpsilonOutput),
    Ece(EceOutput),
}

impl Output {
    pub fn command(&self) -> &'static str {
        match self {
            Output::Analyze(_) => "analyze",
            Output::Bounds(_) => "bounds",
            Output::Sweep(_) => "sweep",
            Output::Simulate(_) => "simulate",
            Output::Epsilon(_) => "epsilon",
            Output::Ece(_) => "ece",
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("outputs serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_text(&self) -> String {
        match self {
            Output::Analyze(o) => analyze_text(o),
            Output::Bounds(o) => bounds_text(o),
            Output::Sweep(o) => sweep_text(o),
            Output::Simulate(o) => simulate_text(o),
            Output::Epsilon(o) => epsilon_text(o),
            Output::Ece(o) => ece_text(o),
        }
    }
}

/// `x` rounded to 4 significant digits.
pub fn sig4(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-4..5).contains(&magnitude) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - magnitude).max(0) as usize;
    let scale = 10f64.powi(magnitude - 3);
    let rounded = if magnitude > 3 { (x / scale).round() * scale } else { x };
    let s = format!("{rounded:.decimals$}");
    // rounding can carry into a new digit, e.g. 9.9996 -> 10.000
    let digits = s.chars().filter(|c| c.is_ascii_digit()).collect::<String>();
    let significant = digits.trim_start_matches('0').len();
    if significant > 4 && decimals > 0 && s.contains('.') {
        let shorter = decimals - 1;
        return format!("{rounded:.shorter$}");
    }
    s
}

fn opt(x: Option<f64>) -> String {
    x.map(sig4).unwrap_or_else(|| "NA".into())
}

fn vec4(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| sig4(*x)).collect::<Vec<_>>().join(", "))
}

/// Left-aligned columns separated by two spaces.
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| -> String {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&self.headers);
        for row in &self.rows {
            out.push_str(&line(row));
        }
        out
    }
}

fn kv(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key:<28}{value}");
}

fn source(out: &mut String, label: &str, s: &TraceSource) {
    kv(
        out,
        label,
        format!(
            "{} (n={}, K={}, C={}, {}, {})",
            s.path,
            s.n,
            s.header.exits,
            s.header.classes,
            s.header.loss_kind,
            s.header.split
        ),
    );
}

fn stats_block(out: &mut String, s: &DepthStats) {
    kv(out, "p_k", vec4(&s.p));
    kv(
        out,
        "n_k",
        format!("[{}]", s.counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")),
    );
    kv(out, "E[D]", sig4(s.expected_depth));
    kv(out, "H(D) nats", sig4(s.entropy));
    kv(out, "H(D|X) nats", sig4(s.conditional_entropy));
    kv(out, "I(D;X) nats", sig4(s.mutual_information));
}

fn calibration_block(out: &mut String, c: &CalibrationReport) {
    kv(out, "ECE", sig4(c.ece));
    let mut t = Table::new(&["bin", "count", "confidence", "accuracy"]);
    for b in &c.bins {
        t.row(vec![
            format!("({}, {}]", sig4(b.lower), sig4(b.upper)),
            b.count.to_string(),
            sig4(b.mean_confidence),
            sig4(b.accuracy),
        ]);
    }
    out.push_str(&t.render());
}

fn analyze_text(o: &AnalyzeOutput) -> String {
    let mut out = String::new();
    source(&mut out, "trace", &o.trace);
    kv(&mut out, "policy", &o.policy);
    stats_block(&mut out, &o.stats);
    kv(&mut out, "speedup K/E[D]", sig4(o.speedup));
    kv(&mut out, "0-1 loss", opt(o.zero_one_loss));
    if let Some(c) = &o.calibration {
        calibration_block(&mut out, c);
    }
    out
}

fn flag(v: bool) -> &'static str {
    if v {
        " (vacuous)"
    } else {
        ""
    }
}

fn bounds_text(o: &BoundsOutput) -> String {
    let mut out = String::new();
    if let Some(s) = &o.trace {
        source(&mut out, "trace", s);
    }
    if let Some(s) = &o.eval_trace {
        source(&mut out, "eval trace", s);
    }
    if let Some(p) = &o.policy {
        kv(&mut out, "policy", p);
    }
    let r = &o.report;
    let i = &r.inputs;
    kv(&mut out, "n", i.n);
    kv(&mut out, "K", i.exits);
    kv(&mut out, "delta", sig4(i.delta));
    kv(&mut out, "H(D) nats", sig4(i.entropy));
    kv(&mut out, "E[D]", sig4(i.expected_depth));
    kv(&mut out, "p_k", vec4(&i.p));
    kv(&mut out, "n_k", format!("{:?}", i.counts));
    kv(&mut out, "empirical loss", sig4(i.empirical_loss));
    kv(&mut out, "KL", sig4(i.kl_total));
    if let Some(kl) = &i.kl_per_depth {
        kv(&mut out, "KL per depth", vec4(kl));
    }
    kv(&mut out, "epsilon", sig4(i.epsilon));
    if let Some(c) = &i.per_depth_complexity {
        kv(&mut out, "complexity per depth", vec4(c));
    }
    kv(&mut out, "d_eff", opt(i.d_eff));
    kv(&mut out, "alpha", opt(i.alpha));
    kv(&mut out, "k_E", i.k_easy.map(|k| k.to_string()).unwrap_or_else(|| "NA".into()));
    kv(&mut out, "c", sig4(i.constant_c));
    kv(&mut out, "sample constant", sig4(i.sc_constant));
    let mut t = Table::new(&["bound", "value"]);
    let mut add = |name: &str, v: f64, vacuous: bool| t.row(vec![name.into(), format!("{}{}", sig4(v), flag(vacuous))]);
    add("main", r.main_bound.value, r.main_bound.vacuous);
    add("deterministic", r.deterministic_bound.value, r.deterministic_bound.vacuous);
    add("naive ln K", r.naive_ln_k_bound.value, r.naive_ln_k_bound.vacuous);
    add("explicit", r.explicit_bound.total, r.explicit_vacuous);
    add("  entropy term", r.explicit_bound.entropy_term, false);
    add("  complexity term", r.explicit_bound.complexity_term, false);
    add("epsilon-penalized", r.epsilon_bound.value, r.epsilon_bound.vacuous);
    if let Some(w) = r.weighted_bound {
        add("weighted", w.value, w.vacuous);
    }
    out.push_str(&t.render());
    if let Some(c) = &r.complexity {
        kv(&mut out, "complexity weighted", sig4(c.weighted));
        kv(&mut out, "complexity envelope", sig4(c.envelope));
        kv(&mut out, "nested", c.nested);
    }
    if let Some(s) = &r.sample_complexity {
        kv(&mut out, "target gap", sig4(s.target_eps));
        kv(&mut out, "n adaptive", s.n_adaptive);
        kv(&mut out, "n fixed", s.n_fixed);
        kv(&mut out, "n ratio", sig4(s.ratio));
    }
    if let Some(a) = &r.advantage {
        kv(&mut out, "advantage", sig4(a.advantage));
        kv(&mut out, "composite bound", sig4(a.composite));
        kv(&mut out, "B_kE", sig4(a.easy_bound));
        kv(&mut out, "B_K", sig4(a.full_bound));
        kv(&mut out, "composite < B_K", a.strictly_better);
    }
    if let Some(g) = i.observed_gap {
        kv(&mut out, "observed gap", sig4(g));
    }
    kv(&mut out, "tightness ratio", opt(r.tightness_ratio));
    for w in &r.warnings {
        kv(&mut out, "warning", w);
    }
    out
}

fn sweep_text(o: &SweepOutput) -> String {
    let mut out = String::new();
    source(&mut out, "train trace", &o.trace);
    let s = &o.selection;
    kv(&mut out, "kind", &s.kind);
    kv(&mut out, "delta", sig4(s.delta));
    let mut t = Table::new(&["tau", "p_k", "H nats", "E[D]", "bound", "train loss"]);
    for r in &s.candidates {
        t.row(vec![
            sig4(r.tau),
            vec4(&r.p),
            sig4(r.entropy),
            sig4(r.expected_depth),
            sig4(r.bound),
            sig4(r.train_loss),
        ]);
    }
    out.push_str(&t.render());
    kv(&mut out, "tau*", sig4(s.tau_star));
    if let Some(c) = &s.comparison {
        kv(&mut out, "validation tau", sig4(c.validation_tau));
        kv(&mut out, "test accuracy at tau*", sig4(c.test_accuracy_bound));
        kv(&mut out, "test accuracy at val tau", sig4(c.test_accuracy_validation));
        kv(&mut out, "test accuracy delta", sig4(c.test_accuracy_delta));
    }
    out
}

fn simulate_text(r: &ExperimentResult) -> String {
    let mut out = String::new();
    let mut t = Table::new(&["policy", "E[D]", "H(D)", "train", "test", "gap", "gap std", "bound", "speedup"]);
    for s in &r.summaries {
        t.row(vec![
            s.policy.clone(),
            sig4(s.expected_depth.mean),
            sig4(s.entropy.mean),
            sig4(s.train_loss.mean),
            sig4(s.test_loss.mean),
            sig4(s.gap.mean),
            sig4(s.gap.std),
            sig4(s.bound.mean),
            sig4(s.speedup.mean),
        ]);
    }
    out.push_str(&t.render());
    let mut c = Table::new(&["seed", "pearson", "spearman"]);
    for s in &r.seed_correlations {
        c.row(vec![
            s.seed.map(|v| v.to_string()).unwrap_or_default(),
            opt(s.pearson),
            opt(s.spearman),
        ]);
    }
    c.row(vec!["seed-averaged points".into(), opt(r.pooled_correlation.pearson), opt(r.pooled_correlation.spearman)]);
    c.row(vec!["mean over seeds".into(), opt(r.mean_pearson), opt(r.mean_spearman)]);
    out.push_str(&c.render());
    let mut a = Table::new(&["ablation", "policy", "gap", "gap std", "H(D)", "E[D]", "speedup"]);
    for e in &r.ablation.entries {
        a.row(vec![
            e.label.clone(),
            e.policy.clone(),
            sig4(e.gap.mean),
            sig4(e.gap.std),
            sig4(e.entropy.mean),
            sig4(e.expected_depth.mean),
            sig4(e.speedup.mean),
        ]);
    }
    out.push_str(&a.render());
    kv(&mut out, "pooled gap std", sig4(r.ablation.pooled_std));
    kv(&mut out, "ordering holds", r.ablation.ordering_holds);
    if !r.selection.is_empty() {
        let mut s = Table::new(&["seed", "tau*", "validation tau", "acc tau*", "acc val", "delta"]);
        for x in &r.selection {
            s.row(vec![
                x.seed.to_string(),
                sig4(x.tau_star),
                sig4(x.validation_tau),
                sig4(x.test_accuracy_bound),
                sig4(x.test_accuracy_validation),
                sig4(x.test_accuracy_delta),
            ]);
        }
        out.push_str(&s.render());
    }
    if let Some(a) = &r.advantage {
        kv(&mut out, "composite bound", sig4(a.bound.composite));
        kv(&mut out, "B_K", sig4(a.bound.full_bound));
        kv(&mut out, "adaptive policy", &a.adaptive_policy);
        kv(
            &mut out,
            "gap(adaptive) - gap(fixed)",
            format!(
                "[{}]",
                a.gap_differences.iter().map(|(s, d)| format!("{s}: {}", sig4(*d))).collect::<Vec<_>>().join(", ")
            ),
        );
        kv(&mut out, "seeds with predicted sign", a.seeds_with_predicted_sign);
    }
    kv(&mut out, "bound violations", r.bound_violations);
    for w in &r.warnings {
        kv(&mut out, "warning", w);
    }
    for f in &r.failures {
        kv(&mut out, "failed seed", format!("{}: {}", f.seed, f.message));
    }
    kv(&mut out, "partial", r.partial);
    out
}

fn epsilon_text(o: &EpsilonOutput) -> String {
    let mut out = String::new();
    source(&mut out, "trace", &o.trace);
    kv(&mut out, "policy", &o.policy);
    kv(&mut out, "epsilon", sig4(o.estimate.epsilon));
    kv(&mut out, "penalty epsilon*K", sig4(o.penalty));
    if !o.estimate.excluded_classes.is_empty() {
        kv(
            &mut out,
            "excluded classes",
            format!("{:?}", o.estimate.excluded_classes),
        );
    }
    out
}

fn ece_text(o: &EceOutput) -> String {
    let mut out = String::new();
    source(&mut out, "trace", &o.trace);
    kv(&mut out, "policy", &o.policy);
    calibration_block(&mut out, &o.calibration);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_significant_digits() {
        assert_eq!(sig4(0.0), "0");
        assert_eq!(sig4(0.020365), "0.02037");
        assert_eq!(sig4(1.177410), "1.177");
        assert_eq!(sig4(-0.24), "-0.2400");
        assert_eq!(sig4(40800.0), "40800");
        assert_eq!(sig4(123456.0), "1.235e5");
        assert_eq!(sig4(2.5e-13), "2.500e-13");
        assert_eq!(sig4(9.99996), "10.00");
        assert_eq!(sig4(0.99996), "1.000");
        assert_eq!(sig4(1234.6), "1235");
        assert_eq!(sig4(f64::NAN), "NaN");
    }

    #[test]
    fn table_alignment() {
        let mut t = Table::new(&["a", "long"]);
        t.row(vec!["xyz".into(), "1".into()]);
        assert_eq!(t.render(), "a    long\nxyz  1\n");
    }
}
