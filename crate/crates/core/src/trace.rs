//! Prediction traces: per-sample, per-exit logits of an early-exit classifier.
//!
//! A trace file is line-delimited JSON. The first line is the header, every
//! following line is one sample:
//!
//! ```text
//! {"format_version":1,"K":2,"C":2,"loss_kind":"zero-one","labeled":true,"split":"train"}
//! {"id":"s0","label":1,"exits":[{"depth":1,"logits":[0.3,-0.1]},{"depth":2,"logits":[1.2,-0.4],"loss":0.0}]}
//! ```
//!
//! Labels and depths are 1-based. Logits are the stored quantity; probabilities
//! are always recomputed with [`stable_softmax`]. Numbers are written as the
//! shortest decimal that round-trips, so writing a loaded canonical file
//! reproduces it byte for byte.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("header: {0}")]
    Header(String),
    #[error("sample {sample_id:?}: {message}")]
    Schema { sample_id: String, message: String },
    #[error("duplicate sample id {sample_id:?} on line {line}")]
    DuplicateId { sample_id: String, line: usize },
    #[error("trace has no samples")]
    Empty,
    #[error("{0}")]
    Domain(String),
    #[error("split fractions must be positive and sum to at most 1, got {0:?}")]
    FractionSum([f64; 3]),
    #[error("split {0} would receive no samples")]
    EmptySplit(Split),
    #[error("sample {0:?} has no label")]
    Unlabeled(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    ZeroOne,
    CrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::ZeroOne => "zero-one",
            LossKind::CrossEntropy => "cross-entropy",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    Calibration,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Calibration => "calibration",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format_version: u32,
    /// Number of exits.
    #[serde(rename = "K")]
    pub exits: usize,
    /// Number of classes.
    #[serde(rename = "C")]
    pub classes: usize,
    pub loss_kind: LossKind,
    pub labeled: bool,
    pub split: Split,
}

impl TraceHeader {
    pub fn new(exits: usize, classes: usize, loss_kind: LossKind, labeled: bool, split: Split) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            exits,
            classes,
            loss_kind,
            labeled,
            split,
        }
    }

    fn validate(&self) -> Result<(), TraceError> {
        if self.format_version != FORMAT_VERSION {
            return Err(TraceError::Header(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.exits < 1 {
            return Err(TraceError::Header("K must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(TraceError::Header("C must be at least 2".into()));
        }
        Ok(())
    }

    /// True when two traces can be compared exit by exit.
    pub fn compatible_with(&self, other: &TraceHeader) -> bool {
        self.exits == other.exits && self.classes == other.classes && self.loss_kind == other.loss_kind
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub depth: usize,
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(rename = "id")]
    pub sample_id: String,
    /// 1-based class label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub exits: Vec<ExitRecord>,
}

impl SampleRecord {
    /// 0-based class index of the label.
    pub fn class_index(&self) -> Option<usize> {
        self.label.map(|l| l - 1)
    }

    /// Record for the given 1-based depth. Exits are stored in depth order.
    pub fn exit(&self, depth: usize) -> &ExitRecord {
        &self.exits[depth - 1]
    }

    fn validate(&self, header: &TraceHeader) -> Result<(), TraceError> {
        let schema = |message: String| TraceError::Schema {
            sample_id: self.sample_id.clone(),
            message,
        };
        match (header.labeled, self.label) {
            (true, None) => return Err(schema("missing label in a labeled trace".into())),
            (false, Some(_)) => return Err(schema("label present in an unlabeled trace".into())),
            (true, Some(l)) if l < 1 || l > header.classes => {
                return Err(schema(format!("label {l} outside 1..={}", header.classes)))
            }
            _ => {}
        }
        if self.exits.len() != header.exits {
            let present: Vec<usize> = self.exits.iter().map(|e| e.depth).collect();
            return Err(schema(format!(
                "expected exits for depths 1..={}, found depths {present:?}",
                header.exits
            )));
        }
        for (i, exit) in self.exits.iter().enumerate() {
            if exit.depth != i + 1 {
                return Err(schema(format!(
                    "exit #{} has depth {}, expected {} (depths must be 1..={} ascending)",
                    i + 1,
                    exit.depth,
                    i + 1,
                    header.exits
                )));
            }
            if exit.logits.len() != header.classes {
                return Err(schema(format!(
                    "depth {} has {} logits, expected {}",
                    exit.depth,
                    exit.logits.len(),
                    header.classes
                )));
            }
            if exit.logits.iter().any(|v| !v.is_finite()) {
                return Err(schema(format!("depth {} has a non-finite logit", exit.depth)));
            }
            if let Some(loss) = exit.loss {
                if !(loss.is_finite() && loss >= 0.0) {
                    return Err(schema(format!("depth {} has invalid loss {loss}", exit.depth)));
                }
            }
        }
        Ok(())
    }
}

/// A validated trace. Construct with [`ExitTrace::new`] or [`load_trace`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExitTrace {
    header: TraceHeader,
    samples: Vec<SampleRecord>,
}

impl ExitTrace {
    pub fn new(header: TraceHeader, samples: Vec<SampleRecord>) -> Result<Self, TraceError> {
        header.validate()?;
        if samples.is_empty() {
            return Err(TraceError::Empty);
        }
        let mut seen = HashSet::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            sample.validate(&header)?;
            if !seen.insert(sample.sample_id.as_str()) {
                return Err(TraceError::DuplicateId {
                    sample_id: sample.sample_id.clone(),
                    line: i + 2,
                });
            }
        }
        Ok(Self { header, samples })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn exits(&self) -> usize {
        self.header.exits
    }

    pub fn classes(&self) -> usize {
        self.header.classes
    }

    pub fn is_labeled(&self) -> bool {
        self.header.labeled
    }

    /// Returns a copy with every label replaced by `f(index, label)`.
    pub fn map_labels(&self, mut f: impl FnMut(usize, usize) -> usize) -> Result<Self, TraceError> {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut s = s.clone();
                s.label = s.label.map(|l| f(i, l));
                s
            })
            .collect();
        Self::new(self.header.clone(), samples)
    }

    /// Per-sample loss at `depth` under `kind`.
    ///
    /// Uses the stored loss when the trace was written with the same loss kind,
    /// otherwise recomputes it from logits and label.
    pub fn loss_at(&self, index: usize, depth: usize, kind: LossKind) -> Result<f64, TraceError> {
        let sample = &self.samples[index];
        let exit = sample.exit(depth);
        if kind == self.header.loss_kind {
            if let Some(loss) = exit.loss {
                return Ok(loss);
            }
        }
        let class = sample
            .class_index()
            .ok_or_else(|| TraceError::Unlabeled(sample.sample_id.clone()))?;
        Ok(match kind {
            LossKind::ZeroOne => {
                if argmax(&exit.logits) == class {
                    0.0
                } else {
                    1.0
                }
            }
            LossKind::CrossEntropy => log_sum_exp(&exit.logits) - exit.logits[class],
        })
    }

    /// Whether the prediction at `depth` matches the label.
    pub fn correct_at(&self, index: usize, depth: usize) -> Result<bool, TraceError> {
        let sample = &self.samples[index];
        let class = sample
            .class_index()
            .ok_or_else(|| TraceError::Unlabeled(sample.sample_id.clone()))?;
        Ok(argmax(&sample.exit(depth).logits) == class)
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for sample in &self.samples {
            serde_json::to_writer(&mut out, sample)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let path = path.as_ref();
        let io_err = |source| TraceError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        self.write_to(&mut out).map_err(io_err)?;
        out.flush().map_err(io_err)
    }
}

/// Parses a trace from any line source.
pub fn read_trace(reader: impl BufRead) -> Result<ExitTrace, TraceError> {
    let mut header: Option<TraceHeader> = None;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        match &header {
            None => {
                let h: TraceHeader = serde_json::from_str(&line).map_err(parse_err)?;
                h.validate()?;
                header = Some(h);
            }
            Some(h) => {
                let sample: SampleRecord = serde_json::from_str(&line).map_err(parse_err)?;
                sample.validate(h)?;
                if !seen.insert(sample.sample_id.clone()) {
                    return Err(TraceError::DuplicateId {
                        sample_id: sample.sample_id,
                        line: line_no,
                    });
                }
                samples.push(sample);
            }
        }
    }
    let header = header.ok_or(TraceError::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    ExitTrace::new(header, samples)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<ExitTrace, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_trace(BufReader::new(file))
}

/// Numerically stable softmax.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>, TraceError> {
    if logits.is_empty() {
        return Err(TraceError::Domain("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(TraceError::Domain("softmax input contains a non-finite value".into()));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub calibration: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            calibration: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SplitTraces {
    pub train: ExitTrace,
    pub validation: ExitTrace,
    pub calibration: ExitTrace,
    /// Whatever the three fractions leave over; `None` when nothing is left.
    pub test: Option<ExitTrace>,
}

/// Shuffles sample order with a ChaCha8 stream seeded by `seed` and cuts it
/// into train/validation/calibration/test blocks.
///
/// Block sizes are `floor(n * fraction)`; the remainder is the test split.
pub fn split_trace(trace: &ExitTrace, fractions: SplitFractions, seed: u64) -> Result<SplitTraces, TraceError> {
    let f = [fractions.train, fractions.validation, fractions.calibration];
    if f.iter().any(|v| !(v.is_finite() && *v > 0.0)) || f.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(TraceError::FractionSum(f));
    }
    let n = trace.n();
    let size = |frac: f64| ((n as f64) * frac + 1e-9).floor() as usize;
    let sizes = [size(f[0]), size(f[1]), size(f[2])];
    let splits = [Split::Train, Split::Validation, Split::Calibration];
    for (s, split) in sizes.iter().zip(splits) {
        if *s == 0 {
            return Err(TraceError::EmptySplit(split));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let take = |indices: &[usize], split: Split| -> Result<ExitTrace, TraceError> {
        let mut header = trace.header.clone();
        header.split = split;
        let samples = indices.iter().map(|&i| trace.samples[i].clone()).collect();
        ExitTrace::new(header, samples)
    };
    let (a, rest) = order.split_at(sizes[0]);
    let (b, rest) = rest.split_at(sizes[1]);
    let (c, rest) = rest.split_at(sizes[2]);
    Ok(SplitTraces {
        train: take(a, Split::Train)?,
        validation: take(b, Split::Validation)?,
        calibration: take(c, Split::Calibration)?,
        test: if rest.is_empty() {
            None
        } else {
            Some(take(rest, Split::Test)?)
        },
    })
}
