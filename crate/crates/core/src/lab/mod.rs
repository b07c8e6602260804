//! Desk-scale laboratory: synthetic data, a small multi-exit network, and
//! the experiments that relate exit-depth entropy to generalization.

pub mod data;
pub mod experiment;
pub mod net;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{log_sum_exp, ExitRecord, ExitTrace, LossKind, SampleRecord, Split, TraceError, TraceHeader};

pub use data::{generate_dataset, Dataset, LabData};
pub use experiment::{run_experiment, seed_traces, ExperimentConfig, ExperimentResult, SeedTraces};
pub use net::{train_model, MultiExitNet, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid lab configuration: {0}")]
    Spec(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{0}")]
    Analysis(String),
}

/// Generative parameters of the synthetic easy/hard mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// At least 2 + C: two checkerboard coordinates and C prototype slots.
    pub input_dim: usize,
    pub classes: usize,
    /// Fraction of easy samples.
    pub alpha: f64,
    pub easy_margin: f64,
    /// Clean distance kept between hard samples and interior cell edges.
    pub hard_margin: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 2000,
            n_test: 20_000,
            input_dim: 6,
            classes: 2,
            alpha: 0.5,
            easy_margin: 2.0,
            hard_margin: 0.15,
            noise_std: 0.15,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::Spec(m));
        if self.classes < 2 {
            return bad(format!("C must be at least 2, got {}", self.classes));
        }
        if self.input_dim < 2 + self.classes {
            return bad(format!(
                "input_dim must be at least 2 + C = {}, got {}",
                2 + self.classes,
                self.input_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.easy_margin.is_finite() && self.easy_margin > 0.0) {
            return bad(format!("easy_margin must be > 0, got {}", self.easy_margin));
        }
        let half_cell = data::GRID_EXTENT / data::GRID_CELLS as f64;
        if !(self.hard_margin > 0.0 && self.hard_margin < half_cell) {
            return bad(format!(
                "hard_margin must lie in (0, {half_cell}), got {}",
                self.hard_margin
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if self.n_train == 0 {
            return bad("n_train must be at least 1".into());
        }
        Ok(())
    }
}

/// Independent ChaCha8 stream `stream` of `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Logits and cross-entropy at every exit for every sample. Ids are
/// `{split}-{index:06}` and labels are written 1-based.
pub fn emit_trace(net: &MultiExitNet, data: &Dataset, split: Split) -> Result<ExitTrace, LabError> {
    if data.input_dim != net.input_dim() || data.classes != net.classes() {
        return Err(LabError::Spec(format!(
            "dataset has input_dim {} and C {}, network expects {} and {}",
            data.input_dim,
            data.classes,
            net.input_dim(),
            net.classes()
        )));
    }
    let samples = (0..data.len())
        .map(|i| {
            let label = data.labels[i];
            let exits = net
                .forward(data.row(i))
                .logits
                .into_iter()
                .enumerate()
                .map(|(d, logits)| ExitRecord {
                    depth: d + 1,
                    loss: Some(log_sum_exp(&logits) - logits[label]),
                    logits,
                })
                .collect();
            SampleRecord {
                sample_id: format!("{split}-{i:06}"),
                label: Some(label + 1),
                exits,
            }
        })
        .collect();
    let header = TraceHeader::new(net.exits(), net.classes(), LossKind::CrossEntropy, true, split);
    Ok(ExitTrace::new(header, samples)?)
}
