use super::registry::{only_params, require};
use super::{DepthEntry, ExitPolicy, PolicyConfig, PolicyError, ENTROPY};
use crate::stats::entropy;
use crate::trace::{softmax_unchecked, ExitRecord, TraceHeader};

/// Exit at the first depth whose predictive entropy (nats) is strictly
/// below `tau`; samples that never qualify exit at the last depth.
#[derive(Clone, Debug)]
pub struct EntropyThreshold {
    pub tau: f64,
}

impl EntropyThreshold {
    pub fn from_config(config: &PolicyConfig) -> Result<Self, PolicyError> {
        only_params(config, &["tau"])?;
        let tau = require(config, &config.tau, "tau")?;
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(PolicyError::InvalidParam {
                kind: ENTROPY.into(),
                message: format!("tau must be a finite value >= 0, got {tau}"),
            });
        }
        Ok(Self { tau })
    }
}

impl ExitPolicy for EntropyThreshold {
    fn kind(&self) -> &'static str {
        ENTROPY
    }

    fn check(&self, _: &TraceHeader, _: usize) -> Result<(), PolicyError> {
        Ok(())
    }

    fn decide(&self, _: usize, exits: &[ExitRecord]) -> DepthEntry {
        let depth = exits
            .iter()
            .find(|e| entropy(&softmax_unchecked(&e.logits)) < self.tau)
            .map_or(exits.len(), |e| e.depth);
        DepthEntry::Exit(depth)
    }
}
