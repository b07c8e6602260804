use super::registry::{only_params, require};
use super::{DepthEntry, ExitPolicy, PolicyConfig, PolicyError, CONFIDENCE};
use crate::trace::{softmax_unchecked, ExitRecord, TraceHeader};

/// Exit at the first depth whose top softmax probability strictly exceeds
/// `tau`.
#[derive(Clone, Debug)]
pub struct ConfidenceThreshold {
    pub tau: f64,
}

impl ConfidenceThreshold {
    pub fn from_config(config: &PolicyConfig) -> Result<Self, PolicyError> {
        only_params(config, &["tau"])?;
        let tau = require(config, &config.tau, "tau")?;
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(PolicyError::InvalidParam {
                kind: CONFIDENCE.into(),
                message: format!("tau must lie in (0, 1], got {tau}"),
            });
        }
        Ok(Self { tau })
    }
}

impl ExitPolicy for ConfidenceThreshold {
    fn kind(&self) -> &'static str {
        CONFIDENCE
    }

    fn check(&self, _: &TraceHeader, _: usize) -> Result<(), PolicyError> {
        Ok(())
    }

    fn decide(&self, _: usize, exits: &[ExitRecord]) -> DepthEntry {
        let depth = exits
            .iter()
            .find(|e| {
                let top = softmax_unchecked(&e.logits).into_iter().fold(0.0, f64::max);
                top > self.tau
            })
            .map_or(exits.len(), |e| e.depth);
        DepthEntry::Exit(depth)
    }
}
