use super::registry::{only_params, require};
use super::{DepthEntry, ExitPolicy, PolicyConfig, PolicyError, FIXED};
use crate::trace::{ExitRecord, TraceHeader};

/// Every sample exits at depth `k`.
#[derive(Clone, Debug)]
pub struct FixedDepth {
    pub k: usize,
}

impl FixedDepth {
    pub fn from_config(config: &PolicyConfig) -> Result<Self, PolicyError> {
        only_params(config, &["fixed_k"])?;
        let k = require(config, &config.fixed_k, "fixed_k")?;
        if k == 0 {
            return Err(PolicyError::InvalidParam {
                kind: FIXED.into(),
                message: "fixed_k must be at least 1".into(),
            });
        }
        Ok(Self { k })
    }
}

impl ExitPolicy for FixedDepth {
    fn kind(&self) -> &'static str {
        FIXED
    }

    fn check(&self, header: &TraceHeader, _: usize) -> Result<(), PolicyError> {
        if self.k > header.exits {
            return Err(PolicyError::ConfigMismatch(format!(
                "fixed_k = {} exceeds K = {}",
                self.k, header.exits
            )));
        }
        Ok(())
    }

    fn decide(&self, _: usize, _: &[ExitRecord]) -> DepthEntry {
        DepthEntry::Exit(self.k)
    }
}
