use super::registry::{only_params, require};
use super::{DepthEntry, ExitPolicy, PolicyConfig, PolicyError, PATIENCE};
use crate::trace::{argmax, ExitRecord, TraceHeader};

/// Exit once the last `t` exits (depths k-t+1..=k) agree on the argmax
/// class. The run counter starts at 1 on depth 1 and resets on disagreement.
#[derive(Clone, Debug)]
pub struct Patience {
    pub t: usize,
}

impl Patience {
    pub fn from_config(config: &PolicyConfig) -> Result<Self, PolicyError> {
        only_params(config, &["patience"])?;
        let t = require(config, &config.patience, "patience")?;
        if t == 0 {
            return Err(PolicyError::InvalidParam {
                kind: PATIENCE.into(),
                message: "patience must be at least 1".into(),
            });
        }
        Ok(Self { t })
    }
}

impl ExitPolicy for Patience {
    fn kind(&self) -> &'static str {
        PATIENCE
    }

    fn check(&self, _: &TraceHeader, _: usize) -> Result<(), PolicyError> {
        Ok(())
    }

    fn decide(&self, _: usize, exits: &[ExitRecord]) -> DepthEntry {
        let mut run = 0;
        let mut previous = None;
        for exit in exits {
            let class = argmax(&exit.logits);
            run = if previous == Some(class) { run + 1 } else { 1 };
            previous = Some(class);
            if run >= self.t {
                return DepthEntry::Exit(exit.depth);
            }
        }
        DepthEntry::Exit(exits.len())
    }
}
