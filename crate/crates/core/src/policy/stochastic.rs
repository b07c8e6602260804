use super::registry::{only_params, require};
use super::{DepthEntry, ExitPolicy, PolicyConfig, PolicyError, STOCHASTIC};
use crate::trace::{ExitRecord, TraceHeader};

/// Externally supplied per-sample exit distributions, e.g. from a learned
/// router. Row `i` is used for sample `i`.
#[derive(Clone, Debug)]
pub struct StochasticTable {
    pub rows: Vec<Vec<f64>>,
}

impl StochasticTable {
    pub fn from_config(config: &PolicyConfig) -> Result<Self, PolicyError> {
        only_params(config, &["table"])?;
        let rows = require(config, &config.table, "table")?;
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(PolicyError::InvalidParam {
                    kind: STOCHASTIC.into(),
                    message: format!("row {i} has a negative or non-finite entry"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(PolicyError::InvalidParam {
                    kind: STOCHASTIC.into(),
                    message: format!("row {i} sums to {sum}"),
                });
            }
        }
        Ok(Self { rows })
    }
}

impl ExitPolicy for StochasticTable {
    fn kind(&self) -> &'static str {
        STOCHASTIC
    }

    fn check(&self, header: &TraceHeader, n: usize) -> Result<(), PolicyError> {
        if self.rows.len() != n {
            return Err(PolicyError::ConfigMismatch(format!(
                "table has {} rows for {n} samples",
                self.rows.len()
            )));
        }
        if let Some(i) = self.rows.iter().position(|r| r.len() != header.exits) {
            return Err(PolicyError::ConfigMismatch(format!(
                "table row {i} has {} entries, expected K = {}",
                self.rows[i].len(),
                header.exits
            )));
        }
        Ok(())
    }

    fn decide(&self, index: usize, _: &[ExitRecord]) -> DepthEntry {
        DepthEntry::Distribution(self.rows[index].clone())
    }
}
