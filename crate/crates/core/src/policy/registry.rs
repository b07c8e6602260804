use std::collections::BTreeMap;
use std::sync::OnceLock;

use super::{
    ConfidenceThreshold, DepthAssignment, EntropyThreshold, ExitPolicy, FixedDepth, Patience, PolicyConfig,
    PolicyError, StochasticTable, CONFIDENCE, ENTROPY, FIXED, PATIENCE, STOCHASTIC,
};
use crate::trace::ExitTrace;

/// Builds a policy from its config.
pub type PolicyFactory = Box<dyn Fn(&PolicyConfig) -> Result<Box<dyn ExitPolicy>, PolicyError> + Send + Sync>;

/// Policies registered by name.
pub struct PolicyRegistry {
    factories: BTreeMap<String, PolicyFactory>,
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut registry = Self::empty();
        registry.register(ENTROPY, |c| Ok(Box::new(EntropyThreshold::from_config(c)?)));
        registry.register(CONFIDENCE, |c| Ok(Box::new(ConfidenceThreshold::from_config(c)?)));
        registry.register(PATIENCE, |c| Ok(Box::new(Patience::from_config(c)?)));
        registry.register(FIXED, |c| Ok(Box::new(FixedDepth::from_config(c)?)));
        registry.register(STOCHASTIC, |c| Ok(Box::new(StochasticTable::from_config(c)?)));
        registry
    }

    /// Shared registry holding the built-in policies.
    pub fn builtin() -> &'static PolicyRegistry {
        static BUILTIN: OnceLock<PolicyRegistry> = OnceLock::new();
        BUILTIN.get_or_init(PolicyRegistry::with_builtins)
    }

    /// Registers (or replaces) the factory for `name`.
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&PolicyConfig) -> Result<Box<dyn ExitPolicy>, PolicyError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, config: &PolicyConfig) -> Result<Box<dyn ExitPolicy>, PolicyError> {
        let factory = self
            .factories
            .get(&config.kind)
            .ok_or_else(|| PolicyError::UnknownKind(config.kind.clone()))?;
        factory(config)
    }

    pub fn apply(&self, trace: &ExitTrace, config: &PolicyConfig) -> Result<DepthAssignment, PolicyError> {
        let policy = self.build(config)?;
        policy.check(trace.header(), trace.n())?;
        let entries = trace
            .samples()
            .iter()
            .enumerate()
            .map(|(i, s)| policy.decide(i, &s.exits))
            .collect();
        Ok(DepthAssignment {
            exits: trace.exits(),
            policy: config.clone(),
            entries,
        })
    }
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// Rejects parameters the named policy does not use.
pub(super) fn only_params(config: &PolicyConfig, allowed: &[&'static str]) -> Result<(), PolicyError> {
    let present = [
        ("tau", config.tau.is_some()),
        ("patience", config.patience.is_some()),
        ("fixed_k", config.fixed_k.is_some()),
        ("table", config.table.is_some()),
    ];
    for (param, set) in present {
        if set && !allowed.contains(&param) {
            return Err(PolicyError::UnexpectedParam {
                kind: config.kind.clone(),
                param,
            });
        }
    }
    Ok(())
}

pub(super) fn require<T: Clone>(config: &PolicyConfig, value: &Option<T>, param: &'static str) -> Result<T, PolicyError> {
    value.clone().ok_or_else(|| PolicyError::MissingParam {
        kind: config.kind.clone(),
        param,
    })
}
