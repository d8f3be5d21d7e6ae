use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tracegen::Workload;
use crate::{Error, Result};

/// Everything that determines a run. Two runs with equal configs write
/// byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Images in the crowd, the actual one included.
    pub k: usize,
    /// Longest time a disk name stays observable, virtual ms.
    pub t_ms: u64,
    /// Calls after which an image is shuffled.
    pub n_calls: u64,
    pub workload: Workload,
    pub disk_blocks: u64,
    pub blob_capacity: u64,
    pub cow: bool,
    /// Pad metadata delays up to a profiled threshold.
    pub pad: bool,
    /// Percentile of profiled delays used as the padding threshold.
    pub padding_pct: f64,
    pub profile_samples: usize,
    /// Virtual run length, ms.
    pub duration_ms: u64,
    /// Mean idle time of the actual stream between segments, ms.
    pub mean_idle_ms: f64,
    /// Window over which stream rates are compared, ms.
    pub window_ms: u64,
    /// Feed completed actual segments back into the library.
    pub renew: bool,
    pub record_observations: bool,
    pub guess_trials: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            k: 5,
            t_ms: 2_000,
            n_calls: 400,
            workload: Workload::Query,
            disk_blocks: 8_192,
            blob_capacity: 1 << 20,
            cow: true,
            pad: true,
            padding_pct: 99.0,
            profile_samples: 2_000,
            duration_ms: 10_000,
            mean_idle_ms: 20.0,
            window_ms: 2_500,
            renew: true,
            record_observations: true,
            guess_trials: 100_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The padding percentile in effect, if any.
    pub fn padding(&self) -> Option<f64> {
        self.pad.then_some(self.padding_pct)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.t_ms == 0 || self.n_calls == 0 {
            return bad("T and N must be positive");
        }
        if self.duration_ms == 0 || self.window_ms == 0 {
            return bad("duration and window must be positive");
        }
        if !(self.padding_pct > 0.0 && self.padding_pct <= 100.0) {
            return bad("padding percentile must lie in (0, 100]");
        }
        if !(self.mean_idle_ms >= 0.0 && self.mean_idle_ms.is_finite()) {
            return bad("mean idle time must be finite and non-negative");
        }
        Ok(())
    }
}
