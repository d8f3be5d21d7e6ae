use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::btt::PBlock;
use crate::stats::quantile;
use crate::{Error, Result};

pub const MIN_PROFILE_SAMPLES: usize = 100;

/// Service-time distributions of the two physical devices, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    pub region_mean_ns: f64,
    pub region_sd_ns: f64,
    pub blob_mean_ns: f64,
    pub blob_sd_ns: f64,
    pub floor_ns: u64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self {
            region_mean_ns: 1200.0,
            region_sd_ns: 170.0,
            blob_mean_ns: 950.0,
            blob_sd_ns: 170.0,
            floor_ns: 100,
        }
    }
}

/// Draws raw service times from a seeded stream.
#[derive(Debug, Clone)]
pub struct LatencyModel {
    region: Normal<f64>,
    blob: Normal<f64>,
    floor: u64,
    rng: ChaCha8Rng,
}

impl LatencyModel {
    pub fn new(params: LatencyParams, seed: u64) -> Result<Self> {
        let bad = |e| Error::InvalidConfig(format!("latency model: {e}"));
        Ok(Self {
            region: Normal::new(params.region_mean_ns, params.region_sd_ns).map_err(bad)?,
            blob: Normal::new(params.blob_mean_ns, params.blob_sd_ns).map_err(bad)?,
            floor: params.floor_ns,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self, at: PBlock) -> u64 {
        let d = match at {
            PBlock::Region(_) => self.region.sample(&mut self.rng),
            PBlock::Blob(_) => self.blob.sample(&mut self.rng),
        };
        (d.round().max(0.0) as u64).max(self.floor)
    }
}

/// Padding applied to metadata delays the OS observes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    /// `None` disables padding.
    pub pad_threshold_ns: Option<u64>,
    pub percentile: f64,
    pub samples: usize,
}

impl DelayModel {
    pub fn unpadded(percentile: f64) -> Self {
        Self {
            pad_threshold_ns: None,
            percentile,
            samples: 0,
        }
    }

    pub fn fixed(threshold_ns: u64) -> Self {
        Self {
            pad_threshold_ns: Some(threshold_ns),
            percentile: 1.0,
            samples: 0,
        }
    }

    /// Threshold at the empirical `percentile` of `samples`.
    pub fn profile(samples: &[u64], percentile: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("delay profile samples"));
        }
        if samples.len() < MIN_PROFILE_SAMPLES {
            return Err(Error::InsufficientSamples {
                got: samples.len(),
                need: MIN_PROFILE_SAMPLES,
            });
        }
        Ok(Self {
            pad_threshold_ns: Some(quantile(samples, percentile)?),
            percentile,
            samples: samples.len(),
        })
    }

    /// Delays under the threshold are raised to it; the tail passes through.
    pub fn report(&self, raw_ns: u64) -> u64 {
        self.pad_threshold_ns.map_or(raw_ns, |t| raw_ns.max(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_read_is_padded_to_threshold() {
        let m = DelayModel::fixed(1600);
        assert_eq!(m.report(300), 1600);
        assert_eq!(m.report(2500), 2500);
    }

    #[test]
    fn profile_takes_the_percentile() {
        let samples: Vec<u64> = (1..=1000).map(|i| i * 2).collect();
        let m = DelayModel::profile(&samples, 0.99).unwrap();
        assert_eq!(m.pad_threshold_ns, Some(1980));
        let flat = DelayModel::profile(&[1600; 200], 0.99).unwrap();
        assert_eq!(flat.pad_threshold_ns, Some(1600));
    }

    #[test]
    fn profile_needs_samples() {
        assert!(matches!(DelayModel::profile(&[], 0.99), Err(Error::Empty(_))));
        assert!(matches!(
            DelayModel::profile(&[1; 99], 0.99),
            Err(Error::InsufficientSamples { got: 99, need: 100 })
        ));
    }

    #[test]
    fn default_region_p99_is_about_1_6_us() {
        let mut m = LatencyModel::new(LatencyParams::default(), 5).unwrap();
        let s: Vec<u64> = (0..20_000).map(|_| m.sample(PBlock::Region(0))).collect();
        let p99 = quantile(&s, 0.99).unwrap();
        assert!((1500..=1700).contains(&p99), "p99 = {p99}");
    }
}
