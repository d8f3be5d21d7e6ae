//! The adversary. Everything here reads only what the OS could record: the
//! observation transcript and the lineage log of public renamings.

mod anonymity;
mod audit;

pub use anonymity::{anonymity_curve, creation_index, living_after, AnonymityPoint};
pub use audit::{extinct_lineage_audit, max_name_lifetime, AuditReport};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backstore::{DiskEventKind, Observation};
use crate::ids::DiskName;
use crate::stats::labelled_mutual_information;
use crate::{Error, Result};

/// Bins used by the timing mutual-information estimate.
pub const MI_BINS: usize = 32;
/// Fewest samples per side the estimate accepts.
pub const MI_MIN_SAMPLES: usize = 1000;

/// Success rate of naming the actual image by a uniform guess, when each
/// sybil replays the target secret with probability 1/N.
pub fn guess_rate(k: usize, n: Option<u64>) -> f64 {
    let k = k as f64;
    let collide = n.map_or(0.0, |n| 1.0 / n as f64);
    1.0 / k + (k - 1.0) / k * collide
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuessOutcome {
    pub k: usize,
    pub n: Option<u64>,
    pub trials: u64,
    pub rate: f64,
    pub expected: f64,
}

/// Monte Carlo of the random-guess attack. The actual image holds one of
/// `n` secrets (unbounded when `None`); each sybil replays an independent
/// uniform draw. A guess succeeds on the actual image or on a sybil that
/// happens to show the same secret.
pub fn random_guess_attack(k: usize, n: Option<u64>, trials: u64, seed: u64) -> Result<GuessOutcome> {
    if k == 0 || n == Some(0) || trials == 0 {
        return Err(Error::InvalidConfig("K, N and trials must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..trials {
        let actual = rng.random_range(0..k);
        let guess = rng.random_range(0..k);
        let hit = guess == actual
            || n.is_some_and(|n| {
                let secret = rng.random_range(0..n);
                rng.random_range(0..n) == secret
            });
        hits += u64::from(hit);
    }
    Ok(GuessOutcome {
        k,
        n,
        trials,
        rate: hits as f64 / trials as f64,
        expected: guess_rate(k, n),
    })
}

/// Reported metadata delays per image, in transcript order.
pub fn reported_delays(transcript: &[Observation]) -> BTreeMap<DiskName, Vec<u64>> {
    let mut out: BTreeMap<DiskName, Vec<u64>> = BTreeMap::new();
    for o in transcript {
        if let Observation::Disk {
            kind: DiskEventKind::Request,
            image,
            delay_ns: Some(d),
            ..
        } = o
        {
            out.entry(*image).or_default().push(*d);
        }
    }
    out
}

/// Mutual information in bits between which of two streams a delay came
/// from and its value.
pub fn timing_mutual_information(a: &[f64], b: &[f64]) -> Result<f64> {
    let got = a.len().min(b.len());
    if got < MI_MIN_SAMPLES {
        return Err(Error::InsufficientSamples { got, need: MI_MIN_SAMPLES });
    }
    labelled_mutual_information(a, b, MI_BINS)
}

/// The transcript with image names replaced through `rename`.
pub fn rename_transcript(transcript: &[Observation], rename: &BTreeMap<DiskName, DiskName>) -> Vec<Observation> {
    transcript
        .iter()
        .map(|o| match rename.get(&o.image()) {
            Some(&n) => o.with_image(n),
            None => o.clone(),
        })
        .collect()
}
