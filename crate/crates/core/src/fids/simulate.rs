//! Randomized identity-shuffling runs over [`MockBackend`], used to fuzz
//! the lineage invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::{Fids, FidsConfig, LineageEvent, MockBackend};
use crate::ids::Digest;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct MockRunParams {
    pub k: usize,
    pub t_us: u64,
    pub n_calls: u64,
    /// Mean gap between calls, µs.
    pub mean_call_gap_us: f64,
    /// Chance a call changes its image's metadata.
    pub p_diverge: f64,
    /// Stop once the log holds this many events.
    pub target_events: usize,
}

impl MockRunParams {
    /// Random parameters in a range that exercises every trigger path.
    pub fn random(rng: &mut impl Rng, target_events: usize) -> Self {
        let k = rng.random_range(2..=8);
        let t_us = rng.random_range(1_000..=50_000);
        Self {
            k,
            t_us,
            n_calls: rng.random_range(3..=40),
            mean_call_gap_us: t_us as f64 / rng.random_range(2.0..40.0),
            p_diverge: rng.random_range(0.0..0.6),
            target_events,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockRun {
    pub config: FidsConfig,
    pub log: Vec<LineageEvent>,
    pub end_time: u64,
    /// Living-image count and alive-lineage count after every step, from
    /// the TEE-side bookkeeping.
    pub checkpoints: Vec<(usize, usize)>,
}

pub fn run_mock(seed: u64, p: &MockRunParams) -> Result<MockRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FidsConfig::new(p.k, p.t_us, p.n_calls);
    let mut fids = Fids::new(cfg.clone(), rng.random())?;
    let mut backend = MockBackend::new(rng.random());
    let names = fids.initial_names();
    let d0 = Digest::of(b"mkfs");
    for (i, &n) in names.iter().enumerate() {
        backend.add(n, d0, i == 0);
    }
    fids.init(&names, 0)?;
    let gap = Exp::new(1.0 / p.mean_call_gap_us.max(1.0)).expect("positive rate");
    let mut now = 0u64;
    let mut next_call = gap.sample(&mut rng).ceil() as u64;
    let mut checkpoints = Vec::new();
    while fids.log().len() < p.target_events {
        let deadline = fids.next_deadline().expect("images alive");
        if deadline <= next_call {
            now = deadline;
        } else {
            now = next_call;
            let living: Vec<_> = fids.images().map(|i| i.name).collect();
            let who = living[rng.random_range(0..living.len())];
            fids.note_call(who);
            if rng.random_bool(p.p_diverge) {
                backend.set_digest(who, Digest::of(&rng.random::<u64>().to_le_bytes()));
            }
            next_call = now + (gap.sample(&mut rng).ceil() as u64).max(1);
        }
        fids.step(now, &mut backend)?;
        checkpoints.push((fids.living(), fids.alive_lineages().len()));
    }
    Ok(MockRun {
        config: cfg,
        log: fids.log().to_vec(),
        end_time: now,
        checkpoints,
    })
}
