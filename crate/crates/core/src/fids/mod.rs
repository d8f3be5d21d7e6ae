//! Filesystem identity shuffling.
//!
//! Images whose disk name has been observable for `T`, or that served `N`
//! calls, are renamed together with every other image sharing their
//! metadata. An image with no peer is forked first. Surplus images are
//! retired without ever ending one of the K initial lineages.

mod backend;
mod event;
pub mod simulate;

pub use backend::{ImageBackend, MockBackend};
pub use event::{EventKind, LineageEvent};

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{Digest, DiskName, NameMint};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidsConfig {
    pub k: usize,
    /// Longest time a disk name may stay observable, in virtual µs.
    pub t_us: u64,
    /// Calls after which an image is shuffled regardless of time.
    pub n_calls: u64,
    pub fanout: usize,
    /// Living-image count above which images are retired. Defaults to 2K.
    pub high_water: usize,
    /// Unmount+remount cost range per operation, µs. Reported only.
    pub mount_latency_us: (u64, u64),
}

impl FidsConfig {
    pub fn new(k: usize, t_us: u64, n_calls: u64) -> Self {
        Self {
            k,
            t_us,
            n_calls,
            fanout: 2,
            high_water: 2 * k,
            mount_latency_us: (80_000, 180_000),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("identity shuffling needs K >= 2, got {}", self.k)));
        }
        if self.t_us == 0 {
            return Err(Error::InvalidConfig("T must be positive".into()));
        }
        if self.n_calls == 0 {
            return Err(Error::InvalidConfig("N must be positive".into()));
        }
        if self.fanout < 2 {
            return Err(Error::InvalidConfig("fork fan-out must be at least 2".into()));
        }
        if self.high_water < self.k {
            return Err(Error::InvalidConfig("high-water mark below K".into()));
        }
        Ok(())
    }
}

/// TEE-side record of a living image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsImage {
    pub name: DiskName,
    /// Index of the initial image this one descends from.
    pub lineage_tag: usize,
    pub last_shuffle: u64,
    pub calls_served: u64,
    /// Creation order; larger is younger.
    pub born: u64,
}

/// How images were rebound by one step, for whoever holds per-image state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rebinding {
    /// `to` now holds a copy of `from`.
    Cloned { from: DiskName, to: DiskName },
    /// Simultaneous renaming.
    Renamed(BTreeMap<DiskName, DiskName>),
    Retired(DiskName),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FidsCounts {
    pub forks: u64,
    pub shuffles: u64,
    pub retires: u64,
    pub mount_overhead_us: u64,
}

pub struct Fids {
    cfg: FidsConfig,
    images: BTreeMap<DiskName, FsImage>,
    mint: NameMint,
    rng: ChaCha8Rng,
    log: Vec<LineageEvent>,
    born: u64,
    counts: FidsCounts,
}

impl Fids {
    pub fn new(cfg: FidsConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            images: BTreeMap::new(),
            mint: NameMint::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: Vec::new(),
            born: 0,
            counts: FidsCounts::default(),
        })
    }

    pub fn config(&self) -> &FidsConfig {
        &self.cfg
    }

    /// Draws K fresh names for the initial images.
    pub fn initial_names(&mut self) -> Vec<DiskName> {
        (0..self.cfg.k).map(|_| self.mint.fresh(&mut self.rng)).collect()
    }

    /// Registers the K initial images, each founding its own lineage.
    pub fn init(&mut self, names: &[DiskName], now: u64) -> Result<()> {
        if names.len() != self.cfg.k || !self.images.is_empty() {
            return Err(Error::InvalidConfig("init needs exactly K images, once".into()));
        }
        for (tag, &name) in names.iter().enumerate() {
            self.add(name, tag, now);
        }
        self.log.push(LineageEvent::new(EventKind::Init, now, [], names.iter().copied()));
        Ok(())
    }

    pub fn images(&self) -> impl Iterator<Item = &FsImage> {
        self.images.values()
    }

    pub fn living(&self) -> usize {
        self.images.len()
    }

    pub fn log(&self) -> &[LineageEvent] {
        &self.log
    }

    pub fn counts(&self) -> FidsCounts {
        self.counts
    }

    pub fn note_call(&mut self, image: DiskName) {
        if let Some(i) = self.images.get_mut(&image) {
            i.calls_served += 1;
        }
    }

    /// Earliest time at which a time trigger fires.
    pub fn next_deadline(&self) -> Option<u64> {
        self.images.values().map(|i| i.last_shuffle + self.cfg.t_us).min()
    }

    /// Images due for shuffling: time triggers first (oldest first), then
    /// activity triggers.
    pub fn check_triggers(&self, now: u64) -> Vec<DiskName> {
        let mut by_time: Vec<&FsImage> = self
            .images
            .values()
            .filter(|i| now.saturating_sub(i.last_shuffle) >= self.cfg.t_us)
            .collect();
        by_time.sort_by_key(|i| (i.last_shuffle, i.born));
        let mut out: Vec<DiskName> = by_time.iter().map(|i| i.name).collect();
        let mut by_activity: Vec<&FsImage> = self
            .images
            .values()
            .filter(|i| i.calls_served >= self.cfg.n_calls && !out.contains(&i.name))
            .collect();
        by_activity.sort_by_key(|i| (std::cmp::Reverse(i.calls_served), i.born));
        out.extend(by_activity.iter().map(|i| i.name));
        out
    }

    /// Handles every due trigger, then retires surplus images.
    pub fn step(&mut self, now: u64, backend: &mut dyn ImageBackend) -> Result<Vec<Rebinding>> {
        let mut out = Vec::new();
        let mut refreshed: BTreeSet<DiskName> = BTreeSet::new();
        for name in self.check_triggers(now) {
            if refreshed.contains(&name) || !self.images.contains_key(&name) {
                continue;
            }
            let digest = backend.digest(name)?;
            let mut class = Vec::new();
            for &other in self.images.keys() {
                if other == name || backend.digest(other)? == digest {
                    class.push(other);
                }
            }
            let products = if class.len() >= 2 {
                self.shuffle(&class, now, backend, &mut out)?
            } else {
                self.fork(name, now, backend, &mut out)?
            };
            refreshed.extend(products);
        }
        self.retire_surplus(now, backend, &mut out)?;
        Ok(out)
    }

    /// Images that may be retired: not actual, not the last of their
    /// lineage, and not taking the population below K.
    pub fn select_retire_candidates(&self, backend: &dyn ImageBackend) -> Vec<DiskName> {
        if self.images.len() <= self.cfg.k {
            return Vec::new();
        }
        let mut holders: BTreeMap<usize, usize> = BTreeMap::new();
        for i in self.images.values() {
            *holders.entry(i.lineage_tag).or_default() += 1;
        }
        let mut c: Vec<&FsImage> = self
            .images
            .values()
            .filter(|i| holders[&i.lineage_tag] >= 2 && !backend.is_actual(i.name))
            .collect();
        c.sort_by_key(|i| std::cmp::Reverse(i.born));
        c.iter().map(|i| i.name).collect()
    }

    fn add(&mut self, name: DiskName, tag: usize, now: u64) {
        self.born += 1;
        self.images.insert(
            name,
            FsImage {
                name,
                lineage_tag: tag,
                last_shuffle: now,
                calls_served: 0,
                born: self.born,
            },
        );
    }

    fn mount_cost(&mut self) {
        let (lo, hi) = self.cfg.mount_latency_us;
        self.counts.mount_overhead_us += self.rng.random_range(lo..=hi);
    }

    fn fresh_names(&mut self, n: usize) -> Vec<DiskName> {
        (0..n).map(|_| self.mint.fresh(&mut self.rng)).collect()
    }

    fn shuffle(
        &mut self,
        class: &[DiskName],
        now: u64,
        backend: &mut dyn ImageBackend,
        out: &mut Vec<Rebinding>,
    ) -> Result<Vec<DiskName>> {
        let products = self.fresh_names(class.len());
        let renaming = backend.shuffle(class, &products)?;
        for (old, new) in &renaming {
            let img = self.images.remove(old).expect("living");
            self.images.insert(
                *new,
                FsImage {
                    name: *new,
                    last_shuffle: now,
                    calls_served: 0,
                    ..img
                },
            );
        }
        self.log.push(LineageEvent::new(
            EventKind::Shuffle,
            now,
            class.iter().copied(),
            products.iter().copied(),
        ));
        self.counts.shuffles += 1;
        self.mount_cost();
        out.push(Rebinding::Renamed(renaming));
        Ok(products)
    }

    fn fork(
        &mut self,
        src: DiskName,
        now: u64,
        backend: &mut dyn ImageBackend,
        out: &mut Vec<Rebinding>,
    ) -> Result<Vec<DiskName>> {
        let tag = self.images[&src].lineage_tag;
        // Clones take names that never reach the OS before the shuffle.
        let clones = self.fresh_names(self.cfg.fanout - 1);
        let mut members = vec![src];
        for &c in &clones {
            backend.fork(src, c)?;
            out.push(Rebinding::Cloned { from: src, to: c });
            members.push(c);
        }
        let products = self.fresh_names(members.len());
        let renaming = backend.shuffle(&members, &products)?;
        self.images.remove(&src);
        for &p in &products {
            self.add(p, tag, now);
        }
        self.log.push(LineageEvent::new(EventKind::Fork, now, [src], products.iter().copied()));
        self.counts.forks += 1;
        self.mount_cost();
        out.push(Rebinding::Renamed(renaming));
        Ok(products)
    }

    fn retire_surplus(&mut self, now: u64, backend: &mut dyn ImageBackend, out: &mut Vec<Rebinding>) -> Result<()> {
        while self.images.len() > self.cfg.high_water {
            let Some(&victim) = self.select_retire_candidates(backend).first() else {
                break;
            };
            backend.retire(victim)?;
            self.images.remove(&victim);
            self.log.push(LineageEvent::new(EventKind::Retire, now, [victim], []));
            self.counts.retires += 1;
            out.push(Rebinding::Retired(victim));
        }
        Ok(())
    }

    /// Lineage tags with at least one living holder.
    pub fn alive_lineages(&self) -> BTreeSet<usize> {
        self.images.values().map(|i| i.lineage_tag).collect()
    }

    pub fn digest_classes(&self, backend: &mut dyn ImageBackend) -> Result<BTreeMap<Digest, Vec<DiskName>>> {
        let mut m: BTreeMap<Digest, Vec<DiskName>> = BTreeMap::new();
        for &n in self.images.keys() {
            m.entry(backend.digest(n)?).or_default().push(n);
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests;
