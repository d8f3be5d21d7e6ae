use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::fids::{EventKind, LineageEvent};
use crate::ids::DiskName;
use crate::{Error, Result};

/// Anonymity of the target after `r` rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymityPoint {
    pub r: usize,
    /// Log index of the event that made this round.
    pub event: Option<usize>,
    /// Images the target is indistinguishable from.
    pub m: u64,
    pub p: Ratio<u64>,
}

/// Possible origins of each name, as the OS can reconstruct them.
///
/// A shuffle product may stem from any participant, so it inherits the
/// union of their sets. A fork product inherits its parent's set.
#[derive(Debug, Clone, Default)]
pub(crate) struct Labels(pub BTreeMap<DiskName, BTreeSet<DiskName>>);

impl Labels {
    pub fn seeded(origins: impl IntoIterator<Item = DiskName>) -> Self {
        Self(origins.into_iter().map(|n| (n, BTreeSet::from([n]))).collect())
    }

    /// Applies one event; returns the label set given to its products.
    pub fn apply(&mut self, e: &LineageEvent) -> BTreeSet<DiskName> {
        match e.kind {
            EventKind::Fork | EventKind::Shuffle => {
                let mut union = BTreeSet::new();
                for p in &e.participants {
                    union.extend(self.0.get(p).into_iter().flatten().copied());
                }
                for &p in &e.products {
                    self.0.insert(p, union.clone());
                }
                union
            }
            EventKind::Init => {
                for &p in &e.products {
                    self.0.insert(p, BTreeSet::from([p]));
                }
                e.products.clone()
            }
            EventKind::Retire => BTreeSet::new(),
        }
    }
}

/// Names alive right after event `idx`.
pub fn living_after(log: &[LineageEvent], idx: usize) -> BTreeSet<DiskName> {
    let mut living = BTreeSet::new();
    for e in &log[..=idx] {
        if e.kind != EventKind::Init {
            for p in &e.participants {
                living.remove(p);
            }
        }
        living.extend(e.products.iter().copied());
    }
    living
}

/// Index of the event that created `target`.
pub fn creation_index(log: &[LineageEvent], target: DiskName) -> Result<usize> {
    log.iter()
        .position(|e| e.products.contains(&target))
        .ok_or_else(|| Error::NotFound(format!("{target} is never created in the log")))
}

/// P(r) for `target`, from its creation onwards.
///
/// The origins are the images alive right after the target appears. Round
/// `r` is the r-th fork or shuffle in which a probable descendant of the
/// target takes part. M(r) counts the origins any probable descendant may
/// equally stem from; P(r) = 1/M(r).
pub fn anonymity_curve(log: &[LineageEvent], target: DiskName) -> Result<Vec<AnonymityPoint>> {
    let start = creation_index(log, target)?;
    let mut labels = Labels::seeded(living_after(log, start));
    let mut mixed = BTreeSet::from([target]);
    let mut out = vec![AnonymityPoint {
        r: 0,
        event: None,
        m: 1,
        p: Ratio::from_integer(1),
    }];
    for (i, e) in log.iter().enumerate().skip(start + 1) {
        if !matches!(e.kind, EventKind::Fork | EventKind::Shuffle) {
            continue;
        }
        let union = labels.apply(e);
        if !union.contains(&target) {
            continue;
        }
        mixed.extend(union);
        let m = mixed.len() as u64;
        out.push(AnonymityPoint {
            r: out.len(),
            event: Some(i),
            m,
            p: Ratio::new(1, m),
        });
    }
    Ok(out)
}
