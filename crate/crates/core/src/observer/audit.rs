use serde::{Deserialize, Serialize};

use super::anonymity::Labels;
use crate::fids::{EventKind, LineageEvent};
use crate::{Error, Result};

/// Outcome of replaying a lineage log the way the OS sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub k: usize,
    pub events: usize,
    pub min_living: usize,
    pub min_alive_lineages: usize,
    /// First event after which fewer than K lineages or images were alive.
    pub first_violation: Option<usize>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.first_violation.is_none()
    }
}

/// Replays every prefix of `log` and checks that all K initial lineages
/// still have a possible living holder and that at least K images live.
pub fn extinct_lineage_audit(log: &[LineageEvent]) -> Result<AuditReport> {
    let init = log.first().filter(|e| e.kind == EventKind::Init).ok_or(Error::Empty("lineage log"))?;
    let k = init.products.len();
    let mut labels = Labels::default();
    let mut report = AuditReport {
        k,
        events: log.len(),
        min_living: usize::MAX,
        min_alive_lineages: usize::MAX,
        first_violation: None,
    };
    for (i, e) in log.iter().enumerate() {
        if i > 0 && e.kind == EventKind::Init {
            return Err(Error::Format(format!("second init event at {i}")));
        }
        for p in &e.participants {
            if !labels.0.contains_key(p) {
                return Err(Error::Format(format!("event {i} uses unknown image {p}")));
            }
        }
        labels.apply(e);
        if e.kind != EventKind::Init {
            for p in &e.participants {
                labels.0.remove(p);
            }
        }
        let living = labels.0.len();
        let alive = labels.0.values().flatten().collect::<std::collections::BTreeSet<_>>().len();
        report.min_living = report.min_living.min(living);
        report.min_alive_lineages = report.min_alive_lineages.min(alive);
        if (living < k || alive != k) && report.first_violation.is_none() {
            report.first_violation = Some(i);
        }
    }
    Ok(report)
}

/// Longest time any disk name stayed visible, from the event that created
/// it to the event that consumed it, or to `end` while still alive.
pub fn max_name_lifetime(log: &[LineageEvent], end: u64) -> u64 {
    let mut born: std::collections::BTreeMap<crate::ids::DiskName, u64> = Default::default();
    let mut longest = 0;
    for e in log {
        if e.kind != EventKind::Init {
            for p in &e.participants {
                if let Some(b) = born.remove(p) {
                    longest = longest.max(e.time - b);
                }
            }
        }
        for &p in &e.products {
            born.insert(p, e.time);
        }
    }
    born.values().map(|&b| end.saturating_sub(b)).fold(longest, u64::max)
}
