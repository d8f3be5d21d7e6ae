use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ids::DiskName;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Init,
    Fork,
    Shuffle,
    Retire,
}

/// One OS-visible identity event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEvent {
    pub kind: EventKind,
    pub time: u64,
    pub participants: BTreeSet<DiskName>,
    pub products: BTreeSet<DiskName>,
}

impl LineageEvent {
    pub fn new(
        kind: EventKind,
        time: u64,
        participants: impl IntoIterator<Item = DiskName>,
        products: impl IntoIterator<Item = DiskName>,
    ) -> Self {
        Self {
            kind,
            time,
            participants: participants.into_iter().collect(),
            products: products.into_iter().collect(),
        }
    }

    pub fn write_jsonl(events: &[LineageEvent], mut w: impl Write) -> Result<()> {
        for e in events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Vec<LineageEvent>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Into::into))
            .collect()
    }
}
