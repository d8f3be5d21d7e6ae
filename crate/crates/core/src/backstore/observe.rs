use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ids::{Digest, DiskName};
use crate::simfs::{BlockClass, DiskOp, FileCall};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiskEventKind {
    /// A request issued by the filesystem.
    Request,
    /// A raw block read outside the filesystem.
    Probe,
}

/// One record the OS can observe. Contains neither filedata nor table
/// plaintext.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Observation {
    Call {
        seq: u64,
        image: DiskName,
        call: FileCall,
    },
    Disk {
        seq: u64,
        kind: DiskEventKind,
        image: DiskName,
        op: DiskOp,
        vblock: u64,
        clazz: BlockClass,
        accepted: bool,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        delay_ns: Option<u64>,
        response: Digest,
    },
}

impl Observation {
    pub fn image(&self) -> DiskName {
        match self {
            Observation::Call { image, .. } | Observation::Disk { image, .. } => *image,
        }
    }

    pub fn with_image(&self, image: DiskName) -> Self {
        let mut o = self.clone();
        match &mut o {
            Observation::Call { image: i, .. } | Observation::Disk { image: i, .. } => *i = image,
        }
        o
    }
}

/// Append-only transcript of everything the OS sees.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObservationLog {
    records: Vec<Observation>,
    enabled: bool,
}

impl ObservationLog {
    pub fn new(enabled: bool) -> Self {
        Self {
            records: Vec::new(),
            enabled,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn next_seq(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn push(&mut self, o: Observation) {
        if self.enabled {
            self.records.push(o);
        }
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Vec<Observation>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Into::into))
            .collect()
    }
}
