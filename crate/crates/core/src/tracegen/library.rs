use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::StreamTotals;
use crate::simfs::FileCall;
use crate::stats::plugin_entropy;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentSource {
    Recorded,
    Deployment,
}

/// An atomic run of file calls produced by one input event. Call
/// timestamps are relative to the first call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSegment {
    calls: Vec<FileCall>,
    pub secret_label: String,
    pub source: SegmentSource,
    pub input_event_id: u64,
}

impl TraceSegment {
    pub fn new(
        calls: Vec<FileCall>,
        secret_label: impl Into<String>,
        source: SegmentSource,
        input_event_id: u64,
    ) -> Result<Self> {
        if calls.is_empty() {
            return Err(Error::Empty("trace segment"));
        }
        if calls.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Format("segment timestamps go backwards".into()));
        }
        if let Some(c) = calls.iter().find(|c| !c.path.starts_with('/')) {
            return Err(Error::InvalidPath(c.path.clone()));
        }
        let t0 = calls[0].timestamp;
        let calls = calls
            .into_iter()
            .map(|c| FileCall {
                buffer_ref: None,
                timestamp: c.timestamp - t0,
                ..c
            })
            .collect();
        Ok(Self {
            calls,
            secret_label: secret_label.into(),
            source,
            input_event_id,
        })
    }

    pub fn calls(&self) -> &[FileCall] {
        &self.calls
    }

    pub fn len(&self) -> usize {
        self.calls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calls.is_empty()
    }

    /// Recorded gaps between consecutive calls, µs.
    pub fn gaps(&self) -> impl Iterator<Item = u64> + '_ {
        self.calls.windows(2).map(|w| w[1].timestamp - w[0].timestamp)
    }

    pub fn max_gap(&self) -> u64 {
        self.gaps().max().unwrap_or(0)
    }

    pub fn read_bytes(&self) -> u64 {
        self.calls.iter().map(FileCall::read_bytes).sum()
    }

    pub fn write_bytes(&self) -> u64 {
        self.calls.iter().map(FileCall::write_bytes).sum()
    }

    pub fn totals(&self) -> StreamTotals {
        let mut t = StreamTotals::default();
        for c in &self.calls {
            t.add_call(c);
        }
        t
    }
}

/// Summary written by `report` and the corpus tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryStats {
    pub segments: usize,
    pub calls: usize,
    pub cardinality: usize,
    pub entropy_bits: f64,
    pub max_intercall_interval_us: u64,
    pub mean_calls: f64,
    pub mean_read_bytes: f64,
    pub mean_write_bytes: f64,
}

/// Segments the replay scheduler samples from, plus metrics over their
/// secret labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLibrary {
    segments: VecDeque<TraceSegment>,
    /// Once deployment segments exceed this share of the library, each new
    /// one evicts the oldest recorded segment, or the oldest deployment
    /// segment when no recorded one is left.
    renew_fraction: f64,
    max_gap: u64,
    sum: StreamTotals,
}

impl Default for TraceLibrary {
    fn default() -> Self {
        Self::new(0.5)
    }
}

#[derive(Serialize, Deserialize)]
struct SegmentHeader {
    label: String,
    source: SegmentSource,
    event: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Line {
    Segment { segment: SegmentHeader },
    Call(FileCall),
}

impl TraceLibrary {
    pub fn new(renew_fraction: f64) -> Self {
        Self {
            segments: VecDeque::new(),
            renew_fraction: renew_fraction.clamp(0.0, 1.0),
            max_gap: 0,
            sum: StreamTotals::default(),
        }
    }

    pub fn from_segments(segments: impl IntoIterator<Item = TraceSegment>) -> Self {
        let mut lib = Self::default();
        for s in segments {
            lib.ingest(s);
        }
        lib
    }

    pub fn ingest(&mut self, segment: TraceSegment) {
        self.max_gap = self.max_gap.max(segment.max_gap());
        let deployment = segment.source == SegmentSource::Deployment;
        self.sum.add(&segment.totals());
        self.segments.push_back(segment);
        if deployment {
            let d = self.count(SegmentSource::Deployment) as f64;
            if d > self.renew_fraction * self.segments.len() as f64 {
                let i = self
                    .segments
                    .iter()
                    .position(|s| s.source == SegmentSource::Recorded)
                    .unwrap_or(0);
                let gone = self.segments.remove(i).expect("index in range");
                self.sum.sub(&gone.totals());
            }
        }
    }

    fn count(&self, source: SegmentSource) -> usize {
        self.segments.iter().filter(|s| s.source == source).count()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&TraceSegment> {
        self.segments.get(i)
    }

    pub fn segments(&self) -> impl Iterator<Item = &TraceSegment> {
        self.segments.iter()
    }

    /// Multiset of secret labels.
    pub fn secret_set(&self) -> BTreeMap<&str, u64> {
        let mut m = BTreeMap::new();
        for s in &self.segments {
            *m.entry(s.secret_label.as_str()).or_default() += 1;
        }
        m
    }

    pub fn cardinality(&self) -> usize {
        self.secret_set().len()
    }

    /// Plug-in Shannon entropy of the label distribution, in bits. Biased
    /// low for small samples.
    pub fn entropy(&self) -> Result<f64> {
        if self.segments.is_empty() {
            return Err(Error::Empty("trace library"));
        }
        Ok(plugin_entropy(self.segments.iter().map(|s| s.secret_label.as_str())))
    }

    /// Per-segment means of calls, read bytes and write bytes.
    pub fn means(&self) -> [f64; 3] {
        let n = self.segments.len().max(1) as f64;
        [
            self.sum.calls as f64 / n,
            self.sum.read_bytes as f64 / n,
            self.sum.write_bytes as f64 / n,
        ]
    }

    /// Largest gap seen in any ingested segment, evicted ones included.
    pub fn max_intercall_interval(&self) -> u64 {
        self.max_gap
    }

    pub fn stats(&self) -> Result<LibraryStats> {
        let entropy_bits = self.entropy()?;
        let [mean_calls, mean_read_bytes, mean_write_bytes] = self.means();
        Ok(LibraryStats {
            segments: self.segments.len(),
            calls: self.sum.calls as usize,
            cardinality: self.cardinality(),
            entropy_bits,
            max_intercall_interval_us: self.max_gap,
            mean_calls,
            mean_read_bytes,
            mean_write_bytes,
        })
    }

    /// One JSON object per line: a `{"segment": ...}` header, then the
    /// segment's calls.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for s in &self.segments {
            let header = Line::Segment {
                segment: SegmentHeader {
                    label: s.secret_label.clone(),
                    source: s.source,
                    event: s.input_event_id,
                },
            };
            serde_json::to_writer(&mut w, &header)?;
            writeln!(w)?;
            for c in &s.calls {
                serde_json::to_writer(&mut w, c)?;
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let mut lib = Self::default();
        let mut open: Option<(SegmentHeader, Vec<FileCall>)> = None;
        let flush = |open: &mut Option<(SegmentHeader, Vec<FileCall>)>, lib: &mut Self| -> Result<()> {
            if let Some((h, calls)) = open.take() {
                lib.ingest(TraceSegment::new(calls, h.label, h.source, h.event)?);
            }
            Ok(())
        };
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            match parsed {
                Line::Segment { segment } => {
                    flush(&mut open, &mut lib)?;
                    open = Some((segment, Vec::new()));
                }
                Line::Call(c) => match open.as_mut() {
                    Some((_, calls)) => calls.push(c),
                    None => return Err(Error::Format(format!("line {}: call before any segment header", n + 1))),
                },
            }
        }
        flush(&mut open, &mut lib)?;
        Ok(lib)
    }
}
