use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{TraceLibrary, TraceSegment};
use crate::ids::RefMint;
use crate::simfs::FileCall;
use crate::{Error, Result};

/// Cumulative call and byte counts of one stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamTotals {
    pub calls: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
}

impl StreamTotals {
    pub fn add_call(&mut self, c: &FileCall) {
        self.calls += 1;
        self.read_bytes += c.read_bytes();
        self.write_bytes += c.write_bytes();
    }

    pub fn add(&mut self, o: &StreamTotals) {
        self.calls += o.calls;
        self.read_bytes += o.read_bytes;
        self.write_bytes += o.write_bytes;
    }

    pub fn sub(&mut self, o: &StreamTotals) {
        self.calls -= o.calls;
        self.read_bytes -= o.read_bytes;
        self.write_bytes -= o.write_bytes;
    }

    fn as_array(&self) -> [f64; 3] {
        [self.calls as f64, self.read_bytes as f64, self.write_bytes as f64]
    }
}

/// Running statistics of the actual stream, as the replay controller
/// consumes them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamStats {
    pub start: u64,
    pub totals: StreamTotals,
}

impl StreamStats {
    pub fn new(start: u64) -> Self {
        Self {
            start,
            totals: StreamTotals::default(),
        }
    }

    pub fn record(&mut self, c: &FileCall) {
        self.totals.add_call(c);
    }

    /// Calls per µs since `start`.
    pub fn call_rate(&self, now: u64) -> f64 {
        match now.saturating_sub(self.start) {
            0 => 0.0,
            dt => self.totals.calls as f64 / dt as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayPlan {
    /// Window over which rates are compared, µs.
    pub window_us: u64,
    /// Allowed relative rate error per window.
    pub band: f64,
    /// Mean idle time between segments while the actual stream has no
    /// history, µs.
    pub cold_idle_us: u64,
    /// How far ahead of the actual stream a sybil may run, in segments.
    pub slack_segments: f64,
}

impl Default for ReplayPlan {
    fn default() -> Self {
        Self {
            window_us: 60_000_000,
            band: 0.2,
            cold_idle_us: 50_000,
            slack_segments: 0.5,
        }
    }
}

/// Running maximum of intra-segment gaps. Shared by every stream so the
/// actual and sybil streams are padded alike.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapPadder {
    max_gap: u64,
}

impl GapPadder {
    pub fn new(initial: u64) -> Self {
        Self { max_gap: initial }
    }

    pub fn observe(&mut self, gap: u64) {
        self.max_gap = self.max_gap.max(gap);
    }

    pub fn max_gap(&self) -> u64 {
        self.max_gap
    }

    /// Observes the segment's own gaps, then lays its calls out from
    /// `start` one running-max gap apart.
    pub fn pad(&mut self, seg: &TraceSegment, start: u64) -> Vec<FileCall> {
        for g in seg.gaps() {
            self.observe(g);
        }
        let gap = self.max_gap;
        seg.calls()
            .iter()
            .enumerate()
            .map(|(i, c)| c.clone().at(start + i as u64 * gap))
            .collect()
    }
}

/// One emitted segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub segment: usize,
    pub gap_us: u64,
    pub calls: Vec<FileCall>,
}

impl Batch {
    pub fn start(&self) -> u64 {
        self.calls[0].timestamp
    }

    pub fn end(&self) -> u64 {
        self.calls.last().expect("nonempty").timestamp
    }
}

/// Replay scheduler of one sybil image.
///
/// Segments are drawn uniformly with replacement. After each segment the
/// scheduler sleeps an exponential time whose mean is how long the actual
/// stream needs to catch up with what this sybil has emitted so far.
pub struct Replayer {
    rng: ChaCha8Rng,
    refs: RefMint<ChaCha8Rng>,
    emitted: StreamTotals,
    wake: u64,
}

impl Replayer {
    pub fn new(seed: u64, start: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs = RefMint::new(ChaCha8Rng::seed_from_u64(rng.random()));
        Self {
            rng,
            refs,
            emitted: StreamTotals::default(),
            wake: start,
        }
    }

    /// Starts the count of emitted work at `b`, for a scheduler that joins
    /// once the actual stream has already produced `b`.
    pub fn with_baseline(mut self, b: StreamTotals) -> Self {
        self.emitted = b;
        self
    }

    /// Time of the next poll.
    pub fn wake_time(&self) -> u64 {
        self.wake
    }

    pub fn emitted(&self) -> StreamTotals {
        self.emitted
    }

    /// How many library-mean segments this sybil is ahead of the actual
    /// stream, averaged over calls, read bytes and write bytes.
    pub fn lead(&self, library: &TraceLibrary, actual: &StreamStats) -> f64 {
        let means = library.means();
        let s = self.emitted.as_array();
        let a = actual.totals.as_array();
        let mut sum = 0.0;
        let mut n = 0.0;
        for i in 0..3 {
            if means[i] > 0.0 {
                sum += (s[i] - a[i]) / means[i];
                n += 1.0;
            }
        }
        if n == 0.0 {
            0.0
        } else {
            sum / n
        }
    }

    /// Called at [`Replayer::wake_time`]. Emits a whole segment starting at
    /// `now`, or goes back to sleep while ahead of the actual stream.
    pub fn poll(
        &mut self,
        library: &TraceLibrary,
        plan: &ReplayPlan,
        actual: &StreamStats,
        padder: &mut GapPadder,
        now: u64,
    ) -> Result<Option<Batch>> {
        if library.is_empty() {
            return Err(Error::Empty("trace library"));
        }
        let now = now.max(self.wake);
        let lead = self.lead(library, actual);
        if lead > plan.slack_segments {
            let seg_rate = actual.call_rate(now) / library.means()[0].max(1.0);
            let mean = if seg_rate > 0.0 {
                lead / seg_rate
            } else {
                plan.cold_idle_us as f64
            };
            let sleep = self.exp(mean).min(plan.window_us as f64 / 8.0);
            self.wake = now + (sleep as u64).max(1);
            return Ok(None);
        }
        let batch = self.emit(library, padder, now);
        self.wake = batch.end() + 1;
        Ok(Some(batch))
    }

    /// Samples a segment and lays it out at `start`, minting a fresh
    /// buffer reference for every call that moves filedata.
    pub fn emit(&mut self, library: &TraceLibrary, padder: &mut GapPadder, start: u64) -> Batch {
        let segment = self.rng.random_range(0..library.len());
        let seg = library.get(segment).expect("index in range");
        let mut calls = padder.pad(seg, start);
        for c in &mut calls {
            if c.kind.moves_filedata() {
                c.buffer_ref = Some(self.refs.mint());
            }
            self.emitted.add_call(c);
        }
        Batch {
            segment,
            gap_us: padder.max_gap(),
            calls,
        }
    }

    fn exp(&mut self, mean: f64) -> f64 {
        if mean <= 0.0 || !mean.is_finite() {
            return 0.0;
        }
        Exp::new(1.0 / mean).expect("positive rate").sample(&mut self.rng)
    }
}

/// Totals per window `[start + i*w, start + (i+1)*w)` of a time-ordered
/// call stream. Only whole windows ending by `end` are returned.
pub fn windowed_totals(calls: &[FileCall], start: u64, end: u64, w: u64) -> Vec<StreamTotals> {
    if w == 0 || end <= start {
        return Vec::new();
    }
    let n = ((end - start) / w) as usize;
    let mut out = vec![StreamTotals::default(); n];
    for c in calls {
        if c.timestamp < start {
            continue;
        }
        let i = ((c.timestamp - start) / w) as usize;
        if i < n {
            out[i].add_call(c);
        }
    }
    out
}

/// A window where a sybil rate left the band around the actual rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandViolation {
    pub window: usize,
    pub metric: String,
    pub relative_error: f64,
}

/// Compares per-window totals. Windows where the actual stream moved
/// nothing on a metric are skipped for that metric.
pub fn band_violations(actual: &[StreamTotals], sybil: &[StreamTotals], band: f64) -> Vec<BandViolation> {
    const METRICS: [&str; 3] = ["calls", "read_bytes", "write_bytes"];
    let mut out = Vec::new();
    for (i, (a, s)) in actual.iter().zip(sybil).enumerate() {
        let (a, s) = (a.as_array(), s.as_array());
        for m in 0..3 {
            if a[m] == 0.0 {
                continue;
            }
            let e = (s[m] - a[m]).abs() / a[m];
            if e > band {
                out.push(BandViolation {
                    window: i,
                    metric: METRICS[m].into(),
                    relative_error: e,
                });
            }
        }
    }
    out
}
