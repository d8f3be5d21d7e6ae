//! Synthetic workload shapes: a database answering queries, an append-only
//! drive historian, a credential loader, and a metadata-heavy spool.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SegmentSource, TraceLibrary, TraceSegment};
use crate::ids::OpaqueRef;
use crate::simfs::{CallKind, FileCall, OpenFlags, BLOCK_SIZE};
use crate::{Error, Result};

const PAGE: u64 = BLOCK_SIZE as u64;
const DB_PAGES: u64 = 128;
const COLUMN_PAGES: u64 = 40;
const DRIVES: u64 = 10;
const KEYS: u64 = 50;
const JOBS: u64 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    Query,
    Historian,
    Credloader,
    Churn,
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Workload::Query => "query",
            Workload::Historian => "historian",
            Workload::Credloader => "credloader",
            Workload::Churn => "churn",
        })
    }
}

impl FromStr for Workload {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Workload::ALL
            .into_iter()
            .find(|w| w.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown workload {s:?}")))
    }
}

fn open(path: &str, flags: OpenFlags) -> FileCall {
    FileCall::new(CallKind::Open, path).with_flags(flags)
}

fn read(path: &str, offset: u64, size: u64) -> FileCall {
    FileCall::read(path, offset, size, OpaqueRef(0))
}

fn write(path: &str, offset: u64, size: u64, flags: OpenFlags) -> FileCall {
    FileCall::write(path, offset, size, OpaqueRef(0)).with_flags(flags)
}

fn call(kind: CallKind, path: &str) -> FileCall {
    FileCall::new(kind, path)
}

fn key_size(i: u64) -> u64 {
    100 + (i * 397) % 3000
}

impl Workload {
    pub const ALL: [Workload; 4] = [Workload::Query, Workload::Historian, Workload::Credloader, Workload::Churn];

    /// Segments in the shipped library.
    pub fn default_segments(self) -> usize {
        match self {
            Workload::Query => 500,
            Workload::Historian => 100,
            Workload::Credloader => 100,
            Workload::Churn => 200,
        }
    }

    /// Calls that lay out the files every segment expects. Run on the
    /// actual image before any sybil is cloned from it. Buffer references
    /// are left for the caller to mint.
    pub fn setup(self) -> Vec<FileCall> {
        let calls = match self {
            Workload::Query => vec![
                call(CallKind::Mkdir, "/db"),
                write("/db/health.db", 0, DB_PAGES * PAGE, OpenFlags::CREATE),
                call(CallKind::Close, "/db/health.db"),
            ],
            Workload::Historian => vec![call(CallKind::Mkdir, "/bag")],
            Workload::Credloader => {
                let mut v = vec![call(CallKind::Mkdir, "/keys")];
                for i in 0..KEYS {
                    v.push(write(&format!("/keys/id_{i:02}"), 0, key_size(i), OpenFlags::CREATE));
                }
                v.push(write("/keys/known_hosts", 0, 2048, OpenFlags::CREATE));
                v
            }
            Workload::Churn => {
                let mut v = vec![call(CallKind::Mkdir, "/spool")];
                for i in 0..16 {
                    v.push(write(&format!("/spool/q{i:02}"), 0, 64 + 97 * i, OpenFlags::CREATE));
                }
                v
            }
        };
        calls.into_iter().map(|c| FileCall { buffer_ref: None, ..c }).collect()
    }

    /// One recorded segment with gaps of a few milliseconds.
    pub fn segment(self, rng: &mut impl Rng, event: u64, source: SegmentSource) -> TraceSegment {
        let (label, calls) = match self {
            Workload::Query => query(rng),
            Workload::Historian => historian(rng),
            Workload::Credloader => credloader(rng),
            Workload::Churn => churn(rng),
        };
        let mut t = 0;
        let calls = calls
            .into_iter()
            .map(|c| {
                let c = c.at(t);
                t += rng.random_range(200..3_000);
                c
            })
            .collect();
        TraceSegment::new(calls, label, source, event).expect("generated segments are well formed")
    }

    pub fn segments(self, seed: u64, n: usize, source: SegmentSource) -> Vec<TraceSegment> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (self as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (0..n as u64).map(|i| self.segment(&mut rng, i, source)).collect()
    }

    pub fn library(self, seed: u64) -> TraceLibrary {
        TraceLibrary::from_segments(self.segments(seed, self.default_segments(), SegmentSource::Recorded))
    }
}

fn query(rng: &mut impl Rng) -> (String, Vec<FileCall>) {
    const DB: &str = "/db/health.db";
    let cols: Vec<u64> = (0..3).filter(|_| rng.random_bool(0.5)).collect();
    let cols = if cols.is_empty() { vec![rng.random_range(0..3)] } else { cols };
    let start = rng.random_range(0..COLUMN_PAGES - 8);
    let len = rng.random_range(1..=8);
    let update = rng.random_bool(0.2);
    let mut v = vec![open(DB, OpenFlags::empty()), call(CallKind::Fstat, DB), read(DB, 0, PAGE)];
    for &c in &cols {
        for p in start..start + len {
            v.push(read(DB, (1 + c * COLUMN_PAGES + p) * PAGE, PAGE));
        }
    }
    if update {
        let j = "/db/health.db-journal";
        v.push(write(j, 0, len * PAGE, OpenFlags::CREATE));
        v.push(write(DB, (1 + cols[0] * COLUMN_PAGES + start) * PAGE, len * PAGE, OpenFlags::empty()));
        v.push(call(CallKind::Unlink, j));
    }
    v.push(call(CallKind::Close, DB));
    let cols: Vec<String> = cols.iter().map(u64::to_string).collect();
    (format!("C={};R={}+{}{}", cols.join(","), start, len, if update { ";w" } else { "" }), v)
}

fn historian(rng: &mut impl Rng) -> (String, Vec<FileCall>) {
    let d = rng.random_range(0..DRIVES);
    let bag = format!("/bag/drive{d}.bag");
    let idx = format!("/bag/drive{d}.idx");
    let mut v = vec![open(&bag, OpenFlags::CREATE | OpenFlags::TRUNC)];
    let chunks = rng.random_range(8..=16);
    for _ in 0..chunks {
        v.push(write(&bag, 0, 16 * 1024, OpenFlags::APPEND));
    }
    v.push(write(&idx, 0, 24 * chunks, OpenFlags::CREATE));
    v.push(call(CallKind::Fstat, &bag));
    v.push(call(CallKind::Close, &bag));
    (format!("drive-{d}"), v)
}

fn credloader(rng: &mut impl Rng) -> (String, Vec<FileCall>) {
    let k = rng.random_range(0..KEYS);
    let key = format!("/keys/id_{k:02}");
    let hosts = "/keys/known_hosts";
    let mut v = vec![
        open(&key, OpenFlags::empty()),
        call(CallKind::Fstat, &key),
        read(&key, 0, key_size(k)),
        call(CallKind::Close, &key),
        open(hosts, OpenFlags::empty()),
        read(hosts, 0, 2048),
    ];
    if rng.random_bool(0.3) {
        v.push(write(hosts, rng.random_range(0..22) * 90, 90, OpenFlags::empty()));
    }
    v.push(call(CallKind::Close, hosts));
    (format!("key-{k}"), v)
}

fn churn(rng: &mut impl Rng) -> (String, Vec<FileCall>) {
    let j = rng.random_range(0..JOBS);
    let job = format!("/spool/job{j:02}");
    let q = format!("/spool/q{:02}", rng.random_range(0..16));
    let sizes = [90, 150, 400, 2_000, 6_000];
    let mut v = vec![
        write(&job, 0, *sizes.choose(rng).expect("nonempty"), OpenFlags::CREATE),
        call(CallKind::Fstat, &job),
        FileCall {
            size: rng.random_range(0..300),
            ..call(CallKind::Truncate, &q)
        },
        write(&q, 0, rng.random_range(32..1_200), OpenFlags::APPEND),
        call(CallKind::Close, &job),
    ];
    if rng.random_bool(0.5) {
        v.push(call(CallKind::Unlink, &job));
    }
    (format!("job-{j}"), v)
}
