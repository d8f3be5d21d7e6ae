//! Sybil call streams: a library of recorded trace segments, the replay
//! scheduler that emits them, and the adjuster that keeps replayed calls
//! valid on the image they run against.

mod adjust;
pub mod corpus;
mod library;
mod replay;

pub use adjust::{adjust_for_image, AdjustAction, Adjusted};
pub use corpus::Workload;
pub use library::{LibraryStats, SegmentSource, TraceLibrary, TraceSegment};
pub use replay::{
    band_violations, windowed_totals, BandViolation, Batch, GapPadder, ReplayPlan, Replayer, StreamStats,
    StreamTotals,
};
