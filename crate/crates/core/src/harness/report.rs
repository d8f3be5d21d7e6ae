use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::backstore::ObservationLog;
use crate::fids::{FidsCounts, LineageEvent};
use crate::observer::{AnonymityPoint, AuditReport, GuessOutcome};
use crate::stats::{mean, quantile};
use crate::tracegen::LibraryStats;
use crate::Result;

/// Summary of a set of delays, ns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub count: u64,
    pub mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

impl DelayStats {
    pub fn of(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let f: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
        Self {
            count: samples.len() as u64,
            mean_ns: mean(&f).unwrap_or(0.0),
            p50_ns: quantile(samples, 0.5).unwrap_or(0),
            p99_ns: quantile(samples, 0.99).unwrap_or(0),
            max_ns: samples.iter().copied().max().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StorageMetrics {
    pub sybil_blob_bytes: u64,
    pub blob_bytes_per_sybil_image: f64,
    pub actual_region_bytes: u64,
    pub actual_filedata_bytes_written: u64,
    pub sybil_filedata_blocks: u64,
    pub blob_blocks_allocated: u64,
    pub blob_blocks_referenced: u64,
    pub shared_region_refs: u64,
    pub cow_copies: u64,
    pub repurpose_erasures: u64,
    pub sybil_filedata_writes_discarded: u64,
    pub sybils_at_end: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayMetrics {
    pub actual_calls: u64,
    pub sybil_calls: u64,
    pub actual_segments: u64,
    pub sybil_segments: u64,
    pub max_gap_us: u64,
    /// Emitted segments whose calls were not one running-max gap apart.
    pub gap_violations: u64,
    pub band_windows: u64,
    pub band_violations: u64,
    pub worst_band_error: f64,
    /// Calls the adjuster rewrote, by action.
    pub adjusted: BTreeMap<String, u64>,
}

/// Everything a run measured. Serialized with sorted keys, so equal runs
/// give equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub end_time_us: u64,
    pub library: LibraryStats,
    pub storage: StorageMetrics,
    pub guess_rate: GuessOutcome,
    pub p_curve: Vec<AnonymityPoint>,
    pub audit: Option<AuditReport>,
    pub max_name_lifetime_us: Option<u64>,
    pub padding_threshold_ns: Option<u64>,
    pub mi_pre: Option<f64>,
    pub mi_post: Option<f64>,
    /// Per-call sums of reported metadata delays, keyed by stream role.
    pub call_delay_stats: BTreeMap<String, DelayStats>,
    pub fids_op_counts: FidsCounts,
    pub replay: ReplayMetrics,
    pub observations: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }
}

/// Per-request delays of one run, split by whether the request came from
/// the actual image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DelaySamples {
    pub actual_raw: Vec<f64>,
    pub actual_reported: Vec<f64>,
    pub sybil_raw: Vec<f64>,
    pub sybil_reported: Vec<f64>,
}

/// A report plus the logs it was computed from.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: MetricsReport,
    pub observations: ObservationLog,
    pub lineage: Vec<LineageEvent>,
    pub delays: DelaySamples,
}

pub const REPORT_FILE: &str = "report.json";
pub const OBSERVATION_FILE: &str = "observation.jsonl";
pub const LINEAGE_FILE: &str = "lineage.jsonl";
pub const P_CURVE_FILE: &str = "p_curve.dat";
pub const MI_FILE: &str = "mi.dat";

impl RunArtifacts {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(REPORT_FILE), self.report.to_json())?;
        let mut w = BufWriter::new(File::create(dir.join(OBSERVATION_FILE))?);
        self.observations.write_jsonl(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(LINEAGE_FILE))?);
        LineageEvent::write_jsonl(&self.lineage, &mut w)?;
        w.flush()?;
        std::fs::write(dir.join(P_CURVE_FILE), p_curve_dat(&self.report.p_curve))?;
        std::fs::write(dir.join(MI_FILE), mi_dat(&self.report))?;
        Ok(())
    }
}

/// `r m p` per line, with `p` as a fraction and a float.
pub fn p_curve_dat(curve: &[AnonymityPoint]) -> String {
    let mut s = String::from("# r M P P_float\n");
    for p in curve {
        s.push_str(&format!(
            "{} {} {}/{} {:.6}\n",
            p.r,
            p.m,
            p.p.numer(),
            p.p.denom(),
            *p.p.numer() as f64 / *p.p.denom() as f64
        ));
    }
    s
}

pub fn mi_dat(r: &MetricsReport) -> String {
    let f = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
    format!(
        "# padding_pct threshold_ns mi_pre_bits mi_post_bits\n{} {} {} {}\n",
        r.config.padding().map_or("none".to_string(), |p| p.to_string()),
        r.padding_threshold_ns.map_or("none".to_string(), |t| t.to_string()),
        f(r.mi_pre),
        f(r.mi_post)
    )
}
