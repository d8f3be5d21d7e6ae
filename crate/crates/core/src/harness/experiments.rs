use serde::{Deserialize, Serialize};

use super::{run, ExperimentConfig};
use crate::backstore::{Backstore, BackstoreConfig, Role};
use crate::ids::DiskName;
use crate::observer::timing_mutual_information;
use crate::simfs::{DiskRequest, FsOptions, SimFs};
use crate::tracegen::Workload;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CowComparison {
    pub k: usize,
    pub workload: Workload,
    pub cow_on_bytes: u64,
    pub cow_off_bytes: u64,
    pub ratio: f64,
}

/// Blob footprint of the same run with copy-on-write sharing on and off.
pub fn compare_cow(cfg: &ExperimentConfig) -> Result<CowComparison> {
    if cfg.k < 5 {
        return Err(Error::InvalidConfig(format!("CoW comparison needs K >= 5, got {}", cfg.k)));
    }
    let bytes = |cow: bool| -> Result<u64> {
        let c = ExperimentConfig {
            cow,
            record_observations: false,
            ..cfg.clone()
        };
        Ok(run(&c)?.report.storage.sybil_blob_bytes)
    };
    let on = bytes(true)?;
    let off = bytes(false)?;
    Ok(CowComparison {
        k: cfg.k,
        workload: cfg.workload,
        cow_on_bytes: on,
        cow_off_bytes: off,
        ratio: if on == 0 { f64::INFINITY } else { off as f64 / on as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingOutcome {
    pub samples: usize,
    pub threshold_ns: Option<u64>,
    pub mi_pre: f64,
    pub mi_post: f64,
}

/// Metadata reads alternating between an actual image and a sybil whose
/// metadata lives in the blob. Raw delays give the unpadded leak, reported
/// delays the padded one.
pub fn timing_experiment(seed: u64, samples: usize, padding_pct: f64) -> Result<TimingOutcome> {
    const BLOCKS: u64 = 2048;
    let (act, syb) = (DiskName(1), DiskName(2));
    let mut bs = Backstore::new(BackstoreConfig {
        cow: false,
        record_observations: false,
        ..BackstoreConfig::new(seed, BLOCKS)
    })?;
    bs.add_image(act, Role::Actual)?;
    let (_, reqs) = SimFs::mkfs(act, BLOCKS, FsOptions::default())?;
    for r in &reqs {
        bs.handle_request(r)?;
    }
    bs.clone_image(act, syb)?;
    let profile = bs.sample_region_delays(samples.max(crate::backstore::MIN_PROFILE_SAMPLES));
    let model = bs.profile_and_set_padding(&profile, padding_pct / 100.0)?;

    let vblocks: Vec<u64> = reqs.iter().map(|r| r.vblock).collect();
    let mut raw = [Vec::with_capacity(samples), Vec::with_capacity(samples)];
    let mut rep = [Vec::with_capacity(samples), Vec::with_capacity(samples)];
    for i in 0..samples {
        let v = vblocks[i % vblocks.len()];
        for (side, img) in [act, syb].into_iter().enumerate() {
            let resp = bs.handle_request(&DiskRequest::metadata_read(img, v))?;
            let (Some(r), Some(d)) = (resp.raw_ns, resp.delay_ns) else {
                return Err(Error::Invariant("metadata read without a delay".into()));
            };
            raw[side].push(r as f64);
            rep[side].push(d as f64);
        }
    }
    Ok(TimingOutcome {
        samples,
        threshold_ns: model.pad_threshold_ns,
        mi_pre: timing_mutual_information(&raw[0], &raw[1])?,
        mi_post: timing_mutual_information(&rep[0], &rep[1])?,
    })
}
