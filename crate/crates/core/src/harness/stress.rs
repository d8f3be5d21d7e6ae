//! Images driven by real threads against one backstore actor. Timing is
//! not measured here; the point is that the storage contracts hold when
//! calls from different images interleave arbitrarily.

use std::sync::mpsc;
use std::thread;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backstore::{Backstore, BackstoreConfig, CallResult, Role};
use crate::ids::{DiskName, OpaqueRef, RefMint};
use crate::simfs::{CallKind, DiskRequest, FileCall, FsOptions, OpenFlags, SimFs, BLOCK_SIZE};
use crate::tracegen::{adjust_for_image, GapPadder, Replayer, Workload};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressConfig {
    pub seed: u64,
    pub k: usize,
    pub workload: Workload,
    pub segments_per_image: usize,
    pub disk_blocks: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            k: 4,
            workload: Workload::Churn,
            segments_per_image: 200,
            disk_blocks: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressOutcome {
    pub images: usize,
    pub calls: u64,
    pub requests: u64,
    pub sybil_filedata_blocks: u64,
    /// Probe reads on the actual image that did not return what was written.
    pub actual_mismatches: u64,
    pub blob_bytes: u64,
    pub blob_blocks_referenced: u64,
}

struct Msg {
    image: DiskName,
    call: FileCall,
    reqs: Vec<DiskRequest>,
    data: Option<Vec<u8>>,
    reply: mpsc::Sender<Result<CallResult>>,
}

struct Worker {
    fs: SimFs,
    tx: mpsc::Sender<Msg>,
    refs: RefMint<ChaCha8Rng>,
    rng: ChaCha8Rng,
}

impl Worker {
    fn call(&mut self, call: FileCall, data: Option<Vec<u8>>) -> Result<CallResult> {
        let call = adjust_for_image(&call, &self.fs).call;
        let reqs = self.fs.exec_file_call(&call)?;
        let (reply, rx) = mpsc::channel();
        let image = self.fs.image();
        self.tx
            .send(Msg { image, call, reqs, data, reply })
            .map_err(|_| Error::Invariant("backstore actor gone".into()))?;
        rx.recv().map_err(|_| Error::Invariant("backstore actor dropped a reply".into()))?
    }

    fn payload(&mut self, n: u64) -> Vec<u8> {
        let mut v = vec![0; n as usize];
        self.rng.fill_bytes(&mut v);
        v
    }

    /// Writes a fresh file and reads it back; returns whether the bytes
    /// survived.
    fn probe(&mut self, i: usize) -> Result<bool> {
        let path = format!("/probe{i}");
        let n = self.rng.random_range(1..3 * BLOCK_SIZE as u64);
        let data = self.payload(n);
        let w = FileCall::write(&path, 0, n, self.refs.mint()).with_flags(OpenFlags::CREATE);
        self.call(w, Some(data.clone()))?;
        let r = FileCall::read(&path, 0, n, self.refs.mint());
        let got = self.call(r, None)?.data;
        self.call(FileCall::new(CallKind::Unlink, &path), None)?;
        Ok(got == data)
    }
}

/// Runs K workers concurrently for a fixed number of segments each.
pub fn stress(cfg: &StressConfig) -> Result<StressOutcome> {
    if cfg.k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bs = Backstore::new(BackstoreConfig {
        record_observations: false,
        ..BackstoreConfig::new(rng.random(), cfg.disk_blocks)
    })?;
    let names: Vec<DiskName> = (0..cfg.k as u64).map(|i| DiskName(0x5000 + i)).collect();
    bs.add_image(names[0], Role::Actual)?;
    let (mut fs, reqs) = SimFs::mkfs(names[0], cfg.disk_blocks, FsOptions::default())?;
    for r in &reqs {
        bs.handle_request(r)?;
    }
    for (i, c) in cfg.workload.setup().into_iter().enumerate() {
        let c = if c.kind.moves_filedata() {
            FileCall {
                buffer_ref: Some(OpaqueRef(i as u64)),
                ..c
            }
        } else {
            c
        };
        bs.run_file_call(&mut fs, &c, None)?;
    }
    for &n in &names[1..] {
        bs.clone_image(names[0], n)?;
    }
    let lib = cfg.workload.library(rng.random());

    let (tx, rx) = mpsc::channel::<Msg>();
    let actor = thread::spawn(move || {
        let mut calls = 0u64;
        let mut requests = 0u64;
        for m in rx {
            bs.observe_call(m.image, &m.call);
            calls += 1;
            requests += m.reqs.len() as u64;
            let r = bs.serve_call(&m.call, &m.reqs, m.data.as_deref());
            let _ = m.reply.send(r);
        }
        (bs, calls, requests)
    });

    let mut handles = Vec::new();
    for (idx, &name) in names.iter().enumerate() {
        let mut wfs = fs.clone();
        wfs.set_image(name);
        let mut w = Worker {
            fs: wfs,
            tx: tx.clone(),
            refs: RefMint::new(ChaCha8Rng::seed_from_u64(rng.random())),
            rng: ChaCha8Rng::seed_from_u64(rng.random()),
        };
        let lib = lib.clone();
        let segments = cfg.segments_per_image;
        let seed = rng.random();
        handles.push(thread::spawn(move || -> Result<u64> {
            let mut replayer = Replayer::new(seed, 0);
            let mut padder = GapPadder::default();
            let mut mismatches = 0;
            for s in 0..segments {
                for c in replayer.emit(&lib, &mut padder, 0).calls {
                    let data = (idx == 0 && c.kind == CallKind::Write).then(|| w.payload(c.size));
                    w.call(c, data)?;
                }
                if idx == 0 && s % 10 == 0 {
                    mismatches += u64::from(!w.probe(s)?);
                }
            }
            Ok(mismatches)
        }));
    }
    drop(tx);
    let mut actual_mismatches = 0;
    for h in handles {
        actual_mismatches += h.join().map_err(|_| Error::Invariant("worker panicked".into()))??;
    }
    let (bs, calls, requests) = actor.join().map_err(|_| Error::Invariant("actor panicked".into()))?;
    Ok(StressOutcome {
        images: cfg.k,
        calls,
        requests,
        sybil_filedata_blocks: bs.stored_sybil_filedata_blocks(),
        actual_mismatches,
        blob_bytes: bs.blob_bytes(),
        blob_blocks_referenced: bs.btt().referenced_blob_blocks().len() as u64,
    })
}
