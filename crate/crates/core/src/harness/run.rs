use std::collections::{BTreeMap, VecDeque};

use num_rational::Ratio;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::report::{DelaySamples, DelayStats, MetricsReport, ReplayMetrics, RunArtifacts, StorageMetrics};
use super::ExperimentConfig;
use crate::backstore::{Backstore, BackstoreConfig, Role};
use crate::fids::{Fids, FidsConfig, Rebinding};
use crate::ids::{DiskName, RefMint};
use crate::observer::{
    anonymity_curve, extinct_lineage_audit, max_name_lifetime, random_guess_attack, timing_mutual_information,
    AnonymityPoint,
};
use crate::simfs::{CallKind, FileCall, FsOptions, SimFs, BLOCK_SIZE};
use crate::tracegen::{
    adjust_for_image, band_violations, windowed_totals, AdjustAction, GapPadder, ReplayPlan, Replayer, SegmentSource,
    StreamStats, TraceLibrary, TraceSegment,
};
use crate::{Error, Result};

struct Stream {
    name: DiskName,
    fs: SimFs,
    /// `None` for the actual stream.
    replayer: Option<Replayer>,
    pending: VecDeque<FileCall>,
    /// Start of the actual stream's next segment.
    wake: u64,
    /// Library index and calls of the actual segment in flight.
    current: Option<(usize, Vec<FileCall>)>,
    born: u64,
    died: Option<u64>,
    executed: Vec<FileCall>,
}

impl Stream {
    fn next_time(&self) -> u64 {
        match (self.pending.front(), &self.replayer) {
            (Some(c), _) => c.timestamp,
            (None, Some(r)) => r.wake_time(),
            (None, None) => self.wake,
        }
    }

    fn is_actual(&self) -> bool {
        self.replayer.is_none()
    }
}

fn action_name(a: &AdjustAction) -> &'static str {
    match a {
        AdjustAction::Unchanged => "unchanged",
        AdjustAction::Clamped { .. } => "clamped",
        AdjustAction::Redirected { .. } => "redirected",
        AdjustAction::Created => "created",
        AdjustAction::AlreadyThere => "already_there",
        AdjustAction::Fallback { .. } => "fallback",
    }
}

fn exp_sample(rng: &mut impl Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Exp::new(1.0 / mean).expect("positive rate").sample(rng) as u64
}

struct Driver {
    cfg: ExperimentConfig,
    bs: Backstore,
    fids: Option<Fids>,
    lib: TraceLibrary,
    plan: ReplayPlan,
    padder: GapPadder,
    streams: BTreeMap<usize, Stream>,
    dead: Vec<Stream>,
    next_id: usize,
    actual_stats: StreamStats,
    rng: ChaCha8Rng,
    actual_refs: RefMint<ChaCha8Rng>,
    payload: ChaCha8Rng,
    delays: DelaySamples,
    call_delays: BTreeMap<&'static str, Vec<u64>>,
    replay: ReplayMetrics,
    deployed: u64,
    /// Name the actual image had before any shuffle.
    initial_actual: DiskName,
}

/// Runs one experiment in virtual time and returns its report and logs.
pub fn run(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut d = Driver::provision(cfg)?;
    let end = cfg.duration_ms * 1000;
    d.event_loop(end)?;
    d.finish(end)
}

impl Driver {
    fn provision(cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut bs = Backstore::new(BackstoreConfig {
            seed: rng.random(),
            disk_blocks: cfg.disk_blocks,
            blob_capacity: cfg.blob_capacity,
            cow: cfg.cow,
            latency: Default::default(),
            record_observations: cfg.record_observations,
        })?;
        let mut fids = if cfg.k >= 2 {
            Some(Fids::new(FidsConfig::new(cfg.k, cfg.t_ms * 1000, cfg.n_calls), rng.random())?)
        } else {
            None
        };
        let names = match fids.as_mut() {
            Some(f) => f.initial_names(),
            None => vec![DiskName(rng.random())],
        };
        let actual_idx = rng.random_range(0..names.len());
        let actual = names[actual_idx];

        bs.add_image(actual, Role::Actual)?;
        let (mut fs, reqs) = SimFs::mkfs(actual, cfg.disk_blocks, FsOptions::default())?;
        for r in &reqs {
            bs.handle_request(r)?;
        }
        let lib = cfg.workload.library(rng.random());
        let max_gap = lib.max_intercall_interval();
        let mut d = Self {
            cfg: cfg.clone(),
            bs,
            fids: None,
            lib,
            plan: ReplayPlan {
                window_us: cfg.window_ms * 1000,
                ..ReplayPlan::default()
            },
            padder: GapPadder::new(max_gap),
            streams: BTreeMap::new(),
            dead: Vec::new(),
            next_id: 0,
            actual_stats: StreamStats::new(0),
            actual_refs: RefMint::new(ChaCha8Rng::seed_from_u64(rng.random())),
            payload: ChaCha8Rng::seed_from_u64(rng.random()),
            rng,
            delays: DelaySamples::default(),
            call_delays: BTreeMap::new(),
            replay: ReplayMetrics::default(),
            deployed: 0,
            initial_actual: actual,
        };
        for c in cfg.workload.setup() {
            let c = d.with_ref(c);
            let data = d.write_payload(&c);
            d.bs.run_file_call(&mut fs, &c, data.as_deref())?;
        }
        if let Some(p) = cfg.padding() {
            let samples = d.bs.sample_region_delays(cfg.profile_samples);
            d.bs.profile_and_set_padding(&samples, p / 100.0)?;
        }

        let first = d.rng.random::<f64>() * cfg.mean_idle_ms * 1000.0;
        d.add_stream(actual, fs.clone(), None, first as u64, 0);
        for &n in names.iter().filter(|&&n| n != actual) {
            d.bs.clone_image(actual, n)?;
            let mut sfs = fs.clone();
            sfs.set_image(n);
            let r = Replayer::new(d.rng.random(), 0);
            d.add_stream(n, sfs, Some(r), 0, 0);
        }
        d.bs.take_log();
        if let Some(f) = fids.as_mut() {
            f.init(&names, 0)?;
        }
        d.fids = fids;
        Ok(d)
    }

    fn add_stream(&mut self, name: DiskName, fs: SimFs, replayer: Option<Replayer>, wake: u64, born: u64) {
        self.streams.insert(
            self.next_id,
            Stream {
                name,
                fs,
                replayer,
                pending: VecDeque::new(),
                wake,
                current: None,
                born,
                died: None,
                executed: Vec::new(),
            },
        );
        self.next_id += 1;
    }

    fn with_ref(&mut self, c: FileCall) -> FileCall {
        if c.kind.moves_filedata() {
            FileCall {
                buffer_ref: Some(self.actual_refs.mint()),
                ..c
            }
        } else {
            c
        }
    }

    fn write_payload(&mut self, c: &FileCall) -> Option<Vec<u8>> {
        (c.kind == CallKind::Write).then(|| {
            let mut v = vec![0u8; c.size as usize];
            self.payload.fill_bytes(&mut v);
            v
        })
    }

    fn event_loop(&mut self, end: u64) -> Result<()> {
        loop {
            let fids_t = self.fids.as_ref().and_then(Fids::next_deadline).unwrap_or(u64::MAX);
            let (stream_t, id) = self
                .streams
                .iter()
                .map(|(id, s)| (s.next_time(), *id))
                .min()
                .ok_or(Error::Invariant("no living stream".into()))?;
            let now = fids_t.min(stream_t);
            if now >= end {
                return Ok(());
            }
            if fids_t <= stream_t {
                self.shuffle_step(now)?;
            } else {
                self.advance(id, now)?;
            }
        }
    }

    fn advance(&mut self, id: usize, now: u64) -> Result<()> {
        let s = self.streams.get_mut(&id).expect("picked from map");
        if let Some(c) = s.pending.pop_front() {
            return self.execute(id, c, now);
        }
        let batch = match s.replayer.as_mut() {
            Some(r) => match r.poll(&self.lib, &self.plan, &self.actual_stats, &mut self.padder, now)? {
                Some(b) => b,
                None => return Ok(()),
            },
            None => {
                let i = self.rng.random_range(0..self.lib.len());
                let seg = self.lib.get(i).expect("index in range");
                let calls: Vec<FileCall> = self.padder.pad(seg, now);
                let calls: Vec<FileCall> = calls.into_iter().map(|c| self.with_ref(c)).collect();
                let s = self.streams.get_mut(&id).expect("present");
                s.current = Some((i, calls.clone()));
                self.replay.actual_segments += 1;
                s.pending.extend(calls);
                return Ok(());
            }
        };
        let s = self.streams.get_mut(&id).expect("present");
        self.replay.sybil_segments += 1;
        if batch.calls.windows(2).any(|w| w[1].timestamp - w[0].timestamp != batch.gap_us) {
            self.replay.gap_violations += 1;
        }
        s.pending.extend(batch.calls);
        Ok(())
    }

    fn execute(&mut self, id: usize, call: FileCall, now: u64) -> Result<()> {
        let data = {
            let s = &self.streams[&id];
            if s.is_actual() {
                self.actual_stats.record(&call);
            }
            s.is_actual()
        }
        .then(|| self.write_payload(&call))
        .flatten();
        let s = self.streams.get_mut(&id).expect("present");
        let adj = adjust_for_image(&call, &s.fs);
        if adj.action != AdjustAction::Unchanged {
            *self.replay.adjusted.entry(action_name(&adj.action).into()).or_default() += 1;
        }
        let data = data.map(|mut d| {
            d.resize(adj.call.size as usize, 0);
            d
        });
        let res = self.bs.run_file_call(&mut s.fs, &adj.call, data.as_deref())?;
        let actual = s.is_actual();
        let name = s.name;
        s.executed.push(adj.call);
        let (raw, rep) = if actual {
            self.replay.actual_calls += 1;
            (&mut self.delays.actual_raw, &mut self.delays.actual_reported)
        } else {
            self.replay.sybil_calls += 1;
            (&mut self.delays.sybil_raw, &mut self.delays.sybil_reported)
        };
        for &(r, p) in &res.delays {
            raw.push(r as f64);
            rep.push(p as f64);
        }
        let role = if actual { "actual" } else { "sybil" };
        self.call_delays.entry(role).or_default().push(res.metadata_delay_ns);

        if actual && s.pending.is_empty() {
            s.wake = now + 1 + exp_sample(&mut self.rng, self.cfg.mean_idle_ms * 1000.0);
            let (i, calls) = s.current.take().expect("segment in flight");
            if self.cfg.renew {
                let label = self.lib.get(i).expect("index in range").secret_label.clone();
                self.deployed += 1;
                self.lib
                    .ingest(TraceSegment::new(calls, label, SegmentSource::Deployment, self.deployed)?);
            }
        }
        if let Some(f) = self.fids.as_mut() {
            f.note_call(name);
            if !f.check_triggers(now).is_empty() {
                self.shuffle_step(now)?;
            }
        }
        Ok(())
    }

    fn shuffle_step(&mut self, now: u64) -> Result<()> {
        let fids = self.fids.as_mut().expect("shuffling enabled");
        for r in fids.step(now, &mut self.bs)? {
            match r {
                Rebinding::Cloned { from, to } => {
                    let mut fs = self.by_name(from)?.fs.clone();
                    fs.set_image(to);
                    let rep = Replayer::new(self.rng.random(), now).with_baseline(self.actual_stats.totals);
                    self.add_stream(to, fs, Some(rep), now, now);
                }
                Rebinding::Renamed(map) => {
                    for s in self.streams.values_mut() {
                        if let Some(&n) = map.get(&s.name) {
                            s.name = n;
                            s.fs.set_image(n);
                        }
                    }
                }
                Rebinding::Retired(name) => {
                    let id = self
                        .streams
                        .iter()
                        .find(|(_, s)| s.name == name)
                        .map(|(id, _)| *id)
                        .ok_or(Error::UnknownImage(name))?;
                    let mut s = self.streams.remove(&id).expect("found");
                    s.died = Some(now);
                    self.dead.push(s);
                }
            }
        }
        Ok(())
    }

    fn by_name(&self, name: DiskName) -> Result<&Stream> {
        self.streams
            .values()
            .find(|s| s.name == name)
            .ok_or(Error::UnknownImage(name))
    }

    fn band(&mut self, end: u64) {
        let w = self.plan.window_us;
        let actual = self.streams.values().find(|s| s.is_actual()).expect("actual never retires");
        for s in self.streams.values().chain(&self.dead).filter(|s| !s.is_actual()) {
            let start = s.born.div_ceil(w) * w;
            let stop = s.died.unwrap_or(end);
            let a = windowed_totals(&actual.executed, start, stop, w);
            let b = windowed_totals(&s.executed, start, stop, w);
            self.replay.band_windows += a.len() as u64;
            for v in band_violations(&a, &b, self.plan.band) {
                self.replay.band_violations += 1;
                self.replay.worst_band_error = self.replay.worst_band_error.max(v.relative_error);
            }
        }
    }

    fn finish(mut self, end: u64) -> Result<RunArtifacts> {
        self.band(end);
        self.replay.max_gap_us = self.padder.max_gap();
        let cfg = self.cfg.clone();

        let sybils = self.bs.sybil_names().len() as u64;
        let btt = self.bs.btt();
        let allocated = btt.blob().allocated();
        let referenced = btt.referenced_blob_blocks().len() as u64;
        let stats = self.bs.stats().clone();
        let storage = StorageMetrics {
            sybil_blob_bytes: self.bs.blob_bytes(),
            blob_bytes_per_sybil_image: if sybils == 0 {
                0.0
            } else {
                self.bs.blob_bytes() as f64 / sybils as f64
            },
            actual_region_bytes: self.bs.region_blocks() * BLOCK_SIZE as u64,
            actual_filedata_bytes_written: stats.actual_filedata_writes * BLOCK_SIZE as u64,
            sybil_filedata_blocks: self.bs.stored_sybil_filedata_blocks(),
            blob_blocks_allocated: allocated,
            blob_blocks_referenced: referenced,
            shared_region_refs: self.bs.shared_region_refs() as u64,
            cow_copies: stats.cow_copies,
            repurpose_erasures: stats.repurpose_erasures,
            sybil_filedata_writes_discarded: stats.sybil_filedata_writes_discarded,
            sybils_at_end: sybils,
        };
        if storage.sybil_blob_bytes != allocated * BLOCK_SIZE as u64 {
            return Err(Error::Invariant(format!(
                "blob bytes {} do not reconcile with {allocated} allocated blocks",
                storage.sybil_blob_bytes
            )));
        }
        if referenced != allocated {
            return Err(Error::Invariant(format!(
                "{allocated} blob blocks allocated but {referenced} referenced"
            )));
        }
        if storage.sybil_filedata_blocks != 0 {
            return Err(Error::Invariant(format!("{} sybil filedata blocks stored", storage.sybil_filedata_blocks)));
        }

        let observations = self.bs.take_log();
        let executed = self.replay.actual_calls + self.replay.sybil_calls;
        let call_records = observations
            .records()
            .iter()
            .filter(|o| matches!(o, crate::backstore::Observation::Call { .. }))
            .count() as u64;
        if observations.is_enabled() && call_records != executed {
            return Err(Error::Invariant(format!(
                "{call_records} call observations for {executed} executed calls"
            )));
        }

        let (lineage, counts) = match &self.fids {
            Some(f) => (f.log().to_vec(), f.counts()),
            None => Default::default(),
        };
        let p_curve = match &self.fids {
            Some(_) => anonymity_curve(&lineage, self.initial_actual)?,
            None => vec![AnonymityPoint {
                r: 0,
                event: None,
                m: 1,
                p: Ratio::from_integer(1),
            }],
        };
        let audit = match &self.fids {
            Some(_) => Some(extinct_lineage_audit(&lineage)?),
            None => None,
        };
        let mi = |a: &[f64], b: &[f64]| match timing_mutual_information(a, b) {
            Ok(v) => Ok(Some(v)),
            Err(Error::InsufficientSamples { .. }) => Ok(None),
            Err(e) => Err(e),
        };
        let d = &self.delays;
        let report = MetricsReport {
            end_time_us: end,
            library: self.lib.stats()?,
            storage,
            guess_rate: random_guess_attack(cfg.k, Some(self.lib.cardinality() as u64), cfg.guess_trials, cfg.seed)?,
            p_curve,
            audit,
            max_name_lifetime_us: self.fids.as_ref().map(|_| max_name_lifetime(&lineage, end)),
            padding_threshold_ns: self.bs.delay_model().pad_threshold_ns,
            mi_pre: mi(&d.actual_raw, &d.sybil_raw)?,
            mi_post: mi(&d.actual_reported, &d.sybil_reported)?,
            call_delay_stats: self
                .call_delays
                .iter()
                .map(|(k, v)| (k.to_string(), DelayStats::of(v)))
                .collect(),
            fids_op_counts: counts,
            replay: self.replay.clone(),
            observations: observations.records().len() as u64,
            config: cfg,
        };
        Ok(RunArtifacts {
            report,
            observations,
            lineage,
            delays: self.delays,
        })
    }
}
