//! Mediator between the OS and physical storage for all K images.
//!
//! The actual image is executed in full against a contiguous region. Sybil
//! images keep only metadata, in the shared blob; their filedata requests
//! are accepted and dropped. The OS may read back only blocks it wrote
//! itself, and metadata delays are padded.

mod delay;
mod observe;

pub use delay::{DelayModel, LatencyModel, LatencyParams, MIN_PROFILE_SAMPLES};
pub use observe::{DiskEventKind, Observation, ObservationLog};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::btt::{BttSet, PBlock};
use crate::ids::{Digest, DiskName, OpaqueRef};
use crate::simfs::{
    BlockClass, CallKind, DataWindow, DiskOp, DiskRequest, FileCall, InlineSpan, Payload, SimFs, BLOCK_SIZE,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "lowercase")]
pub enum BlockTag {
    Metadata,
    Filedata,
    Mixed { spans: Vec<InlineSpan> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockState {
    pub tag: BlockTag,
    /// The OS wrote the current contents and may read them back.
    pub os_written: bool,
    /// Contents are physically stored.
    pub materialized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Actual,
    Sybil,
}

#[derive(Debug, Clone)]
struct ImageState {
    role: Role,
    blocks: BTreeMap<u64, BlockState>,
    digest: Option<Digest>,
}

/// What the OS gets back for a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    /// OS-visible bytes, for metadata and mixed reads.
    pub data: Option<Vec<u8>>,
    /// Reported delay; `None` for filedata, whose completion bypasses the OS.
    pub delay_ns: Option<u64>,
    /// Raw service time. Backstore-internal, never logged.
    pub raw_ns: Option<u64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackstoreConfig {
    pub seed: u64,
    pub disk_blocks: u64,
    pub blob_capacity: u64,
    pub cow: bool,
    pub latency: LatencyParams,
    pub record_observations: bool,
}

impl BackstoreConfig {
    pub fn new(seed: u64, disk_blocks: u64) -> Self {
        Self {
            seed,
            disk_blocks,
            blob_capacity: 1 << 24,
            cow: true,
            latency: LatencyParams::default(),
            record_observations: true,
        }
    }
}

/// Counters describing where bytes went.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub actual_filedata_writes: u64,
    pub sybil_filedata_writes_discarded: u64,
    pub sybil_filedata_reads_zeroed: u64,
    pub repurpose_erasures: u64,
    pub cow_copies: u64,
    pub rejected_refs: u64,
}

pub struct Backstore {
    cfg: BackstoreConfig,
    btt: BttSet,
    region: BTreeMap<u64, Vec<u8>>,
    images: BTreeMap<DiskName, ImageState>,
    buffers: BTreeMap<OpaqueRef, Vec<u8>>,
    latency: LatencyModel,
    delay: DelayModel,
    log: ObservationLog,
    stats: StoreStats,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallResult {
    /// Bytes delivered to the trustlet by a read.
    pub data: Vec<u8>,
    pub requests: usize,
    /// Sum of reported metadata delays.
    pub metadata_delay_ns: u64,
    pub raw_metadata_ns: u64,
    /// Raw and reported delay of each metadata request, in order.
    pub delays: Vec<(u64, u64)>,
}

fn zero_block() -> Vec<u8> {
    vec![0; BLOCK_SIZE]
}

fn digest_of(bytes: Option<&[u8]>) -> Digest {
    Digest::of(bytes.unwrap_or(&[]))
}

impl Backstore {
    pub fn new(cfg: BackstoreConfig) -> Result<Self> {
        Ok(Self {
            btt: BttSet::new(cfg.seed ^ 0xb77, cfg.blob_capacity, cfg.cow),
            latency: LatencyModel::new(cfg.latency, cfg.seed ^ 0x1a7)?,
            delay: DelayModel::unpadded(0.99),
            log: ObservationLog::new(cfg.record_observations),
            region: BTreeMap::new(),
            images: BTreeMap::new(),
            buffers: BTreeMap::new(),
            stats: StoreStats::default(),
            cfg,
        })
    }

    pub fn config(&self) -> &BackstoreConfig {
        &self.cfg
    }

    pub fn btt(&self) -> &BttSet {
        &self.btt
    }

    pub fn stats(&self) -> &StoreStats {
        &self.stats
    }

    pub fn log(&self) -> &ObservationLog {
        &self.log
    }

    pub fn take_log(&mut self) -> ObservationLog {
        std::mem::replace(&mut self.log, ObservationLog::new(self.cfg.record_observations))
    }

    pub fn delay_model(&self) -> &DelayModel {
        &self.delay
    }

    pub fn set_delay_model(&mut self, m: DelayModel) {
        self.delay = m;
    }

    pub fn images(&self) -> impl Iterator<Item = DiskName> + '_ {
        self.images.keys().copied()
    }

    pub fn actual(&self) -> Option<DiskName> {
        self.btt.actual()
    }

    pub fn role(&self, image: DiskName) -> Option<Role> {
        self.images.get(&image).map(|s| s.role)
    }

    pub fn block_state(&self, image: DiskName, vblock: u64) -> Option<&BlockState> {
        self.images.get(&image)?.blocks.get(&vblock)
    }

    /// Registers an empty disk.
    pub fn add_image(&mut self, name: DiskName, role: Role) -> Result<()> {
        if self.images.contains_key(&name) {
            return Err(Error::DuplicateImage(name));
        }
        self.btt.create(name, role == Role::Actual)?;
        self.images.insert(
            name,
            ImageState {
                role,
                blocks: BTreeMap::new(),
                digest: None,
            },
        );
        Ok(())
    }

    /// Creates `dst` as a copy-on-write sybil clone of `src`'s metadata.
    pub fn clone_image(&mut self, src: DiskName, dst: DiskName) -> Result<()> {
        let st = self.images.get(&src).ok_or(Error::UnknownImage(src))?;
        let mut blocks = st.blocks.clone();
        for b in blocks.values_mut() {
            if b.tag == BlockTag::Filedata {
                b.materialized = false;
            }
        }
        let digest = st.digest;
        let copies = self.btt.fork(src, dst)?;
        self.sanitized_copies(src, &copies);
        self.images.insert(
            dst,
            ImageState {
                role: Role::Sybil,
                blocks,
                digest,
            },
        );
        Ok(())
    }

    /// Rebinds images under fresh names after checking their metadata is
    /// identical. Returns the old→new renaming.
    pub fn shuffle(&mut self, participants: &[DiskName], products: &[DiskName]) -> Result<BTreeMap<DiskName, DiskName>> {
        let mut with_digests = Vec::with_capacity(participants.len());
        for &p in participants {
            with_digests.push((p, self.metadata_digest(p)?));
        }
        let renaming = self.btt.shuffle(&with_digests, products)?;
        let moved: Vec<(DiskName, ImageState)> = renaming
            .iter()
            .map(|(old, new)| (*new, self.images.remove(old).expect("registered")))
            .collect();
        self.images.extend(moved);
        Ok(renaming)
    }

    pub fn retire(&mut self, image: DiskName) -> Result<()> {
        self.btt.retire(image)?;
        self.images.remove(&image);
        Ok(())
    }

    /// Makes `bytes` available to the filedata path under `token` for the
    /// duration of one file call.
    pub fn begin_call(&mut self, token: OpaqueRef, bytes: Vec<u8>) {
        self.buffers.insert(token, bytes);
    }

    /// Retires `token`, returning the buffer contents.
    pub fn end_call(&mut self, token: OpaqueRef) -> Option<Vec<u8>> {
        self.buffers.remove(&token)
    }

    /// Records a file call as the OS sees it.
    pub fn observe_call(&mut self, image: DiskName, call: &FileCall) {
        let seq = self.log.next_seq();
        self.log.push(Observation::Call {
            seq,
            image,
            call: call.clone(),
        });
    }

    pub fn handle_request(&mut self, req: &DiskRequest) -> Result<Response> {
        let role = self.role(req.image).ok_or(Error::UnknownImage(req.image))?;
        let resp = if !req.is_well_formed() {
            Response {
                data: None,
                delay_ns: None,
                raw_ns: None,
                accepted: false,
            }
        } else {
            match (&req.payload, req.op) {
                (Payload::OsBuffer(_), DiskOp::Read) => self.metadata_read(req.image, req.vblock),
                (Payload::OsBuffer(Some(bytes)), DiskOp::Write) => {
                    self.metadata_write(req.image, req.vblock, bytes)?
                }
                (Payload::Mixed { os, spans, data }, op) => {
                    self.mixed(req.image, role, req.vblock, op, os.as_deref(), spans, *data)?
                }
                (Payload::Opaque(w), op) => self.filedata(req.image, role, req.vblock, op, *w)?,
                (Payload::InlineCarry { from_vblock, span, .. }, _) => {
                    self.carry(req.image, role, req.vblock, *from_vblock, *span)?
                }
                (Payload::OsBuffer(None), DiskOp::Write) => unreachable!("rejected as malformed"),
            }
        };
        let seq = self.log.next_seq();
        self.log.push(Observation::Disk {
            seq,
            kind: DiskEventKind::Request,
            image: req.image,
            op: req.op,
            vblock: req.vblock,
            clazz: req.clazz,
            accepted: resp.accepted,
            delay_ns: resp.delay_ns,
            response: digest_of(resp.data.as_deref()),
        });
        Ok(resp)
    }

    /// Raw block read by the OS: the stored bytes if the OS wrote them,
    /// zeros otherwise.
    pub fn os_read_block(&mut self, image: DiskName, vblock: u64) -> Result<Vec<u8>> {
        if !self.images.contains_key(&image) {
            return Err(Error::UnknownImage(image));
        }
        let view = self.os_view(image, vblock);
        let seq = self.log.next_seq();
        self.log.push(Observation::Disk {
            seq,
            kind: DiskEventKind::Probe,
            image,
            op: DiskOp::Read,
            vblock,
            clazz: BlockClass::Metadata,
            accepted: true,
            delay_ns: None,
            response: Digest::of(&view),
        });
        Ok(view)
    }

    /// Raw block write by the OS. A filedata block is erased before the
    /// write is granted and becomes metadata.
    pub fn os_write_block(&mut self, image: DiskName, vblock: u64, bytes: &[u8]) -> Result<()> {
        let req = DiskRequest::metadata_write(image, vblock, bytes.to_vec());
        self.handle_request(&req).map(|_| ())
    }

    /// Samples raw metadata service times of the actual image's device.
    pub fn sample_region_delays(&mut self, n: usize) -> Vec<u64> {
        (0..n).map(|_| self.latency.sample(PBlock::Region(0))).collect()
    }

    pub fn profile_and_set_padding(&mut self, samples: &[u64], percentile: f64) -> Result<DelayModel> {
        let m = DelayModel::profile(samples, percentile)?;
        self.delay = m.clone();
        Ok(m)
    }

    /// Digest of the OS-visible metadata of `image`.
    pub fn metadata_digest(&mut self, image: DiskName) -> Result<Digest> {
        let st = self.images.get(&image).ok_or(Error::UnknownImage(image))?;
        if let Some(d) = st.digest {
            return Ok(d);
        }
        let written: Vec<u64> = st.blocks.iter().filter(|(_, b)| b.os_written).map(|(v, _)| *v).collect();
        let mut h = Sha256::new();
        for v in written {
            h.update(v.to_le_bytes());
            h.update(self.os_view(image, v));
        }
        let d = Digest(h.finalize().into());
        self.images.get_mut(&image).expect("present").digest = Some(d);
        Ok(d)
    }

    /// Physical blocks holding sybil filedata. Zero by construction; the
    /// count is recomputed from raw state so tests can check it.
    pub fn stored_sybil_filedata_blocks(&self) -> u64 {
        let mut n = 0;
        for (name, st) in &self.images {
            if st.role != Role::Sybil {
                continue;
            }
            for (v, b) in &st.blocks {
                let mapped = self.btt.lookup(*name, *v);
                match &b.tag {
                    BlockTag::Filedata => {
                        n += u64::from(b.materialized || mapped.is_some());
                    }
                    BlockTag::Mixed { spans } => {
                        if let Some(p @ PBlock::Blob(_)) = mapped {
                            let bytes = self.read_p(p);
                            n += u64::from(spans.iter().any(|s| bytes[s.range()].iter().any(|&x| x != 0)));
                        }
                    }
                    BlockTag::Metadata => {}
                }
            }
        }
        n
    }

    /// Region blocks holding actual-image content.
    pub fn region_blocks(&self) -> u64 {
        self.region.len() as u64
    }

    pub fn blob_bytes(&self) -> u64 {
        self.btt.blob().bytes()
    }

    /// Region blocks mapped by sybil images only through sharing with the
    /// actual image.
    pub fn shared_region_refs(&self) -> usize {
        self.images
            .iter()
            .filter(|(_, s)| s.role == Role::Sybil)
            .map(|(n, s)| {
                s.blocks
                    .keys()
                    .filter(|v| matches!(self.btt.lookup(*n, **v), Some(PBlock::Region(_))))
                    .count()
            })
            .sum()
    }

    fn read_p(&self, p: PBlock) -> Vec<u8> {
        match p {
            PBlock::Region(v) => self.region.get(&v).cloned().unwrap_or_else(zero_block),
            PBlock::Blob(b) => self.btt.blob().read(b),
        }
    }

    fn write_p(&mut self, p: PBlock, bytes: Vec<u8>) {
        match p {
            PBlock::Region(v) => {
                self.region.insert(v, bytes);
            }
            PBlock::Blob(b) => self.btt.blob_mut().write(b, bytes),
        }
    }

    /// Performs block copies, scrubbing inlined filedata from anything that
    /// lands in the blob.
    fn sanitized_copies(&mut self, image: DiskName, copies: &[(PBlock, PBlock)]) {
        for &(from, to) in copies {
            let mut bytes = self.read_p(from);
            if matches!(to, PBlock::Blob(_)) {
                if let PBlock::Region(v) = from {
                    let spans = self
                        .images
                        .get(&image)
                        .and_then(|s| s.blocks.get(&v))
                        .map(|b| match &b.tag {
                            BlockTag::Mixed { spans } => spans.clone(),
                            _ => Vec::new(),
                        })
                        .unwrap_or_default();
                    for s in spans {
                        bytes[s.range()].fill(0);
                    }
                }
            }
            self.write_p(to, bytes);
            self.stats.cow_copies += 1;
        }
    }

    fn os_view(&self, image: DiskName, vblock: u64) -> Vec<u8> {
        let Some(st) = self.images.get(&image).and_then(|s| s.blocks.get(&vblock)) else {
            return zero_block();
        };
        if !st.os_written {
            return zero_block();
        }
        let Some(p) = self.btt.lookup(image, vblock) else {
            return zero_block();
        };
        let mut bytes = self.read_p(p);
        if let BlockTag::Mixed { spans } = &st.tag {
            for s in spans {
                bytes[s.range()].fill(0);
            }
        }
        bytes
    }

    fn padded(&mut self, image: DiskName, vblock: u64) -> (u64, u64) {
        let at = self.btt.lookup(image, vblock).unwrap_or(match self.role(image) {
            Some(Role::Actual) => PBlock::Region(vblock),
            _ => PBlock::Blob(0),
        });
        let raw = self.latency.sample(at);
        (raw, self.delay.report(raw))
    }

    fn metadata_read(&mut self, image: DiskName, vblock: u64) -> Response {
        let data = self.os_view(image, vblock);
        let (raw, reported) = self.padded(image, vblock);
        Response {
            data: Some(data),
            delay_ns: Some(reported),
            raw_ns: Some(raw),
            accepted: true,
        }
    }

    /// Drops whatever filedata `vblock` held before it turns into metadata.
    fn erase_if_filedata(&mut self, image: DiskName, role: Role, vblock: u64) {
        let was_filedata = self
            .images
            .get(&image)
            .and_then(|s| s.blocks.get(&vblock))
            .is_some_and(|b| b.tag == BlockTag::Filedata);
        if was_filedata {
            if role == Role::Actual {
                self.region.remove(&vblock);
            }
            self.stats.repurpose_erasures += 1;
        }
    }

    fn metadata_write(&mut self, image: DiskName, vblock: u64, bytes: &[u8]) -> Result<Response> {
        let role = self.role(image).expect("checked by caller");
        self.erase_if_filedata(image, role, vblock);
        let plan = self.btt.prepare_write(image, vblock)?;
        self.sanitized_copies(image, &plan.copies);
        self.write_p(plan.target, bytes.to_vec());
        self.set_state(
            image,
            vblock,
            BlockState {
                tag: BlockTag::Metadata,
                os_written: true,
                materialized: true,
            },
        );
        let (raw, reported) = self.padded(image, vblock);
        Ok(Response {
            data: None,
            delay_ns: Some(reported),
            raw_ns: Some(raw),
            accepted: true,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn mixed(
        &mut self,
        image: DiskName,
        role: Role,
        vblock: u64,
        op: DiskOp,
        os: Option<&[u8]>,
        spans: &[InlineSpan],
        data: Option<DataWindow>,
    ) -> Result<Response> {
        if let Some(w) = data {
            if !self.buffers.contains_key(&w.token) {
                self.stats.rejected_refs += 1;
                return Ok(self.rejection());
            }
        }
        match op {
            DiskOp::Read => {
                if let Some(w) = data {
                    let chunk = match (role, self.btt.lookup(image, vblock)) {
                        (Role::Actual, Some(p)) => {
                            let stored = self.read_p(p);
                            stored[w.block_offset as usize..(w.block_offset + w.len) as usize].to_vec()
                        }
                        _ => vec![0; w.len as usize],
                    };
                    self.fill_buffer(w, &chunk);
                }
                let mut resp = self.metadata_read(image, vblock);
                resp.data = resp.data.map(|mut d| {
                    for s in spans {
                        d[s.range()].fill(0);
                    }
                    d
                });
                Ok(resp)
            }
            DiskOp::Write => {
                let os = os.expect("well-formed mixed write");
                self.erase_if_filedata(image, role, vblock);
                let old_spans = match self.block_state(image, vblock).map(|b| &b.tag) {
                    Some(BlockTag::Mixed { spans }) => spans.clone(),
                    _ => Vec::new(),
                };
                let plan = self.btt.prepare_write(image, vblock)?;
                self.sanitized_copies(image, &plan.copies);
                let old = self.read_p(plan.target);
                let mut block = os.to_vec();
                for s in spans {
                    for i in s.range() {
                        let kept = role == Role::Actual && old_spans.iter().any(|o| o.range().contains(&i));
                        block[i] = if kept { old[i] } else { 0 };
                    }
                }
                if let (Some(w), Role::Actual) = (data, role) {
                    let buf = &self.buffers[&w.token];
                    let src = &buf[w.buf_offset as usize..w.buf_offset as usize + w.len as usize];
                    block[w.block_offset as usize..(w.block_offset + w.len) as usize].copy_from_slice(src);
                }
                self.write_p(plan.target, block);
                let tag = if spans.is_empty() {
                    BlockTag::Metadata
                } else {
                    BlockTag::Mixed { spans: spans.to_vec() }
                };
                self.set_state(
                    image,
                    vblock,
                    BlockState {
                        tag,
                        os_written: true,
                        materialized: true,
                    },
                );
                if role == Role::Sybil && data.is_some() {
                    self.stats.sybil_filedata_writes_discarded += 1;
                }
                let (raw, reported) = self.padded(image, vblock);
                Ok(Response {
                    data: None,
                    delay_ns: Some(reported),
                    raw_ns: Some(raw),
                    accepted: true,
                })
            }
        }
    }

    fn rejection(&self) -> Response {
        Response {
            data: None,
            delay_ns: None,
            raw_ns: None,
            accepted: false,
        }
    }

    fn fill_buffer(&mut self, w: DataWindow, chunk: &[u8]) {
        let buf = self.buffers.get_mut(&w.token).expect("checked");
        let end = w.buf_offset as usize + chunk.len();
        if buf.len() < end {
            buf.resize(end, 0);
        }
        buf[w.buf_offset as usize..end].copy_from_slice(chunk);
    }

    /// Turns a metadata block into a filedata block for `image`.
    fn demote_to_filedata(&mut self, image: DiskName, role: Role, vblock: u64) -> Result<()> {
        if self.btt.lookup(image, vblock).is_some() {
            self.btt.unmap(image, vblock);
        }
        if role == Role::Actual {
            if let Some(copy) = self.btt.evacuate_region(vblock)? {
                self.sanitized_copies(image, &[copy]);
            }
        }
        Ok(())
    }

    fn filedata(&mut self, image: DiskName, role: Role, vblock: u64, op: DiskOp, w: DataWindow) -> Result<Response> {
        if !self.buffers.contains_key(&w.token) {
            self.stats.rejected_refs += 1;
            return Ok(self.rejection());
        }
        let accepted = Response {
            data: None,
            delay_ns: None,
            raw_ns: None,
            accepted: true,
        };
        let lo = w.block_offset as usize;
        let hi = lo + w.len as usize;
        match op {
            DiskOp::Write => {
                self.demote_to_filedata(image, role, vblock)?;
                if role == Role::Actual {
                    let mut block = match self.block_state(image, vblock) {
                        Some(b) if b.tag == BlockTag::Filedata => self.read_p(PBlock::Region(vblock)),
                        _ => zero_block(),
                    };
                    let buf = &self.buffers[&w.token];
                    block[lo..hi].copy_from_slice(&buf[w.buf_offset as usize..w.buf_offset as usize + w.len as usize]);
                    self.region.insert(vblock, block);
                    self.stats.actual_filedata_writes += 1;
                } else {
                    self.stats.sybil_filedata_writes_discarded += 1;
                }
                self.set_state(
                    image,
                    vblock,
                    BlockState {
                        tag: BlockTag::Filedata,
                        os_written: false,
                        materialized: role == Role::Actual,
                    },
                );
            }
            DiskOp::Read => {
                let chunk = match (role, self.block_state(image, vblock)) {
                    (Role::Actual, Some(b)) if b.tag == BlockTag::Filedata && b.materialized => {
                        self.read_p(PBlock::Region(vblock))[lo..hi].to_vec()
                    }
                    (Role::Sybil, _) => {
                        self.stats.sybil_filedata_reads_zeroed += 1;
                        vec![0; w.len as usize]
                    }
                    _ => vec![0; w.len as usize],
                };
                self.fill_buffer(w, &chunk);
            }
        }
        Ok(accepted)
    }

    fn carry(&mut self, image: DiskName, role: Role, vblock: u64, from: u64, span: InlineSpan) -> Result<Response> {
        self.demote_to_filedata(image, role, vblock)?;
        if role == Role::Actual {
            let src = self
                .btt
                .lookup(image, from)
                .map(|p| self.read_p(p))
                .unwrap_or_else(zero_block);
            let mut block = zero_block();
            block[..span.len as usize].copy_from_slice(&src[span.range()]);
            self.region.insert(vblock, block);
            self.stats.actual_filedata_writes += 1;
        } else {
            self.stats.sybil_filedata_writes_discarded += 1;
        }
        self.set_state(
            image,
            vblock,
            BlockState {
                tag: BlockTag::Filedata,
                os_written: false,
                materialized: role == Role::Actual,
            },
        );
        Ok(Response {
            data: None,
            delay_ns: None,
            raw_ns: None,
            accepted: true,
        })
    }

    fn set_state(&mut self, image: DiskName, vblock: u64, st: BlockState) {
        let img = self.images.get_mut(&image).expect("registered");
        img.blocks.insert(vblock, st);
        img.digest = None;
    }

    /// Runs one file call end to end: the OS sees the call, the filesystem
    /// turns it into requests, and the trustlet buffer lives exactly as long
    /// as the call. `write_data` supplies the bytes of a write; a read's
    /// bytes are returned.
    pub fn run_file_call(&mut self, fs: &mut SimFs, call: &FileCall, write_data: Option<&[u8]>) -> Result<CallResult> {
        if !self.images.contains_key(&fs.image()) {
            return Err(Error::UnknownImage(fs.image()));
        }
        self.observe_call(fs.image(), call);
        let reqs = fs.exec_file_call(call)?;
        self.serve_call(call, &reqs, write_data)
    }

    /// Second half of [`Backstore::run_file_call`], for callers that ran
    /// the filesystem themselves and already reported the call.
    pub fn serve_call(&mut self, call: &FileCall, reqs: &[DiskRequest], write_data: Option<&[u8]>) -> Result<CallResult> {
        if let Some(t) = call.buffer_ref {
            let buf = match write_data {
                Some(d) => d.to_vec(),
                None => vec![0; call.size as usize],
            };
            self.begin_call(t, buf);
        }
        let mut res = CallResult {
            requests: reqs.len(),
            ..CallResult::default()
        };
        let mut failed = None;
        for r in reqs {
            match self.handle_request(r) {
                Ok(resp) => {
                    if let (Some(raw), Some(rep)) = (resp.raw_ns, resp.delay_ns) {
                        res.metadata_delay_ns += rep;
                        res.raw_metadata_ns += raw;
                        res.delays.push((raw, rep));
                    }
                }
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if let Some(t) = call.buffer_ref {
            let buf = self.end_call(t).unwrap_or_default();
            if call.kind == CallKind::Read {
                res.data = buf;
            }
        }
        match failed {
            Some(e) => Err(e),
            None => Ok(res),
        }
    }

    /// Sybil images and their block counts, for reports.
    pub fn sybil_names(&self) -> BTreeSet<DiskName> {
        self.images
            .iter()
            .filter(|(_, s)| s.role == Role::Sybil)
            .map(|(n, _)| *n)
            .collect()
    }
}

#[cfg(test)]
mod tests;
