use super::*;
use crate::ids::RefMint;
use crate::simfs::{FsOptions, OpenFlags};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ACT: DiskName = DiskName(0xa0);
const SYB: DiskName = DiskName(0xb0);
const BLOCKS: u64 = 2048;

struct Rig {
    bs: Backstore,
    fs: BTreeMap<DiskName, SimFs>,
    refs: RefMint<ChaCha8Rng>,
}

impl Rig {
    /// An actual image plus one CoW sybil clone, both formatted.
    fn new() -> Self {
        let mut bs = Backstore::new(BackstoreConfig::new(1, BLOCKS)).unwrap();
        bs.add_image(ACT, Role::Actual).unwrap();
        let (fs, reqs) = SimFs::mkfs(ACT, BLOCKS, FsOptions::default()).unwrap();
        for r in &reqs {
            bs.handle_request(r).unwrap();
        }
        bs.clone_image(ACT, SYB).unwrap();
        let mut sy = fs.clone();
        sy.set_image(SYB);
        let fs = BTreeMap::from([(ACT, fs), (SYB, sy)]);
        Self {
            bs,
            fs,
            refs: RefMint::new(ChaCha8Rng::seed_from_u64(3)),
        }
    }

    fn write(&mut self, img: DiskName, path: &str, off: u64, data: &[u8]) -> CallResult {
        let call = FileCall::write(path, off, data.len() as u64, self.refs.mint()).with_flags(OpenFlags::CREATE);
        let fs = self.fs.get_mut(&img).unwrap();
        self.bs.run_file_call(fs, &call, Some(data)).unwrap()
    }

    fn read(&mut self, img: DiskName, path: &str, off: u64, len: u64) -> Vec<u8> {
        let call = FileCall::read(path, off, len, self.refs.mint());
        let fs = self.fs.get_mut(&img).unwrap();
        self.bs.run_file_call(fs, &call, None).unwrap().data
    }

    fn call(&mut self, img: DiskName, call: FileCall) {
        let fs = self.fs.get_mut(&img).unwrap();
        self.bs.run_file_call(fs, &call, None).unwrap();
    }
}

fn pattern(len: usize, seed: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed) | 0x80).collect()
}

#[test]
fn clones_start_with_identical_metadata() {
    let mut rig = Rig::new();
    assert_eq!(rig.bs.metadata_digest(ACT).unwrap(), rig.bs.metadata_digest(SYB).unwrap());
    assert_eq!(rig.bs.blob_bytes(), 0);
}

#[test]
fn actual_filedata_round_trips_through_opaque_buffers() {
    let mut rig = Rig::new();
    let data = pattern(3 * BLOCK_SIZE + 17, 1);
    rig.write(ACT, "/f", 0, &data);
    assert_eq!(rig.read(ACT, "/f", 0, data.len() as u64), data);
    assert_eq!(rig.read(ACT, "/f", 4000, 200), data[4000..4200].to_vec());
}

#[test]
fn sybil_filedata_is_dropped_with_identical_responses() {
    let mut rig = Rig::new();
    let data = pattern(8 * BLOCK_SIZE, 2);
    let blob_before = rig.bs.blob_bytes();
    // Put the file in place on both, then compare the 8-block overwrite.
    rig.write(ACT, "/f", 0, &[1]);
    rig.write(SYB, "/f", 0, &[1]);
    let blob_mid = rig.bs.blob_bytes();
    let before = rig.bs.log().records().len();
    rig.write(ACT, "/f", 0, &data);
    let mid = rig.bs.log().records().len();
    rig.write(SYB, "/f", 0, &data);
    let recs = rig.bs.log().records();
    let a: Vec<_> = recs[before..mid].iter().map(|r| r.with_image(SYB)).collect();
    let s: Vec<_> = recs[mid..].iter().map(|r| r.with_image(SYB)).collect();
    let strip = |v: Vec<Observation>| -> Vec<Observation> {
        v.into_iter()
            .map(|o| match o {
                Observation::Disk { seq: _, kind, image, op, vblock, clazz, accepted, delay_ns, response } => {
                    Observation::Disk { seq: 0, kind, image, op, vblock, clazz, accepted, delay_ns: delay_ns.map(|_| 0), response }
                }
                Observation::Call { seq: _, image, mut call } => {
                    call.buffer_ref = None;
                    Observation::Call { seq: 0, image, call }
                }
            })
            .collect()
    };
    assert_eq!(strip(a), strip(s));
    // Only metadata CoW growth, no filedata, on the sybil side.
    assert!(rig.bs.blob_bytes() - blob_mid <= 4 * BLOCK_SIZE as u64);
    assert!(blob_mid >= blob_before);
    assert_eq!(rig.read(SYB, "/f", 0, 16), vec![0; 16]);
    assert_eq!(rig.bs.stored_sybil_filedata_blocks(), 0);
}

#[test]
fn probe_reads_return_only_os_written_bytes() {
    let mut rig = Rig::new();
    let data = pattern(BLOCK_SIZE, 3);
    rig.write(ACT, "/f", 0, &data);
    rig.write(SYB, "/f", 0, &data);
    let data_block = *rig.fs[&ACT].layout().data_block_set.iter().next().unwrap();
    let a = rig.bs.os_read_block(ACT, data_block).unwrap();
    let s = rig.bs.os_read_block(SYB, data_block).unwrap();
    assert_eq!(a, vec![0; BLOCK_SIZE]);
    assert_eq!(a, s);
    assert_eq!(rig.bs.os_read_block(ACT, BLOCKS - 1).unwrap(), vec![0; BLOCK_SIZE]);

    let inode_block = rig.fs[&ACT].layout().inode_block(2);
    assert_ne!(rig.bs.os_read_block(ACT, inode_block).unwrap(), vec![0; BLOCK_SIZE]);
    let bytes = pattern(BLOCK_SIZE, 9);
    rig.bs.os_write_block(SYB, BLOCKS - 2, &bytes).unwrap();
    assert_eq!(rig.bs.os_read_block(SYB, BLOCKS - 2).unwrap(), bytes);
}

#[test]
fn repurposed_filedata_is_erased() {
    let mut rig = Rig::new();
    let data = pattern(BLOCK_SIZE, 4);
    rig.write(ACT, "/f", 0, &data);
    let b = *rig.fs[&ACT].layout().data_block_set.iter().next().unwrap();
    rig.call(ACT, FileCall::new(CallKind::Unlink, "/f"));
    rig.call(ACT, FileCall::new(CallKind::Mkdir, "/d"));
    assert!(rig.fs[&ACT].layout().directory_block_set.contains(&b));
    assert_eq!(rig.bs.block_state(ACT, b).unwrap().tag, BlockTag::Metadata);
    let view = rig.bs.os_read_block(ACT, b).unwrap();
    assert!(!view.windows(16).any(|w| data.windows(16).any(|d| d == w)));
    assert!(rig.bs.stats().repurpose_erasures >= 1);
}

#[test]
fn raw_repurpose_gives_the_same_transcript_with_or_without_prior_filedata() {
    let transcript = |with_data: bool| {
        let mut rig = Rig::new();
        if with_data {
            let data = pattern(BLOCK_SIZE, 5);
            rig.write(ACT, "/f", 0, &data);
        } else {
            rig.call(ACT, FileCall::new(CallKind::Create, "/f"));
        }
        let b = rig.fs[&ACT].layout().data_region_start() + 1;
        let from = rig.bs.log().records().len();
        rig.bs.os_write_block(ACT, b, &[7; BLOCK_SIZE]).unwrap();
        rig.bs.os_read_block(ACT, b).unwrap();
        rig.bs.os_read_block(ACT, b + 1).unwrap();
        rig.bs.log().records()[from..]
            .iter()
            .map(|o| match o.clone() {
                Observation::Disk { kind, image, op, vblock, clazz, accepted, response, .. } => {
                    (kind, image, op, vblock, clazz, accepted, response)
                }
                Observation::Call { .. } => unreachable!(),
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(transcript(true), transcript(false));
}

#[test]
fn unknown_refs_are_rejected() {
    let mut rig = Rig::new();
    rig.write(ACT, "/f", 0, &[1; 10]);
    let call = FileCall::read("/f", 0, 10, OpaqueRef(12345));
    let reqs = rig.fs.get_mut(&ACT).unwrap().exec_file_call(&call).unwrap();
    let r = reqs.iter().find(|r| r.clazz != BlockClass::Metadata).unwrap();
    assert!(!rig.bs.handle_request(r).unwrap().accepted);
    assert_eq!(rig.bs.stats().rejected_refs, 1);
}

#[test]
fn inlined_files_round_trip_for_actual_and_vanish_for_sybils() {
    let mut rig = Rig::new();
    let key = pattern(100, 6);
    rig.write(ACT, "/k", 0, &key);
    rig.write(SYB, "/k", 0, &key);
    assert!(rig.fs[&ACT].stat("/k").unwrap().inlined);
    assert_eq!(rig.read(ACT, "/k", 0, 100), key);
    assert_eq!(rig.read(SYB, "/k", 0, 100), vec![0; 100]);
    assert_eq!(rig.bs.metadata_digest(ACT).unwrap(), rig.bs.metadata_digest(SYB).unwrap());
    // Extending the file moves it out of the inode.
    let tail = pattern(300, 7);
    rig.write(ACT, "/k", 100, &tail);
    let mut all = key.clone();
    all.extend(&tail);
    assert_eq!(rig.read(ACT, "/k", 0, 400), all);
    assert_eq!(rig.bs.stored_sybil_filedata_blocks(), 0);
}

#[test]
fn no_os_response_carries_actual_filedata() {
    let mut rig = Rig::new();
    let mut seen: Vec<Vec<u8>> = Vec::new();
    let secret = vec![0xEE; 150];
    rig.write(ACT, "/k", 0, &secret);
    rig.write(ACT, "/big", 0, &vec![0xEE; 3 * BLOCK_SIZE]);
    rig.write(SYB, "/k", 0, &secret);
    for v in 0..BLOCKS {
        seen.push(rig.bs.os_read_block(ACT, v).unwrap());
        seen.push(rig.bs.os_read_block(SYB, v).unwrap());
        let r = rig.bs.handle_request(&DiskRequest::metadata_read(ACT, v)).unwrap();
        seen.extend(r.data);
    }
    for b in seen {
        assert!(!b.windows(8).any(|w| w == [0xEE; 8]));
    }
}

#[test]
fn metadata_delays_are_padded() {
    let mut rig = Rig::new();
    let samples = rig.bs.sample_region_delays(1000);
    let m = rig.bs.profile_and_set_padding(&samples, 0.99).unwrap();
    let t = m.pad_threshold_ns.unwrap();
    let mut below = 0;
    for v in 0..200 {
        let r = rig.bs.handle_request(&DiskRequest::metadata_read(SYB, v % 20)).unwrap();
        assert!(r.delay_ns.unwrap() >= t);
        if r.raw_ns.unwrap() < t {
            below += 1;
            assert_eq!(r.delay_ns, Some(t));
        }
    }
    assert!(below > 150);
}

#[test]
fn observation_log_round_trips_as_jsonl() {
    let mut rig = Rig::new();
    rig.write(ACT, "/f", 0, &[1; 10]);
    let mut out = Vec::new();
    rig.bs.log().write_jsonl(&mut out).unwrap();
    let back = ObservationLog::read_jsonl(std::str::from_utf8(&out).unwrap()).unwrap();
    assert_eq!(back, rig.bs.log().records());
}
