//! Per-image block translation tables over a shared copy-on-write blob.
//!
//! Entries map an OS-visible metadata block to a physical block, either in
//! the actual image's contiguous region (`dev0`) or in the metadata blob
//! (`dev1`). Entries are stored encrypted; any event that changes sharing
//! re-encrypts every entry involved so that churn is the same for all
//! participants.

mod blob;
mod cipher;
mod persist;

pub use blob::MetadataBlob;
pub use cipher::{BlockCipher, Feistel, Tweak};
pub use persist::{decode_tables, encode_tables, save_atomic, PersistedTable};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{Digest, DiskName};
use crate::{Error, Result};

const BLOB_BIT: u64 = 1 << 63;

/// A physical block: `Region(v)` is block `v` of the actual image's region,
/// `Blob(b)` is block `b` of the shared metadata blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PBlock {
    Region(u64),
    Blob(u64),
}

impl PBlock {
    pub fn encode(self) -> u64 {
        match self {
            PBlock::Region(v) => v,
            PBlock::Blob(b) => b | BLOB_BIT,
        }
    }

    pub fn decode(raw: u64) -> Self {
        if raw & BLOB_BIT != 0 {
            PBlock::Blob(raw & !BLOB_BIT)
        } else {
            PBlock::Region(raw)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BttEntry {
    pub vblock: u64,
    pub ciphertext: u64,
    pub epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Btt {
    nonce: u64,
    entries: BTreeMap<u64, BttEntry>,
}

impl Btt {
    pub fn nonce(&self) -> u64 {
        self.nonce
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BttEntry> {
        self.entries.values()
    }
}

/// What the caller must do to carry out a metadata write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WritePlan {
    /// Block receiving the writer's bytes.
    pub target: PBlock,
    /// Block contents to copy, in order, before writing `target`.
    pub copies: Vec<(PBlock, PBlock)>,
    /// Number of entries re-encrypted, across all tables.
    pub reencrypted: usize,
}

/// All tables, the blob and the TEE-side reference counts.
#[derive(Debug, Clone)]
pub struct BttSet {
    cipher: Feistel,
    rng: ChaCha8Rng,
    tables: BTreeMap<DiskName, Btt>,
    holders: BTreeMap<PBlock, BTreeSet<(DiskName, u64)>>,
    blob: MetadataBlob,
    actual: Option<DiskName>,
    cow: bool,
}

impl BttSet {
    pub fn new(seed: u64, blob_capacity: u64, cow: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cipher = Feistel::new([rng.random(), rng.random()]);
        Self {
            cipher,
            rng,
            tables: BTreeMap::new(),
            holders: BTreeMap::new(),
            blob: MetadataBlob::new(blob_capacity),
            actual: None,
            cow,
        }
    }

    pub fn cow_enabled(&self) -> bool {
        self.cow
    }

    pub fn blob(&self) -> &MetadataBlob {
        &self.blob
    }

    pub fn blob_mut(&mut self) -> &mut MetadataBlob {
        &mut self.blob
    }

    pub fn actual(&self) -> Option<DiskName> {
        self.actual
    }

    pub fn names(&self) -> impl Iterator<Item = DiskName> + '_ {
        self.tables.keys().copied()
    }

    pub fn table(&self, name: DiskName) -> Option<&Btt> {
        self.tables.get(&name)
    }

    pub fn contains(&self, name: DiskName) -> bool {
        self.tables.contains_key(&name)
    }

    /// Registers an empty table. At most one table is the actual image's.
    pub fn create(&mut self, name: DiskName, actual: bool) -> Result<()> {
        if self.tables.contains_key(&name) {
            return Err(Error::DuplicateImage(name));
        }
        if actual {
            if self.actual.is_some() {
                return Err(Error::InvalidConfig("a second actual image".into()));
            }
            self.actual = Some(name);
        }
        let nonce = self.rng.random();
        self.tables.insert(
            name,
            Btt {
                nonce,
                entries: BTreeMap::new(),
            },
        );
        Ok(())
    }

    /// Decrypted physical block of `vblock`, `None` on a miss.
    pub fn lookup(&self, name: DiskName, vblock: u64) -> Option<PBlock> {
        let t = self.tables.get(&name)?;
        let e = t.entries.get(&vblock)?;
        Some(self.decrypt(t.nonce, e))
    }

    pub fn refcount(&self, p: PBlock) -> usize {
        self.holders.get(&p).map_or(0, BTreeSet::len)
    }

    pub fn refcount_total(&self) -> usize {
        self.holders.values().map(BTreeSet::len).sum()
    }

    pub fn entry_total(&self) -> usize {
        self.tables.values().map(Btt::len).sum()
    }

    /// Blob blocks referenced by at least one entry.
    pub fn referenced_blob_blocks(&self) -> BTreeSet<u64> {
        self.holders
            .keys()
            .filter_map(|p| match p {
                PBlock::Blob(b) => Some(*b),
                PBlock::Region(_) => None,
            })
            .collect()
    }

    /// Resolves where a metadata write of `vblock` by `name` lands, mapping
    /// or un-sharing the block as needed.
    ///
    /// A shared block is split: the writer gets a fresh blob block, except
    /// when the writer is the actual image writing its own region block, in
    /// which case the other sharers are moved instead. Either way every
    /// entry that referenced the old block is re-encrypted.
    pub fn prepare_write(&mut self, name: DiskName, vblock: u64) -> Result<WritePlan> {
        if !self.tables.contains_key(&name) {
            return Err(Error::UnknownImage(name));
        }
        let is_actual = self.actual == Some(name);
        let Some(old) = self.lookup(name, vblock) else {
            let target = if is_actual {
                PBlock::Region(vblock)
            } else {
                PBlock::Blob(self.blob.alloc()?)
            };
            self.insert_entry(name, vblock, target);
            return Ok(WritePlan {
                target,
                copies: Vec::new(),
                reencrypted: 0,
            });
        };
        let owns_region = is_actual && old == PBlock::Region(vblock);
        let foreign_region = !is_actual && matches!(old, PBlock::Region(_));
        if self.refcount(old) == 1 && !foreign_region {
            return Ok(WritePlan {
                target: old,
                copies: Vec::new(),
                reencrypted: 0,
            });
        }
        let fresh = PBlock::Blob(self.blob.alloc()?);
        let sharers: Vec<(DiskName, u64)> = self.holders[&old].iter().copied().collect();
        let movers: Vec<(DiskName, u64)> = if owns_region {
            sharers.iter().copied().filter(|&(n, _)| n != name).collect()
        } else {
            vec![(name, vblock)]
        };
        for &(n, v) in &movers {
            self.repoint(n, v, old, fresh);
        }
        let reencrypted = self.reencrypt(&sharers);
        let target = if owns_region { old } else { fresh };
        Ok(WritePlan {
            target,
            copies: vec![(old, fresh)],
            reencrypted,
        })
    }

    /// Drops the entry of `vblock`, returning the blob block freed if the
    /// entry was its last reference.
    pub fn unmap(&mut self, name: DiskName, vblock: u64) -> Option<PBlock> {
        let p = self.lookup(name, vblock)?;
        self.tables.get_mut(&name)?.entries.remove(&vblock);
        self.release(name, vblock, p)
    }

    /// Moves every sybil entry off region block `vblock` into one fresh blob
    /// block, ahead of the actual image reusing that block for filedata.
    /// Returns the copy to perform.
    pub fn evacuate_region(&mut self, vblock: u64) -> Result<Option<(PBlock, PBlock)>> {
        let old = PBlock::Region(vblock);
        let movers: Vec<(DiskName, u64)> = self
            .holders
            .get(&old)
            .map(|h| h.iter().copied().filter(|&(n, _)| Some(n) != self.actual).collect())
            .unwrap_or_default();
        if movers.is_empty() {
            return Ok(None);
        }
        let fresh = PBlock::Blob(self.blob.alloc()?);
        for &(n, v) in &movers {
            self.repoint(n, v, old, fresh);
        }
        let mut all = movers;
        all.extend(self.holders.get(&old).into_iter().flatten().copied());
        self.reencrypt(&all);
        Ok(Some((old, fresh)))
    }

    /// Clones `src` under `dst` without copying blocks (unless CoW is off,
    /// in which case every block is duplicated and the copies returned).
    pub fn fork(&mut self, src: DiskName, dst: DiskName) -> Result<Vec<(PBlock, PBlock)>> {
        let src_table = self.tables.get(&src).ok_or(Error::UnknownImage(src))?;
        if self.tables.contains_key(&dst) {
            return Err(Error::DuplicateImage(dst));
        }
        let mapping: Vec<(u64, PBlock)> = src_table
            .entries
            .values()
            .map(|e| (e.vblock, self.decrypt(src_table.nonce, e)))
            .collect();
        self.create(dst, false)?;
        let mut copies = Vec::new();
        for (v, p) in mapping {
            let target = if self.cow {
                p
            } else {
                let fresh = PBlock::Blob(self.blob.alloc()?);
                copies.push((p, fresh));
                fresh
            };
            self.insert_entry(dst, v, target);
        }
        Ok(copies)
    }

    /// Rebinds the tables of `participants` to `products` under a fresh
    /// random permutation and re-encrypts all their entries. Returns the
    /// secret old→new renaming.
    pub fn shuffle(
        &mut self,
        participants: &[(DiskName, Digest)],
        products: &[DiskName],
    ) -> Result<BTreeMap<DiskName, DiskName>> {
        if participants.len() < 2 {
            return Err(Error::ShuffleTooSmall(participants.len()));
        }
        if products.len() != participants.len() {
            return Err(Error::InvalidConfig("shuffle products must match participants".into()));
        }
        let digest = participants[0].1;
        if participants.iter().any(|(_, d)| *d != digest) {
            return Err(Error::MetadataMismatch);
        }
        for (n, _) in participants {
            if !self.tables.contains_key(n) {
                return Err(Error::UnknownImage(*n));
            }
        }
        let names: BTreeSet<DiskName> = participants.iter().map(|(n, _)| *n).collect();
        if names.len() != participants.len() {
            return Err(Error::DuplicateImage(participants[0].0));
        }
        if products.iter().collect::<BTreeSet<_>>().len() != products.len() {
            return Err(Error::InvalidConfig("shuffle products must be distinct".into()));
        }
        for p in products {
            if self.tables.contains_key(p) && !names.contains(p) {
                return Err(Error::DuplicateImage(*p));
            }
        }
        let mut targets = products.to_vec();
        targets.shuffle(&mut self.rng);

        let mut detached = Vec::new();
        for (n, _) in participants {
            let t = self.tables.remove(n).expect("checked");
            let mapping: Vec<(u64, PBlock)> =
                t.entries.values().map(|e| (e.vblock, self.decrypt(t.nonce, e))).collect();
            for &(v, p) in &mapping {
                self.holders.get_mut(&p).expect("held").remove(&(*n, v));
            }
            detached.push((*n, t, mapping));
        }
        let mut renaming = BTreeMap::new();
        let was_actual = self.actual;
        for ((old, t, mapping), new) in detached.into_iter().zip(targets) {
            let nonce = self.rng.random();
            let mut entries = BTreeMap::new();
            for (v, p) in mapping {
                let epoch = t.entries[&v].epoch + 1;
                let ciphertext = self.cipher.encrypt(p.encode(), Tweak { nonce, vblock: v, epoch });
                entries.insert(v, BttEntry { vblock: v, ciphertext, epoch });
                self.holders.entry(p).or_default().insert((new, v));
            }
            self.tables.insert(new, Btt { nonce, entries });
            if was_actual == Some(old) {
                self.actual = Some(new);
            }
            renaming.insert(old, new);
        }
        Ok(renaming)
    }

    /// Frees a table; blob blocks that lose their last reference are freed.
    pub fn retire(&mut self, name: DiskName) -> Result<Vec<PBlock>> {
        if self.actual == Some(name) {
            return Err(Error::RetireActual);
        }
        let t = self.tables.remove(&name).ok_or(Error::UnknownImage(name))?;
        let mut freed = Vec::new();
        for e in t.entries.values() {
            let p = self.decrypt(t.nonce, e);
            freed.extend(self.release(name, e.vblock, p));
        }
        Ok(freed)
    }

    /// Rebuilds tables from their persisted form. Reference counts are
    /// recomputed by decryption.
    pub fn restore(&mut self, tables: Vec<PersistedTable>, actual: Option<DiskName>) -> Result<()> {
        self.tables.clear();
        self.holders.clear();
        self.actual = actual;
        for t in tables {
            let mut entries = BTreeMap::new();
            for e in t.entries {
                let p = self.decrypt(t.nonce, &e);
                if let PBlock::Blob(b) = p {
                    if !self.blob.is_allocated(b) {
                        return Err(Error::Invariant(format!("entry points at free blob block {b}")));
                    }
                }
                self.holders.entry(p).or_default().insert((t.name, e.vblock));
                entries.insert(e.vblock, e);
            }
            self.tables.insert(t.name, Btt { nonce: t.nonce, entries });
        }
        Ok(())
    }

    fn decrypt(&self, nonce: u64, e: &BttEntry) -> PBlock {
        PBlock::decode(self.cipher.decrypt(
            e.ciphertext,
            Tweak {
                nonce,
                vblock: e.vblock,
                epoch: e.epoch,
            },
        ))
    }

    fn insert_entry(&mut self, name: DiskName, vblock: u64, p: PBlock) {
        let t = self.tables.get_mut(&name).expect("known table");
        let tweak = Tweak {
            nonce: t.nonce,
            vblock,
            epoch: 0,
        };
        t.entries.insert(
            vblock,
            BttEntry {
                vblock,
                ciphertext: self.cipher.encrypt(p.encode(), tweak),
                epoch: 0,
            },
        );
        self.holders.entry(p).or_default().insert((name, vblock));
    }

    fn repoint(&mut self, name: DiskName, vblock: u64, old: PBlock, new: PBlock) {
        let t = self.tables.get_mut(&name).expect("known table");
        let e = t.entries.get_mut(&vblock).expect("mapped");
        e.ciphertext = self.cipher.encrypt(
            new.encode(),
            Tweak {
                nonce: t.nonce,
                vblock,
                epoch: e.epoch,
            },
        );
        let h = self.holders.get_mut(&old).expect("held");
        h.remove(&(name, vblock));
        if h.is_empty() {
            self.holders.remove(&old);
        }
        self.holders.entry(new).or_default().insert((name, vblock));
    }

    fn reencrypt(&mut self, who: &[(DiskName, u64)]) -> usize {
        let mut n = 0;
        for &(name, vblock) in who {
            let Some(t) = self.tables.get_mut(&name) else { continue };
            let Some(e) = t.entries.get_mut(&vblock) else { continue };
            let tweak = Tweak {
                nonce: t.nonce,
                vblock,
                epoch: e.epoch,
            };
            let plain = self.cipher.decrypt(e.ciphertext, tweak);
            e.epoch += 1;
            e.ciphertext = self.cipher.encrypt(plain, Tweak { epoch: e.epoch, ..tweak });
            n += 1;
        }
        n
    }

    fn release(&mut self, name: DiskName, vblock: u64, p: PBlock) -> Option<PBlock> {
        let h = self.holders.get_mut(&p)?;
        h.remove(&(name, vblock));
        if !h.is_empty() {
            return None;
        }
        self.holders.remove(&p);
        match p {
            PBlock::Blob(b) => {
                self.blob.free(b);
                Some(p)
            }
            PBlock::Region(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: DiskName = DiskName(0xa);
    const B: DiskName = DiskName(0xb);
    const C: DiskName = DiskName(0xc);
    const D0: Digest = Digest([0; 32]);

    fn ciphertexts(set: &BttSet, n: DiskName) -> BTreeMap<u64, u64> {
        set.table(n).unwrap().entries().map(|e| (e.vblock, e.ciphertext)).collect()
    }

    fn sybil_set() -> BttSet {
        let mut s = BttSet::new(1, 1 << 20, true);
        s.create(A, false).unwrap();
        s
    }

    #[test]
    fn lookup_hits_and_misses() {
        let mut s = sybil_set();
        let plan = s.prepare_write(A, 5).unwrap();
        assert_eq!(s.lookup(A, 5), Some(plan.target));
        assert_eq!(s.lookup(A, 6), None);
        assert_eq!(s.lookup(B, 5), None);
    }

    #[test]
    fn shared_write_moves_writer_and_reencrypts_all_sharers() {
        let mut s = sybil_set();
        s.prepare_write(A, 7).unwrap();
        s.fork(A, B).unwrap();
        s.fork(A, C).unwrap();
        let p = s.lookup(A, 7).unwrap();
        assert_eq!(s.refcount(p), 3);
        let before: Vec<_> = [A, B, C].iter().map(|&n| ciphertexts(&s, n)).collect();
        let blob_before = s.blob().allocated();
        let plan = s.prepare_write(B, 7).unwrap();
        assert_eq!(s.blob().allocated(), blob_before + 1);
        assert_ne!(plan.target, p);
        assert_eq!(s.lookup(B, 7), Some(plan.target));
        assert_eq!(s.lookup(A, 7), Some(p));
        assert_eq!(s.refcount(p), 2);
        assert_eq!(plan.reencrypted, 3);
        for (i, &n) in [A, B, C].iter().enumerate() {
            assert_ne!(before[i][&7], ciphertexts(&s, n)[&7]);
        }
    }

    #[test]
    fn exclusive_write_is_in_place() {
        let mut s = sybil_set();
        let first = s.prepare_write(A, 3).unwrap().target;
        let ct = ciphertexts(&s, A);
        let plan = s.prepare_write(A, 3).unwrap();
        assert_eq!(plan.target, first);
        assert!(plan.copies.is_empty());
        assert_eq!(ciphertexts(&s, A), ct);
    }

    #[test]
    fn actual_keeps_its_region_block_on_shared_write() {
        let mut s = BttSet::new(2, 64, true);
        s.create(A, true).unwrap();
        assert_eq!(s.prepare_write(A, 9).unwrap().target, PBlock::Region(9));
        s.fork(A, B).unwrap();
        let plan = s.prepare_write(A, 9).unwrap();
        assert_eq!(plan.target, PBlock::Region(9));
        assert_eq!(plan.copies, vec![(PBlock::Region(9), PBlock::Blob(0))]);
        assert_eq!(s.lookup(B, 9), Some(PBlock::Blob(0)));
    }

    #[test]
    fn evacuation_moves_sybils_off_the_region() {
        let mut s = BttSet::new(2, 64, true);
        s.create(A, true).unwrap();
        s.prepare_write(A, 4).unwrap();
        s.fork(A, B).unwrap();
        s.fork(A, C).unwrap();
        s.unmap(A, 4);
        let copy = s.evacuate_region(4).unwrap().unwrap();
        assert_eq!(copy.0, PBlock::Region(4));
        assert_eq!(s.lookup(B, 4), Some(copy.1));
        assert_eq!(s.lookup(C, 4), Some(copy.1));
        assert_eq!(s.refcount(PBlock::Region(4)), 0);
    }

    #[test]
    fn fork_allocates_nothing() {
        let mut s = sybil_set();
        for v in 0..1000 {
            s.prepare_write(A, v).unwrap();
        }
        let before = s.blob().allocated();
        assert!(s.fork(A, B).unwrap().is_empty());
        assert_eq!(s.table(B).unwrap().len(), 1000);
        assert_eq!(s.blob().allocated(), before);
        s.prepare_write(B, 0).unwrap();
        assert_eq!(s.blob().allocated(), before + 1);
    }

    #[test]
    fn fork_of_empty_table_is_empty() {
        let mut s = sybil_set();
        s.fork(A, B).unwrap();
        assert!(s.table(B).unwrap().is_empty());
    }

    #[test]
    fn fork_without_cow_copies_every_block() {
        let mut s = BttSet::new(1, 1 << 20, false);
        s.create(A, false).unwrap();
        for v in 0..10 {
            s.prepare_write(A, v).unwrap();
        }
        assert_eq!(s.fork(A, B).unwrap().len(), 10);
        assert_eq!(s.blob().allocated(), 20);
    }

    #[test]
    fn shuffle_rebinds_and_reencrypts_everything() {
        let mut s = sybil_set();
        for v in 0..20 {
            s.prepare_write(A, v).unwrap();
        }
        s.fork(A, B).unwrap();
        let plain: BTreeMap<u64, PBlock> = (0..20).map(|v| (v, s.lookup(A, v).unwrap())).collect();
        let old_ct: BTreeSet<u64> = [A, B].iter().flat_map(|&n| ciphertexts(&s, n).into_values()).collect();
        let x = DiskName(0x100);
        let y = DiskName(0x101);
        let renaming = s.shuffle(&[(A, D0), (B, D0)], &[x, y]).unwrap();
        assert_eq!(renaming.values().copied().collect::<BTreeSet<_>>(), [x, y].into());
        assert!(!s.contains(A) && !s.contains(B));
        for n in [x, y] {
            for (v, ct) in ciphertexts(&s, n) {
                assert!(!old_ct.contains(&ct));
                assert_eq!(s.lookup(n, v), Some(plain[&v]));
            }
        }
    }

    #[test]
    fn shuffle_preconditions() {
        let mut s = sybil_set();
        s.fork(A, B).unwrap();
        assert!(matches!(s.shuffle(&[(A, D0)], &[C]), Err(Error::ShuffleTooSmall(1))));
        let other = Digest([1; 32]);
        assert!(matches!(
            s.shuffle(&[(A, D0), (B, other)], &[C, DiskName(9)]),
            Err(Error::MetadataMismatch)
        ));
    }

    #[test]
    fn retire_frees_last_sharer_only() {
        let mut s = sybil_set();
        let p = s.prepare_write(A, 9).unwrap().target;
        s.fork(A, B).unwrap();
        assert!(s.retire(A).unwrap().is_empty());
        assert_eq!(s.retire(B).unwrap(), vec![p]);
        assert_eq!(s.blob().allocated(), 0);
    }

    #[test]
    fn actual_cannot_be_retired() {
        let mut s = BttSet::new(0, 8, true);
        s.create(A, true).unwrap();
        assert!(matches!(s.retire(A), Err(Error::RetireActual)));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Write(usize, u64),
        Unmap(usize, u64),
        Fork(usize),
        Shuffle(usize, usize),
        Retire(usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (0usize..8, 0u64..16).prop_map(|(i, v)| Op::Write(i, v)),
            1 => (0usize..8, 0u64..16).prop_map(|(i, v)| Op::Unmap(i, v)),
            2 => (0usize..8).prop_map(Op::Fork),
            2 => (0usize..8, 0usize..8).prop_map(|(i, j)| Op::Shuffle(i, j)),
            1 => (0usize..8).prop_map(Op::Retire),
        ]
    }

    proptest! {
        #[test]
        fn refcounts_are_conserved(ops in prop::collection::vec(op(), 1..200), actual in any::<bool>()) {
            let mut s = BttSet::new(7, 1 << 16, true);
            s.create(DiskName(1), actual).unwrap();
            let mut next = 2u64;
            for o in ops {
                let names: Vec<DiskName> = s.names().collect();
                let pick = |i: usize| names[i % names.len()];
                match o {
                    Op::Write(i, v) => { s.prepare_write(pick(i), v).unwrap(); }
                    Op::Unmap(i, v) => {
                        let n = pick(i);
                        if Some(n) == s.actual() {
                            s.unmap(n, v);
                            if let Some((from, to)) = s.evacuate_region(v).unwrap() {
                                prop_assert_eq!(from, PBlock::Region(v));
                                prop_assert!(matches!(to, PBlock::Blob(_)));
                            }
                        } else {
                            s.unmap(n, v);
                        }
                    }
                    Op::Fork(i) => { s.fork(pick(i), DiskName(next)).unwrap(); next += 1; }
                    Op::Shuffle(i, j) => {
                        let (a, b) = (pick(i), pick(j));
                        if a != b {
                            s.shuffle(&[(a, D0), (b, D0)], &[DiskName(next), DiskName(next + 1)]).unwrap();
                            next += 2;
                        }
                    }
                    Op::Retire(i) => {
                        let n = pick(i);
                        if names.len() > 1 && Some(n) != s.actual() { s.retire(n).unwrap(); }
                    }
                }
                prop_assert_eq!(s.refcount_total(), s.entry_total());
                prop_assert_eq!(s.referenced_blob_blocks().len() as u64, s.blob().allocated());
                // Region blocks are only ever referenced alongside the actual image's own entry.
                if let Some(a) = s.actual() {
                    for n in s.names().collect::<Vec<_>>() {
                        for e in s.table(n).unwrap().entries().copied().collect::<Vec<_>>() {
                            if let Some(PBlock::Region(v)) = s.lookup(n, e.vblock) {
                                prop_assert_eq!(v, e.vblock);
                                prop_assert_eq!(s.lookup(a, v), Some(PBlock::Region(v)));
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn cow_churn_hits_the_same_positions_everywhere(writes in prop::collection::vec(0u64..32, 1..40), writer in 0usize..4) {
            let mut s = sybil_set();
            for v in 0..32 { s.prepare_write(A, v).unwrap(); }
            let names = [A, B, C, DiskName(0xd)];
            for &n in &names[1..] { s.fork(A, n).unwrap(); }
            for v in writes {
                let before: Vec<_> = names.iter().map(|&n| ciphertexts(&s, n)).collect();
                s.prepare_write(names[writer], v).unwrap();
                let changed: Vec<BTreeSet<u64>> = names.iter().zip(&before).map(|(&n, b)| {
                    let now = ciphertexts(&s, n);
                    now.iter().filter(|(k, c)| b[k] != **c).map(|(k, _)| *k).collect()
                }).collect();
                // Sharers change at exactly the same vblocks; non-sharers not at all.
                let sharers: Vec<&BTreeSet<u64>> = changed.iter().filter(|c| !c.is_empty()).collect();
                for c in &sharers { prop_assert_eq!(*c, sharers[0]); }
            }
        }
    }
}
