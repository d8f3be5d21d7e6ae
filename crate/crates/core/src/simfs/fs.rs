use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::layout::*;
use super::{
    BlockClass, CallKind, DataWindow, DiskOp, DiskRequest, FileCall, InlineSpan, OpenFlags, Payload,
};
use crate::ids::{DiskName, OpaqueRef};
use crate::{Error, Result};

const ROOT: u32 = 1;
const FIRST_FREE_INODE: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsOptions {
    /// Files whose whole content fits in this many bytes live inside their
    /// inode. Zero disables inlining.
    pub inline_threshold: usize,
}

impl Default for FsOptions {
    fn default() -> Self {
        Self {
            inline_threshold: 160,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum InodeKind {
    #[default]
    Free,
    File,
    Dir,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct Inode {
    kind: InodeKind,
    links: u16,
    size: u64,
    inline: bool,
    direct: [u64; DIRECT_POINTERS],
    indirect: u64,
    indirect_ptrs: Vec<u64>,
}

impl Inode {
    fn new(kind: InodeKind) -> Self {
        Self {
            kind,
            links: 1,
            ..Self::default()
        }
    }

    fn block_at(&self, idx: u64) -> u64 {
        let idx = idx as usize;
        if idx < DIRECT_POINTERS {
            self.direct[idx]
        } else {
            self.indirect_ptrs.get(idx - DIRECT_POINTERS).copied().unwrap_or(0)
        }
    }

    fn set_block(&mut self, idx: u64, block: u64) {
        let idx = idx as usize;
        if idx < DIRECT_POINTERS {
            self.direct[idx] = block;
        } else {
            if self.indirect_ptrs.is_empty() {
                self.indirect_ptrs = vec![0; POINTERS_PER_BLOCK];
            }
            self.indirect_ptrs[idx - DIRECT_POINTERS] = block;
        }
    }

    fn blocks(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.direct
            .iter()
            .chain(self.indirect_ptrs.iter())
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, &b)| (i as u64, b))
    }

    fn nblocks(&self) -> u64 {
        self.blocks().count() as u64
    }

    fn inline_eligible(&self) -> bool {
        self.inline || (self.size == 0 && self.nblocks() == 0)
    }

    fn encode(&self, out: &mut [u8]) {
        out.fill(0);
        out[0] = match self.kind {
            InodeKind::Free => 0,
            InodeKind::File => 1,
            InodeKind::Dir => 2,
        };
        out[1] = self.inline as u8;
        out[2..4].copy_from_slice(&self.links.to_le_bytes());
        let inline_len = if self.inline { self.size as u16 } else { 0 };
        out[4..6].copy_from_slice(&inline_len.to_le_bytes());
        out[8..16].copy_from_slice(&self.size.to_le_bytes());
        out[16..20].copy_from_slice(&(self.nblocks() as u32).to_le_bytes());
        if !self.inline {
            for (i, p) in self.direct.iter().enumerate() {
                let at = INLINE_OFFSET + i * 8;
                out[at..at + 8].copy_from_slice(&p.to_le_bytes());
            }
        }
        out[248..256].copy_from_slice(&self.indirect.to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DirEntry {
    name: String,
    ino: u32,
}

/// Kind and size of a path, as returned by [`SimFs::stat`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stat {
    pub is_dir: bool,
    pub size: u64,
    pub inlined: bool,
}

struct Lookup {
    reads: Vec<u64>,
    parent: u32,
    found: Option<u32>,
    free_slot: Option<usize>,
}

/// OS-side state of one mounted image.
///
/// The in-memory state is exactly what the metadata blocks encode, so two
/// instances with equal metadata behave identically.
#[derive(Debug, Clone)]
pub struct SimFs {
    image: DiskName,
    layout: SimFsLayout,
    inodes: Vec<Inode>,
    dirs: BTreeMap<u32, Vec<Option<DirEntry>>>,
    bitmap: Vec<bool>,
    free_blocks: u64,
}

impl SimFs {
    /// Formats a fresh image and returns it with the metadata writes the
    /// format produces.
    pub fn mkfs(image: DiskName, disk_blocks: u64, opts: FsOptions) -> Result<(Self, Vec<DiskRequest>)> {
        let min = SimFsLayout::minimum_blocks(disk_blocks);
        if disk_blocks < min {
            return Err(Error::DiskTooSmall {
                blocks: disk_blocks,
                min,
            });
        }
        if opts.inline_threshold > INLINE_CAPACITY {
            return Err(Error::InvalidConfig(format!(
                "inline threshold {} exceeds inode capacity {INLINE_CAPACITY}",
                opts.inline_threshold
            )));
        }
        let layout = SimFsLayout::new(disk_blocks, opts.inline_threshold);
        let mut fs = SimFs {
            image,
            inodes: vec![Inode::default(); layout.inode_count() as usize],
            dirs: BTreeMap::new(),
            bitmap: vec![false; disk_blocks as usize],
            free_blocks: disk_blocks,
            layout,
        };
        for b in 0..fs.layout.data_region_start() {
            fs.bitmap[b as usize] = true;
            fs.free_blocks -= 1;
        }
        let root_block = fs.alloc(Role::Directory);
        let mut root = Inode::new(InodeKind::Dir);
        root.direct[0] = root_block;
        root.size = BLOCK_SIZE as u64;
        fs.inodes[ROOT as usize] = root;
        fs.dirs.insert(ROOT, vec![None; DIRENTS_PER_BLOCK]);

        let mut reqs = vec![DiskRequest::metadata_write(image, 0, fs.layout.encode_superblock())];
        for b in fs.layout.inode_table_range.clone() {
            reqs.push(fs.inode_block_write(b));
        }
        for b in fs.layout.bitmap_range.clone() {
            reqs.push(DiskRequest::metadata_write(image, b, fs.encode_bitmap_block(b)));
        }
        reqs.push(DiskRequest::metadata_write(image, root_block, fs.encode_dir_block(ROOT, 0)));
        Ok((fs, reqs))
    }

    pub fn image(&self) -> DiskName {
        self.image
    }

    /// Rebinds this instance to another disk name (after a remount).
    pub fn set_image(&mut self, image: DiskName) {
        self.image = image;
    }

    pub fn layout(&self) -> &SimFsLayout {
        &self.layout
    }

    pub fn free_blocks(&self) -> u64 {
        self.free_blocks
    }

    pub fn free_inodes(&self) -> usize {
        self.inodes[FIRST_FREE_INODE as usize..]
            .iter()
            .filter(|i| i.kind == InodeKind::Free)
            .count()
    }

    /// Equality of everything the metadata encodes.
    pub fn same_metadata(&self, other: &SimFs) -> bool {
        self.layout == other.layout
            && self.inodes == other.inodes
            && self.dirs == other.dirs
            && self.bitmap == other.bitmap
    }

    pub fn stat(&self, path: &str) -> Option<Stat> {
        let ino = self.resolve(path).ok()??;
        let inode = &self.inodes[ino as usize];
        Some(Stat {
            is_dir: inode.kind == InodeKind::Dir,
            size: inode.size,
            inlined: inode.inline,
        })
    }

    /// Names in directory `path`, in slot order.
    pub fn dir_entries(&self, path: &str) -> Vec<String> {
        let Some(Some(ino)) = self.resolve(path).ok() else {
            return Vec::new();
        };
        self.dirs
            .get(&ino)
            .map(|slots| slots.iter().flatten().map(|e| e.name.clone()).collect())
            .unwrap_or_default()
    }

    /// Validates `call` against the current state without changing it.
    /// [`SimFs::exec_file_call`] succeeds exactly when this does.
    pub fn check(&self, call: &FileCall) -> Result<()> {
        call.check_well_formed()?;
        let path = call.path.as_str();
        split_path(path)?;
        let lk = self.walk(path)?;
        match call.kind {
            CallKind::Open => match lk.found {
                Some(_) => Ok(()),
                None if call.flags.contains(OpenFlags::CREATE) => {
                    self.create_need(&lk, InodeKind::File, path).map(|_| ())
                }
                None => Err(Error::NotFound(path.into())),
            },
            CallKind::Create => match lk.found {
                Some(_) => Ok(()),
                None => self.create_need(&lk, InodeKind::File, path).map(|_| ()),
            },
            CallKind::Mkdir => match lk.found {
                Some(_) => Err(Error::AlreadyExists(path.into())),
                None => self.create_need(&lk, InodeKind::Dir, path).map(|_| ()),
            },
            CallKind::Read => {
                let inode = self.file_inode(&lk, path)?;
                if call.offset > inode.size {
                    return Err(Error::OutOfBounds {
                        path: path.into(),
                        offset: call.offset,
                        size: inode.size,
                    });
                }
                Ok(())
            }
            CallKind::Write => {
                let (need, base) = match lk.found {
                    Some(_) => {
                        let inode = self.file_inode(&lk, path)?;
                        let off = self.write_offset(call, inode);
                        (self.write_need(inode, off, off + call.size, path)?, 0)
                    }
                    None if call.flags.contains(OpenFlags::CREATE) => {
                        let base = self.create_need(&lk, InodeKind::File, path)?;
                        let fresh = Inode::new(InodeKind::File);
                        (self.write_need(&fresh, call.offset, call.offset + call.size, path)?, base)
                    }
                    None => return Err(Error::NotFound(path.into())),
                };
                self.ensure_free(need + base)
            }
            CallKind::Truncate => {
                let inode = self.file_inode(&lk, path)?;
                if call.size.div_ceil(BLOCK_SIZE as u64) > MAX_FILE_BLOCKS {
                    return Err(Error::FileTooLarge {
                        path: path.into(),
                        blocks: call.size.div_ceil(BLOCK_SIZE as u64),
                    });
                }
                let need = u64::from(
                    inode.inline && inode.size > 0 && call.size as usize > self.layout.inline_threshold,
                );
                self.ensure_free(need)
            }
            CallKind::Unlink => {
                let ino = lk.found.ok_or_else(|| Error::NotFound(path.into()))?;
                if ino == ROOT {
                    return Err(Error::InvalidPath(path.into()));
                }
                if self.inodes[ino as usize].kind == InodeKind::Dir
                    && self.dirs[&ino].iter().any(Option::is_some)
                {
                    return Err(Error::DirectoryNotEmpty(path.into()));
                }
                Ok(())
            }
            CallKind::Seek | CallKind::Fstat | CallKind::Close => {
                lk.found.map(|_| ()).ok_or_else(|| Error::NotFound(path.into()))
            }
        }
    }

    /// Executes `call` and returns the disk requests it induces, in order.
    pub fn exec_file_call(&mut self, call: &FileCall) -> Result<Vec<DiskRequest>> {
        self.check(call)?;
        let path = call.path.as_str();
        let lk = self.walk(path).expect("checked");
        let mut reqs: Vec<DiskRequest> = lk
            .reads
            .iter()
            .map(|&b| DiskRequest::metadata_read(self.image, b))
            .collect();
        match call.kind {
            CallKind::Open => {
                let ino = match lk.found {
                    Some(ino) => ino,
                    None => self.apply_create(&lk, path, InodeKind::File, &mut reqs),
                };
                if call.flags.contains(OpenFlags::TRUNC) && self.inodes[ino as usize].kind == InodeKind::File {
                    self.apply_truncate(ino, 0, &mut reqs);
                }
            }
            CallKind::Create => {
                if lk.found.is_none() {
                    self.apply_create(&lk, path, InodeKind::File, &mut reqs);
                }
            }
            CallKind::Mkdir => {
                self.apply_create(&lk, path, InodeKind::Dir, &mut reqs);
            }
            CallKind::Read => {
                let ino = lk.found.expect("checked");
                self.apply_read(ino, call, &mut reqs);
            }
            CallKind::Write => {
                let ino = match lk.found {
                    Some(ino) => ino,
                    None => self.apply_create(&lk, path, InodeKind::File, &mut reqs),
                };
                self.apply_write(ino, call, &mut reqs);
            }
            CallKind::Truncate => {
                let ino = lk.found.expect("checked");
                self.apply_truncate(ino, call.size, &mut reqs);
            }
            CallKind::Unlink => {
                let ino = lk.found.expect("checked");
                self.apply_unlink(&lk, ino, &mut reqs);
            }
            CallKind::Seek | CallKind::Fstat => {}
            CallKind::Close => reqs.clear(),
        }
        debug_assert!(reqs.iter().all(|r| r.vblock < self.layout.disk_blocks));
        Ok(reqs)
    }

    fn resolve(&self, path: &str) -> Result<Option<u32>> {
        split_path(path)?;
        Ok(self.walk(path)?.found)
    }

    fn walk(&self, path: &str) -> Result<Lookup> {
        let comps = split_path(path)?;
        let mut reads = Vec::new();
        if comps.is_empty() {
            reads.push(self.layout.inode_block(ROOT));
            return Ok(Lookup {
                reads,
                parent: ROOT,
                found: Some(ROOT),
                free_slot: None,
            });
        }
        let mut cur = ROOT;
        for (i, comp) in comps.iter().enumerate() {
            reads.push(self.layout.inode_block(cur));
            let dir = &self.inodes[cur as usize];
            if dir.kind != InodeKind::Dir {
                return Err(Error::NotADirectory(path.into()));
            }
            let slots = &self.dirs[&cur];
            let mut found = None;
            for (bi, chunk) in slots.chunks(DIRENTS_PER_BLOCK).enumerate() {
                reads.push(dir.block_at(bi as u64));
                if let Some(pos) = chunk.iter().position(|e| e.as_ref().is_some_and(|e| e.name == *comp)) {
                    found = Some(chunk[pos].as_ref().expect("present").ino);
                    break;
                }
            }
            let last = i + 1 == comps.len();
            match (found, last) {
                (Some(ino), false) => cur = ino,
                (None, false) => return Err(Error::NotFound(path.into())),
                (Some(ino), true) => {
                    reads.push(self.layout.inode_block(ino));
                    return Ok(Lookup {
                        reads,
                        parent: cur,
                        found: Some(ino),
                        free_slot: None,
                    });
                }
                (None, true) => {
                    let free_slot = slots.iter().position(Option::is_none);
                    return Ok(Lookup {
                        reads,
                        parent: cur,
                        found: None,
                        free_slot,
                    });
                }
            }
        }
        unreachable!("non-empty component list")
    }

    fn file_inode(&self, lk: &Lookup, path: &str) -> Result<&Inode> {
        let ino = lk.found.ok_or_else(|| Error::NotFound(path.into()))?;
        let inode = &self.inodes[ino as usize];
        if inode.kind == InodeKind::Dir {
            return Err(Error::IsADirectory(path.into()));
        }
        Ok(inode)
    }

    fn write_offset(&self, call: &FileCall, inode: &Inode) -> u64 {
        if call.flags.contains(OpenFlags::APPEND) {
            inode.size
        } else {
            call.offset
        }
    }

    fn ensure_free(&self, need: u64) -> Result<()> {
        if need > self.free_blocks {
            Err(Error::NoSpace {
                need,
                free: self.free_blocks,
            })
        } else {
            Ok(())
        }
    }

    fn first_free_inode(&self) -> Option<u32> {
        (FIRST_FREE_INODE..self.layout.inode_count()).find(|&i| self.inodes[i as usize].kind == InodeKind::Free)
    }

    /// Blocks a create needs; also validates name and inode availability.
    fn create_need(&self, lk: &Lookup, kind: InodeKind, path: &str) -> Result<u64> {
        let name = split_path(path)?.pop().ok_or_else(|| Error::InvalidPath(path.into()))?;
        if name.len() > NAME_MAX {
            return Err(Error::InvalidPath(path.into()));
        }
        if self.first_free_inode().is_none() {
            return Err(Error::NoInodes);
        }
        let mut need = 0;
        if lk.free_slot.is_none() {
            if self.inodes[lk.parent as usize].nblocks() >= DIRECT_POINTERS as u64 {
                return Err(Error::NoSpace { need: 1, free: 0 });
            }
            need += 1;
        }
        if kind == InodeKind::Dir {
            need += 1;
        }
        self.ensure_free(need)?;
        Ok(need)
    }

    fn write_need(&self, inode: &Inode, off: u64, end: u64, path: &str) -> Result<u64> {
        if end == off {
            return Ok(0);
        }
        let blocks = end.div_ceil(BLOCK_SIZE as u64);
        if blocks > MAX_FILE_BLOCKS {
            return Err(Error::FileTooLarge {
                path: path.into(),
                blocks,
            });
        }
        if inode.inline_eligible() && end as usize <= self.layout.inline_threshold {
            return Ok(0);
        }
        let bs = BLOCK_SIZE as u64;
        let mut idxs: BTreeSet<u64> = (off / bs..blocks).filter(|&i| inode.block_at(i) == 0).collect();
        if inode.inline && inode.size > 0 {
            idxs.insert(0);
        }
        let needs_indirect = inode.indirect == 0 && idxs.iter().any(|&i| i >= DIRECT_POINTERS as u64);
        Ok(idxs.len() as u64 + u64::from(needs_indirect))
    }

    fn alloc(&mut self, role: Role) -> u64 {
        let start = self.layout.data_region_start() as usize;
        let b = (start..self.bitmap.len())
            .find(|&b| !self.bitmap[b])
            .expect("capacity validated before allocation") as u64;
        self.bitmap[b as usize] = true;
        self.free_blocks -= 1;
        match role {
            Role::Directory => self.layout.directory_block_set.insert(b),
            Role::Map => self.layout.map_block_set.insert(b),
            Role::Data => self.layout.data_block_set.insert(b),
        };
        b
    }

    fn release(&mut self, b: u64) {
        debug_assert!(self.bitmap[b as usize]);
        self.bitmap[b as usize] = false;
        self.free_blocks += 1;
        self.layout.directory_block_set.remove(&b);
        self.layout.map_block_set.remove(&b);
        self.layout.data_block_set.remove(&b);
    }

    fn apply_create(&mut self, lk: &Lookup, path: &str, kind: InodeKind, reqs: &mut Vec<DiskRequest>) -> u32 {
        let name = split_path(path).expect("checked").pop().expect("checked").to_owned();
        let ino = self.first_free_inode().expect("checked");
        self.inodes[ino as usize] = Inode::new(kind);
        let mut allocated = Vec::new();
        let parent = lk.parent;
        let slot = match lk.free_slot {
            Some(s) => s,
            None => {
                let b = self.alloc(Role::Directory);
                allocated.push(b);
                let p = &mut self.inodes[parent as usize];
                let idx = p.nblocks();
                p.set_block(idx, b);
                p.size += BLOCK_SIZE as u64;
                let slots = self.dirs.get_mut(&parent).expect("directory");
                let at = slots.len();
                slots.extend(std::iter::repeat_n(None, DIRENTS_PER_BLOCK));
                at
            }
        };
        self.dirs.get_mut(&parent).expect("directory")[slot] = Some(DirEntry { name, ino });
        let mut child_block = None;
        if kind == InodeKind::Dir {
            let b = self.alloc(Role::Directory);
            allocated.push(b);
            let inode = &mut self.inodes[ino as usize];
            inode.direct[0] = b;
            inode.size = BLOCK_SIZE as u64;
            self.dirs.insert(ino, vec![None; DIRENTS_PER_BLOCK]);
            child_block = Some(b);
        }

        reqs.push(self.inode_block_write(self.layout.inode_block(ino)));
        self.push_bitmap_writes(&allocated, reqs);
        let dir_bi = (slot / DIRENTS_PER_BLOCK) as u64;
        let dir_block = self.inodes[parent as usize].block_at(dir_bi);
        reqs.push(DiskRequest::metadata_write(self.image, dir_block, self.encode_dir_block(parent, dir_bi)));
        if lk.free_slot.is_none() {
            reqs.push(self.inode_block_write(self.layout.inode_block(parent)));
        }
        if let Some(b) = child_block {
            reqs.push(DiskRequest::metadata_write(self.image, b, self.encode_dir_block(ino, 0)));
        }
        ino
    }

    fn apply_write(&mut self, ino: u32, call: &FileCall, reqs: &mut Vec<DiskRequest>) {
        let token = call.buffer_ref.expect("checked");
        let off = self.write_offset(call, &self.inodes[ino as usize]);
        let end = off + call.size;
        if end == off {
            return;
        }
        let threshold = self.layout.inline_threshold;
        let inode_block = self.layout.inode_block(ino);
        let slot_off = inode_slot_offset(ino);
        if self.inodes[ino as usize].inline_eligible() && end as usize <= threshold {
            let inode = &mut self.inodes[ino as usize];
            inode.inline = true;
            inode.size = inode.size.max(end);
            let mut req = self.inode_block_write(inode_block);
            if let Payload::Mixed { data, .. } = &mut req.payload {
                *data = Some(DataWindow {
                    token,
                    buf_offset: 0,
                    block_offset: (slot_off + INLINE_OFFSET) as u32 + off as u32,
                    len: call.size as u32,
                });
            }
            reqs.push(req);
            return;
        }

        let mut allocated = Vec::new();
        let mut carry = None;
        if self.inodes[ino as usize].inline {
            let old_len = self.inodes[ino as usize].size;
            self.inodes[ino as usize].inline = false;
            if old_len > 0 {
                let b = self.alloc(Role::Data);
                allocated.push(b);
                self.inodes[ino as usize].set_block(0, b);
                carry = Some((
                    b,
                    InlineSpan {
                        offset: (slot_off + INLINE_OFFSET) as u16,
                        len: old_len as u16,
                    },
                ));
            }
        }
        let bs = BLOCK_SIZE as u64;
        let first = off / bs;
        let last = end.div_ceil(bs);
        let mut indirect_dirty = false;
        for idx in first..last {
            if self.inodes[ino as usize].block_at(idx) != 0 {
                continue;
            }
            if idx >= DIRECT_POINTERS as u64 && self.inodes[ino as usize].indirect == 0 {
                let ib = self.alloc(Role::Map);
                allocated.push(ib);
                self.inodes[ino as usize].indirect = ib;
            }
            let b = self.alloc(Role::Data);
            allocated.push(b);
            self.inodes[ino as usize].set_block(idx, b);
            indirect_dirty |= idx >= DIRECT_POINTERS as u64;
        }
        let size_changed = end > self.inodes[ino as usize].size;
        self.inodes[ino as usize].size = self.inodes[ino as usize].size.max(end);

        if let Some((b, span)) = carry {
            reqs.push(DiskRequest {
                image: self.image,
                op: DiskOp::Write,
                vblock: b,
                clazz: BlockClass::Filedata,
                payload: Payload::InlineCarry {
                    from_vblock: inode_block,
                    span,
                    token,
                },
                length: 1,
            });
        }
        if size_changed || !allocated.is_empty() || carry.is_some() {
            reqs.push(self.inode_block_write(inode_block));
        }
        self.push_bitmap_writes(&allocated, reqs);
        if indirect_dirty {
            let ib = self.inodes[ino as usize].indirect;
            reqs.push(DiskRequest::metadata_write(self.image, ib, self.encode_indirect(ino)));
        }
        for idx in first..last {
            let b = self.inodes[ino as usize].block_at(idx);
            let blk_start = idx * bs;
            let lo = off.max(blk_start);
            let hi = end.min(blk_start + bs);
            reqs.push(DiskRequest::filedata(
                self.image,
                DiskOp::Write,
                b,
                DataWindow {
                    token,
                    buf_offset: lo - off,
                    block_offset: (lo - blk_start) as u32,
                    len: (hi - lo) as u32,
                },
            ));
        }
    }

    fn apply_read(&self, ino: u32, call: &FileCall, reqs: &mut Vec<DiskRequest>) {
        let token = call.buffer_ref.expect("checked");
        let inode = &self.inodes[ino as usize];
        let off = call.offset;
        let end = (off + call.size).min(inode.size);
        if end <= off {
            return;
        }
        if inode.inline {
            let block = self.layout.inode_block(ino);
            reqs.push(DiskRequest {
                image: self.image,
                op: DiskOp::Read,
                vblock: block,
                clazz: BlockClass::Mixed,
                payload: Payload::Mixed {
                    os: None,
                    spans: self.inline_spans(block),
                    data: Some(DataWindow {
                        token,
                        buf_offset: 0,
                        block_offset: (inode_slot_offset(ino) + INLINE_OFFSET) as u32 + off as u32,
                        len: (end - off) as u32,
                    }),
                },
                length: 1,
            });
            return;
        }
        let bs = BLOCK_SIZE as u64;
        let mut indirect_read = false;
        for idx in off / bs..end.div_ceil(bs) {
            if idx >= DIRECT_POINTERS as u64 && !indirect_read && inode.indirect != 0 {
                reqs.push(DiskRequest::metadata_read(self.image, inode.indirect));
                indirect_read = true;
            }
            let b = inode.block_at(idx);
            if b == 0 {
                continue;
            }
            let blk_start = idx * bs;
            let lo = off.max(blk_start);
            let hi = end.min(blk_start + bs);
            reqs.push(DiskRequest::filedata(
                self.image,
                DiskOp::Read,
                b,
                DataWindow {
                    token,
                    buf_offset: lo - off,
                    block_offset: (lo - blk_start) as u32,
                    len: (hi - lo) as u32,
                },
            ));
        }
    }

    fn apply_truncate(&mut self, ino: u32, new_size: u64, reqs: &mut Vec<DiskRequest>) {
        let threshold = self.layout.inline_threshold as u64;
        let inode_block = self.layout.inode_block(ino);
        let mut allocated = Vec::new();
        let mut freed = Vec::new();
        let mut carry = None;
        let mut indirect_dirty = false;
        let cur = self.inodes[ino as usize].size;
        if self.inodes[ino as usize].inline {
            if new_size <= threshold {
                let inode = &mut self.inodes[ino as usize];
                inode.size = new_size;
                inode.inline = new_size > 0;
            } else {
                // Growing past the inline limit moves existing bytes to a block.
                self.inodes[ino as usize].inline = false;
                if cur > 0 {
                    let b = self.alloc(Role::Data);
                    allocated.push(b);
                    self.inodes[ino as usize].set_block(0, b);
                    carry = Some((
                        b,
                        InlineSpan {
                            offset: (inode_slot_offset(ino) + INLINE_OFFSET) as u16,
                            len: cur as u16,
                        },
                    ));
                }
                self.inodes[ino as usize].size = new_size;
            }
        } else if new_size < cur {
            let keep = new_size.div_ceil(BLOCK_SIZE as u64);
            let doomed: Vec<(u64, u64)> = self.inodes[ino as usize].blocks().filter(|&(i, _)| i >= keep).collect();
            for (idx, b) in doomed {
                self.inodes[ino as usize].set_block(idx, 0);
                self.release(b);
                freed.push(b);
                indirect_dirty |= idx >= DIRECT_POINTERS as u64;
            }
            let inode = &mut self.inodes[ino as usize];
            if inode.indirect != 0 && inode.indirect_ptrs.iter().all(|&p| p == 0) {
                let ib = inode.indirect;
                inode.indirect = 0;
                inode.indirect_ptrs.clear();
                self.release(ib);
                freed.push(ib);
                indirect_dirty = false;
            }
            self.inodes[ino as usize].size = new_size;
        } else {
            self.inodes[ino as usize].size = new_size;
        }

        if let Some((b, span)) = carry {
            reqs.push(DiskRequest {
                image: self.image,
                op: DiskOp::Write,
                vblock: b,
                clazz: BlockClass::Filedata,
                payload: Payload::InlineCarry {
                    from_vblock: inode_block,
                    span,
                    token: OpaqueRef(0),
                },
                length: 1,
            });
        }
        reqs.push(self.inode_block_write(inode_block));
        allocated.extend(freed);
        self.push_bitmap_writes(&allocated, reqs);
        if indirect_dirty {
            let ib = self.inodes[ino as usize].indirect;
            reqs.push(DiskRequest::metadata_write(self.image, ib, self.encode_indirect(ino)));
        }
    }

    fn apply_unlink(&mut self, lk: &Lookup, ino: u32, reqs: &mut Vec<DiskRequest>) {
        let inode = std::mem::take(&mut self.inodes[ino as usize]);
        let mut freed: Vec<u64> = inode.blocks().map(|(_, b)| b).collect();
        if inode.indirect != 0 {
            freed.push(inode.indirect);
        }
        for &b in &freed {
            self.release(b);
        }
        if inode.kind == InodeKind::Dir {
            self.dirs.remove(&ino);
        }
        let parent = lk.parent;
        let slot = self.dirs[&parent]
            .iter()
            .position(|e| e.as_ref().is_some_and(|e| e.ino == ino))
            .expect("entry present");
        self.dirs.get_mut(&parent).expect("directory")[slot] = None;

        reqs.push(self.inode_block_write(self.layout.inode_block(ino)));
        let dir_bi = (slot / DIRENTS_PER_BLOCK) as u64;
        let dir_block = self.inodes[parent as usize].block_at(dir_bi);
        reqs.push(DiskRequest::metadata_write(self.image, dir_block, self.encode_dir_block(parent, dir_bi)));
        self.push_bitmap_writes(&freed, reqs);
    }

    fn push_bitmap_writes(&self, touched: &[u64], reqs: &mut Vec<DiskRequest>) {
        let blocks: BTreeSet<u64> = touched.iter().map(|&b| self.layout.bitmap_block(b)).collect();
        for b in blocks {
            reqs.push(DiskRequest::metadata_write(self.image, b, self.encode_bitmap_block(b)));
        }
    }

    fn inline_spans(&self, inode_block: u64) -> Vec<InlineSpan> {
        let first = ((inode_block - self.layout.inode_table_range.start) as usize * INODES_PER_BLOCK) as u32;
        (first..first + INODES_PER_BLOCK as u32)
            .filter(|&i| {
                let n = &self.inodes[i as usize];
                n.inline && n.size > 0
            })
            .map(|i| InlineSpan {
                offset: (inode_slot_offset(i) + INLINE_OFFSET) as u16,
                len: self.inodes[i as usize].size as u16,
            })
            .collect()
    }

    /// Write of a whole inode block: mixed when any inode in it is inlined.
    fn inode_block_write(&self, block: u64) -> DiskRequest {
        let bytes = self.encode_inode_block(block);
        let spans = self.inline_spans(block);
        if spans.is_empty() {
            DiskRequest::metadata_write(self.image, block, bytes)
        } else {
            DiskRequest {
                image: self.image,
                op: DiskOp::Write,
                vblock: block,
                clazz: BlockClass::Mixed,
                payload: Payload::Mixed {
                    os: Some(bytes),
                    spans,
                    data: None,
                },
                length: 1,
            }
        }
    }

    fn encode_inode_block(&self, block: u64) -> Vec<u8> {
        let mut out = vec![0u8; BLOCK_SIZE];
        let first = (block - self.layout.inode_table_range.start) as usize * INODES_PER_BLOCK;
        for (i, chunk) in out.chunks_mut(INODE_SIZE).enumerate() {
            self.inodes[first + i].encode(chunk);
        }
        out
    }

    fn encode_bitmap_block(&self, block: u64) -> Vec<u8> {
        let mut out = vec![0u8; BLOCK_SIZE];
        let base = ((block - self.layout.bitmap_range.start) * BITS_PER_BITMAP_BLOCK) as usize;
        for bit in 0..BITS_PER_BITMAP_BLOCK as usize {
            if self.bitmap.get(base + bit).copied().unwrap_or(false) {
                out[bit / 8] |= 1 << (bit % 8);
            }
        }
        out
    }

    fn encode_dir_block(&self, dir: u32, bi: u64) -> Vec<u8> {
        let mut out = vec![0u8; BLOCK_SIZE];
        let slots = &self.dirs[&dir];
        let lo = bi as usize * DIRENTS_PER_BLOCK;
        for (i, e) in slots[lo..lo + DIRENTS_PER_BLOCK].iter().enumerate() {
            if let Some(e) = e {
                let at = i * DIRENT_SIZE;
                out[at..at + 4].copy_from_slice(&e.ino.to_le_bytes());
                out[at + 4] = e.name.len() as u8;
                out[at + 5..at + 5 + e.name.len()].copy_from_slice(e.name.as_bytes());
            }
        }
        out
    }

    fn encode_indirect(&self, ino: u32) -> Vec<u8> {
        let mut out = vec![0u8; BLOCK_SIZE];
        for (i, p) in self.inodes[ino as usize].indirect_ptrs.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&p.to_le_bytes());
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Role {
    Directory,
    Map,
    Data,
}

fn inode_slot_offset(ino: u32) -> usize {
    (ino as usize % INODES_PER_BLOCK) * INODE_SIZE
}

fn split_path(path: &str) -> Result<Vec<&str>> {
    let rest = path.strip_prefix('/').ok_or_else(|| Error::InvalidPath(path.into()))?;
    if rest.is_empty() {
        return Ok(Vec::new());
    }
    let comps: Vec<&str> = rest.split('/').collect();
    if comps.iter().any(|c| c.is_empty() || *c == "." || *c == ".." || c.len() > NAME_MAX) {
        return Err(Error::InvalidPath(path.into()));
    }
    Ok(comps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simfs::BlockClass::*;

    const IMG: DiskName = DiskName(0x10);

    fn fresh(blocks: u64) -> SimFs {
        SimFs::mkfs(IMG, blocks, FsOptions::default()).unwrap().0
    }

    fn writes(reqs: &[DiskRequest]) -> Vec<(BlockClass, u64)> {
        reqs.iter().filter(|r| r.op == DiskOp::Write).map(|r| (r.clazz, r.vblock)).collect()
    }

    #[test]
    fn mkfs_places_superblock_at_zero() {
        let (fs, reqs) = SimFs::mkfs(IMG, 16384, FsOptions::default()).unwrap();
        assert_eq!(fs.layout().superblock_range, 0..1);
        assert_eq!(reqs[0].vblock, 0);
        assert!(reqs.iter().all(|r| r.clazz == Metadata && r.op == DiskOp::Write));
        assert_eq!(fs.layout().inode_count(), 256 * 16);
    }

    #[test]
    fn mkfs_is_deterministic() {
        let a = SimFs::mkfs(IMG, 4096, FsOptions::default()).unwrap();
        let b = SimFs::mkfs(IMG, 4096, FsOptions::default()).unwrap();
        assert_eq!(a.1, b.1);
        assert!(a.0.same_metadata(&b.0));
    }

    #[test]
    fn mkfs_rejects_tiny_disk() {
        let err = SimFs::mkfs(IMG, 2, FsOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DiskTooSmall { blocks: 2, .. }), "{err}");
        assert!(err.to_string().contains("disk too small"));
    }

    #[test]
    fn two_block_write_to_fresh_file() {
        let mut fs = fresh(4096);
        fs.exec_file_call(&FileCall::new(CallKind::Create, "/a")).unwrap();
        let reqs = fs
            .exec_file_call(&FileCall::write("/a", 0, 2 * BLOCK_SIZE as u64, OpaqueRef(5)))
            .unwrap();
        let inode_block = fs.layout().inode_block(2);
        let bitmap_block = fs.layout().bitmap_range.start;
        let w = writes(&reqs);
        assert_eq!(w.len(), 4);
        assert_eq!(w[0], (Metadata, inode_block));
        assert_eq!(w[1], (Metadata, bitmap_block));
        assert_eq!(w[2].0, Filedata);
        assert_eq!(w[3].0, Filedata);
        for r in reqs.iter().filter(|r| r.clazz == Filedata) {
            assert_eq!(r.payload.token(), Some(OpaqueRef(5)));
        }
        assert!(reqs.iter().all(DiskRequest::is_well_formed));
    }

    #[test]
    fn small_inlined_file_reads_as_one_mixed_request() {
        let mut fs = fresh(4096);
        let w = fs
            .exec_file_call(&FileCall::write("/k", 0, 100, OpaqueRef(1)).with_flags(OpenFlags::CREATE))
            .unwrap();
        assert_eq!(w.iter().filter(|r| r.clazz == Mixed).count(), 1);
        assert_eq!(w.iter().filter(|r| r.clazz == Filedata).count(), 0);
        assert!(fs.stat("/k").unwrap().inlined);
        let r = fs.exec_file_call(&FileCall::read("/k", 0, 100, OpaqueRef(2))).unwrap();
        assert_eq!(r.iter().filter(|r| r.clazz == Mixed).count(), 1);
        assert_eq!(r.iter().filter(|r| r.clazz == Filedata).count(), 0);
    }

    #[test]
    fn growing_an_inlined_file_carries_its_bytes() {
        let mut fs = fresh(4096);
        fs.exec_file_call(&FileCall::write("/k", 0, 100, OpaqueRef(1)).with_flags(OpenFlags::CREATE))
            .unwrap();
        let reqs = fs.exec_file_call(&FileCall::write("/k", 100, 200, OpaqueRef(2))).unwrap();
        assert!(matches!(reqs.iter().find(|r| r.op == DiskOp::Write).unwrap().payload, Payload::InlineCarry { .. }));
        assert!(!fs.stat("/k").unwrap().inlined);
        assert_eq!(fs.stat("/k").unwrap().size, 300);
    }

    #[test]
    fn fstat_moves_no_filedata() {
        let mut fs = fresh(4096);
        fs.exec_file_call(&FileCall::write("/a", 0, 9000, OpaqueRef(1)).with_flags(OpenFlags::CREATE))
            .unwrap();
        let reqs = fs.exec_file_call(&FileCall::new(CallKind::Fstat, "/a")).unwrap();
        assert!(!reqs.is_empty());
        assert!(reqs.iter().all(|r| r.clazz == Metadata && r.op == DiskOp::Read));
    }

    #[test]
    fn missing_file_and_out_of_bound_read_are_errors() {
        let mut fs = fresh(4096);
        assert!(matches!(
            fs.exec_file_call(&FileCall::new(CallKind::Open, "/nope")),
            Err(Error::NotFound(_))
        ));
        fs.exec_file_call(&FileCall::write("/a", 0, 10, OpaqueRef(1)).with_flags(OpenFlags::CREATE))
            .unwrap();
        assert!(matches!(
            fs.exec_file_call(&FileCall::read("/a", 11, 1, OpaqueRef(2))),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn freed_data_blocks_are_repurposed_for_metadata() {
        let mut fs = fresh(4096);
        fs.exec_file_call(&FileCall::write("/a", 0, 4096, OpaqueRef(1)).with_flags(OpenFlags::CREATE))
            .unwrap();
        let data_block = *fs.layout().data_block_set.iter().next().unwrap();
        fs.exec_file_call(&FileCall::new(CallKind::Unlink, "/a")).unwrap();
        let reqs = fs.exec_file_call(&FileCall::new(CallKind::Mkdir, "/d")).unwrap();
        assert!(fs.layout().directory_block_set.contains(&data_block));
        assert!(writes(&reqs).contains(&(Metadata, data_block)));
    }

    #[test]
    fn large_file_uses_indirect_map() {
        let mut fs = fresh(4096);
        let size = 40 * BLOCK_SIZE as u64;
        let reqs = fs
            .exec_file_call(&FileCall::write("/big", 0, size, OpaqueRef(1)).with_flags(OpenFlags::CREATE))
            .unwrap();
        assert_eq!(reqs.iter().filter(|r| r.clazz == Filedata).count(), 40);
        assert_eq!(fs.layout().map_block_set.len(), 1);
        let r = fs.exec_file_call(&FileCall::read("/big", 0, size, OpaqueRef(2))).unwrap();
        assert_eq!(r.iter().filter(|r| r.clazz == Filedata).count(), 40);
        fs.exec_file_call(&FileCall::new(CallKind::Truncate, "/big")).unwrap();
        assert!(fs.layout().map_block_set.is_empty());
        assert!(fs.layout().data_block_set.is_empty());
    }

    #[test]
    fn check_matches_exec() {
        let fs = fresh(64);
        // 64-block disk has 58 data blocks, one already used by the root.
        let too_big = FileCall::write("/a", 0, 60 * BLOCK_SIZE as u64, OpaqueRef(1)).with_flags(OpenFlags::CREATE);
        assert!(matches!(fs.check(&too_big), Err(Error::NoSpace { .. })));
        let mut fs2 = fs.clone();
        assert!(fs2.exec_file_call(&too_big).is_err());
        assert!(fs2.same_metadata(&fs));
    }
}
