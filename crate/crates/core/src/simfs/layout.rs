use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub const BLOCK_SIZE: usize = 4096;
pub const INODE_SIZE: usize = 256;
pub const INODES_PER_BLOCK: usize = BLOCK_SIZE / INODE_SIZE;
pub const DIRECT_POINTERS: usize = 28;
pub const POINTERS_PER_BLOCK: usize = BLOCK_SIZE / 8;
pub const MAX_FILE_BLOCKS: u64 = (DIRECT_POINTERS + POINTERS_PER_BLOCK) as u64;
/// Offset of the pointer area inside an inode; inlined bytes live there.
pub const INLINE_OFFSET: usize = 24;
pub const INLINE_CAPACITY: usize = DIRECT_POINTERS * 8;
pub const DIRENT_SIZE: usize = 64;
pub const DIRENTS_PER_BLOCK: usize = BLOCK_SIZE / DIRENT_SIZE;
pub const NAME_MAX: usize = DIRENT_SIZE - 5;
pub const BITS_PER_BITMAP_BLOCK: u64 = (BLOCK_SIZE * 8) as u64;

pub(crate) const SUPERBLOCK_MAGIC: &[u8; 8] = b"SIMFS\0\0\x01";

/// Static regions plus the dynamic block-role sets of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimFsLayout {
    pub block_size: usize,
    pub disk_blocks: u64,
    pub superblock_range: Range<u64>,
    pub inode_table_range: Range<u64>,
    pub bitmap_range: Range<u64>,
    pub directory_block_set: BTreeSet<u64>,
    /// Indirect block maps. Metadata, like directories.
    pub map_block_set: BTreeSet<u64>,
    pub data_block_set: BTreeSet<u64>,
    pub inline_threshold: usize,
}

impl SimFsLayout {
    pub(crate) fn inode_blocks_for(disk_blocks: u64) -> u64 {
        (disk_blocks / 64).clamp(1, 256)
    }

    pub(crate) fn bitmap_blocks_for(disk_blocks: u64) -> u64 {
        disk_blocks.div_ceil(BITS_PER_BITMAP_BLOCK).max(1)
    }

    /// Superblock + inode table + bitmap + the root directory block.
    pub fn minimum_blocks(disk_blocks: u64) -> u64 {
        1 + Self::inode_blocks_for(disk_blocks) + Self::bitmap_blocks_for(disk_blocks) + 1
    }

    pub(crate) fn new(disk_blocks: u64, inline_threshold: usize) -> Self {
        let inodes = Self::inode_blocks_for(disk_blocks);
        let bitmaps = Self::bitmap_blocks_for(disk_blocks);
        Self {
            block_size: BLOCK_SIZE,
            disk_blocks,
            superblock_range: 0..1,
            inode_table_range: 1..1 + inodes,
            bitmap_range: 1 + inodes..1 + inodes + bitmaps,
            directory_block_set: BTreeSet::new(),
            map_block_set: BTreeSet::new(),
            data_block_set: BTreeSet::new(),
            inline_threshold,
        }
    }

    pub fn data_region_start(&self) -> u64 {
        self.bitmap_range.end
    }

    pub fn inode_count(&self) -> u32 {
        ((self.inode_table_range.end - self.inode_table_range.start) as usize * INODES_PER_BLOCK) as u32
    }

    pub fn inode_block(&self, ino: u32) -> u64 {
        self.inode_table_range.start + ino as u64 / INODES_PER_BLOCK as u64
    }

    pub fn bitmap_block(&self, block: u64) -> u64 {
        self.bitmap_range.start + block / BITS_PER_BITMAP_BLOCK
    }

    /// Whether `vblock` holds filesystem metadata in the current layout.
    pub fn is_metadata_block(&self, vblock: u64) -> bool {
        vblock < self.data_region_start()
            || self.directory_block_set.contains(&vblock)
            || self.map_block_set.contains(&vblock)
    }

    pub(crate) fn encode_superblock(&self) -> Vec<u8> {
        let mut b = vec![0u8; BLOCK_SIZE];
        b[0..8].copy_from_slice(SUPERBLOCK_MAGIC);
        let fields = [
            self.block_size as u64,
            self.disk_blocks,
            self.inode_count() as u64,
            self.inode_table_range.start,
            self.inode_table_range.end,
            self.bitmap_range.start,
            self.bitmap_range.end,
            self.inline_threshold as u64,
        ];
        for (i, f) in fields.iter().enumerate() {
            b[8 + i * 8..16 + i * 8].copy_from_slice(&f.to_le_bytes());
        }
        b
    }
}
