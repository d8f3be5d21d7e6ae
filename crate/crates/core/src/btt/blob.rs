use std::collections::{BTreeSet, HashMap};

use crate::simfs::BLOCK_SIZE;
use crate::{Error, Result};

/// Shared physical store for sybil metadata.
///
/// Allocation is sequential; blocks freed by retirement go to a free list
/// that is drained lowest-first before the cursor advances again.
#[derive(Debug, Clone)]
pub struct MetadataBlob {
    capacity: u64,
    next_free: u64,
    free_list: BTreeSet<u64>,
    blocks: HashMap<u64, Vec<u8>>,
}

impl MetadataBlob {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            next_free: 0,
            free_list: BTreeSet::new(),
            blocks: HashMap::new(),
        }
    }

    pub fn alloc(&mut self) -> Result<u64> {
        if let Some(b) = self.free_list.pop_first() {
            return Ok(b);
        }
        if self.next_free >= self.capacity {
            return Err(Error::BlobExhausted {
                capacity: self.capacity,
            });
        }
        self.next_free += 1;
        Ok(self.next_free - 1)
    }

    pub fn free(&mut self, b: u64) {
        debug_assert!(b < self.next_free && !self.free_list.contains(&b));
        self.blocks.remove(&b);
        self.free_list.insert(b);
    }

    pub fn read(&self, b: u64) -> Vec<u8> {
        self.blocks.get(&b).cloned().unwrap_or_else(|| vec![0; BLOCK_SIZE])
    }

    pub fn write(&mut self, b: u64, bytes: Vec<u8>) {
        debug_assert_eq!(bytes.len(), BLOCK_SIZE);
        self.blocks.insert(b, bytes);
    }

    /// Blocks currently allocated.
    pub fn allocated(&self) -> u64 {
        self.next_free - self.free_list.len() as u64
    }

    /// Highest cursor position ever reached.
    pub fn high_water(&self) -> u64 {
        self.next_free
    }

    pub fn bytes(&self) -> u64 {
        self.allocated() * BLOCK_SIZE as u64
    }

    pub fn is_allocated(&self, b: u64) -> bool {
        b < self.next_free && !self.free_list.contains(&b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_then_reuse_lowest_freed() {
        let mut blob = MetadataBlob::new(8);
        let a: Vec<u64> = (0..4).map(|_| blob.alloc().unwrap()).collect();
        assert_eq!(a, [0, 1, 2, 3]);
        blob.free(2);
        blob.free(1);
        assert_eq!(blob.allocated(), 2);
        assert_eq!(blob.alloc().unwrap(), 1);
        assert_eq!(blob.alloc().unwrap(), 2);
        assert_eq!(blob.alloc().unwrap(), 4);
    }

    #[test]
    fn exhaustion_is_an_error() {
        let mut blob = MetadataBlob::new(1);
        blob.alloc().unwrap();
        assert!(matches!(blob.alloc(), Err(Error::BlobExhausted { capacity: 1 })));
    }
}
