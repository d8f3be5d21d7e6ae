//! A small deterministic filesystem that turns file calls into classified
//! disk requests.
//!
//! The on-disk shape is a superblock at block 0, a fixed inode table, a
//! block bitmap, and a data region from which directory blocks, indirect
//! block maps and file data are allocated first-fit. Small files may be
//! inlined into their inode, which makes the inode block "mixed".

mod fs;
mod layout;

pub use fs::{FsOptions, SimFs};
pub use layout::{
    SimFsLayout, BLOCK_SIZE, DIRECT_POINTERS, INLINE_CAPACITY, INODES_PER_BLOCK, INODE_SIZE,
    MAX_FILE_BLOCKS, NAME_MAX,
};

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::ids::{DiskName, OpaqueRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Open,
    Create,
    Read,
    Write,
    Seek,
    Fstat,
    Truncate,
    Unlink,
    Mkdir,
    Close,
}

impl CallKind {
    /// Whether the call moves file content and therefore carries an opaque
    /// buffer reference.
    pub fn moves_filedata(self) -> bool {
        matches!(self, CallKind::Read | CallKind::Write)
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
    pub struct OpenFlags: u32 {
        const CREATE = 0x1;
        const TRUNC = 0x2;
        const APPEND = 0x4;
    }
}

/// A file call as the trustlet issues it and the OS sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileCall {
    pub kind: CallKind,
    pub path: String,
    #[serde(default)]
    pub offset: u64,
    #[serde(default)]
    pub size: u64,
    #[serde(default)]
    pub flags: OpenFlags,
    #[serde(default, rename = "ref", skip_serializing_if = "Option::is_none")]
    pub buffer_ref: Option<OpaqueRef>,
    /// Monotonic virtual microseconds.
    #[serde(default, rename = "t")]
    pub timestamp: u64,
}

impl FileCall {
    pub fn new(kind: CallKind, path: impl Into<String>) -> Self {
        Self {
            kind,
            path: path.into(),
            offset: 0,
            size: 0,
            flags: OpenFlags::empty(),
            buffer_ref: None,
            timestamp: 0,
        }
    }

    pub fn read(path: impl Into<String>, offset: u64, size: u64, token: OpaqueRef) -> Self {
        Self {
            offset,
            size,
            buffer_ref: Some(token),
            ..Self::new(CallKind::Read, path)
        }
    }

    pub fn write(path: impl Into<String>, offset: u64, size: u64, token: OpaqueRef) -> Self {
        Self {
            offset,
            size,
            buffer_ref: Some(token),
            ..Self::new(CallKind::Write, path)
        }
    }

    pub fn with_flags(mut self, flags: OpenFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn at(mut self, timestamp: u64) -> Self {
        self.timestamp = timestamp;
        self
    }

    /// Checks the buffer-reference invariant: present iff the call moves
    /// filedata.
    pub fn check_well_formed(&self) -> crate::Result<()> {
        match (self.kind.moves_filedata(), self.buffer_ref.is_some()) {
            (true, false) => Err(crate::Error::MalformedCall(format!(
                "{:?} on {} without a buffer reference",
                self.kind, self.path
            ))),
            (false, true) => Err(crate::Error::MalformedCall(format!(
                "{:?} on {} carries a buffer reference",
                self.kind, self.path
            ))),
            _ => Ok(()),
        }
    }

    /// Bytes read by this call as issued (before any clamping).
    pub fn read_bytes(&self) -> u64 {
        if self.kind == CallKind::Read {
            self.size
        } else {
            0
        }
    }

    pub fn write_bytes(&self) -> u64 {
        if self.kind == CallKind::Write {
            self.size
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiskOp {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockClass {
    Metadata,
    Filedata,
    Mixed,
}

/// Byte range of inlined filedata inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InlineSpan {
    pub offset: u16,
    pub len: u16,
}

impl InlineSpan {
    pub fn range(self) -> std::ops::Range<usize> {
        self.offset as usize..self.offset as usize + self.len as usize
    }
}

/// Where filedata of a request lives in the trustlet buffer named by
/// `token`, and where it lands in the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataWindow {
    pub token: OpaqueRef,
    pub buf_offset: u64,
    pub block_offset: u32,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// Metadata to or from an OS buffer; writes carry the whole block.
    OsBuffer(Option<Vec<u8>>),
    /// Filedata between the block and a trustlet buffer.
    Opaque(DataWindow),
    /// An inode block holding inlined filedata. `spans` lists every inlined
    /// range of the block after the request.
    Mixed {
        os: Option<Vec<u8>>,
        spans: Vec<InlineSpan>,
        data: Option<DataWindow>,
    },
    /// Moves the inlined bytes at `from_vblock`/`span` into this filedata
    /// block, on behalf of the call owning `token`.
    InlineCarry {
        from_vblock: u64,
        span: InlineSpan,
        token: OpaqueRef,
    },
}

impl Payload {
    pub fn token(&self) -> Option<OpaqueRef> {
        match self {
            Payload::OsBuffer(_) => None,
            Payload::Opaque(w) => Some(w.token),
            Payload::Mixed { data, .. } => data.map(|w| w.token),
            Payload::InlineCarry { token, .. } => Some(*token),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskRequest {
    pub image: DiskName,
    pub op: DiskOp,
    pub vblock: u64,
    pub clazz: BlockClass,
    pub payload: Payload,
    /// Length in blocks.
    pub length: u32,
}

impl DiskRequest {
    pub fn metadata_read(image: DiskName, vblock: u64) -> Self {
        Self {
            image,
            op: DiskOp::Read,
            vblock,
            clazz: BlockClass::Metadata,
            payload: Payload::OsBuffer(None),
            length: 1,
        }
    }

    pub fn metadata_write(image: DiskName, vblock: u64, bytes: Vec<u8>) -> Self {
        Self {
            image,
            op: DiskOp::Write,
            vblock,
            clazz: BlockClass::Metadata,
            payload: Payload::OsBuffer(Some(bytes)),
            length: 1,
        }
    }

    pub fn filedata(image: DiskName, op: DiskOp, vblock: u64, window: DataWindow) -> Self {
        Self {
            image,
            op,
            vblock,
            clazz: BlockClass::Filedata,
            payload: Payload::Opaque(window),
            length: 1,
        }
    }

    /// Class/payload agreement: filedata travels only by opaque reference,
    /// metadata only through OS buffers.
    pub fn is_well_formed(&self) -> bool {
        let payload_ok = matches!(
            (&self.clazz, &self.payload),
            (BlockClass::Filedata, Payload::Opaque(_) | Payload::InlineCarry { .. })
                | (BlockClass::Metadata, Payload::OsBuffer(_))
                | (BlockClass::Mixed, Payload::Mixed { .. })
        );
        let direction_ok = match (&self.op, &self.payload) {
            (DiskOp::Write, Payload::OsBuffer(b)) => b.as_ref().is_some_and(|b| b.len() == BLOCK_SIZE),
            (DiskOp::Read, Payload::OsBuffer(b)) => b.is_none(),
            (DiskOp::Read, Payload::InlineCarry { .. }) => false,
            (DiskOp::Write, Payload::Mixed { os, .. }) => os.is_some(),
            (DiskOp::Read, Payload::Mixed { os, .. }) => os.is_none(),
            _ => true,
        };
        payload_ok && direction_ok && self.length == 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_ref_presence_matches_kind() {
        let t = OpaqueRef(1);
        assert!(FileCall::read("/a", 0, 1, t).check_well_formed().is_ok());
        assert!(FileCall::new(CallKind::Read, "/a").check_well_formed().is_err());
        let mut stat = FileCall::new(CallKind::Fstat, "/a");
        assert!(stat.check_well_formed().is_ok());
        stat.buffer_ref = Some(t);
        assert!(stat.check_well_formed().is_err());
    }

    #[test]
    fn file_call_json_shape() {
        let c = FileCall::write("/db/x", 4096, 100, OpaqueRef(7)).at(55);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(
            s,
            r#"{"kind":"write","path":"/db/x","offset":4096,"size":100,"flags":"","ref":7,"t":55}"#
        );
        assert_eq!(serde_json::from_str::<FileCall>(&s).unwrap(), c);
    }
}
