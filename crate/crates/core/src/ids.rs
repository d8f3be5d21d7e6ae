//! Identifiers shared across modules: OS-visible disk names, single-use
//! opaque buffer references and metadata digests.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

/// Name of a virtual disk as seen by the OS.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DiskName(pub u64);

impl fmt::Display for DiskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vd{:016x}", self.0)
    }
}

impl fmt::Debug for DiskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for DiskName {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let hex = s
            .strip_prefix("vd")
            .ok_or_else(|| crate::Error::Format(format!("bad disk name {s:?}")))?;
        u64::from_str_radix(hex, 16)
            .map(DiskName)
            .map_err(|e| crate::Error::Format(format!("bad disk name {s:?}: {e}")))
    }
}

impl Serialize for DiskName {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DiskName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Draws fresh disk names that never collide with any name issued before.
#[derive(Debug, Clone, Default)]
pub struct NameMint {
    issued: HashSet<u64>,
}

impl NameMint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh<R: Rng + ?Sized>(&mut self, rng: &mut R) -> DiskName {
        loop {
            let v = rng.random::<u64>();
            if self.issued.insert(v) {
                return DiskName(v);
            }
        }
    }

    pub fn contains(&self, name: DiskName) -> bool {
        self.issued.contains(&name.0)
    }
}

/// A 64-bit token standing for a trustlet-side buffer. Valid for one file
/// call only.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OpaqueRef(pub u64);

impl fmt::Debug for OpaqueRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ref:{:016x}", self.0)
    }
}

/// Issues unpredictable, never-repeating opaque references.
#[derive(Debug)]
pub struct RefMint<R> {
    rng: R,
    issued: HashSet<u64>,
}

impl<R: RngCore> RefMint<R> {
    pub fn new(rng: R) -> Self {
        Self {
            rng,
            issued: HashSet::new(),
        }
    }

    pub fn mint(&mut self) -> OpaqueRef {
        loop {
            let v = self.rng.next_u64();
            if self.issued.insert(v) {
                return OpaqueRef(v);
            }
        }
    }

    pub fn issued(&self) -> usize {
        self.issued.len()
    }
}

/// SHA-256 digest, used for metadata identity and response fingerprints.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Digest(out))
    }
}
