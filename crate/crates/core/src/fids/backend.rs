use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backstore::{Backstore, Role};
use crate::ids::{Digest, DiskName};
use crate::{Error, Result};

/// Operations identity shuffling needs from the storage side.
pub trait ImageBackend {
    fn digest(&mut self, image: DiskName) -> Result<Digest>;
    /// Creates `dst` as a metadata clone of `src`.
    fn fork(&mut self, src: DiskName, dst: DiskName) -> Result<()>;
    /// Rebinds `participants` to `products`; returns the secret renaming.
    fn shuffle(&mut self, participants: &[DiskName], products: &[DiskName]) -> Result<BTreeMap<DiskName, DiskName>>;
    fn retire(&mut self, image: DiskName) -> Result<()>;
    fn is_actual(&self, image: DiskName) -> bool;
}

impl ImageBackend for Backstore {
    fn digest(&mut self, image: DiskName) -> Result<Digest> {
        self.metadata_digest(image)
    }

    fn fork(&mut self, src: DiskName, dst: DiskName) -> Result<()> {
        self.clone_image(src, dst)
    }

    fn shuffle(&mut self, participants: &[DiskName], products: &[DiskName]) -> Result<BTreeMap<DiskName, DiskName>> {
        Backstore::shuffle(self, participants, products)
    }

    fn retire(&mut self, image: DiskName) -> Result<()> {
        Backstore::retire(self, image)
    }

    fn is_actual(&self, image: DiskName) -> bool {
        self.role(image) == Some(Role::Actual)
    }
}

/// In-memory backend where metadata is a bare digest. Used to fuzz the
/// scheduling logic without storage.
#[derive(Debug, Clone)]
pub struct MockBackend {
    digests: BTreeMap<DiskName, Digest>,
    actual: Option<DiskName>,
    rng: ChaCha8Rng,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            digests: BTreeMap::new(),
            actual: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: DiskName, digest: Digest, actual: bool) {
        self.digests.insert(name, digest);
        if actual {
            self.actual = Some(name);
        }
    }

    /// Simulates a metadata change on `image`.
    pub fn set_digest(&mut self, image: DiskName, digest: Digest) {
        if let Some(d) = self.digests.get_mut(&image) {
            *d = digest;
        }
    }

    pub fn actual(&self) -> Option<DiskName> {
        self.actual
    }

    pub fn names(&self) -> impl Iterator<Item = DiskName> + '_ {
        self.digests.keys().copied()
    }
}

impl ImageBackend for MockBackend {
    fn digest(&mut self, image: DiskName) -> Result<Digest> {
        self.digests.get(&image).copied().ok_or(Error::UnknownImage(image))
    }

    fn fork(&mut self, src: DiskName, dst: DiskName) -> Result<()> {
        let d = self.digest(src)?;
        if self.digests.insert(dst, d).is_some() {
            return Err(Error::DuplicateImage(dst));
        }
        Ok(())
    }

    fn shuffle(&mut self, participants: &[DiskName], products: &[DiskName]) -> Result<BTreeMap<DiskName, DiskName>> {
        if participants.len() < 2 {
            return Err(Error::ShuffleTooSmall(participants.len()));
        }
        let d = self.digest(participants[0])?;
        for &p in participants {
            if self.digest(p)? != d {
                return Err(Error::MetadataMismatch);
            }
        }
        let mut targets = products.to_vec();
        targets.shuffle(&mut self.rng);
        let mut renaming = BTreeMap::new();
        for (&old, new) in participants.iter().zip(targets) {
            self.digests.remove(&old);
            renaming.insert(old, new);
        }
        for &new in renaming.values() {
            self.digests.insert(new, d);
        }
        if let Some(a) = self.actual {
            if let Some(&n) = renaming.get(&a) {
                self.actual = Some(n);
            }
        }
        Ok(renaming)
    }

    fn retire(&mut self, image: DiskName) -> Result<()> {
        if self.actual == Some(image) {
            return Err(Error::RetireActual);
        }
        self.digests.remove(&image).map(|_| ()).ok_or(Error::UnknownImage(image))
    }

    fn is_actual(&self, image: DiskName) -> bool {
        self.actual == Some(image)
    }
}
