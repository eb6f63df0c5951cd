//! Append-only key/value store shared by backbone and insertion layers.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Keys (already rotary-encoded) and values for one attention layer.
#[derive(Debug, Clone)]
pub struct KvEntry<S> {
    pub(crate) keys: Vec<S>,
    pub(crate) values: Vec<S>,
    width: usize,
    len: usize,
}

impl<S: Scalar> KvEntry<S> {
    pub fn new(width: usize) -> Self {
        KvEntry {
            keys: Vec::new(),
            values: Vec::new(),
            width,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub(crate) fn append(&mut self, keys: &[S], values: &[S]) -> Result<()> {
        if keys.len() != values.len() || !keys.len().is_multiple_of(self.width) {
            return Err(Error::shape(
                "kv append",
                &[keys.len(), values.len()],
                &[self.width],
            ));
        }
        self.keys.extend_from_slice(keys);
        self.values.extend_from_slice(values);
        self.len += keys.len() / self.width;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CacheKey {
    Backbone(usize),
    Insertion(usize),
}

/// Per-request cache covering all backbone layers and all insertion layers.
#[derive(Debug, Clone)]
pub struct KvCache<S = f32> {
    backbone: Vec<KvEntry<S>>,
    insertions: Vec<KvEntry<S>>,
    max_len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(n_backbone: usize, n_insertions: usize, width: usize, max_len: usize) -> Self {
        KvCache {
            backbone: (0..n_backbone).map(|_| KvEntry::new(width)).collect(),
            insertions: (0..n_insertions).map(|_| KvEntry::new(width)).collect(),
            max_len,
        }
    }

    /// Positions already stored; every active entry shares it.
    pub fn len(&self) -> usize {
        self.backbone.first().map_or(0, KvEntry::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn n_backbone(&self) -> usize {
        self.backbone.len()
    }

    pub fn n_insertions(&self) -> usize {
        self.insertions.len()
    }

    pub fn entry(&self, key: CacheKey) -> Option<&KvEntry<S>> {
        match key {
            CacheKey::Backbone(i) => self.backbone.get(i),
            CacheKey::Insertion(i) => self.insertions.get(i),
        }
    }

    pub fn entry_mut(&mut self, key: CacheKey) -> Result<&mut KvEntry<S>> {
        let slot = match key {
            CacheKey::Backbone(i) => self.backbone.get_mut(i),
            CacheKey::Insertion(i) => self.insertions.get_mut(i),
        };
        slot.ok_or_else(|| Error::InvalidArgument(format!("cache has no entry {key:?}")))
    }

    /// Checks that all backbone entries share one length and every insertion
    /// entry that has been written matches it.
    pub fn is_coherent(&self) -> bool {
        let len = self.len();
        self.backbone.iter().all(|e| e.len() == len)
            && self.insertions.iter().all(|e| e.len() == len)
    }

    pub(crate) fn check_room(&self, extra: usize) -> Result<()> {
        let len = self.len() + extra;
        if len > self.max_len {
            return Err(Error::SequenceOverflow {
                len,
                max: self.max_len,
            });
        }
        Ok(())
    }
}
