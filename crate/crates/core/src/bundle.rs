//! Plaintext layout for key-carrying ciphertexts.
//!
//! A bundle is a list of `(key id, parent node, key bytes)` entries. The parent
//! link lets a recipient keep its view of the tree path current; node 0 stands
//! for "no parent" (the root, or a key that is not part of a tree).

use zeroize::Zeroizing;

use crate::crypto::SecretKey;
use crate::key_tree::{NodeId, VersionedKeyId};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Clone)]
pub struct BundleEntry {
    pub id: VersionedKeyId,
    pub parent: Option<NodeId>,
    pub key: SecretKey,
}

#[derive(Debug, Clone, Default)]
pub struct KeyBundle {
    pub entries: Vec<BundleEntry>,
}

impl KeyBundle {
    pub fn new(entries: Vec<BundleEntry>) -> Self {
        Self { entries }
    }

    pub fn single(id: VersionedKeyId, parent: Option<NodeId>, key: SecretKey) -> Self {
        Self::new(vec![BundleEntry { id, parent, key }])
    }

    pub fn encode(&self) -> Result<Zeroizing<Vec<u8>>, crate::crypto::CryptoError> {
        let mut w = Writer::new();
        w.count(self.entries.len())?;
        for e in &self.entries {
            w.u32(e.id.node.0)
                .u32(e.id.generation)
                .u32(e.id.epoch)
                .u32(e.parent.map_or(0, |p| p.0))
                .prefixed(e.key.expose()?)?;
        }
        Ok(Zeroizing::new(w.into_bytes()))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let n = r.u16()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let id = VersionedKeyId {
                node: NodeId(r.u32()?),
                generation: r.u32()?,
                epoch: r.u32()?,
            };
            let parent = match r.u32()? {
                0 => None,
                p => Some(NodeId(p)),
            };
            let key = SecretKey::from_bytes(r.prefixed()?.to_vec());
            entries.push(BundleEntry { id, parent, key });
        }
        r.finish()?;
        Ok(Self { entries })
    }
}
