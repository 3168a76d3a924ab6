//! Subset-cover broadcast encryption with the complete-subtree method.
//!
//! Receivers are the leaves of a complete binary tree in heap order: the root
//! is node 1, node `i` has children `2i` and `2i + 1`, and receiver `u`
//! (1-based) sits at node `N + u - 1`. Every node carries an independent key;
//! a receiver stores the `log2 N + 1` keys on its path.
//!
//! In [`CsMode::Strong`] headers are encrypted under `f_L(0)` instead of `L`,
//! and after any broadcast that revokes somebody the center replaces every
//! node key by `f_L(1)` and advances the epoch. Receivers follow the explicit
//! revocation flag, and catch up by the epoch difference when they missed
//! broadcasts.

use std::collections::BTreeSet;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::bundle::KeyBundle;
use crate::crypto::{
    decrypt, encrypt, gen_key, secure_erase, Ciphertext, CryptoError, KeyLength, KeyUsage, PrfLabel, PrfMeter,
    SecretKey,
};
use crate::key_tree::{NodeId, VersionedKeyId};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CsMode {
    Baseline,
    Strong,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StatelessError {
    #[error("receiver count {0} is not a power of two between 2 and 2^20")]
    BadN(u64),
    #[error("receiver {0} does not exist")]
    UnknownReceiver(u32),
    #[error("receiver is at epoch {have}, message uses epoch {msg}")]
    EpochAhead { have: u32, msg: u32 },
    #[error("header or body failed to decrypt")]
    DecryptFailure,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Key id carried by the header ciphertext for subset `index`.
pub fn header_key_id(index: u32, epoch: u32) -> VersionedKeyId {
    VersionedKeyId::new(NodeId(index), 0, epoch)
}

/// Key id carried by the body ciphertext of broadcast `seq`. Node 0 marks a
/// session key, which lives outside the tree.
pub fn session_key_id(seq: u32) -> VersionedKeyId {
    VersionedKeyId::new(NodeId(0), seq, 0)
}

fn log2(n: u32) -> u32 {
    n.trailing_zeros()
}

fn depth(index: u32) -> u32 {
    31 - index.leading_zeros()
}

/// Roots of the maximal subtrees containing no revoked leaf: the children of
/// Steiner-tree nodes that are not themselves in the Steiner tree. `revoked`
/// holds 1-based receiver numbers. Ascending order.
pub fn steiner_cover(n: u32, revoked: &BTreeSet<u32>) -> Vec<u32> {
    if revoked.is_empty() {
        return vec![1];
    }
    let mut steiner = BTreeSet::new();
    for &u in revoked {
        let mut x = n + u - 1;
        while x >= 1 && steiner.insert(x) {
            x /= 2;
        }
    }
    let mut cover: Vec<u32> = steiner
        .iter()
        .filter(|&&x| x < n)
        .flat_map(|&x| [2 * x, 2 * x + 1])
        .filter(|c| !steiner.contains(c))
        .collect();
    cover.sort_unstable();
    cover
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastMessage {
    pub seq: u32,
    pub epoch: u32,
    pub revocation_flag: bool,
    pub indices: Vec<u32>,
    pub header_cts: Vec<Ciphertext>,
    pub body: Ciphertext,
}

impl BroadcastMessage {
    pub fn item_count(&self) -> usize {
        self.header_cts.len() + 1
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut w = Writer::new();
        w.u32(self.seq)
            .u32(self.epoch)
            .u8(u8::from(self.revocation_flag))
            .count(self.indices.len())?;
        for (i, ct) in self.indices.iter().zip(&self.header_cts) {
            w.u32(*i);
            ct.encode_into(&mut w)?;
        }
        self.body.encode_into(&mut w)?;
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let seq = r.u32()?;
        let epoch = r.u32()?;
        let revocation_flag = match r.u8()? {
            0 => false,
            1 => true,
            value => {
                return Err(WireError::BadTag {
                    field: "revocation flag",
                    value,
                })
            }
        };
        let m = r.u16()? as usize;
        let mut indices = Vec::with_capacity(m);
        let mut header_cts = Vec::with_capacity(m);
        for _ in 0..m {
            indices.push(r.u32()?);
            header_cts.push(Ciphertext::decode_from(&mut r)?);
        }
        let body = Ciphertext::decode_from(&mut r)?;
        r.finish()?;
        Ok(Self {
            seq,
            epoch,
            revocation_flag,
            indices,
            header_cts,
            body,
        })
    }
}

/// The broadcast center.
#[derive(Debug)]
pub struct SubsetSystem {
    n: u32,
    mode: CsMode,
    kappa: KeyLength,
    /// `keys[i]` is the key of node `i`; slot 0 is unused.
    keys: Vec<SecretKey>,
    epoch: u32,
    seq: u32,
    meter: PrfMeter,
    last_next_evals: u64,
    session_log: Option<Vec<SecretKey>>,
}

#[derive(Debug, Clone)]
pub struct ReceiverSecrets {
    user: u32,
    n: u32,
    mode: CsMode,
    /// Path keys, root first, indexed by depth.
    path: Vec<SecretKey>,
    epoch: u32,
    meter: PrfMeter,
    last_prf: u64,
    last_probes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decrypted {
    Plaintext(Vec<u8>),
    Revoked,
}

/// Sets up `n` receivers with independent node keys.
pub fn cs_init<R: RngCore + CryptoRng + ?Sized>(
    n: u64,
    mode: CsMode,
    kappa: KeyLength,
    rng: &mut R,
) -> Result<(SubsetSystem, Vec<ReceiverSecrets>), StatelessError> {
    if !(2..=1 << 20).contains(&n) || !n.is_power_of_two() {
        return Err(StatelessError::BadN(n));
    }
    let n = n as u32;
    let mut keys = Vec::with_capacity(2 * n as usize);
    keys.push(SecretKey::from_bytes(Vec::new()));
    for _ in 1..2 * n {
        keys.push(gen_key(rng, kappa));
    }
    let sys = SubsetSystem {
        n,
        mode,
        kappa,
        keys,
        epoch: 0,
        seq: 0,
        meter: PrfMeter::default(),
        last_next_evals: 0,
        session_log: None,
    };
    let receivers = (1..=n).map(|u| sys.secrets_for(u)).collect();
    Ok((sys, receivers))
}

impl SubsetSystem {
    fn secrets_for(&self, user: u32) -> ReceiverSecrets {
        let leaf = self.n + user - 1;
        let path = (0..=log2(self.n))
            .map(|d| self.keys[(leaf >> (log2(self.n) - d)) as usize].clone())
            .collect();
        ReceiverSecrets {
            user,
            n: self.n,
            mode: self.mode,
            path,
            epoch: self.epoch,
            meter: PrfMeter::default(),
            last_prf: 0,
            last_probes: 0,
        }
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn mode(&self) -> CsMode {
        self.mode
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn seq(&self) -> u32 {
        self.seq
    }

    pub fn stored_keys(&self) -> usize {
        self.keys.len() - 1
    }

    pub fn key(&self, index: u32) -> Option<&SecretKey> {
        self.keys.get(index as usize).filter(|_| index >= 1)
    }

    /// `Next` evaluations made by the most recent broadcast.
    pub fn next_evals_last_broadcast(&self) -> u64 {
        self.last_next_evals
    }

    pub fn prf_evals_total(&self) -> u64 {
        self.meter.total()
    }

    /// Keeps a copy of every session key for harness audits.
    pub fn enable_audit(&mut self) {
        self.session_log.get_or_insert_with(Vec::new);
    }

    /// Session keys indexed by `seq - 1`, if auditing is on.
    pub fn session_log(&self) -> Option<&[SecretKey]> {
        self.session_log.as_deref()
    }

    pub fn broadcast<R: RngCore + CryptoRng + ?Sized>(
        &mut self,
        revoked: &BTreeSet<u32>,
        message: &[u8],
        rng: &mut R,
    ) -> Result<BroadcastMessage, StatelessError> {
        if let Some(&bad) = revoked.iter().find(|&&u| u == 0 || u > self.n) {
            return Err(StatelessError::UnknownReceiver(bad));
        }
        self.seq += 1;
        let seq = self.seq;
        let next_before = self.meter.next_total();
        let session = gen_key(rng, self.kappa);
        let sid = session_key_id(seq);
        let plaintext = KeyBundle::single(sid, None, session.clone()).encode()?;
        let indices = steiner_cover(self.n, revoked);
        let mut header_cts = Vec::with_capacity(indices.len());
        for &i in &indices {
            let long_lived = &self.keys[i as usize];
            let id = header_key_id(i, self.epoch);
            let ct = match self.mode {
                CsMode::Baseline => encrypt(long_lived, &plaintext, id, KeyUsage::Raw, rng)?,
                CsMode::Strong => {
                    let k = self.meter.eval(long_lived, PrfLabel::Enc)?;
                    encrypt(&k, &plaintext, id, KeyUsage::Enc, rng)?
                }
            };
            header_cts.push(ct);
        }
        let body = encrypt(&session, message, sid, KeyUsage::Raw, rng)?;
        let epoch = self.epoch;
        let revocation_flag = self.mode == CsMode::Strong && !revoked.is_empty();
        if revocation_flag {
            for k in self.keys.iter_mut().skip(1) {
                let mut old = std::mem::replace(k, self.meter.eval(k, PrfLabel::Next)?);
                secure_erase(&mut old);
            }
            self.epoch += 1;
        }
        self.last_next_evals = self.meter.next_total() - next_before;
        match &mut self.session_log {
            Some(log) => log.push(session),
            None => {
                let mut s = session;
                secure_erase(&mut s);
            }
        }
        Ok(BroadcastMessage {
            seq,
            epoch,
            revocation_flag,
            indices,
            header_cts,
            body,
        })
    }
}

impl ReceiverSecrets {
    pub fn user(&self) -> u32 {
        self.user
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn key_count(&self) -> usize {
        self.path.len()
    }

    /// PRF evaluations spent on the most recent message.
    pub fn prf_evals_last(&self) -> u64 {
        self.last_prf
    }

    /// Candidate depths inspected by the most recent ancestor search.
    pub fn probes_last(&self) -> u32 {
        self.last_probes
    }

    fn node_at_depth(&self, d: u32) -> u32 {
        (self.n + self.user - 1) >> (log2(self.n) - d)
    }

    /// Copies of the held path keys with their current ids.
    pub fn held_keys(&self) -> Vec<(VersionedKeyId, SecretKey)> {
        self.path
            .iter()
            .enumerate()
            .filter(|(_, k)| !k.is_erased())
            .map(|(d, k)| (header_key_id(self.node_at_depth(d as u32), self.epoch), k.clone()))
            .collect()
    }

    fn evolve_all(&mut self) -> Result<(), StatelessError> {
        for k in &mut self.path {
            let mut old = std::mem::replace(k, self.meter.eval(k, PrfLabel::Next)?);
            secure_erase(&mut old);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Depth of the unique covering ancestor, found by binary search over
    /// depths. A subtree at depth `d` on our path contains a cover root iff
    /// `d` is at most the covering ancestor's depth.
    fn find_ancestor(&mut self, indices: &[u32]) -> Option<u32> {
        self.last_probes = 0;
        if indices.is_empty() {
            return None;
        }
        let contains_cover_root = |a: u32, d: u32| indices.iter().any(|&x| depth(x) >= d && x >> (depth(x) - d) == a);
        let (mut lo, mut hi) = (0, log2(self.n) + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            self.last_probes += 1;
            if contains_cover_root(self.node_at_depth(mid), mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.last_probes += 1;
        indices.binary_search(&self.node_at_depth(lo)).ok().map(|_| lo)
    }

    /// Catches up to the message epoch, decrypts if covered, then evolves iff
    /// the message says the center did.
    pub fn receive(&mut self, msg: &BroadcastMessage) -> Result<Decrypted, StatelessError> {
        if self.epoch > msg.epoch {
            return Err(StatelessError::EpochAhead {
                have: self.epoch,
                msg: msg.epoch,
            });
        }
        self.meter.take_since_mark();
        if self.mode == CsMode::Strong {
            while self.epoch < msg.epoch {
                self.evolve_all()?;
            }
        }
        let out = match self.find_ancestor(&msg.indices) {
            None => Decrypted::Revoked,
            Some(d) => {
                let j = msg
                    .indices
                    .binary_search(&self.node_at_depth(d))
                    .expect("found by search");
                let header = msg.header_cts.get(j).ok_or(StatelessError::DecryptFailure)?;
                let key = &self.path[d as usize];
                let pt = match header.usage {
                    KeyUsage::Raw => decrypt(key, header),
                    KeyUsage::Enc => decrypt(&self.meter.eval(key, PrfLabel::Enc)?, header),
                }
                .map_err(|_| StatelessError::DecryptFailure)?;
                let bundle = KeyBundle::decode(&pt)?;
                let session = &bundle.entries.first().ok_or(StatelessError::DecryptFailure)?.key;
                let body = decrypt(session, &msg.body).map_err(|_| StatelessError::DecryptFailure)?;
                Decrypted::Plaintext(body.to_vec())
            }
        };
        if self.mode == CsMode::Strong && msg.revocation_flag {
            self.evolve_all()?;
        }
        self.last_prf = self.meter.take_since_mark();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn set(xs: &[u32]) -> BTreeSet<u32> {
        xs.iter().copied().collect()
    }

    fn leaves_under(n: u32, x: u32) -> Vec<u32> {
        let shift = log2(n) - depth(x);
        ((x << shift)..((x + 1) << shift)).map(|leaf| leaf - n + 1).collect()
    }

    #[test]
    fn init_sizes() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (sys, rs) = cs_init(8, CsMode::Baseline, KeyLength::DEFAULT, &mut rng).unwrap();
        assert_eq!(sys.stored_keys(), 15);
        assert!(rs.iter().all(|r| r.key_count() == 4));
        let (sys, rs) = cs_init(2, CsMode::Strong, KeyLength::DEFAULT, &mut rng).unwrap();
        assert_eq!(sys.stored_keys(), 3);
        assert!(rs.iter().all(|r| r.key_count() == 2));
        for bad in [0, 1, 6, 12] {
            assert_eq!(
                cs_init(bad, CsMode::Baseline, KeyLength::DEFAULT, &mut rng).unwrap_err(),
                StatelessError::BadN(bad)
            );
        }
    }

    #[test]
    fn cover_examples() {
        assert_eq!(steiner_cover(8, &set(&[])), vec![1]);
        let c = steiner_cover(8, &set(&[1]));
        assert_eq!(c, vec![3, 5, 9]);
        let sizes: Vec<usize> = c.iter().map(|&x| leaves_under(8, x).len()).collect();
        assert_eq!(sizes, vec![4, 2, 1]);
        assert_eq!(steiner_cover(8, &set(&[1, 8])), vec![5, 6, 9, 14]);
        assert!(steiner_cover(4, &set(&[1, 2, 3, 4])).is_empty());
        // A whole half revoked: one subtree even though R is non-empty.
        assert_eq!(steiner_cover(8, &set(&[1, 2, 3, 4])), vec![3]);
    }

    #[test]
    fn broadcast_and_receive() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (mut sys, mut rs) = cs_init(8, CsMode::Baseline, KeyLength::DEFAULT, &mut rng).unwrap();
        let msg = sys.broadcast(&set(&[]), b"all", &mut rng).unwrap();
        assert_eq!(msg.header_cts.len(), 1);
        let msg = sys.broadcast(&set(&[1]), b"hello", &mut rng).unwrap();
        assert_eq!(msg.header_cts.len(), 3);
        assert!(!msg.revocation_flag);
        assert_eq!(rs[0].receive(&msg).unwrap(), Decrypted::Revoked);
        assert_eq!(rs[4].receive(&msg).unwrap(), Decrypted::Plaintext(b"hello".to_vec()));
        // Receiver 5 is covered by node 3, its depth-1 ancestor.
        assert_eq!(rs[4].find_ancestor(&msg.indices), Some(1));
    }

    #[test]
    fn strong_center_evolves_everything_on_revocation() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (mut sys, mut rs) = cs_init(8, CsMode::Strong, KeyLength::DEFAULT, &mut rng).unwrap();
        let before = sys.key(1).unwrap().clone();
        let a = sys.broadcast(&set(&[2]), b"a", &mut rng).unwrap();
        assert_eq!(sys.next_evals_last_broadcast(), 15);
        let b = sys.broadcast(&set(&[3]), b"b", &mut rng).unwrap();
        assert_eq!(sys.next_evals_last_broadcast(), 15);
        let c = sys.broadcast(&set(&[]), b"c", &mut rng).unwrap();
        assert_eq!(sys.next_evals_last_broadcast(), 0);
        assert_eq!((a.epoch, b.epoch, c.epoch), (0, 1, 2));
        assert!((a.revocation_flag, b.revocation_flag, c.revocation_flag) == (true, true, false));
        let evolved = crate::crypto::prf_eval(
            &crate::crypto::prf_eval(&before, PrfLabel::Next).unwrap(),
            PrfLabel::Next,
        )
        .unwrap();
        assert!(sys.key(1).unwrap().same_material(&evolved));
        for r in rs.iter_mut() {
            for m in [&a, &b, &c] {
                r.receive(m).unwrap();
                assert!(r.prf_evals_last() <= 8);
            }
            assert_eq!(r.epoch(), sys.epoch());
        }
    }

    #[test]
    fn offline_receiver_catches_up() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (mut sys, mut rs) = cs_init(8, CsMode::Strong, KeyLength::DEFAULT, &mut rng).unwrap();
        let _missed = sys.broadcast(&set(&[1]), b"one", &mut rng).unwrap();
        let next = sys.broadcast(&set(&[2]), b"two", &mut rng).unwrap();
        assert_eq!(rs[5].receive(&next).unwrap(), Decrypted::Plaintext(b"two".to_vec()));
        assert_eq!(rs[5].epoch(), 2);
        let err = rs[5].receive(&next).unwrap_err();
        assert_eq!(err, StatelessError::EpochAhead { have: 2, msg: 1 });
    }

    #[test]
    fn ancestor_search_probe_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for n in [2u64, 4, 8, 16, 32] {
            let (mut sys, mut rs) = cs_init(n, CsMode::Baseline, KeyLength::DEFAULT, &mut rng).unwrap();
            let bound = (log2(n as u32) as f64).log2() + 2.0;
            for r in 0..n as u32 {
                let msg = sys.broadcast(&set(&[r + 1]), b"x", &mut rng).unwrap();
                for rec in rs.iter_mut() {
                    rec.receive(&msg).unwrap();
                    assert!(f64::from(rec.probes_last()) <= bound, "n={n}");
                }
            }
        }
    }

    #[test]
    fn unknown_receiver_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (mut sys, _) = cs_init(4, CsMode::Baseline, KeyLength::DEFAULT, &mut rng).unwrap();
        assert_eq!(
            sys.broadcast(&set(&[5]), b"", &mut rng).unwrap_err(),
            StatelessError::UnknownReceiver(5)
        );
    }

    #[test]
    fn wire_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (mut sys, _) = cs_init(8, CsMode::Strong, KeyLength::DEFAULT, &mut rng).unwrap();
        let msg = sys.broadcast(&set(&[1, 8]), b"wire", &mut rng).unwrap();
        let bytes = msg.encode().unwrap();
        assert_eq!(&bytes[..9], &[0, 0, 0, 1, 0, 0, 0, 0, 1]);
        assert_eq!(&bytes[9..11], &[0, 4]);
        assert_eq!(&bytes[11..15], &5u32.to_be_bytes());
        assert_eq!(BroadcastMessage::decode(&bytes).unwrap(), msg);
    }
}
