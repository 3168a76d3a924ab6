//! Passive adversary: records the channel, corrupts parties, and computes
//! everything the recording and the captured keys give away.
//!
//! The recovery closure decrypts any recorded ciphertext whose key it holds,
//! and may evolve held keys forward with `Next` or derive `Enc` keys. It never
//! runs a PRF step backwards.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::bundle::KeyBundle;
use crate::crypto::{decrypt, gen_key, prf_eval, Ciphertext, KeyLength, KeyUsage, PrfLabel, SecretKey};
use crate::key_tree::{NodeId, VersionedKeyId};
use crate::lkh::{split_node, GroupKeyRef, MemberState, RekeyMessage};
use crate::stateless::{session_key_id, BroadcastMessage, ReceiverSecrets};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdversaryError {
    #[error("unknown member {0}")]
    UnknownMember(String),
    #[error("{0} has not accepted the group key for time {1}")]
    NotSynchronized(String, u64),
    #[error("the test oracle was already used in this game")]
    AlreadyTested,
    #[error("no challenge has been issued yet")]
    NotTested,
}

#[derive(Debug, Clone)]
pub enum TapeMessage {
    Rekey(RekeyMessage),
    Broadcast(BroadcastMessage),
}

#[derive(Debug, Clone)]
pub struct TapeEntry {
    /// Event time for rekey messages, broadcast sequence number otherwise.
    pub time: u64,
    pub message: TapeMessage,
    /// Public pointer to the group key established by this message.
    pub group_key: Option<GroupKeyRef>,
}

impl TapeEntry {
    pub fn ciphertexts(&self) -> Vec<&Ciphertext> {
        match &self.message {
            TapeMessage::Rekey(m) => m.ciphertexts().collect(),
            TapeMessage::Broadcast(b) => b.header_cts.iter().chain(std::iter::once(&b.body)).collect(),
        }
    }

    pub fn item_count(&self) -> usize {
        match &self.message {
            TapeMessage::Rekey(m) => m.item_count(),
            TapeMessage::Broadcast(b) => b.item_count(),
        }
    }
}

/// Append-only record of the broadcast channel.
#[derive(Debug, Clone, Default)]
pub struct TrafficTape {
    entries: Vec<TapeEntry>,
}

impl TrafficTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_rekey(&mut self, msg: &RekeyMessage, group_key: GroupKeyRef) {
        self.entries.push(TapeEntry {
            time: msg.time,
            message: TapeMessage::Rekey(msg.clone()),
            group_key: Some(group_key),
        });
    }

    pub fn record_broadcast(&mut self, msg: &BroadcastMessage) {
        self.entries.push(TapeEntry {
            time: u64::from(msg.seq),
            message: TapeMessage::Broadcast(msg.clone()),
            group_key: None,
        });
    }

    pub fn entries(&self) -> &[TapeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn item_count(&self) -> usize {
        self.entries.iter().map(TapeEntry::item_count).sum()
    }
}

/// Byte copies of a victim's keys at the moment of corruption.
#[derive(Debug, Clone, Default)]
pub struct CapturedState {
    pub source: String,
    pub captured_at: u64,
    pub keys: BTreeMap<VersionedKeyId, SecretKey>,
}

impl CapturedState {
    /// Union of two captures; used for coalitions.
    pub fn merge(&mut self, other: &CapturedState) {
        for (id, k) in &other.keys {
            self.keys.entry(*id).or_insert_with(|| k.clone());
        }
        self.captured_at = self.captured_at.max(other.captured_at);
    }
}

/// Hands every non-erased key of `m` to the adversary and marks `m` as
/// adversary-controlled.
pub fn corrupt_member(m: &mut MemberState, t: u64) -> CapturedState {
    m.mark_corrupted();
    CapturedState {
        source: m.id().to_string(),
        captured_at: t,
        keys: m.held_keys().into_iter().collect(),
    }
}

pub fn corrupt_receiver(r: &ReceiverSecrets, t: u64) -> CapturedState {
    CapturedState {
        source: format!("receiver {}", r.user()),
        captured_at: t,
        keys: r.held_keys().into_iter().collect(),
    }
}

/// Only the group key of `m` at time `t`.
pub fn reveal(m: &MemberState, t: u64) -> Result<SecretKey, AdversaryError> {
    let not_sync = || AdversaryError::NotSynchronized(m.id().to_string(), t);
    if m.time() != Some(t) {
        return Err(not_sync());
    }
    m.current_group_key().cloned().map_err(|_| not_sync())
}

/// How a key in a [`RecoveryReport`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Captured,
    Next {
        from: VersionedKeyId,
    },
    /// The `Enc` derivation of a known key used as key material, as when a
    /// split leaf's key seeds the new node above it.
    EncOf {
        from: VersionedKeyId,
    },
    Decrypt {
        entry: usize,
        item: usize,
        under: VersionedKeyId,
        usage: KeyUsage,
    },
}

#[derive(Debug, Clone, Default)]
pub struct RecoveryReport {
    pub known: BTreeMap<VersionedKeyId, (SecretKey, Step)>,
    /// Payload group keys by time (stateful) or session keys by sequence
    /// number (stateless).
    pub group_keys: BTreeMap<u64, SecretKey>,
    /// Chain length behind each entry of `group_keys`.
    pub group_key_chains: BTreeMap<u64, usize>,
    pub plaintexts: BTreeMap<u64, Vec<u8>>,
}

impl RecoveryReport {
    pub fn known_ids(&self) -> impl Iterator<Item = &VersionedKeyId> {
        self.known.keys()
    }

    /// Number of steps from captured material to `id`.
    pub fn chain_len(&self, id: &VersionedKeyId) -> Option<usize> {
        let mut len = 0;
        let mut cur = *id;
        loop {
            match self.known.get(&cur)?.1 {
                Step::Captured => return Some(len),
                Step::Next { from } | Step::EncOf { from } => cur = from,
                Step::Decrypt { under, .. } => cur = under,
            }
            len += 1;
        }
    }

    /// `recovered t=<n> keyfp=<8hex> via=<len>` per recovered group key.
    pub fn trace_lines(&self) -> Vec<String> {
        self.group_keys
            .iter()
            .map(|(t, k)| {
                format!(
                    "recovered t={t} keyfp={} via={}",
                    k.fingerprint(),
                    self.group_key_chains.get(t).copied().unwrap_or(0)
                )
            })
            .collect()
    }

    /// Replays every recorded derivation from the captured bytes and the tape
    /// alone and checks that it yields the reported key bytes.
    pub fn verify_chains(&self, tape: &TrafficTape, captured: &CapturedState) -> Result<(), String> {
        let mut memo: BTreeMap<VersionedKeyId, SecretKey> = BTreeMap::new();
        for id in self.known.keys() {
            let k = replay(self, tape, captured, *id, &mut memo)?;
            if !k.same_material(&self.known[id].0) {
                return Err(format!("replay of {id} gives different bytes"));
            }
        }
        Ok(())
    }
}

fn replay(
    report: &RecoveryReport,
    tape: &TrafficTape,
    captured: &CapturedState,
    id: VersionedKeyId,
    memo: &mut BTreeMap<VersionedKeyId, SecretKey>,
) -> Result<SecretKey, String> {
    if let Some(k) = memo.get(&id) {
        return Ok(k.clone());
    }
    let step = report.known.get(&id).ok_or_else(|| format!("{id} not in report"))?.1;
    let k = match step {
        Step::Captured => captured
            .keys
            .get(&id)
            .cloned()
            .ok_or_else(|| format!("{id} was not captured"))?,
        Step::Next { from } => {
            let base = replay(report, tape, captured, from, memo)?;
            prf_eval(&base, PrfLabel::Next).map_err(|e| e.to_string())?
        }
        Step::EncOf { from } => {
            let base = replay(report, tape, captured, from, memo)?;
            prf_eval(&base, PrfLabel::Enc).map_err(|e| e.to_string())?
        }
        Step::Decrypt {
            entry,
            item,
            under,
            usage,
        } => {
            let base = replay(report, tape, captured, under, memo)?;
            let key = match usage {
                KeyUsage::Raw => base,
                KeyUsage::Enc => prf_eval(&base, PrfLabel::Enc).map_err(|e| e.to_string())?,
            };
            let e = tape.entries().get(entry).ok_or("entry out of range")?;
            let ct = *e.ciphertexts().get(item).ok_or("item out of range")?;
            let pt = decrypt(&key, ct).map_err(|e| e.to_string())?;
            let bundle = KeyBundle::decode(&pt).map_err(|e| e.to_string())?;
            bundle
                .entries
                .into_iter()
                .find(|b| b.id == id)
                .map(|b| b.key)
                .ok_or_else(|| format!("{id} not in the replayed plaintext"))?
        }
    };
    memo.insert(id, k.clone());
    Ok(k)
}

struct Closure<'a> {
    tape: &'a TrafficTape,
    max_depth: u32,
    report: RecoveryReport,
}

impl Closure<'_> {
    /// A key for `id`, either known or reachable by evolving a known key of
    /// the same lineage forward. Intermediate keys are recorded.
    fn resolve(&mut self, id: &VersionedKeyId) -> Option<SecretKey> {
        if let Some((k, _)) = self.report.known.get(id) {
            return Some(k.clone());
        }
        let (base_id, base) = self
            .report
            .known
            .range(VersionedKeyId::new(id.node, id.generation, 0)..*id)
            .next_back()
            .filter(|(b, _)| b.same_lineage(id) && id.epoch - b.epoch <= self.max_depth)
            .map(|(b, (k, _))| (*b, k.clone()))?;
        let mut cur_id = base_id;
        let mut cur = base;
        while cur_id.epoch < id.epoch {
            cur = prf_eval(&cur, PrfLabel::Next).ok()?;
            let next_id = cur_id.next();
            self.report
                .known
                .insert(next_id, (cur.clone(), Step::Next { from: cur_id }));
            cur_id = next_id;
        }
        Some(cur)
    }

    /// A split member derives the new node's key as `Enc` of its leaf key, so
    /// anyone holding that leaf key can too. The closure does not know which
    /// leaf was split, so it tries every known lineage and keeps a candidate
    /// only if it opens a later ciphertext under the new node.
    fn derive_split_keys(&mut self, from_time: u64) -> bool {
        let entries = self.tape.entries();
        let mut progress = false;
        for (ei, entry) in entries.iter().enumerate() {
            if entry.time < from_time {
                continue;
            }
            let TapeMessage::Rekey(msg) = &entry.message else {
                continue;
            };
            let Some((_, mid)) = split_node(msg) else {
                continue;
            };
            let target = VersionedKeyId::new(mid, 0, 0);
            if self.report.known.contains_key(&target) {
                continue;
            }
            let Some(probe) = entries[ei..]
                .iter()
                .flat_map(|e| e.ciphertexts())
                .find(|ct| ct.key_id.node == mid && ct.key_id.generation == 0)
            else {
                continue;
            };
            let bases: Vec<VersionedKeyId> = self.report.known.keys().copied().collect();
            'search: for base in bases {
                let Some((mut cur, _)) = self.report.known.get(&base).cloned() else {
                    continue;
                };
                for i in 0..=self.max_depth {
                    if i > 0 {
                        let Ok(k) = prf_eval(&cur, PrfLabel::Next) else {
                            continue 'search;
                        };
                        cur = k;
                    }
                    if opens(&cur, probe) {
                        let from = VersionedKeyId::new(base.node, base.generation, base.epoch + i);
                        let seed = self.resolve(&from).expect("derivable by construction");
                        let key = prf_eval(&seed, PrfLabel::Enc).expect("seed is live");
                        self.report.known.insert(target, (key, Step::EncOf { from }));
                        progress = true;
                        break 'search;
                    }
                }
            }
        }
        progress
    }

    fn run(mut self, from_time: u64) -> RecoveryReport {
        let entries = self.tape.entries();
        let mut opened: BTreeMap<(usize, usize), ()> = BTreeMap::new();
        loop {
            let mut progress = false;
            for (ei, entry) in entries.iter().enumerate() {
                if entry.time < from_time {
                    continue;
                }
                for (ii, ct) in entry.ciphertexts().into_iter().enumerate() {
                    if opened.contains_key(&(ei, ii)) {
                        continue;
                    }
                    let Some(base) = self.resolve(&ct.key_id) else {
                        continue;
                    };
                    let key = match ct.usage {
                        KeyUsage::Raw => base,
                        KeyUsage::Enc => match prf_eval(&base, PrfLabel::Enc) {
                            Ok(k) => k,
                            Err(_) => continue,
                        },
                    };
                    let Ok(pt) = decrypt(&key, ct) else {
                        continue;
                    };
                    opened.insert((ei, ii), ());
                    progress = true;
                    if ct.key_id.node == NodeId(0) {
                        self.report.plaintexts.insert(entry.time, pt.to_vec());
                        continue;
                    }
                    let Ok(bundle) = KeyBundle::decode(&pt) else {
                        continue;
                    };
                    for b in bundle.entries {
                        self.report.known.entry(b.id).or_insert((
                            b.key,
                            Step::Decrypt {
                                entry: ei,
                                item: ii,
                                under: ct.key_id,
                                usage: ct.usage,
                            },
                        ));
                    }
                }
            }
            if !progress && !self.derive_split_keys(from_time) {
                break;
            }
        }

        for entry in entries.iter().filter(|e| e.time >= from_time) {
            let (id, derived) = match (&entry.message, entry.group_key) {
                (TapeMessage::Rekey(_), Some(r)) => (r.key, r.derived),
                (TapeMessage::Broadcast(b), _) => (session_key_id(b.seq), false),
                _ => continue,
            };
            let Some(k) = self.resolve(&id) else {
                continue;
            };
            let k = if derived {
                match prf_eval(&k, PrfLabel::Enc) {
                    Ok(k) => k,
                    Err(_) => continue,
                }
            } else {
                k
            };
            let chain = self.report.chain_len(&id).unwrap_or(0) + usize::from(derived);
            self.report.group_keys.insert(entry.time, k);
            self.report.group_key_chains.insert(entry.time, chain);
        }
        self.report
    }
}

/// Whether `Enc(leaf)`, evolved to the probe's epoch, opens `probe`.
fn opens(leaf: &SecretKey, probe: &Ciphertext) -> bool {
    let Ok(mut k) = prf_eval(leaf, PrfLabel::Enc) else {
        return false;
    };
    for _ in 0..probe.key_id.epoch {
        match prf_eval(&k, PrfLabel::Next) {
            Ok(n) => k = n,
            Err(_) => return false,
        }
    }
    let k = match probe.usage {
        KeyUsage::Raw => Ok(k),
        KeyUsage::Enc => prf_eval(&k, PrfLabel::Enc),
    };
    k.is_ok_and(|k| decrypt(&k, probe).is_ok())
}

fn closure(tape: &TrafficTape, captured: &CapturedState, from_time: u64) -> RecoveryReport {
    let mut report = RecoveryReport::default();
    for (id, k) in &captured.keys {
        if !k.is_erased() {
            report.known.insert(*id, (k.clone(), Step::Captured));
        }
    }
    Closure {
        tape,
        max_depth: u32::try_from(tape.len()).unwrap_or(u32::MAX),
        report,
    }
    .run(from_time)
}

/// Everything reachable from `captured` and the whole tape.
pub fn recover_closure(tape: &TrafficTape, captured: &CapturedState) -> RecoveryReport {
    closure(tape, captured, 0)
}

/// The closure restricted to tape entries from `revoked_at` on.
pub fn forward_recover(tape: &TrafficTape, captured: &CapturedState, revoked_at: u64) -> RecoveryReport {
    closure(tape, captured, revoked_at)
}

/// The closure over a broadcast tape; `group_keys` holds session keys by
/// sequence number and `plaintexts` the recovered messages.
pub fn stateless_recover(tape: &TrafficTape, captured: &CapturedState) -> RecoveryReport {
    closure(tape, captured, 0)
}

/// One real-or-random challenge per game.
#[derive(Debug, Default)]
pub struct TestGame {
    hidden: Option<bool>,
}

impl TestGame {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the group key of `m` at `t` if the hidden bit is set, a fresh
    /// random key of the same length otherwise.
    pub fn test<R: RngCore + CryptoRng + ?Sized>(
        &mut self,
        m: &MemberState,
        t: u64,
        rng: &mut R,
    ) -> Result<(SecretKey, bool), AdversaryError> {
        if self.hidden.is_some() {
            return Err(AdversaryError::AlreadyTested);
        }
        let real = reveal(m, t)?;
        let b = rng.next_u32() & 1 == 1;
        self.hidden = Some(b);
        if b {
            Ok((real, b))
        } else {
            let len = KeyLength::from_bits(real.len() * 8).unwrap_or_default();
            Ok((gen_key(rng, len), b))
        }
    }

    pub fn score(&self, guess: bool) -> Result<bool, AdversaryError> {
        self.hidden.map(|b| b == guess).ok_or(AdversaryError::NotTested)
    }
}
