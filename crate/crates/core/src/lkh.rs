//! Stateful group communication over a logical key hierarchy.
//!
//! The group controller owns the [`KeyTree`] and answers joins and leaves
//! with group-oriented rekey messages. Three rekey policies are supported:
//!
//! * [`RekeyPolicy::Baseline`]: plain LKH; replaced path keys are encrypted
//!   directly under the keys that protect them.
//! * [`RekeyPolicy::Strong`]: every encryption under a long-lived key uses
//!   its `Enc` derivation instead (except the old group key during a join),
//!   and after each event every surviving non-root key is replaced by its
//!   `Next` derivation.
//! * [`RekeyPolicy::StrongOpt`]: as `Strong`, but a join sends no new keys to
//!   existing members. Everyone evolves every key with `Next` and the payload
//!   group key becomes the `Enc` derivation of the evolved root.
//!
//! Members are independent [`MemberState`] machines that only ever see the
//! messages addressed to them.

use std::collections::{BTreeMap, BTreeSet};

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::bundle::{BundleEntry, KeyBundle};
use crate::crypto::{
    decrypt, encrypt, gen_key, secure_erase, Ciphertext, CryptoError, KeyLength, KeyUsage, PrfLabel, PrfMeter,
    SecretKey,
};
use crate::key_tree::{JoiningPoint, KeyTree, NodeId, TreeError, UserId, VersionedKeyId};
use crate::wire::{Reader, WireError, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RekeyPolicy {
    Baseline,
    Strong,
    StrongOpt,
}

impl RekeyPolicy {
    pub fn evolves_keys(self) -> bool {
        !matches!(self, RekeyPolicy::Baseline)
    }
}

/// What the setup message carries on the broadcast channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SetupDelivery {
    /// Only the initial group key travels on the channel, once per member
    /// under that member's individual key. Auxiliary path keys are installed
    /// out of band together with the individual key.
    #[default]
    GroupKeyOnly,
    /// The whole keyset travels under the individual key.
    FullKeyset,
}

#[derive(Debug, Clone)]
pub struct LkhConfig {
    pub degree: usize,
    pub kappa: KeyLength,
    pub policy: RekeyPolicy,
    pub setup_delivery: SetupDelivery,
    /// Keep a copy of every retired key version and every group key so tests
    /// and the simulator can audit erasure. Never enable outside a harness.
    pub audit: bool,
}

impl Default for LkhConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            kappa: KeyLength::DEFAULT,
            policy: RekeyPolicy::Baseline,
            setup_delivery: SetupDelivery::GroupKeyOnly,
            audit: true,
        }
    }
}

impl LkhConfig {
    pub fn with_policy(policy: RekeyPolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LkhError {
    #[error("{0} is already a member")]
    AlreadyMember(UserId),
    #[error("no individual key has been established for {0}")]
    NoIndividualKey(UserId),
    #[error("{0} is not a member")]
    NotMember(UserId),
    #[error("duplicate user {0}")]
    DuplicateUser(UserId),
    #[error("setup needs at least one member")]
    NoMembers,
    #[error("{user} has not accepted the group key for time {time}")]
    NotSynchronized { user: UserId, time: u64 },
    #[error("{user} is at time {at}, message is for time {got}")]
    StaleState { user: UserId, at: u64, got: u64 },
    #[error("{user} could not decrypt the rekey message for time {time}")]
    DecryptFailure { user: UserId, time: u64 },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Setup,
    Join,
    Leave,
    /// Join-incurred "key update" under [`RekeyPolicy::StrongOpt`].
    KeyUpdateNotice,
}

impl MessageKind {
    fn octet(self) -> u8 {
        match self {
            MessageKind::Setup => 0,
            MessageKind::Join => 1,
            MessageKind::Leave => 2,
            MessageKind::KeyUpdateNotice => 3,
        }
    }

    fn from_octet(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            0 => MessageKind::Setup,
            1 => MessageKind::Join,
            2 => MessageKind::Leave,
            3 => MessageKind::KeyUpdateNotice,
            value => {
                return Err(WireError::BadTag {
                    field: "message kind",
                    value,
                })
            }
        })
    }

    pub fn is_join(self) -> bool {
        matches!(self, MessageKind::Join | MessageKind::KeyUpdateNotice)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Setup => "setup",
            MessageKind::Join => "join",
            MessageKind::Leave => "leave",
            MessageKind::KeyUpdateNotice => "key-update",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RekeyUnit {
    pub recipients: Vec<UserId>,
    pub items: Vec<Ciphertext>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RekeyMessage {
    pub time: u64,
    pub kind: MessageKind,
    pub units: Vec<RekeyUnit>,
    /// Not carried on the wire; recovered on decode as the sole recipient of
    /// the last unit of a join message.
    pub new_member: Option<UserId>,
}

impl RekeyMessage {
    pub fn item_count(&self) -> usize {
        self.units.iter().map(|u| u.items.len()).sum()
    }

    pub fn ciphertexts(&self) -> impl Iterator<Item = &Ciphertext> {
        self.units.iter().flat_map(|u| u.items.iter())
    }

    /// `time(4) ‖ kind(1) ‖ unit_count(2) ‖ units…`, each unit being
    /// `recipient_count(2) ‖ recipients… ‖ item_count(2) ‖ ciphertexts…`.
    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut w = Writer::new();
        let time = u32::try_from(self.time).map_err(|_| WireError::Malformed("time exceeds 32 bits"))?;
        w.u32(time).u8(self.kind.octet()).count(self.units.len())?;
        for unit in &self.units {
            w.count(unit.recipients.len())?;
            for r in &unit.recipients {
                w.prefixed(r.as_str().as_bytes())?;
            }
            w.count(unit.items.len())?;
            for ct in &unit.items {
                ct.encode_into(&mut w)?;
            }
        }
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let time = u64::from(r.u32()?);
        let kind = MessageKind::from_octet(r.u8()?)?;
        let unit_count = r.u16()?;
        let mut units = Vec::with_capacity(unit_count as usize);
        for _ in 0..unit_count {
            let n = r.u16()?;
            let mut recipients = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let name = std::str::from_utf8(r.prefixed()?).map_err(|_| WireError::BadUtf8("recipient"))?;
                recipients.push(UserId::new(name));
            }
            let m = r.u16()?;
            let mut items = Vec::with_capacity(m as usize);
            for _ in 0..m {
                items.push(Ciphertext::decode_from(&mut r)?);
            }
            units.push(RekeyUnit { recipients, items });
        }
        r.finish()?;
        let new_member = match (kind.is_join(), units.last()) {
            (true, Some(u)) if u.recipients.len() == 1 => Some(u.recipients[0].clone()),
            _ => None,
        };
        Ok(Self {
            time,
            kind,
            units,
            new_member,
        })
    }
}

/// Public pointer to the group key in force at some time: the stored key
/// version, and whether the payload key is its `Enc` derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupKeyRef {
    pub key: VersionedKeyId,
    pub derived: bool,
}

/// Harness-only record of retired key versions and past group keys.
#[derive(Debug, Clone, Default)]
pub struct KeyLedger {
    pub retired: Vec<(VersionedKeyId, SecretKey)>,
    pub group_keys: Vec<SecretKey>,
}

impl KeyLedger {
    pub fn contains_retired_material(&self, key: &SecretKey) -> bool {
        self.retired.iter().any(|(_, k)| k.same_material(key))
    }

    pub fn is_historical_group_key(&self, key: &SecretKey) -> Option<u64> {
        self.group_keys
            .iter()
            .position(|k| k.same_material(key))
            .map(|t| t as u64)
    }
}

#[derive(Debug)]
pub struct ControllerState {
    time: u64,
    tree: KeyTree,
    config: LkhConfig,
    pending: BTreeMap<UserId, SecretKey>,
    group_key: SecretKey,
    group_key_ref: GroupKeyRef,
    schedule: Vec<GroupKeyRef>,
    meter: PrfMeter,
    last_event_prf: u64,
    ledger: Option<KeyLedger>,
}

/// Sets up a group over `members`, returning the controller, every member's
/// state (already processed the setup message) and the setup message.
pub fn setup<R: RngCore + CryptoRng + ?Sized>(
    members: &[UserId],
    config: LkhConfig,
    rng: &mut R,
) -> Result<(ControllerState, Vec<MemberState>, RekeyMessage), LkhError> {
    if members.is_empty() {
        return Err(LkhError::NoMembers);
    }
    let mut seen = BTreeSet::new();
    for u in members {
        if !seen.insert(u) {
            return Err(LkhError::DuplicateUser(u.clone()));
        }
    }
    let individual: Vec<(UserId, SecretKey)> = members
        .iter()
        .map(|u| (u.clone(), gen_key(rng, config.kappa)))
        .collect();
    let tree = KeyTree::build(individual.clone(), config.degree, config.kappa, rng)?;

    let mut units = Vec::with_capacity(members.len());
    let mut states = Vec::with_capacity(members.len());
    for (u, k_u) in individual {
        let leaf = tree.leaf_of(&u)?;
        let above: Vec<NodeId> = tree.path_to_root(leaf)?.into_iter().skip(1).collect();
        let entry = |n: NodeId| -> Result<BundleEntry, LkhError> {
            Ok(BundleEntry {
                id: tree.key_id(n)?,
                parent: tree.parent(n)?,
                key: tree.key(n)?.clone(),
            })
        };
        let (on_channel, out_of_band): (Vec<NodeId>, Vec<NodeId>) = match config.setup_delivery {
            SetupDelivery::FullKeyset => (above, Vec::new()),
            SetupDelivery::GroupKeyOnly => {
                let (root, aux) = above.split_last().expect("leaf has a parent");
                (vec![*root], aux.to_vec())
            }
        };
        let bundle = KeyBundle::new(on_channel.into_iter().map(entry).collect::<Result<_, _>>()?);
        let ct = encrypt(&k_u, &bundle.encode()?, tree.key_id(leaf)?, KeyUsage::Raw, rng)?;
        units.push(RekeyUnit {
            recipients: vec![u.clone()],
            items: vec![ct],
        });
        let mut m = MemberState::new(u, config.policy, k_u);
        if config.setup_delivery == SetupDelivery::GroupKeyOnly {
            let aux = out_of_band.into_iter().map(entry).collect::<Result<Vec<_>, _>>()?;
            m.install_enrollment(tree.key_id(leaf)?, aux);
        }
        states.push(m);
    }
    let msg = RekeyMessage {
        time: 0,
        kind: MessageKind::Setup,
        units,
        new_member: None,
    };
    for m in &mut states {
        m.process(&msg)?;
    }
    let root = tree.root();
    let group_key_ref = GroupKeyRef {
        key: tree.key_id(root)?,
        derived: false,
    };
    let group_key = tree.key(root)?.clone();
    let ledger = config.audit.then(|| KeyLedger {
        retired: Vec::new(),
        group_keys: vec![group_key.clone()],
    });
    let ctrl = ControllerState {
        time: 0,
        tree,
        config,
        pending: BTreeMap::new(),
        group_key,
        group_key_ref,
        schedule: vec![group_key_ref],
        meter: PrfMeter::default(),
        last_event_prf: 0,
        ledger,
    };
    Ok((ctrl, states, msg))
}

fn usage(strong: bool) -> KeyUsage {
    if strong {
        KeyUsage::Enc
    } else {
        KeyUsage::Raw
    }
}

fn seal<R: RngCore + CryptoRng + ?Sized>(
    meter: &mut PrfMeter,
    key: &SecretKey,
    key_id: VersionedKeyId,
    use_enc: bool,
    bundle: &KeyBundle,
    rng: &mut R,
) -> Result<Ciphertext, LkhError> {
    let plaintext = bundle.encode()?;
    let ct = if use_enc {
        let k = meter.eval(key, PrfLabel::Enc)?;
        encrypt(&k, &plaintext, key_id, usage(true), rng)?
    } else {
        encrypt(key, &plaintext, key_id, usage(false), rng)?
    };
    Ok(ct)
}

impl ControllerState {
    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn tree(&self) -> &KeyTree {
        &self.tree
    }

    pub fn config(&self) -> &LkhConfig {
        &self.config
    }

    pub fn policy(&self) -> RekeyPolicy {
        self.config.policy
    }

    pub fn members(&self) -> Vec<UserId> {
        self.tree.members()
    }

    pub fn is_member(&self, u: &UserId) -> bool {
        self.tree.contains_user(u)
    }

    /// Group key schedule indexed by time.
    pub fn schedule(&self) -> &[GroupKeyRef] {
        &self.schedule
    }

    pub fn group_key_ref(&self) -> GroupKeyRef {
        self.group_key_ref
    }

    pub fn current_group_key(&self) -> &SecretKey {
        &self.group_key
    }

    pub fn ledger(&self) -> Option<&KeyLedger> {
        self.ledger.as_ref()
    }

    pub fn prf_evals_last_event(&self) -> u64 {
        self.last_event_prf
    }

    pub fn prf_evals_total(&self) -> u64 {
        self.meter.total()
    }

    /// Establishes the individual key of a prospective member out of band.
    /// The returned copy is what the joining user holds.
    pub fn enroll<R: RngCore + CryptoRng + ?Sized>(&mut self, u: &UserId, rng: &mut R) -> Result<SecretKey, LkhError> {
        if self.tree.contains_user(u) {
            return Err(LkhError::AlreadyMember(u.clone()));
        }
        let k = gen_key(rng, self.config.kappa);
        if let Some(mut old) = self.pending.insert(u.clone(), k.clone()) {
            secure_erase(&mut old);
        }
        Ok(k)
    }

    fn retire(&mut self, (id, mut key): (VersionedKeyId, SecretKey)) {
        if let Some(l) = &mut self.ledger {
            l.retired.push((id, key.clone()));
        }
        secure_erase(&mut key);
    }

    fn evolve(&mut self, nodes: impl IntoIterator<Item = NodeId>) -> Result<(), LkhError> {
        for n in nodes {
            let old = self.tree.evolve_key(n, &mut self.meter)?;
            self.retire(old);
        }
        Ok(())
    }

    fn non_root_nodes(&self) -> Vec<NodeId> {
        let root = self.tree.root();
        self.tree.preorder().into_iter().filter(|&n| n != root).collect()
    }

    fn finish_event(&mut self, derived: bool) -> Result<(), LkhError> {
        self.time += 1;
        let root = self.tree.root();
        let key = if derived {
            self.meter.eval(self.tree.key(root)?, PrfLabel::Enc)?
        } else {
            self.tree.key(root)?.clone()
        };
        self.group_key_ref = GroupKeyRef {
            key: self.tree.key_id(root)?,
            derived,
        };
        let mut old = std::mem::replace(&mut self.group_key, key);
        secure_erase(&mut old);
        self.schedule.push(self.group_key_ref);
        if let Some(l) = &mut self.ledger {
            l.group_keys.push(self.group_key.clone());
        }
        self.last_event_prf = self.meter.take_since_mark();
        Ok(())
    }

    fn entry(&self, n: NodeId) -> Result<BundleEntry, LkhError> {
        Ok(BundleEntry {
            id: self.tree.key_id(n)?,
            parent: self.tree.parent(n)?,
            key: self.tree.key(n)?.clone(),
        })
    }

    /// Admits `u`, whose individual key must already be enrolled.
    pub fn join<R: RngCore + CryptoRng + ?Sized>(&mut self, u: &UserId, rng: &mut R) -> Result<RekeyMessage, LkhError> {
        if self.tree.contains_user(u) {
            return Err(LkhError::AlreadyMember(u.clone()));
        }
        let k_u = self
            .pending
            .remove(u)
            .ok_or_else(|| LkhError::NoIndividualKey(u.clone()))?;
        let existing = self.tree.members();
        let kappa = self.config.kappa;

        // Joining point; a split inserts a fresh node above an existing leaf.
        let (joining_point, split) = match self.tree.find_joining_point() {
            JoiningPoint::Existing(n) => (n, None),
            JoiningPoint::SplitLeaf(leaf) => {
                // Under StrongOpt the split member derives the new node's key
                // itself; its current leaf key has not encrypted anything yet.
                let key = match self.config.policy {
                    RekeyPolicy::StrongOpt => self.meter.eval(self.tree.key(leaf)?, PrfLabel::Enc)?,
                    _ => gen_key(rng, kappa),
                };
                let mid = self.tree.split_leaf(leaf, key)?;
                (mid, Some((mid, leaf)))
            }
        };
        let leaf = self.tree.attach(joining_point, u.clone(), k_u)?;
        let leaf_id = self.tree.key_id(leaf)?;
        let mut path = self.tree.path_to_root(joining_point)?;
        path.reverse();

        let (kind, units, derived) = match self.config.policy {
            RekeyPolicy::Baseline | RekeyPolicy::Strong => {
                let strong = self.config.policy == RekeyPolicy::Strong;
                let mut fresh = Vec::with_capacity(path.len());
                for &n in &path {
                    let new_id = if split.is_some_and(|(mid, _)| mid == n) {
                        self.tree.key_id(n)?
                    } else {
                        let old = self.tree.key_id(n)?;
                        VersionedKeyId::new(n, old.generation + 1, 0)
                    };
                    let key = if split.is_some_and(|(mid, _)| mid == n) {
                        self.tree.key(n)?.clone()
                    } else {
                        gen_key(rng, kappa)
                    };
                    fresh.push(BundleEntry {
                        id: new_id,
                        parent: self.tree.parent(n)?,
                        key,
                    });
                }

                // {hk_i} under the key each existing holder set already shares.
                let mut main = Vec::with_capacity(path.len());
                for (i, (&n, e)) in path.iter().zip(&fresh).enumerate() {
                    let (enc_node, use_enc) = match split {
                        Some((mid, split_leaf)) if mid == n => (split_leaf, strong),
                        _ => (n, strong && i > 0),
                    };
                    let wrap = self.tree.key(enc_node)?;
                    let ct = seal(
                        &mut self.meter,
                        wrap,
                        self.tree.key_id(enc_node)?,
                        use_enc,
                        &KeyBundle::new(vec![e.clone()]),
                        rng,
                    )?;
                    main.push(ct);
                }
                let mut for_joiner = fresh.clone();
                for_joiner.reverse();
                let joiner_ct = seal(
                    &mut self.meter,
                    self.tree.key(leaf)?,
                    leaf_id,
                    strong,
                    &KeyBundle::new(for_joiner),
                    rng,
                )?;

                for (n, e) in path.iter().zip(fresh) {
                    if split.is_some_and(|(mid, _)| mid == *n) {
                        continue;
                    }
                    let old = self.tree.replace_key(*n, e.key)?;
                    self.retire(old);
                }
                if strong {
                    self.evolve(self.non_root_nodes())?;
                }
                let units = vec![
                    RekeyUnit {
                        recipients: existing,
                        items: main,
                    },
                    RekeyUnit {
                        recipients: vec![u.clone()],
                        items: vec![joiner_ct],
                    },
                ];
                (MessageKind::Join, units, false)
            }
            RekeyPolicy::StrongOpt => {
                let everyone_else: Vec<NodeId> = self.tree.preorder().into_iter().filter(|&n| n != leaf).collect();
                self.evolve(everyone_else)?;
                let mut for_joiner = path.iter().map(|&n| self.entry(n)).collect::<Result<Vec<_>, _>>()?;
                for_joiner.reverse();
                let joiner_ct = seal(
                    &mut self.meter,
                    self.tree.key(leaf)?,
                    leaf_id,
                    true,
                    &KeyBundle::new(for_joiner),
                    rng,
                )?;
                self.evolve([leaf])?;
                let mut units = vec![RekeyUnit {
                    recipients: existing,
                    items: Vec::new(),
                }];
                if let Some((mid, split_leaf)) = split {
                    // An empty unit tells the split member to derive the new
                    // node, whose id immediately precedes the joiner's leaf.
                    debug_assert_eq!(mid.0 + 1, leaf.0);
                    let v = self.tree.user_at(split_leaf)?.expect("split leaf has a user").clone();
                    units.push(RekeyUnit {
                        recipients: vec![v],
                        items: Vec::new(),
                    });
                }
                units.push(RekeyUnit {
                    recipients: vec![u.clone()],
                    items: vec![joiner_ct],
                });
                (MessageKind::KeyUpdateNotice, units, true)
            }
        };
        self.finish_event(derived)?;
        Ok(RekeyMessage {
            time: self.time,
            kind,
            units,
            new_member: Some(u.clone()),
        })
    }

    /// Removes `u` and rekeys the path above its former position.
    pub fn leave<R: RngCore + CryptoRng + ?Sized>(
        &mut self,
        u: &UserId,
        rng: &mut R,
    ) -> Result<RekeyMessage, LkhError> {
        if !self.tree.contains_user(u) {
            return Err(LkhError::NotMember(u.clone()));
        }
        let detached = self.tree.detach(u)?;
        self.retire(detached.removed_key);
        if let Some(spliced) = detached.spliced {
            self.retire(spliced);
        }
        let strong = self.config.policy.evolves_keys();
        let mut path = self.tree.path_to_root(detached.leaving_point)?;
        path.reverse();

        let mut fresh = Vec::with_capacity(path.len());
        for &n in &path {
            let old = self.tree.key_id(n)?;
            fresh.push(BundleEntry {
                id: VersionedKeyId::new(n, old.generation + 1, 0),
                parent: self.tree.parent(n)?,
                key: gen_key(rng, self.config.kappa),
            });
        }
        // L_i: hk_i under every child of x_i in the new tree; the child on the
        // path contributes its own new key.
        let mut items = Vec::new();
        for (i, &n) in path.iter().enumerate() {
            let plaintext = KeyBundle::new(vec![fresh[i].clone()]);
            for &c in self.tree.children(n)? {
                let ct = match path.get(i + 1) {
                    Some(&next) if next == c => {
                        let e = &fresh[i + 1];
                        seal(&mut self.meter, &e.key, e.id, strong, &plaintext, rng)?
                    }
                    _ => seal(
                        &mut self.meter,
                        self.tree.key(c)?,
                        self.tree.key_id(c)?,
                        strong,
                        &plaintext,
                        rng,
                    )?,
                };
                items.push(ct);
            }
        }
        for (n, e) in path.iter().zip(fresh) {
            let old = self.tree.replace_key(*n, e.key)?;
            self.retire(old);
        }
        if strong {
            self.evolve(self.non_root_nodes())?;
        }
        self.finish_event(false)?;
        Ok(RekeyMessage {
            time: self.time,
            kind: MessageKind::Leave,
            units: vec![RekeyUnit {
                recipients: self.tree.members(),
                items,
            }],
            new_member: None,
        })
    }

    /// Checks the correctness requirement for one member: if it accepted the
    /// current time, its group key and every key it holds match the tree.
    pub fn verify_member(&self, m: &MemberState) -> Result<(), String> {
        if !self.tree.contains_user(&m.id) || !m.accepted(self.time) {
            return Ok(());
        }
        let gk = m.group_key.as_ref().ok_or("accepted member without group key")?;
        if !gk.same_material(&self.group_key) {
            return Err(format!("{} group key differs from controller at t={}", m.id, self.time));
        }
        for held in m.keys.values() {
            let n = held.id.node;
            match (self.tree.key_id(n), self.tree.key(n)) {
                (Ok(id), Ok(k)) if id == held.id && k.same_material(&held.key) => {}
                _ => return Err(format!("{} holds {} which the controller does not", m.id, held.id)),
            }
        }
        let expected = self.tree.keyset(&m.id).map_err(|e| e.to_string())?;
        let held: Vec<VersionedKeyId> = expected
            .iter()
            .filter(|id| m.keys.get(&id.node).is_some_and(|h| h.id == **id))
            .copied()
            .collect();
        if held != expected {
            return Err(format!("{} is missing keys of its keyset", m.id));
        }
        Ok(())
    }
}

/// For a join notice that split an existing leaf: the member owning that
/// leaf and the id of the new node above it. An empty unit addressed to that
/// member alone marks the split; the new node's id immediately precedes the
/// joiner's leaf.
pub fn split_node(msg: &RekeyMessage) -> Option<(&UserId, NodeId)> {
    if msg.kind != MessageKind::KeyUpdateNotice {
        return None;
    }
    let (joiner, rest) = msg.units.split_last()?;
    let signal = rest
        .iter()
        .skip(1)
        .find(|u| u.items.is_empty() && u.recipients.len() == 1)?;
    let leaf = joiner.items.first()?.key_id.node;
    Some((&signal.recipients[0], NodeId(leaf.0.checked_sub(1)?)))
}

fn split_signal(msg: &RekeyMessage, user: &UserId) -> Option<NodeId> {
    split_node(msg).filter(|(u, _)| *u == user).map(|(_, n)| n)
}

#[derive(Debug, Clone)]
struct HeldKey {
    id: VersionedKeyId,
    key: SecretKey,
}

/// A group member's local state.
#[derive(Debug, Clone)]
pub struct MemberState {
    id: UserId,
    policy: RekeyPolicy,
    leaf: Option<NodeId>,
    individual: Option<SecretKey>,
    keys: BTreeMap<NodeId, HeldKey>,
    parents: BTreeMap<NodeId, Option<NodeId>>,
    acc: BTreeMap<u64, bool>,
    time: Option<u64>,
    group_key: Option<SecretKey>,
    corrupted: bool,
    departed: bool,
    meter: PrfMeter,
    last_event_prf: u64,
}

impl MemberState {
    /// A prospective member holding only its out-of-band individual key.
    pub fn new(id: UserId, policy: RekeyPolicy, individual_key: SecretKey) -> Self {
        Self {
            id,
            policy,
            leaf: None,
            individual: Some(individual_key),
            keys: BTreeMap::new(),
            parents: BTreeMap::new(),
            acc: BTreeMap::new(),
            time: None,
            group_key: None,
            corrupted: false,
            departed: false,
            meter: PrfMeter::default(),
            last_event_prf: 0,
        }
    }

    fn install_enrollment(&mut self, leaf: VersionedKeyId, aux: Vec<BundleEntry>) {
        let k_u = self.individual.take().expect("fresh member has individual key");
        self.leaf = Some(leaf.node);
        self.keys.insert(leaf.node, HeldKey { id: leaf, key: k_u });
        let mut below = leaf.node;
        for e in aux {
            self.parents.insert(below, Some(e.id.node));
            self.parents.insert(e.id.node, e.parent);
            below = e.id.node;
            self.keys.insert(e.id.node, HeldKey { id: e.id, key: e.key });
        }
    }

    pub fn id(&self) -> &UserId {
        &self.id
    }

    pub fn time(&self) -> Option<u64> {
        self.time
    }

    pub fn accepted(&self, t: u64) -> bool {
        !self.departed && self.acc.get(&t).copied().unwrap_or(false)
    }

    pub fn acc(&self) -> &BTreeMap<u64, bool> {
        &self.acc
    }

    pub fn is_corrupted(&self) -> bool {
        self.corrupted
    }

    pub fn has_departed(&self) -> bool {
        self.departed
    }

    pub fn mark_corrupted(&mut self) {
        self.corrupted = true;
    }

    pub fn prf_evals_last_event(&self) -> u64 {
        self.last_event_prf
    }

    /// Key versions currently held, leaf first.
    pub fn held_key_ids(&self) -> Vec<VersionedKeyId> {
        self.path()
            .into_iter()
            .filter_map(|n| self.keys.get(&n).map(|h| h.id))
            .collect()
    }

    /// Copies of every key still held (individual, path and group key).
    pub fn held_keys(&self) -> Vec<(VersionedKeyId, SecretKey)> {
        self.keys
            .values()
            .filter(|h| !h.key.is_erased())
            .map(|h| (h.id, h.key.clone()))
            .collect()
    }

    /// The payload group key at the member's current time.
    pub fn current_group_key(&self) -> Result<&SecretKey, LkhError> {
        let t = self.time.unwrap_or(0);
        match (&self.group_key, self.accepted(t)) {
            (Some(k), true) => Ok(k),
            _ => Err(LkhError::NotSynchronized {
                user: self.id.clone(),
                time: t,
            }),
        }
    }

    /// Honest departure erases everything; a corrupted member keeps its keys.
    pub fn depart(&mut self) {
        self.departed = true;
        if self.corrupted {
            return;
        }
        for h in self.keys.values_mut() {
            secure_erase(&mut h.key);
        }
        self.keys.clear();
        self.parents.clear();
        if let Some(k) = &mut self.group_key {
            secure_erase(k);
        }
        self.group_key = None;
    }

    fn path(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.leaf;
        while let Some(n) = cur {
            if out.contains(&n) {
                break;
            }
            out.push(n);
            cur = self.parents.get(&n).copied().flatten();
        }
        out
    }

    fn find_key(&self, fresh: &BTreeMap<NodeId, HeldKey>, id: &VersionedKeyId) -> Option<SecretKey> {
        [fresh.get(&id.node), self.keys.get(&id.node)]
            .into_iter()
            .flatten()
            .find(|h| h.id == *id)
            .map(|h| h.key.clone())
    }

    /// Applies one rekey message: decrypts what it can, installs new keys,
    /// drops keys that left its path, evolves per policy and erases every
    /// outdated key.
    pub fn process(&mut self, msg: &RekeyMessage) -> Result<(), LkhError> {
        if self.departed {
            return Err(LkhError::NotMember(self.id.clone()));
        }
        if let Some(at) = self.time {
            if msg.time != at + 1 {
                return Err(LkhError::StaleState {
                    user: self.id.clone(),
                    at,
                    got: msg.time,
                });
            }
        }
        let t = msg.time;
        let joining = self.time.is_none();
        let mine: Vec<&RekeyUnit> = msg
            .units
            .iter()
            .filter(|unit| unit.recipients.contains(&self.id))
            .collect();

        // A member that does not know its leaf yet learns it from the
        // ciphertext addressed to it alone under its individual key.
        if self.leaf.is_none() {
            let k_u = self
                .individual
                .clone()
                .ok_or_else(|| LkhError::NoIndividualKey(self.id.clone()))?;
            let found = mine
                .iter()
                .filter(|unit| unit.recipients.len() == 1)
                .flat_map(|unit| unit.items.iter())
                .find_map(|ct| {
                    let k = match ct.usage {
                        KeyUsage::Raw => k_u.clone(),
                        KeyUsage::Enc => crate::crypto::prf_eval(&k_u, PrfLabel::Enc).ok()?,
                    };
                    decrypt(&k, ct).ok().map(|_| ct.key_id)
                });
            match found {
                Some(id) => {
                    let mut k = self.individual.take().expect("checked above");
                    self.leaf = Some(id.node);
                    self.keys.insert(id.node, HeldKey { id, key: k.clone() });
                    secure_erase(&mut k);
                }
                None => {
                    self.acc.insert(t, false);
                    return Err(LkhError::DecryptFailure {
                        user: self.id.clone(),
                        time: t,
                    });
                }
            }
        }

        let known_path = self.path();
        let mut fresh: BTreeMap<NodeId, HeldKey> = BTreeMap::new();
        let mut parent_updates: BTreeMap<NodeId, Option<NodeId>> = BTreeMap::new();
        let pending: Vec<&Ciphertext> = mine.iter().flat_map(|unit| unit.items.iter()).collect();
        let mut done = vec![false; pending.len()];
        let mut decrypted = 0usize;
        loop {
            let mut progress = false;
            for (i, ct) in pending.iter().enumerate() {
                if done[i] {
                    continue;
                }
                let Some(base) = self.find_key(&fresh, &ct.key_id) else {
                    continue;
                };
                let k = match ct.usage {
                    KeyUsage::Raw => base,
                    KeyUsage::Enc => self.meter.eval(&base, PrfLabel::Enc)?,
                };
                let plaintext = match decrypt(&k, ct) {
                    Ok(p) => p,
                    Err(_) => {
                        self.acc.insert(t, false);
                        return Err(LkhError::DecryptFailure {
                            user: self.id.clone(),
                            time: t,
                        });
                    }
                };
                let bundle = KeyBundle::decode(&plaintext)?;
                if let Some(first) = bundle.entries.first() {
                    // Outside setup, a key sent under another node's key
                    // belongs to that node's parent.
                    let enrolled = msg.kind == MessageKind::Setup && known_path.contains(&first.id.node);
                    if first.id.node != ct.key_id.node && !enrolled {
                        parent_updates.insert(ct.key_id.node, Some(first.id.node));
                    }
                }
                for e in bundle.entries {
                    parent_updates.insert(e.id.node, e.parent);
                    if let Some(mut prev) = fresh.insert(e.id.node, HeldKey { id: e.id, key: e.key }) {
                        secure_erase(&mut prev.key);
                    }
                }
                done[i] = true;
                decrypted += 1;
                progress = true;
            }
            if !progress {
                break;
            }
        }
        let notice_only = msg.kind == MessageKind::KeyUpdateNotice && !joining;
        if decrypted == 0 && !notice_only {
            self.acc.insert(t, false);
            return Err(LkhError::DecryptFailure {
                user: self.id.clone(),
                time: t,
            });
        }

        for (n, h) in fresh {
            if let Some(mut old) = self.keys.insert(n, h) {
                secure_erase(&mut old.key);
            }
        }
        self.parents.extend(parent_updates);
        if notice_only {
            if let Some(mid) = split_signal(msg, &self.id) {
                let leaf = self.leaf.expect("existing member knows its leaf");
                let k_v = &self.keys.get(&leaf).expect("leaf key held").key;
                let key = self.meter.eval(k_v, PrfLabel::Enc)?;
                let above = self.parents.get(&leaf).copied().flatten();
                self.parents.insert(mid, above);
                self.parents.insert(leaf, Some(mid));
                self.keys.insert(
                    mid,
                    HeldKey {
                        id: VersionedKeyId::new(mid, 0, 0),
                        key,
                    },
                );
            }
        }
        let path = self.path();
        let stale: Vec<NodeId> = self.keys.keys().filter(|n| !path.contains(n)).copied().collect();
        for n in stale {
            if let Some(mut h) = self.keys.remove(&n) {
                secure_erase(&mut h.key);
            }
        }
        self.parents.retain(|n, _| path.contains(n));
        let root = *path.last().expect("path contains the leaf");

        let evolve: Vec<NodeId> = match (self.policy, msg.kind) {
            (_, MessageKind::Setup) | (RekeyPolicy::Baseline, _) => Vec::new(),
            (RekeyPolicy::StrongOpt, MessageKind::KeyUpdateNotice) if joining => {
                vec![self.leaf.expect("leaf known")]
            }
            (RekeyPolicy::StrongOpt, MessageKind::KeyUpdateNotice) => path.clone(),
            _ => path.iter().copied().filter(|&n| n != root).collect(),
        };
        for n in evolve {
            let h = self.keys.get_mut(&n).expect("path key held");
            let next = self.meter.eval(&h.key, PrfLabel::Next)?;
            let mut old = std::mem::replace(&mut h.key, next);
            secure_erase(&mut old);
            h.id = h.id.next();
        }

        let root_key = &self
            .keys
            .get(&root)
            .ok_or_else(|| LkhError::DecryptFailure {
                user: self.id.clone(),
                time: t,
            })?
            .key;
        let group_key = if msg.kind == MessageKind::KeyUpdateNotice {
            self.meter.eval(root_key, PrfLabel::Enc)?
        } else {
            root_key.clone()
        };
        if let Some(mut old) = self.group_key.replace(group_key) {
            secure_erase(&mut old);
        }
        self.acc.insert(t, true);
        self.time = Some(t);
        self.last_event_prf = self.meter.take_since_mark();
        Ok(())
    }
}
