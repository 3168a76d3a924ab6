//! Group drivers, random scripts and brute-force oracles for the acceptance
//! suite. Nothing here calls the closure or cover code under test.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use gkm_core::bundle::KeyBundle;
use gkm_core::crypto::{decrypt, prf_eval};
use gkm_core::{
    setup, CapturedState, ControllerState, LkhConfig, MemberState, PrfLabel, RekeyMessage, RekeyPolicy, SecretKey,
    TrafficTape, UserId, VersionedKeyId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const POLICIES: [RekeyPolicy; 3] = [RekeyPolicy::Baseline, RekeyPolicy::Strong, RekeyPolicy::StrongOpt];

pub fn uid(s: &str) -> UserId {
    UserId::new(s)
}

pub fn uids(names: &[&str]) -> Vec<UserId> {
    names.iter().map(|s| uid(s)).collect()
}

pub fn config(policy: RekeyPolicy, degree: usize) -> LkhConfig {
    LkhConfig {
        degree,
        ..LkhConfig::with_policy(policy)
    }
}

/// Smallest h with d^h >= n.
pub fn ceil_log(d: usize, n: usize) -> u32 {
    (0..).find(|&h| d.checked_pow(h).is_none_or(|p| p >= n)).unwrap()
}

/// Controller, members and the recorded channel, with every message delivered
/// to every current member.
pub struct Group {
    pub ctrl: ControllerState,
    pub members: BTreeMap<UserId, MemberState>,
    pub tape: TrafficTape,
    pub rng: ChaCha20Rng,
    pub errors: Vec<String>,
    /// Group size before each event; 0 for setup.
    pub size_before: Vec<usize>,
}

impl Group {
    pub fn new(users: &[UserId], config: LkhConfig, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (ctrl, states, msg) = setup(users, config, &mut rng).expect("setup");
        let mut tape = TrafficTape::new();
        tape.record_rekey(&msg, ctrl.group_key_ref());
        Group {
            ctrl,
            members: states.into_iter().map(|m| (m.id().clone(), m)).collect(),
            tape,
            rng,
            errors: Vec::new(),
            size_before: vec![0],
        }
    }

    pub fn time(&self) -> u64 {
        self.ctrl.time()
    }

    pub fn size(&self) -> usize {
        self.ctrl.tree().len()
    }

    pub fn join(&mut self, u: &UserId) -> RekeyMessage {
        self.size_before.push(self.size());
        let k = self.ctrl.enroll(u, &mut self.rng).expect("enroll");
        let msg = self.ctrl.join(u, &mut self.rng).expect("join");
        self.members
            .insert(u.clone(), MemberState::new(u.clone(), self.ctrl.policy(), k));
        self.deliver(&msg);
        msg
    }

    pub fn leave(&mut self, u: &UserId) -> RekeyMessage {
        self.size_before.push(self.size());
        let msg = self.ctrl.leave(u, &mut self.rng).expect("leave");
        self.members.get_mut(u).expect("member").depart();
        self.deliver(&msg);
        msg
    }

    pub fn apply(&mut self, op: &Op) -> RekeyMessage {
        match op {
            Op::Join(u) => self.join(u),
            Op::Leave(u) => self.leave(u),
        }
    }

    fn deliver(&mut self, msg: &RekeyMessage) {
        self.tape.record_rekey(msg, self.ctrl.group_key_ref());
        for u in self.ctrl.members() {
            if let Err(e) = self.members.get_mut(&u).expect("state").process(msg) {
                self.errors.push(format!("t={} {u}: {e}", msg.time));
            }
        }
    }

    /// Capture of `u`'s current keys, leaving `u` itself untouched.
    pub fn capture(&self, u: &UserId) -> CapturedState {
        let mut m = self.members[u].clone();
        gkm_core::corrupt_member(&mut m, self.time())
    }

    pub fn ledger_group_keys(&self) -> &[SecretKey] {
        &self.ctrl.ledger().expect("audit on").group_keys
    }

    pub fn current(&self) -> Vec<UserId> {
        self.ctrl.members()
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Join(UserId),
    Leave(UserId),
}

#[derive(Debug, Clone)]
pub struct Script {
    pub degree: usize,
    pub initial: Vec<UserId>,
    pub ops: Vec<Op>,
}

/// Random join/leave script; group size stays within `1..=max_members`.
pub fn random_script(seed: u64, events: usize, max_members: usize, max_initial: usize) -> Script {
    biased_script(seed, events, max_members, max_initial, 0.5)
}

pub fn biased_script(seed: u64, events: usize, max_members: usize, max_initial: usize, p_join: f64) -> Script {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let degree = rng.gen_range(2..=4);
    let initial_n = rng.gen_range(1..=max_initial.min(max_members));
    let initial: Vec<UserId> = (0..initial_n).map(|i| uid(&format!("m{i}"))).collect();
    let mut current = initial.clone();
    let mut next = initial_n;
    let mut ops = Vec::with_capacity(events);
    for _ in 0..events {
        let join = current.len() < 2 || (current.len() < max_members && rng.gen_bool(p_join));
        if join {
            let u = uid(&format!("m{next}"));
            next += 1;
            current.push(u.clone());
            ops.push(Op::Join(u));
        } else {
            let u = current.swap_remove(rng.gen_range(0..current.len()));
            ops.push(Op::Leave(u));
        }
    }
    Script { degree, initial, ops }
}

pub fn next(k: &SecretKey) -> SecretKey {
    prf_eval(k, PrfLabel::Next).expect("live key")
}

pub fn enc(k: &SecretKey) -> SecretKey {
    prf_eval(k, PrfLabel::Enc).expect("live key")
}

/// Everything one key yields by forward steps: `Next^i`, `Enc` of those, and
/// the same again starting from each `Enc` value, up to `depth` steps each.
pub fn derivations(k: &SecretKey, depth: usize) -> Vec<SecretKey> {
    let mut out = Vec::new();
    let mut a = k.clone();
    for i in 0..=depth {
        if i > 0 {
            a = next(&a);
        }
        out.push(a.clone());
        let mut b = enc(&a);
        for j in 0..=depth {
            if j > 0 {
                b = next(&b);
            }
            out.push(b.clone());
            out.push(enc(&b));
        }
    }
    out
}

/// Brute-force key recovery. Ignores key ids: every derivation of every held
/// key is tried against every recorded ciphertext until nothing new opens.
/// Returns the hex of every derivable key.
pub fn brute_force_keys(tape: &TrafficTape, captured: &[SecretKey], depth: usize) -> BTreeSet<String> {
    let cts: Vec<_> = tape.entries().iter().flat_map(|e| e.ciphertexts()).collect();
    let mut opened = vec![false; cts.len()];
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut derivable: BTreeSet<String> = BTreeSet::new();
    let mut work: Vec<SecretKey> = captured.to_vec();
    while let Some(k) = work.pop() {
        if !seen.insert(k.to_hex()) {
            continue;
        }
        let cands = derivations(&k, depth);
        for c in &cands {
            derivable.insert(c.to_hex());
        }
        for (i, ct) in cts.iter().enumerate() {
            if opened[i] {
                continue;
            }
            for c in &cands {
                if let Ok(pt) = decrypt(c, ct) {
                    opened[i] = true;
                    if let Ok(bundle) = KeyBundle::decode(&pt) {
                        work.extend(bundle.entries.into_iter().map(|e| e.key));
                    }
                    break;
                }
            }
        }
    }
    derivable
}

/// Times whose ledger group key the brute-force oracle can derive.
pub fn brute_force_group_keys(tape: &TrafficTape, captured: &[SecretKey], ledger: &[SecretKey]) -> BTreeSet<u64> {
    let derivable = brute_force_keys(tape, captured, tape.len());
    ledger
        .iter()
        .enumerate()
        .filter(|(_, k)| derivable.contains(&k.to_hex()))
        .map(|(t, _)| t as u64)
        .collect()
}

pub fn captured_keys(cap: &CapturedState) -> Vec<SecretKey> {
    cap.keys.values().cloned().collect()
}

/// Leaves under heap node `x` in a tree over `n` receivers, as receiver ids.
pub fn leaves_under(n: u32, x: u32) -> BTreeSet<u32> {
    let mut lo = x;
    let mut hi = x;
    while lo < n {
        lo *= 2;
        hi = hi * 2 + 1;
    }
    (lo..=hi).map(|leaf| leaf - n + 1).collect()
}

/// Maximal complete subtrees containing no revoked receiver.
pub fn cover_oracle(n: u32, revoked: &BTreeSet<u32>) -> BTreeSet<u32> {
    let clean = |x: u32| leaves_under(n, x).is_disjoint(revoked);
    (1..2 * n).filter(|&x| clean(x) && (x == 1 || !clean(x / 2))).collect()
}

pub fn key_ids(cap: &CapturedState) -> BTreeSet<VersionedKeyId> {
    cap.keys.keys().copied().collect()
}
