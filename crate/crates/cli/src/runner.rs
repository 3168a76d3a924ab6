//! Executes a [`Scenario`] and produces a canonical trace plus exact counters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use gkm_core::adversary::{
    corrupt_member, corrupt_receiver, forward_recover, recover_closure, reveal, stateless_recover, AdversaryError,
    CapturedState, RecoveryReport, TrafficTape,
};
use gkm_core::crypto::KeyUsage;
use gkm_core::lkh::{setup, ControllerState, LkhConfig, LkhError, MemberState, RekeyMessage};
use gkm_core::stateless::{cs_init, CsMode, Decrypted, ReceiverSecrets, StatelessError, SubsetSystem};
use gkm_core::UserId;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::scenario::{Event, Scenario};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub seed: u64,
    /// Print raw key bytes in the trace.
    pub dump_keys: bool,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Lkh(#[from] LkhError),
    #[error(transparent)]
    Stateless(#[from] StatelessError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error("unknown member {0}")]
    UnknownMember(String),
    #[error("{0} was never corrupted")]
    NotCorrupted(String),
    #[error("{0} was never revoked after being corrupted")]
    NotRevoked(String),
    #[error("nothing has been corrupted yet")]
    NoCapture,
    #[error("wire encoding failed: {0}")]
    Wire(#[from] gkm_core::wire::WireError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventStats {
    pub label: String,
    pub items: usize,
    pub bytes: usize,
    pub prf_controller: u64,
    pub prf_member_max: u64,
    pub height: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoverySummary {
    pub label: String,
    /// Group (or session) keys the closure reached.
    pub group_keys: usize,
    /// Of those, keys in force strictly before the capture epoch.
    pub before_capture: usize,
    pub recovered_times: Vec<u64>,
    pub plaintexts: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub scheme: String,
    pub seed: u64,
    pub events: Vec<EventStats>,
    pub tape_items: usize,
    pub recoveries: Vec<RecoverySummary>,
    pub violations: Vec<String>,
}

impl RunStats {
    pub fn total_items(&self) -> usize {
        self.events.iter().map(|e| e.items).sum()
    }

    pub fn final_recovery(&self) -> Option<&RecoverySummary> {
        self.recoveries.last()
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scheme={}", self.scheme);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "events={}", self.events.len());
        for (i, e) in self.events.iter().enumerate() {
            let _ = writeln!(s, "event.{i}.label={}", e.label);
            let _ = writeln!(s, "event.{i}.items={}", e.items);
            let _ = writeln!(s, "event.{i}.bytes={}", e.bytes);
            let _ = writeln!(s, "event.{i}.prf_controller={}", e.prf_controller);
            let _ = writeln!(s, "event.{i}.prf_member_max={}", e.prf_member_max);
            let _ = writeln!(s, "event.{i}.height={}", e.height);
        }
        let _ = writeln!(s, "total_items={}", self.total_items());
        let _ = writeln!(s, "tape_items={}", self.tape_items);
        let _ = writeln!(s, "recoveries={}", self.recoveries.len());
        for (i, r) in self.recoveries.iter().enumerate() {
            let _ = writeln!(s, "recovery.{i}.label={}", r.label);
            let _ = writeln!(s, "recovery.{i}.group_keys={}", r.group_keys);
            let _ = writeln!(s, "recovery.{i}.before_capture={}", r.before_capture);
            let _ = writeln!(s, "recovery.{i}.plaintexts={}", r.plaintexts);
        }
        if let Some(r) = self.final_recovery() {
            let _ = writeln!(s, "final_recovery={}", r.group_keys);
            let _ = writeln!(s, "final_recovery_before_capture={}", r.before_capture);
        }
        let _ = writeln!(s, "violations={}", self.violations.len());
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: String,
    pub stats: RunStats,
    pub tape: TrafficTape,
}

impl RunOutput {
    /// 0 on success, 2 if any invariant was violated.
    pub fn exit_code(&self) -> i32 {
        if self.stats.violations.is_empty() {
            0
        } else {
            2
        }
    }
}

pub fn run(scn: &Scenario, opts: RunOptions) -> Result<RunOutput, RunError> {
    let mut out = Output {
        trace: String::new(),
        stats: RunStats {
            scheme: scn.scheme.to_string(),
            seed: opts.seed,
            ..RunStats::default()
        },
        dump_keys: opts.dump_keys,
    };
    let tape = if scn.scheme.is_stateful() {
        run_stateful(scn, opts, &mut out)?
    } else {
        run_stateless(scn, opts, &mut out)?
    };
    out.stats.tape_items = tape.item_count();
    if out.stats.tape_items != out.stats.total_items() {
        out.stats
            .violations
            .push("per-event item counts do not sum to the tape".into());
    }
    for v in out.stats.violations.clone() {
        out.line(format!("violation {v}"));
    }
    Ok(RunOutput {
        trace: out.trace,
        stats: out.stats,
        tape,
    })
}

struct Output {
    trace: String,
    stats: RunStats,
    dump_keys: bool,
}

impl Output {
    fn line(&mut self, l: impl AsRef<str>) {
        self.trace.push_str(l.as_ref());
        self.trace.push('\n');
    }

    fn violation(&mut self, v: String) {
        self.stats.violations.push(v);
    }

    fn captured(&mut self, cap: &CapturedState) {
        for (id, k) in &cap.keys {
            let mut l = format!("  captured {id} keyfp={}", k.fingerprint());
            if self.dump_keys {
                let _ = write!(l, " key={}", k.to_hex());
            }
            self.line(l);
        }
    }

    fn report(&mut self, label: String, report: &RecoveryReport, before: impl Fn(u64) -> bool) {
        self.line(&label);
        for l in report.trace_lines() {
            self.line(format!("  {l}"));
        }
        for (t, m) in &report.plaintexts {
            self.line(format!("  plaintext t={t} msg={:?}", String::from_utf8_lossy(m)));
        }
        let summary = RecoverySummary {
            label,
            group_keys: report.group_keys.len(),
            before_capture: report.group_keys.keys().filter(|t| before(**t)).count(),
            recovered_times: report.group_keys.keys().copied().collect(),
            plaintexts: report.plaintexts.len(),
        };
        self.line(format!(
            "  summary group_keys={} before_capture={} plaintexts={}",
            summary.group_keys, summary.before_capture, summary.plaintexts
        ));
        self.stats.recoveries.push(summary);
    }
}

fn usage_str(u: KeyUsage) -> &'static str {
    match u {
        KeyUsage::Raw => "raw",
        KeyUsage::Enc => "enc",
    }
}

fn ceil_log(d: usize, n: usize) -> u32 {
    let mut h = 0;
    let mut reach = 1usize;
    while reach < n {
        reach = reach.saturating_mul(d);
        h += 1;
    }
    h
}

struct Stateful {
    ctrl: ControllerState,
    members: BTreeMap<UserId, MemberState>,
    tape: TrafficTape,
    captures: BTreeMap<String, CapturedState>,
    coalition: Option<CapturedState>,
    removed_at: BTreeMap<String, u64>,
    rng: ChaCha20Rng,
}

impl Stateful {
    fn record(
        &mut self,
        out: &mut Output,
        label: String,
        msg: &RekeyMessage,
        size_before: usize,
    ) -> Result<(), RunError> {
        let gk = self.ctrl.group_key_ref();
        self.tape.record_rekey(msg, gk);
        let tree = self.ctrl.tree();
        let mut prf_member_max = 0;
        for u in tree.members() {
            let m = &self.members[&u];
            prf_member_max = prf_member_max.max(m.prf_evals_last_event());
        }
        let stats = EventStats {
            label: label.clone(),
            items: msg.item_count(),
            bytes: msg.encode()?.len(),
            prf_controller: self.ctrl.prf_evals_last_event(),
            prf_member_max,
            height: tree.height(),
        };
        out.line(format!(
            "t={} {label} kind={} items={} bytes={} prf={} prf_member_max={} height={}",
            msg.time,
            msg.kind.as_str(),
            stats.items,
            stats.bytes,
            stats.prf_controller,
            stats.prf_member_max,
            stats.height
        ));
        for (ui, unit) in msg.units.iter().enumerate() {
            let to: Vec<&str> = unit.recipients.iter().map(UserId::as_str).collect();
            out.line(format!("  unit={ui} to={}", to.join(",")));
            for ct in &unit.items {
                out.line(format!(
                    "  ct unit={ui} key={} usage={} len={}",
                    ct.key_id,
                    usage_str(ct.usage),
                    ct.body.len()
                ));
            }
        }
        out.line(format!(
            "  group t={} key={} derived={} keyfp={}",
            msg.time,
            gk.key,
            if gk.derived { "yes" } else { "no" },
            self.ctrl.current_group_key().fingerprint()
        ));
        if out.dump_keys {
            for l in tree.dump(true).lines() {
                out.line(format!("  tree {l}"));
            }
        }

        let d = self.ctrl.config().degree;
        let n = size_before.max(tree.len());
        let budget = 4 * (u64::from(ceil_log(d, n)) + 1);
        if prf_member_max > budget {
            out.violation(format!(
                "t={}: member PRF evals {prf_member_max} exceed {budget}",
                msg.time
            ));
        }
        if let Err(e) = tree.check_well_formed() {
            out.violation(format!("t={}: {e}", msg.time));
        }
        for u in tree.members() {
            let m = &self.members[&u];
            if !m.accepted(msg.time) {
                out.violation(format!("t={}: {u} did not accept", msg.time));
            }
            if let Err(e) = self.ctrl.verify_member(m) {
                out.violation(format!("t={}: {e}", msg.time));
            }
        }
        for (u, m) in &self.members {
            if m.has_departed() && !m.is_corrupted() && !m.held_keys().is_empty() {
                out.violation(format!("t={}: departed {u} still holds keys", msg.time));
            }
        }
        out.stats.events.push(stats);
        Ok(())
    }

    fn deliver(&mut self, msg: &RekeyMessage, out: &mut Output) {
        for u in self.ctrl.members() {
            let m = self.members.get_mut(&u).expect("every tree member has a state");
            if let Err(e) = m.process(msg) {
                out.violation(format!("t={}: {u}: {e}", msg.time));
            }
        }
    }
}

fn run_stateful(scn: &Scenario, opts: RunOptions, out: &mut Output) -> Result<TrafficTape, RunError> {
    let config = LkhConfig {
        degree: scn.degree,
        kappa: scn.kappa,
        policy: scn.scheme.policy().expect("stateful scheme"),
        setup_delivery: scn.setup_delivery,
        audit: true,
    };
    out.line(format!(
        "scheme {} degree={} kappa={} seed={}",
        scn.scheme,
        scn.degree,
        scn.kappa.bits(),
        opts.seed
    ));
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut events = scn.events.iter();
    let Some(Event::Setup(users)) = events.next() else {
        unreachable!("parser guarantees setup first");
    };
    let (ctrl, states, msg) = setup(users, config, &mut rng)?;
    let mut s = Stateful {
        ctrl,
        members: states.into_iter().map(|m| (m.id().clone(), m)).collect(),
        tape: TrafficTape::new(),
        captures: BTreeMap::new(),
        coalition: None,
        removed_at: BTreeMap::new(),
        rng,
    };
    s.record(out, format!("setup members={}", users.len()), &msg, 0)?;

    for e in events {
        match e {
            Event::Join(u) => {
                let before = s.ctrl.tree().len();
                let k = s.ctrl.enroll(u, &mut s.rng)?;
                let msg = s.ctrl.join(u, &mut s.rng)?;
                s.members
                    .insert(u.clone(), MemberState::new(u.clone(), s.ctrl.policy(), k));
                s.deliver(&msg, out);
                s.record(out, format!("join {u}"), &msg, before)?;
            }
            Event::Leave(u) => {
                let before = s.ctrl.tree().len();
                let msg = s.ctrl.leave(u, &mut s.rng)?;
                s.members.get_mut(u).expect("was a member").depart();
                s.removed_at.insert(u.to_string(), msg.time);
                s.deliver(&msg, out);
                s.record(out, format!("leave {u}"), &msg, before)?;
            }
            Event::Corrupt(u) => {
                let t = s.ctrl.time();
                let m = s
                    .members
                    .get_mut(u)
                    .ok_or_else(|| RunError::UnknownMember(u.to_string()))?;
                let cap = corrupt_member(m, t);
                out.line(format!("corrupt {u} t={t} keys={}", cap.keys.len()));
                out.captured(&cap);
                match &mut s.coalition {
                    Some(c) => c.merge(&cap),
                    None => s.coalition = Some(cap.clone()),
                }
                s.captures.insert(u.to_string(), cap);
            }
            Event::Reveal(u) => {
                let t = s.ctrl.time();
                let m = s.members.get(u).ok_or_else(|| RunError::UnknownMember(u.to_string()))?;
                let k = reveal(m, t)?;
                out.line(format!("reveal {u} t={t} keyfp={}", k.fingerprint()));
            }
            Event::Recover => {
                let cap = s.coalition.as_ref().ok_or(RunError::NoCapture)?;
                let first = s.captures.values().map(|c| c.captured_at).min().unwrap_or(0);
                let report = recover_closure(&s.tape, cap);
                if let Err(e) = report.verify_chains(&s.tape, cap) {
                    out.violation(format!("unsound recovery chain: {e}"));
                }
                let victims: Vec<&str> = s.captures.keys().map(String::as_str).collect();
                let label = format!("recover victims={} captured_at={first}", victims.join(","));
                out.report(label, &report, |t| t < first);
            }
            Event::ForwardRecover(v) => {
                let cap = s.captures.get(v).ok_or_else(|| RunError::NotCorrupted(v.clone()))?;
                let from = *s.removed_at.get(v).ok_or_else(|| RunError::NotRevoked(v.clone()))?;
                if from <= cap.captured_at {
                    return Err(RunError::NotRevoked(v.clone()));
                }
                let report = forward_recover(&s.tape, cap, from);
                let label = format!("forward-recover {v} captured_at={} from={from}", cap.captured_at);
                out.report(label, &report, |t| t < cap.captured_at);
            }
            Event::Setup(_) | Event::Broadcast { .. } | Event::CorruptReceiver(_) => {
                unreachable!("rejected by the parser")
            }
        }
    }
    Ok(s.tape)
}

fn run_stateless(scn: &Scenario, opts: RunOptions, out: &mut Output) -> Result<TrafficTape, RunError> {
    let n = scn.n.expect("parser requires n");
    let mode = scn.scheme.cs_mode().expect("stateless scheme");
    out.line(format!(
        "scheme {} n={n} kappa={} seed={}",
        scn.scheme,
        scn.kappa.bits(),
        opts.seed
    ));
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let (mut sys, mut receivers): (SubsetSystem, Vec<ReceiverSecrets>) = cs_init(n, mode, scn.kappa, &mut rng)?;
    sys.enable_audit();
    let n = sys.n();
    let log_n = u64::from(n.trailing_zeros());
    let mut tape = TrafficTape::new();
    let mut captures: BTreeMap<u32, (CapturedState, u32)> = BTreeMap::new();
    let mut coalition: Option<CapturedState> = None;
    let mut epochs_by_seq: BTreeMap<u64, u32> = BTreeMap::new();

    for e in &scn.events {
        match e {
            Event::Broadcast { revoke, msg, offline } => {
                let m = sys.broadcast(revoke, msg.as_bytes(), &mut rng)?;
                tape.record_broadcast(&m);
                epochs_by_seq.insert(u64::from(m.seq), m.epoch);
                let revoked: Vec<String> = revoke.iter().map(u32::to_string).collect();
                let mut prf_member_max = 0;
                for r in receivers.iter_mut() {
                    if offline.contains(&r.user()) {
                        continue;
                    }
                    let catching_up = r.epoch() < m.epoch;
                    match r.receive(&m) {
                        Ok(got) => {
                            let want = if revoke.contains(&r.user()) {
                                Decrypted::Revoked
                            } else {
                                Decrypted::Plaintext(msg.as_bytes().to_vec())
                            };
                            if got != want {
                                out.violation(format!("seq={}: receiver {} got {got:?}", m.seq, r.user()));
                            }
                        }
                        Err(err) => out.violation(format!("seq={}: receiver {}: {err}", m.seq, r.user())),
                    }
                    prf_member_max = prf_member_max.max(r.prf_evals_last());
                    if !catching_up && r.prf_evals_last() > 2 * (log_n + 1) {
                        out.violation(format!(
                            "seq={}: receiver {} PRF evals {}",
                            m.seq,
                            r.user(),
                            r.prf_evals_last()
                        ));
                    }
                    if mode == CsMode::Strong && r.epoch() != sys.epoch() {
                        out.violation(format!("seq={}: receiver {} epoch out of lockstep", m.seq, r.user()));
                    }
                }
                let expected_next = if m.revocation_flag { 2 * u64::from(n) - 1 } else { 0 };
                if sys.next_evals_last_broadcast() != expected_next {
                    out.violation(format!(
                        "seq={}: center made {} Next evaluations, expected {expected_next}",
                        m.seq,
                        sys.next_evals_last_broadcast()
                    ));
                }
                let stats = EventStats {
                    label: format!("broadcast revoke={}", revoked.join(",")),
                    items: m.item_count(),
                    bytes: m.encode()?.len(),
                    prf_controller: sys.next_evals_last_broadcast(),
                    prf_member_max,
                    height: log_n as usize,
                };
                let offline: Vec<String> = offline.iter().map(u32::to_string).collect();
                out.line(format!(
                    "t={} {} offline={} epoch={} flag={} items={} bytes={} prf={} prf_member_max={}",
                    m.seq,
                    stats.label,
                    offline.join(","),
                    m.epoch,
                    u8::from(m.revocation_flag),
                    stats.items,
                    stats.bytes,
                    stats.prf_controller,
                    stats.prf_member_max
                ));
                for (i, ct) in m.indices.iter().zip(&m.header_cts) {
                    out.line(format!(
                        "  ct subset={i} key={} usage={} len={}",
                        ct.key_id,
                        usage_str(ct.usage),
                        ct.body.len()
                    ));
                }
                out.line(format!("  ct body key={} len={}", m.body.key_id, m.body.body.len()));
                let session = &sys.session_log().expect("audit enabled")[m.seq as usize - 1];
                let mut l = format!("  session t={} keyfp={}", m.seq, session.fingerprint());
                if out.dump_keys {
                    let _ = write!(l, " key={}", session.to_hex());
                }
                out.line(l);
                out.stats.events.push(stats);
            }
            Event::CorruptReceiver(u) => {
                let r = receivers
                    .iter()
                    .find(|r| r.user() == *u)
                    .ok_or_else(|| RunError::UnknownMember(u.to_string()))?;
                let cap = corrupt_receiver(r, u64::from(sys.seq()));
                out.line(format!(
                    "corrupt-receiver {u} t={} epoch={} keys={}",
                    sys.seq(),
                    r.epoch(),
                    cap.keys.len()
                ));
                out.captured(&cap);
                match &mut coalition {
                    Some(c) => c.merge(&cap),
                    None => coalition = Some(cap.clone()),
                }
                captures.insert(*u, (cap, r.epoch()));
            }
            Event::Recover => {
                let cap = coalition.as_ref().ok_or(RunError::NoCapture)?;
                let epoch = captures.values().map(|(_, e)| *e).min().unwrap_or(0);
                let report = stateless_recover(&tape, cap);
                if let Err(e) = report.verify_chains(&tape, cap) {
                    out.violation(format!("unsound recovery chain: {e}"));
                }
                let victims: Vec<String> = captures.keys().map(u32::to_string).collect();
                let label = format!("recover victims={} capture_epoch={epoch}", victims.join(","));
                out.report(label, &report, |seq| {
                    epochs_by_seq.get(&seq).is_some_and(|e| *e < epoch)
                });
            }
            Event::ForwardRecover(v) => {
                let u: u32 = v.parse().map_err(|_| RunError::UnknownMember(v.clone()))?;
                let (cap, epoch) = captures.get(&u).ok_or_else(|| RunError::NotCorrupted(v.clone()))?;
                let from = cap.captured_at + 1;
                let report = forward_recover(&tape, cap, from);
                let label = format!("forward-recover {u} captured_at={} from={from}", cap.captured_at);
                out.report(label, &report, |seq| epochs_by_seq.get(&seq).is_some_and(|e| e < epoch));
            }
            _ => unreachable!("rejected by the parser"),
        }
    }
    Ok(tape)
}
