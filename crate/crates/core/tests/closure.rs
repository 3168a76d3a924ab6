use gkm_core::adversary::Step;
use gkm_core::lkh::split_node;
use gkm_core::{
    corrupt_member, forward_recover, recover_closure, setup, LkhConfig, MemberState, RekeyPolicy, TrafficTape, UserId,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn u(s: &str) -> UserId {
    UserId::new(s)
}

#[test]
fn split_member_derives_the_new_node_key() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let config = LkhConfig {
        degree: 2,
        ..LkhConfig::with_policy(RekeyPolicy::StrongOpt)
    };
    let (mut ctrl, states, msg) = setup(&[u("a"), u("b"), u("c"), u("d")], config, &mut rng).unwrap();
    let mut tape = TrafficTape::new();
    tape.record_rekey(&msg, ctrl.group_key_ref());
    let mut members: Vec<MemberState> = states;
    let before_join = members.clone();

    let k = ctrl.enroll(&u("e"), &mut rng).unwrap();
    let join = ctrl.join(&u("e"), &mut rng).unwrap();
    let (split, mid) = split_node(&join).expect("a full binary tree must split");
    assert_eq!(join.item_count(), 1);
    members.push(MemberState::new(u("e"), ctrl.policy(), k));
    for m in &mut members {
        m.process(&join).unwrap();
    }
    tape.record_rekey(&join, ctrl.group_key_ref());

    // Remove the new node's sibling so the next parent key goes out under it.
    let tree = ctrl.tree();
    let parent = tree.parent(mid).unwrap().unwrap();
    let sibling = *tree.children(parent).unwrap().iter().find(|&&n| n != mid).unwrap();
    let gone = tree.user_at(sibling).unwrap().expect("sibling is a leaf").clone();
    let leave = ctrl.leave(&gone, &mut rng).unwrap();
    for m in &mut members {
        if m.id() == &gone {
            m.depart();
        } else {
            m.process(&leave).unwrap();
        }
    }
    tape.record_rekey(&leave, ctrl.group_key_ref());

    // Captured before the join, the split member never saw the new node's
    // key on the tape; the closure has to derive it to open the leave.
    let victim = before_join.iter().position(|m| m.id() == split).unwrap();
    let cap = corrupt_member(&mut before_join[victim].clone(), 0);
    let report = recover_closure(&tape, &cap);
    report.verify_chains(&tape, &cap).unwrap();
    assert_eq!(report.group_keys.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
    let derived = report
        .known
        .iter()
        .find(|(_, (_, s))| matches!(s, Step::EncOf { .. }))
        .map(|(id, _)| id.node);
    assert_eq!(derived, Some(mid));
    for (id, (_, step)) in &report.known {
        if let Step::Next { from } = step {
            assert!(from.same_lineage(id) && from.epoch < id.epoch);
        }
    }
}

#[test]
fn closure_replays_and_stays_forward() {
    for policy in [RekeyPolicy::Baseline, RekeyPolicy::Strong, RekeyPolicy::StrongOpt] {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let users: Vec<UserId> = (1..=6).map(|i| u(&format!("u{i}"))).collect();
        let (mut ctrl, mut ms, msg) = setup(&users, LkhConfig::with_policy(policy), &mut rng).unwrap();
        let mut tape = TrafficTape::new();
        tape.record_rekey(&msg, ctrl.group_key_ref());
        let cap = corrupt_member(&mut ms[2].clone(), 0);
        for gone in ["u1", "u4"] {
            let msg = ctrl.leave(&u(gone), &mut rng).unwrap();
            for m in ms.iter_mut().filter(|m| ctrl.is_member(m.id())) {
                m.process(&msg).unwrap();
            }
            tape.record_rekey(&msg, ctrl.group_key_ref());
        }
        let report = recover_closure(&tape, &cap);
        report.verify_chains(&tape, &cap).unwrap();
        assert_eq!(
            report.group_keys.keys().copied().collect::<Vec<_>>(),
            vec![0, 1, 2],
            "{policy:?}"
        );
        let fwd = forward_recover(&tape, &cap, 1);
        assert!(fwd
            .group_keys
            .keys()
            .all(|&t| t == 0 || report.group_keys.contains_key(&t)));
    }
}

#[test]
fn strong_capture_holds_only_evolved_or_fresh_keys() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let users: Vec<UserId> = (1..=8).map(|i| u(&format!("u{i}"))).collect();
    let (mut ctrl, mut ms, _) = setup(&users, LkhConfig::with_policy(RekeyPolicy::Strong), &mut rng).unwrap();
    let k = ctrl.enroll(&u("u9"), &mut rng).unwrap();
    let msg = ctrl.join(&u("u9"), &mut rng).unwrap();
    ms.push(MemberState::new(u("u9"), ctrl.policy(), k));
    for m in &mut ms {
        m.process(&msg).unwrap();
    }
    for gone in ["u8", "u6"] {
        let msg = ctrl.leave(&u(gone), &mut rng).unwrap();
        for m in ms.iter_mut().filter(|m| ctrl.is_member(m.id())) {
            m.process(&msg).unwrap();
        }
    }
    let victim = ms.iter().position(|m| m.id().as_str() == "u7").unwrap();
    let cap = corrupt_member(&mut ms[victim].clone(), ctrl.time());
    let root = ctrl.tree().root();
    let ledger = ctrl.ledger().unwrap();
    for (id, key) in &cap.keys {
        for (old, bytes) in &ledger.retired {
            assert!(!bytes.same_material(key), "{id} reuses retired {old}");
        }
        if id.node != root {
            assert!(id.epoch >= 1, "{id} was never evolved");
        }
    }
}
