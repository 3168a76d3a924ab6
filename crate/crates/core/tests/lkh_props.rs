use std::collections::BTreeMap;

use gkm_core::{setup, LkhConfig, MemberState, RekeyMessage, RekeyPolicy, UserId};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn policy(i: u8) -> RekeyPolicy {
    [RekeyPolicy::Baseline, RekeyPolicy::Strong, RekeyPolicy::StrongOpt][usize::from(i % 3)]
}

fn height_bound(d: usize, n: usize) -> u64 {
    let mut h = 0;
    let mut reach = 1;
    while reach < n {
        reach *= d;
        h += 1;
    }
    4 * (h + 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_membership_stays_consistent(
        seed in any::<u64>(),
        pol in 0u8..3,
        degree in 2usize..5,
        initial in 1usize..12,
        ops in prop::collection::vec(any::<(bool, u16)>(), 1..40),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let users: Vec<UserId> = (0..initial).map(|i| UserId::new(format!("m{i}"))).collect();
        let config = LkhConfig { degree, ..LkhConfig::with_policy(policy(pol)) };
        let (mut ctrl, states, _) = setup(&users, config, &mut rng).unwrap();
        let mut members: BTreeMap<UserId, MemberState> = states.into_iter().map(|m| (m.id().clone(), m)).collect();
        let mut next = initial;
        for (join, pick) in ops {
            let before = ctrl.tree().len();
            let msg = if join || before < 2 {
                let u = UserId::new(format!("m{next}"));
                next += 1;
                let k = ctrl.enroll(&u, &mut rng).unwrap();
                let msg = ctrl.join(&u, &mut rng).unwrap();
                members.insert(u.clone(), MemberState::new(u, ctrl.policy(), k));
                msg
            } else {
                let current = ctrl.members();
                let u = &current[usize::from(pick) % current.len()];
                let msg = ctrl.leave(u, &mut rng).unwrap();
                let m = members.get_mut(u).unwrap();
                m.depart();
                prop_assert!(m.held_keys().is_empty());
                msg
            };
            let decoded = RekeyMessage::decode(&msg.encode().unwrap()).unwrap();
            prop_assert_eq!(decoded.encode().unwrap(), msg.encode().unwrap());

            ctrl.tree().check_well_formed().unwrap();
            let budget = height_bound(degree, before.max(ctrl.tree().len()));
            for u in ctrl.members() {
                let m = members.get_mut(&u).unwrap();
                m.process(&decoded).unwrap();
                prop_assert!(m.accepted(msg.time));
                prop_assert!(m.current_group_key().unwrap().same_material(ctrl.current_group_key()));
                prop_assert!(m.prf_evals_last_event() <= budget);
                prop_assert_eq!(ctrl.verify_member(m), Ok(()));
            }
        }
    }
}
