//! Group key management: logical key hierarchies, complete-subtree broadcast
//! encryption, PRF key evolution, and a passive-adversary harness.

pub mod adversary;
pub mod bundle;
pub mod crypto;
pub mod key_tree;
pub mod lkh;
pub mod stateless;
pub mod wire;

pub use adversary::{
    corrupt_member, corrupt_receiver, forward_recover, recover_closure, reveal, stateless_recover, CapturedState,
    RecoveryReport, TrafficTape,
};
pub use crypto::{KeyLength, KeyUsage, PrfLabel, SecretKey};
pub use key_tree::{KeyTree, NodeId, UserId, VersionedKeyId};
pub use lkh::{
    setup, ControllerState, GroupKeyRef, LkhConfig, LkhError, MemberState, MessageKind, RekeyMessage, RekeyPolicy,
    SetupDelivery,
};
pub use stateless::{cs_init, steiner_cover, BroadcastMessage, CsMode, Decrypted, ReceiverSecrets, SubsetSystem};
