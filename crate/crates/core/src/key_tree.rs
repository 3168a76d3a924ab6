//! Rooted key tree: k-nodes hold keys, each member hangs off the k-node of
//! its individual key, and a member's keyset is the path from that node to
//! the root.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{gen_key, CryptoError, KeyLength, PrfLabel, PrfMeter, SecretKey};

/// Node identifier, allocated from 1 upward and never reused within a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Names one version of the key stored at a node. `generation` counts fresh
/// installs at the node; `epoch` counts `Next` evolutions since the last one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VersionedKeyId {
    pub node: NodeId,
    pub generation: u32,
    pub epoch: u32,
}

impl VersionedKeyId {
    pub fn new(node: NodeId, generation: u32, epoch: u32) -> Self {
        Self {
            node,
            generation,
            epoch,
        }
    }

    pub fn next(self) -> Self {
        Self {
            epoch: self.epoch + 1,
            ..self
        }
    }

    /// Same node and generation, so `other` is reachable by evolving `self`
    /// (or vice versa).
    pub fn same_lineage(&self, other: &VersionedKeyId) -> bool {
        self.node == other.node && self.generation == other.generation
    }
}

impl fmt::Display for VersionedKeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}.g{}.e{}", self.node.0, self.generation, self.epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(String);

impl UserId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node} already has {degree} children")]
    DegreeExceeded { node: NodeId, degree: usize },
    #[error("duplicate user {0}")]
    DuplicateUser(UserId),
    #[error("a key tree needs at least one member")]
    EmptyMembership,
    #[error("{0} is the last member; the tree cannot become empty")]
    LastMember(UserId),
    #[error("tree degree must be at least 2, got {0}")]
    BadDegree(usize),
    #[error("node {0} is a member leaf, not an inner node")]
    NotInner(NodeId),
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone)]
struct Node {
    key: SecretKey,
    key_id: VersionedKeyId,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    user: Option<UserId>,
}

/// Where a joining member is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JoiningPoint {
    /// An inner node with spare capacity.
    Existing(NodeId),
    /// Every inner node is full: a new inner node is inserted above this
    /// member leaf and the joiner becomes its second child.
    SplitLeaf(NodeId),
}

/// Outcome of removing a member leaf. The removed keys are handed back
/// un-erased so the caller can retire them.
#[derive(Debug)]
pub struct Detached {
    pub removed: NodeId,
    pub removed_key: (VersionedKeyId, SecretKey),
    pub leaving_point: NodeId,
    /// A former parent left with a single child and spliced out.
    pub spliced: Option<(VersionedKeyId, SecretKey)>,
}

#[derive(Debug, Clone)]
pub struct KeyTree {
    nodes: BTreeMap<NodeId, Node>,
    leaves: BTreeMap<UserId, NodeId>,
    degree: usize,
    root: NodeId,
    next_id: u32,
}

impl KeyTree {
    /// Builds a balanced tree over `members` (each with its individual key),
    /// grouping siblings left to right with group sizes differing by at most
    /// one. A single member gets a root above its leaf.
    pub fn build<R: RngCore + CryptoRng + ?Sized>(
        members: Vec<(UserId, SecretKey)>,
        degree: usize,
        kappa: KeyLength,
        rng: &mut R,
    ) -> Result<Self, TreeError> {
        if degree < 2 {
            return Err(TreeError::BadDegree(degree));
        }
        if members.is_empty() {
            return Err(TreeError::EmptyMembership);
        }
        let mut tree = KeyTree {
            nodes: BTreeMap::new(),
            leaves: BTreeMap::new(),
            degree,
            root: NodeId(0),
            next_id: 1,
        };
        let mut level = Vec::with_capacity(members.len());
        for (user, key) in members {
            if tree.leaves.contains_key(&user) {
                return Err(TreeError::DuplicateUser(user));
            }
            let id = tree.insert_node(key, None, Some(user.clone()));
            tree.leaves.insert(user, id);
            level.push(id);
        }
        loop {
            let groups = level.len().div_ceil(degree);
            let base = level.len() / groups;
            let extra = level.len() % groups;
            let mut next = Vec::with_capacity(groups);
            let mut it = level.into_iter();
            for g in 0..groups {
                let size = base + usize::from(g < extra);
                let children: Vec<NodeId> = it.by_ref().take(size).collect();
                if children.len() == 1 && groups > 1 {
                    next.push(children[0]);
                    continue;
                }
                let parent = tree.insert_node(gen_key(rng, kappa), None, None);
                for c in &children {
                    tree.node_mut(*c).parent = Some(parent);
                }
                tree.node_mut(parent).children = children;
                next.push(parent);
            }
            level = next;
            if level.len() == 1 {
                break;
            }
        }
        tree.root = level[0];
        Ok(tree)
    }

    fn insert_node(&mut self, key: SecretKey, parent: Option<NodeId>, user: Option<UserId>) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(
            id,
            Node {
                key,
                key_id: VersionedKeyId::new(id, 0, 0),
                parent,
                children: Vec::new(),
                user,
            },
        );
        id
    }

    fn node(&self, id: NodeId) -> Result<&Node, TreeError> {
        self.nodes.get(&id).ok_or(TreeError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes.get_mut(&id).expect("node id validated by caller")
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn contains_user(&self, u: &UserId) -> bool {
        self.leaves.contains_key(u)
    }

    pub fn contains_node(&self, n: NodeId) -> bool {
        self.nodes.contains_key(&n)
    }

    pub fn leaf_of(&self, u: &UserId) -> Result<NodeId, TreeError> {
        self.leaves
            .get(u)
            .copied()
            .ok_or_else(|| TreeError::UnknownUser(u.clone()))
    }

    pub fn user_at(&self, n: NodeId) -> Result<Option<&UserId>, TreeError> {
        Ok(self.node(n)?.user.as_ref())
    }

    pub fn parent(&self, n: NodeId) -> Result<Option<NodeId>, TreeError> {
        Ok(self.node(n)?.parent)
    }

    pub fn children(&self, n: NodeId) -> Result<&[NodeId], TreeError> {
        Ok(&self.node(n)?.children)
    }

    pub fn key(&self, n: NodeId) -> Result<&SecretKey, TreeError> {
        Ok(&self.node(n)?.key)
    }

    pub fn key_id(&self, n: NodeId) -> Result<VersionedKeyId, TreeError> {
        Ok(self.node(n)?.key_id)
    }

    /// Node-inclusive path from `n` up to the root.
    pub fn path_to_root(&self, n: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut path = vec![n];
        let mut cur = self.node(n)?;
        while let Some(p) = cur.parent {
            if path.len() > self.nodes.len() {
                return Err(TreeError::Malformed(format!("cycle through node {p}")));
            }
            path.push(p);
            cur = self.node(p)?;
        }
        Ok(path)
    }

    /// Key ids held by `u`, from its individual key up to the group key.
    pub fn keyset(&self, u: &UserId) -> Result<Vec<VersionedKeyId>, TreeError> {
        let leaf = self.leaf_of(u)?;
        self.path_to_root(leaf)?.into_iter().map(|n| self.key_id(n)).collect()
    }

    /// Members below `n`, in left-to-right order.
    pub fn userset(&self, n: NodeId) -> Result<Vec<UserId>, TreeError> {
        let mut out = Vec::new();
        let mut stack = vec![n];
        self.node(n)?;
        while let Some(id) = stack.pop() {
            let node = self.node(id)?;
            if let Some(u) = &node.user {
                out.push(u.clone());
            }
            stack.extend(node.children.iter().rev());
        }
        Ok(out)
    }

    /// All members, left to right.
    pub fn members(&self) -> Vec<UserId> {
        self.userset(self.root).unwrap_or_default()
    }

    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let Some(node) = self.nodes.get(&id) {
                stack.extend(node.children.iter().rev());
            }
        }
        out
    }

    /// Longest leaf-to-root path, in edges.
    pub fn height(&self) -> usize {
        self.leaves
            .values()
            .filter_map(|&l| self.path_to_root(l).ok())
            .map(|p| p.len() - 1)
            .max()
            .unwrap_or(0)
    }

    /// Shallowest inner node with spare capacity (leftmost on ties); if every
    /// inner node is full, the shallowest leftmost member leaf to split.
    pub fn find_joining_point(&self) -> JoiningPoint {
        let mut queue = VecDeque::from([self.root]);
        let mut first_leaf = None;
        while let Some(id) = queue.pop_front() {
            let node = &self.nodes[&id];
            if node.user.is_some() {
                first_leaf.get_or_insert(id);
                continue;
            }
            if node.children.len() < self.degree {
                return JoiningPoint::Existing(id);
            }
            queue.extend(node.children.iter().copied());
        }
        JoiningPoint::SplitLeaf(first_leaf.expect("non-empty tree has a member leaf"))
    }

    /// Inserts a new inner node above `leaf`, in the leaf's position.
    pub fn split_leaf(&mut self, leaf: NodeId, key: SecretKey) -> Result<NodeId, TreeError> {
        let node = self.node(leaf)?;
        if node.user.is_none() {
            return Err(TreeError::Malformed(format!("node {leaf} is not a member leaf")));
        }
        let parent = node
            .parent
            .ok_or_else(|| TreeError::Malformed("member leaf without parent".into()))?;
        let mid = self.insert_node(key, Some(parent), None);
        self.node_mut(mid).children = vec![leaf];
        self.node_mut(leaf).parent = Some(mid);
        let siblings = &mut self.node_mut(parent).children;
        let pos = siblings.iter().position(|&c| c == leaf).expect("child link");
        siblings[pos] = mid;
        Ok(mid)
    }

    /// Attaches a new member leaf holding `individual_key` below `at`.
    pub fn attach(&mut self, at: NodeId, u: UserId, individual_key: SecretKey) -> Result<NodeId, TreeError> {
        if self.leaves.contains_key(&u) {
            return Err(TreeError::DuplicateUser(u));
        }
        let node = self.node(at)?;
        if node.user.is_some() {
            return Err(TreeError::NotInner(at));
        }
        if node.children.len() >= self.degree {
            return Err(TreeError::DegreeExceeded {
                node: at,
                degree: self.degree,
            });
        }
        let leaf = self.insert_node(individual_key, Some(at), Some(u.clone()));
        self.node_mut(at).children.push(leaf);
        self.leaves.insert(u, leaf);
        Ok(leaf)
    }

    /// Removes `u`'s leaf. A parent left with one child is spliced out and
    /// that child takes its place, except that a root keeps a lone member leaf.
    pub fn detach(&mut self, u: &UserId) -> Result<Detached, TreeError> {
        let leaf = self.leaf_of(u)?;
        if self.leaves.len() == 1 {
            return Err(TreeError::LastMember(u.clone()));
        }
        let parent = self
            .node(leaf)?
            .parent
            .ok_or_else(|| TreeError::Malformed("member leaf without parent".into()))?;
        self.leaves.remove(u);
        let removed = self.nodes.remove(&leaf).expect("leaf exists");
        self.node_mut(parent).children.retain(|&c| c != leaf);

        let remaining = self.node(parent)?.children.clone();
        let keep_parent = match remaining.as_slice() {
            [] => return Err(TreeError::Malformed(format!("node {parent} left childless"))),
            [only] => parent == self.root && self.node(*only)?.user.is_some(),
            _ => true,
        };
        let (leaving_point, spliced) = if keep_parent {
            (parent, None)
        } else {
            let child = remaining[0];
            let gone = self.nodes.remove(&parent).expect("parent exists");
            self.node_mut(child).parent = gone.parent;
            let lp = match gone.parent {
                Some(g) => {
                    let siblings = &mut self.node_mut(g).children;
                    let pos = siblings.iter().position(|&c| c == parent).expect("child link");
                    siblings[pos] = child;
                    g
                }
                None => {
                    self.root = child;
                    child
                }
            };
            (lp, Some((gone.key_id, gone.key)))
        };
        Ok(Detached {
            removed: leaf,
            removed_key: (removed.key_id, removed.key),
            leaving_point,
            spliced,
        })
    }

    /// Installs a fresh key at `n`: generation +1, epoch reset. Returns the
    /// previous key, not yet erased.
    pub fn replace_key(&mut self, n: NodeId, key: SecretKey) -> Result<(VersionedKeyId, SecretKey), TreeError> {
        self.node(n)?;
        let node = self.node_mut(n);
        let old_id = node.key_id;
        node.key_id = VersionedKeyId::new(n, old_id.generation + 1, 0);
        Ok((old_id, std::mem::replace(&mut node.key, key)))
    }

    /// Replaces the key at `n` with `f_k(1)`. Returns the previous version.
    pub fn evolve_key(&mut self, n: NodeId, meter: &mut PrfMeter) -> Result<(VersionedKeyId, SecretKey), TreeError> {
        let next = meter.eval(&self.node(n)?.key, PrfLabel::Next)?;
        let node = self.node_mut(n);
        let old_id = node.key_id;
        node.key_id = old_id.next();
        Ok((old_id, std::mem::replace(&mut node.key, next)))
    }

    /// Checks structural invariants; used by tests and the simulator.
    pub fn check_well_formed(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::Malformed(m));
        let roots: Vec<_> = self.nodes.iter().filter(|(_, n)| n.parent.is_none()).collect();
        if roots.len() != 1 || *roots[0].0 != self.root {
            return bad(format!("expected single root {}, found {}", self.root, roots.len()));
        }
        let order = self.preorder();
        if order.len() != self.nodes.len() || order.iter().collect::<BTreeSet<_>>().len() != order.len() {
            return bad("nodes unreachable from the root or shared".into());
        }
        let mut users = 0;
        for (&id, node) in &self.nodes {
            if node.key_id.node != id {
                return bad(format!("node {id} carries key id of {}", node.key_id.node));
            }
            for &c in &node.children {
                if self.node(c)?.parent != Some(id) {
                    return bad(format!("child {c} does not point back to {id}"));
                }
            }
            match &node.user {
                Some(u) => {
                    users += 1;
                    if !node.children.is_empty() || node.parent.is_none() {
                        return bad(format!("member leaf {id} must have a parent and no children"));
                    }
                    if self.leaves.get(u) != Some(&id) {
                        return bad(format!("leaf index disagrees for {u}"));
                    }
                }
                None => {
                    if node.children.is_empty() || node.children.len() > self.degree {
                        return bad(format!("inner node {id} has {} children", node.children.len()));
                    }
                }
            }
        }
        if users != self.leaves.len() {
            return bad("member index and leaves differ".into());
        }
        Ok(())
    }

    /// One line per node in preorder:
    /// `node=<id> epoch=<e> parent=<id> users=<...> keyfp=<8-hex>`.
    pub fn dump(&self, reveal_keys: bool) -> String {
        let mut out = String::new();
        for id in self.preorder() {
            let node = &self.nodes[&id];
            let parent = node.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
            let users = self.userset(id).unwrap_or_default();
            let users: Vec<&str> = users.iter().map(UserId::as_str).collect();
            out.push_str(&format!(
                "node={} epoch={} parent={} users={} keyfp={}",
                id,
                node.key_id.epoch,
                parent,
                users.join(","),
                node.key.fingerprint()
            ));
            if reveal_keys {
                out.push_str(&format!(" key={}", node.key.to_hex()));
            }
            out.push('\n');
        }
        out
    }
}
