//! The perfect binary key tree.
//!
//! Level-order indexing: root = 1, children of `i` are `2i` and `2i+1`, so
//! `sibling(i) = i ^ 1` and `parent(i) = i / 2`. With `L = 2^h` leaf slots the
//! leaves occupy indices `L..2L-1`. The array always holds exactly
//! `2^(h+1) - 1` nodes; JOIN grows the tree by expansion (the old tree becomes
//! the left subtree of a new root) and emptying the root's right subtree
//! shrinks it back by truncation.

use serde::Serialize;
use thiserror::Error;

use crate::crypto::CryptoProvider;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("node {0} is not a leaf")]
    NotALeaf(u32),
    #[error("tree is not full")]
    NotFull,
    #[error("bad node index {0}")]
    BadIndex(u32),
    #[error("leaves must be distinct")]
    SameLeaf,
    #[error("secret must not be empty")]
    EmptySecret,
}

/// Level-order node index, 1-based.
pub type NodeIndex = u32;

/// Leaf occupancy. Blank slots persist after LEAVE until reused or truncated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Occupancy {
    Blank,
    Occupied { identity: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TreeNode {
    pub public_key: Option<Vec<u8>>,
    pub private_key: Option<Vec<u8>>,
    /// `Some` on leaves only.
    pub occupancy: Option<Occupancy>,
    /// A public key no member holds the private half of: the root's
    /// published key, or a demoted root after expansion. Counts as stored
    /// key material but is never a ciphertext recipient.
    pub ballast: bool,
}

impl TreeNode {
    fn blank_leaf() -> TreeNode {
        TreeNode {
            occupancy: Some(Occupancy::Blank),
            ..TreeNode::default()
        }
    }

    pub fn is_occupied(&self) -> bool {
        matches!(self.occupancy, Some(Occupancy::Occupied { .. }))
    }

    pub fn identity(&self) -> Option<&str> {
        match &self.occupancy {
            Some(Occupancy::Occupied { identity }) => Some(identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatchetTree {
    height: u32,
    /// Slot 0 unused; nodes live at 1..=2^(h+1)-1.
    nodes: Vec<TreeNode>,
}

/// Hash chain above a fresh leaf secret: `s_0` is the leaf secret and
/// `s_i = hash(s_{i-1})`; the last entry is the root secret.
#[derive(Debug, Clone)]
pub struct PathSecretChain {
    pub secrets: Vec<Vec<u8>>,
}

impl RatchetTree {
    /// Singleton tree (h = 0) whose only node is an occupied leaf.
    pub fn singleton(identity: &str) -> RatchetTree {
        let mut tree = RatchetTree {
            height: 0,
            nodes: vec![TreeNode::default(), TreeNode::blank_leaf()],
        };
        tree.nodes[1].occupancy = Some(Occupancy::Occupied {
            identity: identity.to_string(),
        });
        tree
    }

    /// Blank perfect tree of the given height (used when installing a
    /// received tree image).
    pub fn blank(height: u32) -> RatchetTree {
        let size = (1usize << (height + 1)) - 1;
        let mut nodes = vec![TreeNode::default(); size + 1];
        let leaf_start = 1usize << height;
        for node in nodes.iter_mut().take(2 * leaf_start).skip(leaf_start) {
            *node = TreeNode::blank_leaf();
        }
        RatchetTree { height, nodes }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Number of leaf slots, 2^h.
    pub fn leaf_slots(&self) -> u32 {
        1 << self.height
    }

    pub fn node_count(&self) -> u32 {
        (1 << (self.height + 1)) - 1
    }

    pub fn first_leaf(&self) -> NodeIndex {
        self.leaf_slots()
    }

    pub fn last_leaf(&self) -> NodeIndex {
        2 * self.leaf_slots() - 1
    }

    pub fn is_valid(&self, index: NodeIndex) -> bool {
        index >= 1 && index <= self.node_count()
    }

    pub fn is_leaf(&self, index: NodeIndex) -> bool {
        index >= self.first_leaf() && index <= self.last_leaf()
    }

    pub fn node(&self, index: NodeIndex) -> Result<&TreeNode, TreeError> {
        if !self.is_valid(index) {
            return Err(TreeError::BadIndex(index));
        }
        Ok(&self.nodes[index as usize])
    }

    pub fn node_mut(&mut self, index: NodeIndex) -> Result<&mut TreeNode, TreeError> {
        if !self.is_valid(index) {
            return Err(TreeError::BadIndex(index));
        }
        Ok(&mut self.nodes[index as usize])
    }

    pub fn parent(index: NodeIndex) -> NodeIndex {
        index / 2
    }

    pub fn sibling(index: NodeIndex) -> Option<NodeIndex> {
        if index <= 1 { None } else { Some(index ^ 1) }
    }

    /// Leaf up to root, inclusive; length h+1.
    pub fn path(&self, leaf: NodeIndex) -> Result<Vec<NodeIndex>, TreeError> {
        if !self.is_leaf(leaf) {
            return Err(TreeError::NotALeaf(leaf));
        }
        let mut out = Vec::with_capacity(self.height as usize + 1);
        let mut i = leaf;
        while i >= 1 {
            out.push(i);
            if i == 1 {
                break;
            }
            i = Self::parent(i);
        }
        Ok(out)
    }

    /// Siblings of each path node except the root, deepest first; length h.
    pub fn copath(&self, leaf: NodeIndex) -> Result<Vec<NodeIndex>, TreeError> {
        let path = self.path(leaf)?;
        Ok(path
            .iter()
            .take(path.len().saturating_sub(1))
            .map(|&i| i ^ 1)
            .collect())
    }

    /// Smallest blank leaf index, or `None` when every slot is occupied.
    pub fn leftmost_unused_leaf(&self) -> Option<NodeIndex> {
        (self.first_leaf()..=self.last_leaf())
            .find(|&i| matches!(self.nodes[i as usize].occupancy, Some(Occupancy::Blank)))
    }

    pub fn is_full(&self) -> bool {
        self.leftmost_unused_leaf().is_none()
    }

    pub fn occupied_leaves(&self) -> Vec<NodeIndex> {
        (self.first_leaf()..=self.last_leaf())
            .filter(|&i| self.nodes[i as usize].is_occupied())
            .collect()
    }

    pub fn leaf_of_identity(&self, identity: &str) -> Option<NodeIndex> {
        self.occupied_leaves()
            .into_iter()
            .find(|&i| self.nodes[i as usize].identity() == Some(identity))
    }

    /// Leaf range covered by the subtree rooted at `index`.
    pub fn subtree_leaves(&self, index: NodeIndex) -> Result<(NodeIndex, NodeIndex), TreeError> {
        if !self.is_valid(index) {
            return Err(TreeError::BadIndex(index));
        }
        let mut lo = index;
        let mut hi = index;
        while lo < self.first_leaf() {
            lo *= 2;
            hi = hi * 2 + 1;
        }
        Ok((lo, hi))
    }

    fn subtree_has_occupied_other_than(
        &self,
        index: NodeIndex,
        excluded: &[NodeIndex],
    ) -> bool {
        let (lo, hi) = match self.subtree_leaves(index) {
            Ok(r) => r,
            Err(_) => return false,
        };
        (lo..=hi).any(|i| self.nodes[i as usize].is_occupied() && !excluded.contains(&i))
    }

    /// Is `ancestor` an ancestor of `leaf` or the leaf itself?
    pub fn is_ancestor_or_self(&self, ancestor: NodeIndex, leaf: NodeIndex) -> bool {
        let mut i = leaf;
        loop {
            if i == ancestor {
                return true;
            }
            if i <= 1 {
                return false;
            }
            i = Self::parent(i);
        }
    }

    /// The co-path node of the updater's path whose subtree contains
    /// `self_leaf`: the unique broadcast-ciphertext recipient for that member.
    pub fn decrypt_point(
        &self,
        self_leaf: NodeIndex,
        updater_leaf: NodeIndex,
    ) -> Result<NodeIndex, TreeError> {
        if !self.is_leaf(self_leaf) {
            return Err(TreeError::NotALeaf(self_leaf));
        }
        if self_leaf == updater_leaf {
            return Err(TreeError::SameLeaf);
        }
        for c in self.copath(updater_leaf)? {
            if self.is_ancestor_or_self(c, self_leaf) {
                return Ok(c);
            }
        }
        // unreachable for distinct leaves of the same tree
        Err(TreeError::BadIndex(self_leaf))
    }

    /// Recipient set for a secret addressed to the subtree under `target`:
    /// the minimal set of key-bearing nodes covering every occupied leaf under
    /// `target` except `excluded` ones. Empty when there is no audience.
    /// Descends through key-less nodes (a just-demoted root after expansion).
    pub fn resolve_recipients(&self, target: NodeIndex, excluded: &[NodeIndex]) -> Vec<NodeIndex> {
        if !self.subtree_has_occupied_other_than(target, excluded) {
            return Vec::new();
        }
        let node = &self.nodes[target as usize];
        if node.public_key.is_some() && !node.ballast {
            return vec![target];
        }
        if self.is_leaf(target) {
            return Vec::new();
        }
        let mut out = self.resolve_recipients(target * 2, excluded);
        out.extend(self.resolve_recipients(target * 2 + 1, excluded));
        out
    }

    /// Grow a full tree: the old tree becomes the left subtree of a new root.
    /// Old node `i` maps to `i + 2^floor(log2 i)`; depth is preserved and
    /// leaf order is kept left-to-right. Returns the index map applied.
    pub fn expand(&mut self) -> Result<ExpansionMap, TreeError> {
        if !self.is_full() {
            return Err(TreeError::NotFull);
        }
        let old_height = self.height;
        let new_height = old_height + 1;
        let mut new = RatchetTree::blank(new_height);
        for i in 1..=self.node_count() {
            let new_index = Self::expanded_index(i);
            new.nodes[new_index as usize] = self.nodes[i as usize].clone();
        }
        // the demoted root keeps its published key for the storage model, but
        // no member holds the matching private half
        if !new.is_leaf(2) {
            new.nodes[2].ballast = true;
        }
        // interior slots of the right half stay key-less; its leaves stay blank
        *self = new;
        Ok(ExpansionMap)
    }

    /// Index an old node lands on after one expansion.
    pub fn expanded_index(old: NodeIndex) -> NodeIndex {
        old + (1 << old.ilog2())
    }

    /// While the root's right subtree holds no occupied leaf (and h > 0),
    /// promote the left subtree to be the whole tree. Returns how many levels
    /// were removed.
    pub fn truncate_if_possible(&mut self) -> u32 {
        let mut removed = 0;
        while self.height > 0 && !self.subtree_has_occupied_other_than(3, &[]) {
            let old_count = self.node_count();
            let mut new = RatchetTree::blank(self.height - 1);
            for i in 2..=old_count {
                if Self::in_left_subtree(i) {
                    let new_index = Self::truncated_index(i);
                    new.nodes[new_index as usize] = self.nodes[i as usize].clone();
                }
            }
            // the promoted root keeps its published key as ballast only; the
            // private halves are dropped everywhere (the root holds no pair).
            // A promoted leaf (h = 0) is the one exception: it keeps its pair.
            if new.height > 0 {
                new.nodes[1].private_key = None;
                if new.nodes[1].public_key.is_some() {
                    new.nodes[1].ballast = true;
                }
            }
            *self = new;
            removed += 1;
        }
        removed
    }

    fn in_left_subtree(index: NodeIndex) -> bool {
        // highest bit below the leading one decides the root child
        let depth = index.ilog2();
        depth >= 1 && (index >> (depth - 1)) & 1 == 0
    }

    /// Index a node of the left subtree lands on after one truncation.
    pub fn truncated_index(old: NodeIndex) -> NodeIndex {
        old - (1 << (old.ilog2() - 1))
    }

    /// Hash chain `s_0..s_h` above a leaf secret; exactly `h` hash calls.
    pub fn derive_path_chain(
        provider: &dyn CryptoProvider,
        leaf_secret: &[u8],
        height: u32,
    ) -> Result<PathSecretChain, TreeError> {
        if leaf_secret.is_empty() {
            return Err(TreeError::EmptySecret);
        }
        let mut secrets = Vec::with_capacity(height as usize + 1);
        secrets.push(leaf_secret.to_vec());
        for _ in 0..height {
            let next = provider.hash(secrets.last().expect("non-empty"));
            secrets.push(next);
        }
        Ok(PathSecretChain { secrets })
    }

    /// Replace stored public keys at the given nodes. Any private key held at
    /// an updated node is erased unless the caller re-derived it (the engine
    /// re-installs derived pairs afterwards).
    pub fn apply_public_update(
        &mut self,
        updates: &[(NodeIndex, Vec<u8>)],
    ) -> Result<(), TreeError> {
        for (index, _) in updates {
            if !self.is_valid(*index) {
                return Err(TreeError::BadIndex(*index));
            }
        }
        for (index, key) in updates {
            let is_root_entry = *index == 1 && !self.is_leaf(1);
            let node = &mut self.nodes[*index as usize];
            node.public_key = Some(key.clone());
            node.private_key = None;
            node.ballast = is_root_entry;
        }
        Ok(())
    }

    pub fn stored_public_keys(&self) -> usize {
        (1..=self.node_count())
            .filter(|&i| self.nodes[i as usize].public_key.is_some())
            .count()
    }

    pub fn stored_private_keys(&self) -> usize {
        (1..=self.node_count())
            .filter(|&i| self.nodes[i as usize].private_key.is_some())
            .count()
    }

    /// Deterministic textual dump: index, role, occupancy, truncated key
    /// fingerprints. Convergence tests diff this across members (private keys
    /// are deliberately not part of it).
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("height {}\n", self.height));
        for i in 1..=self.node_count() {
            let node = &self.nodes[i as usize];
            let role = if self.is_leaf(i) {
                match &node.occupancy {
                    Some(Occupancy::Occupied { identity }) => format!("leaf:{identity}"),
                    _ => "leaf:_".to_string(),
                }
            } else if i == 1 {
                "root".to_string()
            } else {
                "node".to_string()
            };
            let pk = match &node.public_key {
                Some(k) if node.ballast => format!("{}(b)", short_fingerprint(k)),
                Some(k) => short_fingerprint(k),
                None => "-".to_string(),
            };
            out.push_str(&format!("{i:4} {role} pk={pk}\n"));
        }
        out
    }

    /// 64-bit fingerprint of the public tree state.
    pub fn fingerprint(&self) -> u64 {
        // plain FNV over the dump; not a provider call, so it never touches
        // the op counters
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.dump_text().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

fn short_fingerprint(key: &[u8]) -> String {
    let take = key.len().min(4);
    hex::encode(&key[..take])
}

/// Marker returned by [`RatchetTree::expand`]; index remapping is exposed via
/// [`RatchetTree::expanded_index`].
pub struct ExpansionMap;
