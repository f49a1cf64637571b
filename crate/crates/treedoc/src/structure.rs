//! Structure transformations: exploding a string into a balanced tree
//! and flattening a quiescent subtree back into a compact run.
//!
//! Flattening forgets tombstones and identifiers, so unlike edits it is
//! not safe to run concurrently with anything. Replicas agree on each
//! flatten through a single-round commit protocol: the proposer snapshots
//! the subtree's live contents, every reachable site votes, and only a
//! unanimous yes replaces the subtree. A site votes no whenever it has
//! executed a concurrent edit inside the subtree (or a transaction
//! touching it), already promised an overlapping proposal, or disagrees
//! about the subtree's commit epoch.

use std::collections::BTreeMap;

use crate::causal::{FlatRef, OpId, VectorClock};
use crate::ids::{PosId, SiteId};
use crate::tree::{Atom, Node, Treedoc, TreeNode};

/// A flattened subtree: the live atoms in document order plus the
/// identity of the commit that produced them. `origin` and `epoch` let a
/// replayed edit prove its path was minted against this structure;
/// `frame_depth` fixes which virtual slot each atom occupies, so a
/// fragment keeps its parent frame's layout when a run is split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AtomString {
    pub atoms: Vec<Atom>,
    pub epoch: u64,
    pub origin: PosId,
    pub frame_depth: u32,
}

/// Depth of the smallest complete tree holding `len` atoms.
pub fn canonical_depth(len: usize) -> u32 {
    usize::BITS - len.leading_zeros()
}

/// Builds the fully materialized canonical tree for `atoms`: a complete
/// tree of depth `canonical_depth(len)` with the atoms in its first `len`
/// infix slots. Slots that would be empty exist only as tombstone
/// ancestors of populated ones.
pub fn explode(atoms: &[Atom]) -> Option<Node> {
    build(atoms, canonical_depth(atoms.len()))
}

fn build(atoms: &[Atom], fd: u32) -> Option<Node> {
    if atoms.is_empty() {
        return None;
    }
    let m = atoms.len();
    let r = (1usize << (fd - 1)) - 1;
    Some(Node::Tree(TreeNode {
        atom: atoms.get(r).copied(),
        left: build(&atoms[..m.min(r)], fd - 1).map(Box::new),
        right: if m > r + 1 {
            build(&atoms[r + 1..], fd - 1).map(Box::new)
        } else {
            None
        },
        ..TreeNode::default()
    }))
}

/// The inverse view: live atoms of the subtree at `root`, in order.
pub fn flatten_local(doc: &Treedoc, root: &PosId) -> Vec<Atom> {
    doc.region_content(root)
}

/// Materializes the top level of a run: the frame-root atom becomes a
/// real node and the remaining atoms split into two child runs that keep
/// the parent's origin, epoch, and frame layout.
pub fn split_one_level(run: &AtomString) -> TreeNode {
    let m = run.atoms.len();
    let fd = run.frame_depth;
    debug_assert!(m > 0 && fd > 0, "empty runs are never stored");
    let r = (1usize << (fd - 1)) - 1;
    let fragment = |atoms: &[Atom]| {
        Box::new(Node::Flat(AtomString {
            atoms: atoms.to_vec(),
            epoch: run.epoch,
            origin: run.origin.clone(),
            frame_depth: fd - 1,
        }))
    };
    TreeNode {
        atom: run.atoms.get(r).copied(),
        left: (m.min(r) > 0).then(|| fragment(&run.atoms[..m.min(r)])),
        right: (m > r + 1).then(|| fragment(&run.atoms[r + 1..])),
        ..TreeNode::default()
    }
}

/// Two subtree slots overlap when one contains the other's root.
pub fn regions_overlap(a: &PosId, b: &PosId) -> bool {
    a.contains(b) || b.contains(a)
}

/// One flatten agreement round, as minted by its proposer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Proposal {
    pub id: OpId,
    pub root: PosId,
    /// Snapshot of the subtree's live atoms at the proposer.
    pub content: Vec<Atom>,
    pub stamp: VectorClock,
    pub refs: Vec<FlatRef>,
    /// Snapshot of the sites that must vote: everyone not crashed when
    /// the proposal was made.
    pub participants: Vec<SiteId>,
}

/// Vote bookkeeping at the coordinator.
#[derive(Clone, Debug)]
pub struct ProposalRound {
    pub proposal: Proposal,
    pub votes: BTreeMap<SiteId, bool>,
}

impl ProposalRound {
    pub fn new(proposal: Proposal) -> Self {
        ProposalRound { proposal, votes: BTreeMap::new() }
    }

    pub fn record_vote(&mut self, from: SiteId, yes: bool) {
        self.votes.entry(from).or_insert(yes);
    }

    /// `Some(true)` once every participant voted yes, `Some(false)` as
    /// soon as any voted no, `None` while votes are still outstanding.
    /// Unreachable participants are the caller's problem: it aborts the
    /// round rather than waiting on them.
    pub fn ready(&self) -> Option<bool> {
        if self.votes.values().any(|yes| !yes) {
            return Some(false);
        }
        let all_in = self
            .proposal
            .participants
            .iter()
            .all(|s| self.votes.contains_key(s));
        all_in.then_some(true)
    }
}
