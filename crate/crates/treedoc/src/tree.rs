//! The replica: a binary tree of atom slots addressed by [`PosId`].
//!
//! Initiated edits run local precondition checks and allocate fresh
//! identifiers; replayed edits are unconditional and recreate any missing
//! ancestors as empty nodes, so edits commute regardless of delivery
//! interleaving. Reads never mutate: a flattened run is walked virtually
//! and only materializes node by node when an edit's path descends into
//! it.
//!
//! `gc` and `clean_side` are the local, unreplicated repairs. Both take a
//! stability predicate from the caller (in practice the matrix clock) and
//! neither changes the rendered sequence.

use std::collections::BTreeMap;
use std::fmt;

use crate::causal::{FlatRef, VectorClock};
use crate::ids::{Anchor, Dir, Disambiguator, PosId};
use crate::structure::{self, AtomString};
use crate::{Error, Result};

/// One sequence element. The harness uses single characters; the tree
/// never stores an "empty" atom, so a node without an atom is a tombstone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom(pub char);

impl Atom {
    pub fn parse(tok: &str) -> Result<Atom> {
        let mut chars = tok.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if !c.is_whitespace() => Ok(Atom(c)),
            _ => Err(Error::PreconditionViolated(format!(
                "atom must be a single non-space character, got {tok:?}"
            ))),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A tree position: at most one atom, two children, and any number of
/// side nodes keyed (and ordered) by disambiguator.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TreeNode {
    pub atom: Option<Atom>,
    /// The disambiguator this node was inserted under. Survives side-node
    /// promotion so the atom keeps reporting its original identifier.
    pub insert_disamb: Option<Disambiguator>,
    pub insert_stamp: Option<VectorClock>,
    /// Merged stamps of every delete that hit this node.
    pub delete_stamp: Option<VectorClock>,
    pub left: Option<Box<Node>>,
    pub right: Option<Box<Node>>,
    pub sides: BTreeMap<Disambiguator, Node>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.left.is_none() && self.right.is_none() && self.sides.is_empty()
    }
}

/// Either an ordinary tree position or a flattened run standing in for a
/// whole subtree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Tree(TreeNode),
    Flat(AtomString),
}

impl Node {
    fn empty() -> Node {
        Node::Tree(TreeNode::default())
    }

    pub fn as_tree(&self) -> Option<&TreeNode> {
        match self {
            Node::Tree(t) => Some(t),
            Node::Flat(_) => None,
        }
    }
}

/// One slot of the infix walk: a position, its atom if live, and where
/// the slot lives physically.
#[derive(Clone, Debug)]
pub struct Entry {
    pub id: PosId,
    pub atom: Option<Atom>,
    /// The slot is inside an unmaterialized flattened run.
    pub in_flat: bool,
}

/// Whether a replayed edit took effect or referenced forgotten structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Applied {
    Done,
    /// The edit crossed a flattened subtree under an identity it did not
    /// record; its target no longer exists. Dropped.
    Lost,
}

/// A replica of the shared document.
#[derive(Clone, Debug, Default)]
pub struct Treedoc {
    root: Option<Node>,
    /// Commit counts per flatten subtree, in first-commit order.
    flat_epochs: Vec<(PosId, u64)>,
}

impl Treedoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn root(&self) -> Option<&Node> {
        self.root.as_ref()
    }

    /// Wraps a prebuilt tree in a fresh replica.
    pub fn from_root(root: Option<Node>) -> Treedoc {
        Treedoc { root, flat_epochs: Vec::new() }
    }

    /// Live atoms of the subtree slot at `root`, in document order. This
    /// is what a flatten of that subtree preserves. A disambiguated root
    /// covers only that disambiguator's block, not its sibling slots.
    pub fn region_content(&self, root: &PosId) -> Vec<Atom> {
        self.entries()
            .into_iter()
            .filter(|e| root.contains(&e.id))
            .filter_map(|e| e.atom)
            .collect()
    }

    // ----- reading -------------------------------------------------------

    /// Every slot in infix order, including tombstones and virtual slots
    /// inside flattened runs.
    pub fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        if let Some(root) = &self.root {
            collect_node(root, &PosId::root(), &mut out);
        }
        out
    }

    /// The rendered sequence.
    pub fn contents(&self) -> String {
        self.entries()
            .iter()
            .filter_map(|e| e.atom.map(|a| a.0))
            .collect()
    }

    /// Live `(identifier, atom)` pairs in document order. Two replicas
    /// are logically equal when these sets are equal.
    pub fn live_atoms(&self) -> Vec<(PosId, Atom)> {
        self.entries()
            .into_iter()
            .filter_map(|e| e.atom.map(|a| (e.id, a)))
            .collect()
    }

    pub fn visible_len(&self) -> usize {
        self.entries().iter().filter(|e| e.atom.is_some()).count()
    }

    /// Identifier of the `index`-th visible atom.
    pub fn uid_at_visible_index(&self, index: usize) -> Result<PosId> {
        let live = self.live_atoms();
        live.get(index)
            .map(|(id, _)| id.clone())
            .ok_or(Error::IndexOutOfRange { index, len: live.len() })
    }

    /// The pair of boundaries enclosing an insertion at visible position
    /// `index` (0 = before the first atom, len = after the last).
    pub fn neighbors_for_insert(&self, index: usize) -> Result<(Anchor, Anchor)> {
        let live = self.live_atoms();
        if index > live.len() {
            return Err(Error::IndexOutOfRange { index, len: live.len() });
        }
        let prev = match index.checked_sub(1).and_then(|i| live.get(i)) {
            Some((id, _)) => Anchor::At(id.clone()),
            None => Anchor::Begin,
        };
        let next = match live.get(index) {
            Some((id, _)) => Anchor::At(id.clone()),
            None => Anchor::End,
        };
        Ok((prev, next))
    }

    /// Allocates a fresh identifier between two boundaries, avoiding
    /// every occupied slot of this replica.
    pub fn new_uid(&self, prev: &Anchor, next: &Anchor, d: Disambiguator) -> Result<PosId> {
        let occupied: Vec<PosId> = self.entries().into_iter().map(|e| e.id).collect();
        crate::ids::new_uid(prev, next, &occupied, d)
    }

    /// Resolves a path to its materialized node. A disambiguated
    /// component matches the side node carrying that disambiguator, or
    /// the main node when the side was promoted into it; paths into
    /// flattened runs return `None`.
    pub fn resolve(&self, pos: &PosId) -> Option<&Node> {
        let mut cur = self.root.as_ref()?;
        if let Some(d) = pos.root_disamb() {
            let t = cur.as_tree()?;
            cur = match t.sides.get(&d) {
                Some(side) => side,
                None if t.insert_disamb == Some(d) => cur,
                None => return None,
            };
        }
        for step in pos.steps() {
            let t = cur.as_tree()?;
            cur = match step.dir {
                Dir::Left => t.left.as_deref()?,
                Dir::Right => t.right.as_deref()?,
            };
            if let Some(d) = step.disamb {
                let ct = cur.as_tree()?;
                cur = match ct.sides.get(&d) {
                    Some(side) => side,
                    None if ct.insert_disamb == Some(d) => cur,
                    None => return None,
                };
            }
        }
        Some(cur)
    }

    fn resolve_tree_mut(&mut self, pos: &PosId) -> Option<&mut TreeNode> {
        let mut cur = self.root.as_mut()?;
        if let Some(d) = pos.root_disamb() {
            cur = select_slot(cur, d)?;
        }
        for step in pos.steps() {
            let t = match cur {
                Node::Tree(t) => t,
                Node::Flat(_) => return None,
            };
            let child = match step.dir {
                Dir::Left => t.left.as_deref_mut()?,
                Dir::Right => t.right.as_deref_mut()?,
            };
            cur = match step.disamb {
                Some(d) => select_slot(child, d)?,
                None => child,
            };
        }
        match cur {
            Node::Tree(t) => Some(t),
            Node::Flat(_) => None,
        }
    }

    /// True when the position exists, materialized or virtually inside a
    /// flattened run.
    pub fn position_exists(&self, pos: &PosId) -> bool {
        self.probe(pos).is_some()
    }

    /// The live atom a path resolves to, looking through flattened runs.
    pub fn live_atom_at(&self, pos: &PosId) -> Option<Atom> {
        match self.probe(pos)? {
            Probe::Tree(t) => t.atom,
            Probe::Virt { atoms, fd } => {
                let r = frame_root(fd);
                atoms.get(r).copied()
            }
        }
    }

    fn probe<'a>(&'a self, pos: &PosId) -> Option<Probe<'a>> {
        let mut cur = match self.root.as_ref()? {
            Node::Tree(t) => Probe::Tree(t),
            Node::Flat(run) => Probe::Virt { atoms: &run.atoms, fd: run.frame_depth },
        };
        if let Some(d) = pos.root_disamb() {
            let Probe::Tree(t) = cur else { return None };
            cur = match t.sides.get(&d) {
                Some(side) => Probe::of(side),
                None if t.insert_disamb == Some(d) => cur,
                None => return None,
            };
        }
        for step in pos.steps() {
            cur = match cur {
                Probe::Tree(t) => {
                    let child = match step.dir {
                        Dir::Left => t.left.as_deref()?,
                        Dir::Right => t.right.as_deref()?,
                    };
                    let next = Probe::of(child);
                    match step.disamb {
                        None => next,
                        Some(d) => {
                            let Probe::Tree(ct) = next else { return None };
                            match ct.sides.get(&d) {
                                Some(side) => Probe::of(side),
                                None if ct.insert_disamb == Some(d) => next,
                                None => return None,
                            }
                        }
                    }
                }
                Probe::Virt { atoms, fd } => {
                    if step.disamb.is_some() {
                        // Flattened runs hold only canonical slots; a side
                        // identifier has no virtual counterpart.
                        return None;
                    }
                    let r = frame_root(fd);
                    let m = atoms.len();
                    match step.dir {
                        Dir::Left if m.min(r) > 0 => {
                            Probe::Virt { atoms: &atoms[..m.min(r)], fd: fd - 1 }
                        }
                        Dir::Right if m > r + 1 => {
                            Probe::Virt { atoms: &atoms[r + 1..], fd: fd - 1 }
                        }
                        _ => return None,
                    }
                }
            };
        }
        Some(cur)
    }

    // ----- replayable edits ----------------------------------------------

    /// Applies an insert. With `initiator` set the local preconditions
    /// are checked (every strict ancestor of the position exists and the
    /// target side node does not); replay is unconditional and creates
    /// missing ancestors as tombstone nodes.
    pub fn apply_insert(
        &mut self,
        pos: &PosId,
        atom: Atom,
        stamp: &VectorClock,
        refs: &[FlatRef],
        initiator: bool,
    ) -> Result<Applied> {
        if initiator {
            // The container itself may be created by this edit; its strict
            // ancestors must already exist.
            let mut p = pos.container().parent();
            while let Some(anc) = p {
                if !self.position_exists(&anc) {
                    return Err(Error::InitiatorPreconditionViolated(format!(
                        "ancestor {anc} of {pos} does not exist"
                    )));
                }
                p = anc.parent();
            }
            if self.side_occupied(pos) {
                return Err(Error::InitiatorPreconditionViolated(format!(
                    "target {pos} already exists"
                )));
            }
        }
        let container = match self.materialize_tree_at(&pos.container(), refs) {
            Ok(t) => t,
            Err(Error::EpochMismatch(_)) if !initiator => return Ok(Applied::Lost),
            Err(e) => return Err(e),
        };
        match pos.final_disamb() {
            Some(d) if container.insert_disamb == Some(d) && !container.sides.contains_key(&d) => {
                // The side node was already promoted into this slot.
                container.atom = Some(atom);
                container.insert_stamp = Some(stamp.clone());
            }
            Some(d) => {
                let side = container.sides.entry(d).or_insert_with(|| side_shell(d));
                match materialize(side, refs) {
                    Ok(()) => {}
                    Err(Error::EpochMismatch(_)) if !initiator => return Ok(Applied::Lost),
                    Err(e) => return Err(e),
                }
                let st = as_tree_mut(side);
                st.atom = Some(atom);
                st.insert_stamp = Some(stamp.clone());
            }
            None => {
                container.atom = Some(atom);
                container.insert_stamp = Some(stamp.clone());
            }
        }
        Ok(Applied::Done)
    }

    /// Applies a delete: the target's atom becomes a tombstone. Replay of
    /// an already-applied delete is a no-op, and replay after the target
    /// was collected recreates it as a tombstone.
    pub fn apply_delete(
        &mut self,
        pos: &PosId,
        stamp: &VectorClock,
        refs: &[FlatRef],
        initiator: bool,
    ) -> Result<Applied> {
        if initiator && self.live_atom_at(pos).is_none() {
            return Err(Error::InitiatorPreconditionViolated(format!(
                "no live atom at {pos}"
            )));
        }
        let target = match self.materialize_tree_at(pos, refs) {
            Ok(t) => t,
            Err(Error::EpochMismatch(_)) if !initiator => return Ok(Applied::Lost),
            Err(e) => return Err(e),
        };
        target.atom = None;
        match &mut target.delete_stamp {
            Some(existing) => existing.merge(stamp),
            slot => *slot = Some(stamp.clone()),
        }
        Ok(Applied::Done)
    }

    fn side_occupied(&self, pos: &PosId) -> bool {
        let Some(d) = pos.final_disamb() else { return false };
        match self.probe(&pos.container()) {
            Some(Probe::Tree(t)) => t.sides.contains_key(&d) || t.insert_disamb == Some(d),
            _ => false,
        }
    }

    /// Walks the full path, creating missing main nodes as tombstones and
    /// materializing flattened runs the path descends into. Fails with
    /// `EpochMismatch` when a run's identity is not among `refs`.
    fn materialize_tree_at(&mut self, pos: &PosId, refs: &[FlatRef]) -> Result<&mut TreeNode> {
        if self.root.is_none() {
            self.root = Some(Node::empty());
        }
        let root = self.root.as_mut().unwrap();
        materialize(root, refs)?;
        let t = as_tree_mut(root);
        let start = match pos.root_disamb() {
            None => t,
            Some(d) if t.insert_disamb == Some(d) && !t.sides.contains_key(&d) => t,
            Some(d) => {
                let side = t.sides.entry(d).or_insert_with(|| side_shell(d));
                materialize(side, refs)?;
                as_tree_mut(side)
            }
        };
        descend_steps(start, pos.steps(), refs)
    }

    // ----- flatten plumbing ----------------------------------------------

    /// Current commit count for the subtree at `origin`.
    pub fn epoch_of(&self, origin: &PosId) -> u64 {
        self.flat_epochs
            .iter()
            .find(|(p, _)| p == origin)
            .map(|(_, e)| *e)
            .unwrap_or(0)
    }

    /// The flatten identities an edit at `pos` must record so that replay
    /// elsewhere can recognize which structure its path was minted in.
    pub fn flat_refs_for(&self, pos: &PosId) -> Vec<FlatRef> {
        let mut refs: Vec<FlatRef> = self
            .flat_epochs
            .iter()
            .filter(|(origin, epoch)| *epoch > 0 && origin.contains(pos))
            .map(|(origin, epoch)| FlatRef { origin: origin.clone(), epoch: *epoch })
            .collect();
        refs.sort_by_key(|r| r.origin.to_string());
        refs
    }

    /// Replaces the subtree at `root` with a flattened run holding
    /// `content`, bumping the subtree's epoch. The caller has already
    /// checked that the replacement preserves the rendering.
    pub fn commit_flatten(
        &mut self,
        root: &PosId,
        content: &[Atom],
        refs: &[FlatRef],
    ) -> Result<()> {
        let epoch = match self.flat_epochs.iter_mut().find(|(p, _)| p == root) {
            Some((_, e)) => {
                *e += 1;
                *e
            }
            None => {
                self.flat_epochs.push((root.clone(), 1));
                1
            }
        };
        let replacement = if content.is_empty() {
            None
        } else {
            Some(Node::Flat(AtomString {
                atoms: content.to_vec(),
                epoch,
                origin: root.clone(),
                frame_depth: structure::canonical_depth(content.len()),
            }))
        };
        if pos_is_root(root) {
            self.root = replacement;
            return Ok(());
        }
        match root.final_disamb() {
            None => {
                // A bare slot path covers every block at the position, so
                // the whole child slot is replaced.
                let parent = root.parent().expect("non-root position has a parent");
                let last_dir = root.steps().last().expect("non-root position has steps").dir;
                let t = self.materialize_tree_at(&parent, refs)?;
                let slot = match last_dir {
                    Dir::Left => &mut t.left,
                    Dir::Right => &mut t.right,
                };
                *slot = replacement.map(Box::new);
            }
            Some(d) => {
                // A disambiguated root covers only that block; sibling
                // blocks at the same position survive the replacement.
                let c = self.materialize_tree_at(&root.container(), refs)?;
                if c.insert_disamb == Some(d) && !c.sides.contains_key(&d) {
                    // The block had been promoted into the main slot:
                    // demote the position to a shell holding the sibling
                    // blocks, with the flattened run as one of them.
                    let mut shell = TreeNode::default();
                    shell.sides = std::mem::take(&mut c.sides);
                    if let Some(n) = replacement {
                        shell.sides.insert(d, n);
                    }
                    *c = shell;
                } else {
                    match replacement {
                        Some(n) => {
                            c.sides.insert(d, n);
                        }
                        None => {
                            c.sides.remove(&d);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    // ----- local repairs -------------------------------------------------

    /// Removes the tombstone leaf at `pos`. The caller supplies the
    /// stability predicate; a node with no recorded delete stamp is an
    /// ancestor shell recreated by replay and needs no stability.
    pub fn gc(&mut self, pos: &PosId, stable: impl Fn(&VectorClock) -> bool) -> Result<()> {
        let node = self
            .resolve(pos)
            .ok_or_else(|| Error::UnresolvedPath(pos.to_string()))?;
        let t = node.as_tree().ok_or_else(|| {
            Error::PreconditionViolated(format!("{pos} is a flattened run, not a node"))
        })?;
        if t.atom.is_some() {
            return Err(Error::PreconditionViolated(format!("{pos} holds a live atom")));
        }
        if !t.is_leaf() {
            return Err(Error::PreconditionViolated(format!("{pos} is not a leaf")));
        }
        if let Some(ds) = &t.delete_stamp {
            if !stable(ds) {
                return Err(Error::PreconditionViolated(format!(
                    "delete of {pos} is not yet stable"
                )));
            }
        }
        // Remove: as a side node of its container if it is one, otherwise
        // from its parent's child slot.
        let is_side = pos
            .final_disamb()
            .is_some_and(|d| match self.probe(&pos.container()) {
                Some(Probe::Tree(ct)) => ct.sides.contains_key(&d),
                _ => false,
            });
        if is_side {
            let d = pos.final_disamb().unwrap();
            let ct = self
                .resolve_tree_mut(&pos.container())
                .expect("container resolved above");
            ct.sides.remove(&d);
        } else if pos.steps().is_empty() {
            self.root = None;
        } else {
            let parent_pos = pos.parent().unwrap();
            let last_dir = pos.steps().last().unwrap().dir;
            let p = self
                .resolve_tree_mut(&parent_pos)
                .expect("parent resolved above");
            match last_dir {
                Dir::Left => p.left = None,
                Dir::Right => p.right = None,
            }
        }
        Ok(())
    }

    /// Promotes the single remaining side node of the container at `pos`
    /// into the main slot. Requires the container to be an empty shell
    /// and the side node's insert to be stable.
    pub fn clean_side(&mut self, pos: &PosId, stable: impl Fn(&VectorClock) -> bool) -> Result<()> {
        {
            let node = self
                .resolve(pos)
                .ok_or_else(|| Error::UnresolvedPath(pos.to_string()))?;
            let t = node.as_tree().ok_or_else(|| {
                Error::PreconditionViolated(format!("{pos} is a flattened run"))
            })?;
            if t.atom.is_some()
                || t.insert_disamb.is_some()
                || t.delete_stamp.is_some()
                || t.left.is_some()
                || t.right.is_some()
            {
                // Promotion only rewrites paths through positions that
                // never held an atom themselves; anything with history
                // must keep its record addressable.
                return Err(Error::PreconditionViolated(format!(
                    "{pos} is not an empty container"
                )));
            }
            if t.sides.len() != 1 {
                return Err(Error::PreconditionViolated(format!(
                    "{pos} has {} side nodes, need exactly one",
                    t.sides.len()
                )));
            }
            let side = t.sides.values().next().unwrap();
            let st = side.as_tree().ok_or_else(|| {
                Error::PreconditionViolated(format!("side node of {pos} is a flattened run"))
            })?;
            match &st.insert_stamp {
                Some(s) if stable(s) => {}
                _ => {
                    return Err(Error::PreconditionViolated(format!(
                        "insert under {pos} is not yet stable"
                    )))
                }
            }
        }
        let t = self
            .resolve_tree_mut(pos)
            .expect("container resolved above");
        let d = *t.sides.keys().next().unwrap();
        match t.sides.remove(&d).unwrap() {
            Node::Tree(side) => *t = side,
            Node::Flat(_) => unreachable!("checked above"),
        }
        Ok(())
    }

    /// Runs tombstone removal and side promotion to a fixpoint. Returns
    /// how many nodes were removed and how many sides were promoted.
    /// Candidates are gathered structurally; the individual repairs still
    /// enforce their own stability preconditions, so an unstable candidate
    /// is simply skipped.
    pub fn compact(&mut self, stable: impl Fn(&VectorClock) -> bool) -> (usize, usize) {
        let mut removed = 0;
        let mut promoted = 0;
        loop {
            let mut gc_targets = Vec::new();
            let mut promote_targets = Vec::new();
            if let Some(root) = &self.root {
                collect_repairs(root, &PosId::root(), &mut gc_targets, &mut promote_targets);
            }
            let mut progress = false;
            for pos in gc_targets {
                if self.gc(&pos, &stable).is_ok() {
                    removed += 1;
                    progress = true;
                }
            }
            for pos in promote_targets {
                if self.clean_side(&pos, &stable).is_ok() {
                    promoted += 1;
                    progress = true;
                }
            }
            if !progress {
                break;
            }
        }
        (removed, promoted)
    }

    // ----- physical shape ------------------------------------------------

    pub fn physical_stats(&self) -> PhysicalStats {
        let mut s = PhysicalStats::default();
        if let Some(root) = &self.root {
            phys_walk(root, 1, &mut s);
        }
        s
    }
}

enum Probe<'a> {
    Tree(&'a TreeNode),
    Virt { atoms: &'a [Atom], fd: u32 },
}

impl<'a> Probe<'a> {
    fn of(node: &'a Node) -> Probe<'a> {
        match node {
            Node::Tree(t) => Probe::Tree(t),
            Node::Flat(run) => Probe::Virt { atoms: &run.atoms, fd: run.frame_depth },
        }
    }
}

/// Materialized node counts and shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhysicalStats {
    pub nodes: usize,
    pub tombstones: usize,
    pub side_nodes: usize,
    pub flat_runs: usize,
    pub flat_atoms: usize,
    pub max_depth: usize,
}

fn phys_walk(node: &Node, depth: usize, s: &mut PhysicalStats) {
    match node {
        Node::Flat(run) => {
            s.flat_runs += 1;
            s.flat_atoms += run.atoms.len();
            s.max_depth = s.max_depth.max(depth);
        }
        Node::Tree(t) => {
            s.nodes += 1;
            if t.atom.is_none() {
                s.tombstones += 1;
            }
            s.max_depth = s.max_depth.max(depth);
            if let Some(l) = &t.left {
                phys_walk(l, depth + 1, s);
            }
            if let Some(r) = &t.right {
                phys_walk(r, depth + 1, s);
            }
            for side in t.sides.values() {
                s.side_nodes += 1;
                // A side node occupies its container's tree position, so it
                // sits at the same depth rather than one below it.
                phys_walk(side, depth, s);
            }
        }
    }
}

fn collect_repairs(
    node: &Node,
    pos: &PosId,
    gc_out: &mut Vec<PosId>,
    promote_out: &mut Vec<PosId>,
) {
    let Node::Tree(t) = node else { return };
    let own = match t.insert_disamb {
        Some(d) => pos.with_side(d),
        None => pos.clone(),
    };
    if t.atom.is_none() && t.is_leaf() {
        gc_out.push(own.clone());
    }
    if t.atom.is_none()
        && t.insert_disamb.is_none()
        && t.delete_stamp.is_none()
        && t.left.is_none()
        && t.right.is_none()
        && t.sides.len() == 1
    {
        promote_out.push(own.clone());
    }
    if let Some(l) = &t.left {
        collect_repairs(l, &own.child(Dir::Left, None), gc_out, promote_out);
    }
    if let Some(r) = &t.right {
        collect_repairs(r, &own.child(Dir::Right, None), gc_out, promote_out);
    }
    for (d, side) in &t.sides {
        collect_repairs(side, &pos.with_side(*d), gc_out, promote_out);
    }
}

fn pos_is_root(pos: &PosId) -> bool {
    pos.root_disamb().is_none() && pos.steps().is_empty()
}

fn frame_root(fd: u32) -> usize {
    (1usize << (fd.saturating_sub(1))) - 1
}

fn as_tree_mut(node: &mut Node) -> &mut TreeNode {
    match node {
        Node::Tree(t) => t,
        Node::Flat(_) => unreachable!("flattened runs are materialized before descent"),
    }
}

fn descend_steps<'a>(
    t: &'a mut TreeNode,
    steps: &[crate::ids::PathComponent],
    refs: &[FlatRef],
) -> Result<&'a mut TreeNode> {
    let Some((step, rest)) = steps.split_first() else {
        return Ok(t);
    };
    let slot = match step.dir {
        Dir::Left => &mut t.left,
        Dir::Right => &mut t.right,
    };
    let child: &mut Node = slot.get_or_insert_with(|| Box::new(Node::empty()));
    materialize(child, refs)?;
    let ct = as_tree_mut(child);
    match step.disamb {
        None => descend_steps(ct, rest, refs),
        Some(d) if ct.insert_disamb == Some(d) && !ct.sides.contains_key(&d) => {
            // The side node was promoted into the main slot.
            descend_steps(ct, rest, refs)
        }
        Some(d) => {
            let side = ct.sides.entry(d).or_insert_with(|| side_shell(d));
            materialize(side, refs)?;
            descend_steps(as_tree_mut(side), rest, refs)
        }
    }
}

///// Replay shell for a side node whose structure was collected locally:
/// it keeps the disambiguator so the slot stays addressable and ordered.
fn side_shell(d: crate::ids::Disambiguator) -> Node {
    Node::Tree(TreeNode { insert_disamb: Some(d), ..TreeNode::default() })
}

/// Picks the block a disambiguated path component names at `node`: the
/// matching side entry if one exists, otherwise the node itself when
/// promotion already folded that block into the main slot.
fn select_slot(node: &mut Node, d: crate::ids::Disambiguator) -> Option<&mut Node> {
    let (has_side, promoted) = match &*node {
        Node::Tree(t) => (t.sides.contains_key(&d), t.insert_disamb == Some(d)),
        Node::Flat(_) => return None,
    };
    if has_side {
        match node {
            Node::Tree(t) => t.sides.get_mut(&d),
            Node::Flat(_) => unreachable!(),
        }
    } else if promoted {
        Some(node)
    } else {
        None
    }
}

/// Replaces a flattened run with one materialized level, provided the
/// walker recorded the run's identity.
fn materialize(node: &mut Node, refs: &[FlatRef]) -> Result<()> {
    let Node::Flat(run) = node else { return Ok(()) };
    let known = refs
        .iter()
        .any(|r| r.origin == run.origin && r.epoch == run.epoch);
    if !known {
        return Err(Error::EpochMismatch(format!("{}@{}", run.origin, run.epoch)));
    }
    *node = Node::Tree(structure::split_one_level(run));
    Ok(())
}

fn collect_node(node: &Node, path: &PosId, out: &mut Vec<Entry>) {
    match node {
        Node::Flat(run) => collect_flat(&run.atoms, run.frame_depth, path, out),
        Node::Tree(t) => match t.insert_disamb {
            None => {
                if let Some(l) = &t.left {
                    collect_node(l, &path.child(Dir::Left, None), out);
                }
                // A pure structural shell (never held an atom, not a side
                // node) is invisible to the walk: only its subtrees count.
                // Its bare path would otherwise collide with the side
                // blocks that alias it.
                if t.atom.is_some() || t.delete_stamp.is_some() {
                    out.push(Entry { id: path.clone(), atom: t.atom, in_flat: false });
                }
                for (d, side) in &t.sides {
                    collect_node(side, &path.with_side(*d), out);
                }
                if let Some(r) = &t.right {
                    collect_node(r, &path.child(Dir::Right, None), out);
                }
            }
            Some(dm) => {
                // This node carries a disambiguator, so it and its
                // children form the block for `dm` at this position.
                // Entries in its sides map are the sibling blocks of the
                // same position, interleaved in disambiguator order; the
                // walk must emit identifiers under the disambiguated
                // path so that a replica that has promoted the block and
                // one that has not report the same identifiers.
                let own = path.with_side(dm);
                for (d, side) in t.sides.range(..dm) {
                    collect_node(side, &path.with_side(*d), out);
                }
                if let Some(l) = &t.left {
                    collect_node(l, &own.child(Dir::Left, None), out);
                }
                out.push(Entry { id: own.clone(), atom: t.atom, in_flat: false });
                if let Some(r) = &t.right {
                    collect_node(r, &own.child(Dir::Right, None), out);
                }
                use std::ops::Bound;
                for (d, side) in t.sides.range((Bound::Excluded(dm), Bound::Unbounded)) {
                    collect_node(side, &path.with_side(*d), out);
                }
            }
        },
    }
}

fn collect_flat(atoms: &[Atom], fd: u32, base: &PosId, out: &mut Vec<Entry>) {
    let m = atoms.len();
    if m == 0 {
        return;
    }
    let r = frame_root(fd);
    if m.min(r) > 0 {
        collect_flat(&atoms[..m.min(r)], fd - 1, &base.child(Dir::Left, None), out);
    }
    if let Some(a) = atoms.get(r) {
        out.push(Entry { id: base.clone(), atom: Some(*a), in_flat: true });
    }
    if m > r + 1 {
        collect_flat(&atoms[r + 1..], fd - 1, &base.child(Dir::Right, None), out);
    }
}
