//! A replicated growable sequence ("treedoc") for cooperative editing.
//!
//! The document is a binary tree in which every node may hold one atom.
//! Reading the tree in infix order yields the sequence; the path from the
//! root to a node, extended with a per-site disambiguator, is a stable
//! identifier for the atom stored there. Because identifiers never move,
//! insert and delete operations commute and replicas that have seen the
//! same set of operations hold the same sequence, with no merge step and
//! no coordination on the edit path.
//!
//! Sparse trees degrade over time: deletions leave tombstones and skewed
//! inserts grow long paths. Two structural repairs exist. `gc` and
//! `clean_side` run locally once an operation is *stable* (acknowledged
//! everywhere) and never change the rendered sequence. `flatten` rebuilds
//! a subtree into its most compact shape; it forgets node identities, so
//! it runs under a two-phase commitment that aborts when any site has made
//! a concurrent edit inside the subtree.
//!
//! Module map:
//!
//! * [`ids`]: path identifiers, their total order, and fresh-identifier
//!   allocation between two neighbors.
//! * [`tree`]: the replica state: atom storage, operation replay, local
//!   garbage collection.
//! * [`causal`]: vector/matrix clocks, causal delivery, stability.
//! * [`structure`]: explode/flatten and the flatten commitment protocol.
//! * [`txn`]: transaction brackets and remote-operation buffering.
//! * [`sim`]: a deterministic multi-site simulator with fault injection,
//!   convergence checking, and a brute-force schedule oracle.
//!
//! ```
//! use treedoc::sim::{World, Event};
//!
//! let mut w = World::new(2);
//! w.apply(Event::Insert { site: 0.into(), index: 0, ch: 'h' }).unwrap();
//! w.apply(Event::Insert { site: 0.into(), index: 1, ch: 'i' }).unwrap();
//! w.apply(Event::Exchange { a: 0.into(), b: 1.into() }).unwrap();
//! assert_eq!(w.site(1.into()).rendering(), "hi");
//! ```

pub mod causal;
pub mod ids;
pub mod sim;
pub mod structure;
pub mod tree;
pub mod txn;

use thiserror::Error;

/// Everything that can go wrong across the crate.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum Error {
    /// An allocation or structural operation was invoked with arguments
    /// that violate its contract (e.g. `new_uid` with `prev >= next`).
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    /// An initiated edit failed the local checks that only the initiating
    /// site performs (replay is unconditional).
    #[error("initiator precondition violated: {0}")]
    InitiatorPreconditionViolated(String),
    /// A visible-index query fell outside the rendered sequence.
    #[error("index {index} out of range for document of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    /// A path did not resolve to a node in this replica.
    #[error("unresolved path {0}")]
    UnresolvedPath(String),
    /// A flatten proposal refers to structure this replica no longer has.
    #[error("stale flatten proposal: {0}")]
    StaleProposal(String),
    /// An operation referenced a flattened region by an identity the
    /// region no longer carries. The operation is dropped and counted.
    #[error("epoch mismatch under {0}")]
    EpochMismatch(String),
    /// Transaction brackets must strictly alternate per site.
    #[error("transaction already open at this site")]
    IllegalNesting,
    /// `finish` without a matching `start`.
    #[error("no open transaction at this site")]
    NoOpenTransaction,
    /// A simulation event was not applicable in the current world state.
    #[error("illegal event: {0}")]
    IllegalEvent(String),
    /// The schedule oracle refused an input larger than its bound.
    #[error("multilog of {got} operations exceeds enumeration bound {bound}")]
    BoundExceeded { got: usize, bound: usize },
    /// A scenario or trace file did not parse.
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    /// A `check` event found diverged replicas.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
