//! Brute-force schedule oracle for small operation sets.
//!
//! Convergence says: any two causally consistent delivery orders of the
//! same operations produce the same document. For a handful of edits
//! that claim is directly checkable by enumerating every linear
//! extension of the happens-before order and replaying each one on a
//! fresh replica. The simulator's fuzzing gives statistical confidence;
//! this oracle gives exhaustive confidence on small cases, which is
//! where a commutation bug would first be visible.

use crate::causal::{happens_before, Operation, Payload};
use crate::ids::PosId;
use crate::tree::{Atom, Treedoc};
use crate::{Error, Result};

/// Largest operation count the oracle will enumerate. Seven fully
/// concurrent edits already mean 5040 replays.
pub const DEFAULT_BOUND: usize = 7;

/// A deduplicated set of edit operations, typically harvested from the
/// logs of simulated replicas.
#[derive(Clone, Debug)]
pub struct Multilog {
    ops: Vec<Operation>,
}

impl Multilog {
    /// Keeps one copy of every edit operation, dropping heartbeats,
    /// transaction markers, and agreement traffic. Order of the input
    /// does not matter.
    pub fn from_ops(ops: impl IntoIterator<Item = Operation>) -> Multilog {
        let mut edits: Vec<Operation> = Vec::new();
        for op in ops {
            if op.is_edit() && !edits.iter().any(|e| e.id() == op.id()) {
                edits.push(op);
            }
        }
        edits.sort_by_key(|op| op.id());
        Multilog { ops: edits }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Replays every causally consistent schedule and checks that each
    /// one ends in the same set of live atoms. Returns how many
    /// schedules were checked; fails with [`Error::BoundExceeded`] when
    /// the set is too large to enumerate and [`Error::CheckFailed`] if
    /// any two schedules disagree.
    pub fn check_all_schedules(&self, bound: usize) -> Result<usize> {
        if self.ops.len() > bound {
            return Err(Error::BoundExceeded { got: self.ops.len(), bound });
        }
        let n = self.ops.len();
        let mut used = vec![false; n];
        let mut schedule = Vec::with_capacity(n);
        let mut reference: Option<Vec<(PosId, Atom)>> = None;
        let mut count = 0usize;
        self.visit(&mut used, &mut schedule, &mut reference, &mut count)?;
        Ok(count)
    }

    fn visit(
        &self,
        used: &mut [bool],
        schedule: &mut Vec<usize>,
        reference: &mut Option<Vec<(PosId, Atom)>>,
        count: &mut usize,
    ) -> Result<()> {
        let n = self.ops.len();
        if schedule.len() == n {
            let live = self.replay(schedule)?;
            match reference {
                None => *reference = Some(live),
                Some(expected) => {
                    if *expected != live {
                        return Err(Error::CheckFailed(format!(
                            "schedule {} diverges from the first schedule",
                            schedule
                                .iter()
                                .map(|&i| self.ops[i].id().to_string())
                                .collect::<Vec<_>>()
                                .join(" ")
                        )));
                    }
                }
            }
            *count += 1;
            return Ok(());
        }
        for i in 0..n {
            if used[i] {
                continue;
            }
            let blocked = (0..n).any(|j| {
                !used[j] && j != i && happens_before(&self.ops[j].clock, &self.ops[i].clock)
            });
            if blocked {
                continue;
            }
            used[i] = true;
            schedule.push(i);
            self.visit(used, schedule, reference, count)?;
            schedule.pop();
            used[i] = false;
        }
        Ok(())
    }

    fn replay(&self, schedule: &[usize]) -> Result<Vec<(PosId, Atom)>> {
        let mut doc = Treedoc::new();
        for &i in schedule {
            let op = &self.ops[i];
            match &op.payload {
                Payload::Insert { pos, atom, refs } => {
                    doc.apply_insert(pos, *atom, &op.clock, refs, false)?;
                }
                Payload::Delete { pos, refs } => {
                    doc.apply_delete(pos, &op.clock, refs, false)?;
                }
                _ => unreachable!("multilog holds edits only"),
            }
        }
        Ok(doc.live_atoms())
    }
}
