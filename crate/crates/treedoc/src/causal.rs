//! Causality tracking and causal delivery.
//!
//! Every operation is stamped with its initiator, the initiator's per-site
//! sequence number, and the initiator's full vector clock at initiation
//! (which includes the operation itself). Stamp dominance is exactly the
//! happened-before relation, and a buffered operation becomes deliverable
//! once the replica has delivered everything the stamp depends on.
//!
//! Matrix clocks summarize what each peer is known to have seen; they back
//! the stability predicates that gate the local repairs in [`crate::tree`].

use std::collections::BTreeMap;
use std::fmt;

use crate::ids::{PosId, SiteId};
use crate::tree::Atom;
use crate::{Error, Result};

/// Per-site operation counts. Missing entries read as zero.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct VectorClock(BTreeMap<SiteId, u64>);

impl VectorClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, site: SiteId) -> u64 {
        self.0.get(&site).copied().unwrap_or(0)
    }

    /// Bumps this site's entry and returns the new value.
    pub fn increment(&mut self, site: SiteId) -> u64 {
        let e = self.0.entry(site).or_insert(0);
        *e += 1;
        *e
    }

    pub fn set(&mut self, site: SiteId, value: u64) {
        self.0.insert(site, value);
    }

    /// Pointwise maximum.
    pub fn merge(&mut self, other: &VectorClock) {
        for (&site, &v) in &other.0 {
            let e = self.0.entry(site).or_insert(0);
            *e = (*e).max(v);
        }
    }

    /// True when `self >= other` in every component.
    pub fn dominates(&self, other: &VectorClock) -> bool {
        other.0.iter().all(|(&site, &v)| self.get(site) >= v)
    }

    pub fn entries(&self) -> impl Iterator<Item = (SiteId, u64)> + '_ {
        self.0.iter().map(|(&s, &v)| (s, v))
    }
}

impl fmt::Display for VectorClock {
    /// `{site:count,...}` in ascending site order; `{}` when empty.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (site, v)) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{site}:{v}")?;
        }
        write!(f, "}}")
    }
}

impl std::str::FromStr for VectorClock {
    type Err = Error;

    fn from_str(s: &str) -> Result<VectorClock> {
        let bad = || Error::PreconditionViolated(format!("malformed clock {s:?}"));
        let inner = s
            .strip_prefix('{')
            .and_then(|t| t.strip_suffix('}'))
            .ok_or_else(bad)?;
        let mut out = VectorClock::new();
        if inner.is_empty() {
            return Ok(out);
        }
        for part in inner.split(',') {
            let (site, v) = part.split_once(':').ok_or_else(bad)?;
            out.set(
                SiteId(site.parse().map_err(|_| bad())?),
                v.parse().map_err(|_| bad())?,
            );
        }
        Ok(out)
    }
}

/// `a` happened before `b`: `b`'s stamp covers `a`'s and they differ.
pub fn happens_before(a: &VectorClock, b: &VectorClock) -> bool {
    a != b && b.dominates(a)
}

/// Neither stamp covers the other.
pub fn concurrent(a: &VectorClock, b: &VectorClock) -> bool {
    !happens_before(a, b) && !happens_before(b, a) && a != b
}

/// One vector clock per peer: what this replica knows each peer has seen.
/// Rows only ever grow.
#[derive(Clone, Debug, Default)]
pub struct MatrixClock {
    rows: BTreeMap<SiteId, VectorClock>,
}

impl MatrixClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds in everything another matrix knows, row by row. Gossip
    /// spreads acknowledgment knowledge transitively this way.
    pub fn merge_from(&mut self, other: &MatrixClock) {
        for (site, row) in &other.rows {
            self.update_row(*site, row);
        }
    }

    pub fn update_row(&mut self, site: SiteId, clock: &VectorClock) {
        self.rows.entry(site).or_default().merge(clock);
    }

    pub fn row(&self, site: SiteId) -> VectorClock {
        self.rows.get(&site).cloned().unwrap_or_default()
    }

    /// True when every listed site is known to have seen `stamp`.
    ///
    /// Callers pass the sites that still participate; crashed sites are
    /// left out, while merely disconnected sites are included so that
    /// stability waits for them.
    pub fn stable(&self, stamp: &VectorClock, sites: impl IntoIterator<Item = SiteId>) -> bool {
        sites.into_iter().all(|s| self.row(s).dominates(stamp))
    }
}

/// `(site, seq)`: the globally unique name of one operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OpId {
    pub site: SiteId,
    pub seq: u64,
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.site, self.seq)
    }
}

/// Identity of one committed flatten: the subtree it rebuilt and how many
/// commits that subtree has seen. Edits record the identities their path
/// crosses so replay can tell live references from forgotten ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatRef {
    pub origin: PosId,
    pub epoch: u64,
}

impl fmt::Display for FlatRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.origin, self.epoch)
    }
}

/// What an operation does.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Insert { pos: PosId, atom: Atom, refs: Vec<FlatRef> },
    Delete { pos: PosId, refs: Vec<FlatRef> },
    /// Heartbeat; advances clocks and nothing else.
    NoOp,
    TxnStart,
    TxnEnd,
    FlattenPropose { root: PosId, content: Vec<Atom>, refs: Vec<FlatRef> },
    FlattenVote { proposal: OpId, yes: bool },
    FlattenDecide { proposal: OpId, commit: bool },
}

/// A stamped, replicated operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operation {
    pub site: SiteId,
    pub seq: u64,
    pub clock: VectorClock,
    pub payload: Payload,
}

impl Operation {
    pub fn id(&self) -> OpId {
        OpId { site: self.site, seq: self.seq }
    }

    pub fn kind(&self) -> &'static str {
        match self.payload {
            Payload::Insert { .. } => "INSERT",
            Payload::Delete { .. } => "DELETE",
            Payload::NoOp => "NOOP",
            Payload::TxnStart => "TXN_START",
            Payload::TxnEnd => "TXN_END",
            Payload::FlattenPropose { .. } => "FLATTEN_PROPOSE",
            Payload::FlattenVote { .. } => "FLATTEN_VOTE",
            Payload::FlattenDecide { .. } => "FLATTEN_DECIDE",
        }
    }

    pub fn is_edit(&self) -> bool {
        matches!(self.payload, Payload::Insert { .. } | Payload::Delete { .. })
    }

    /// The position an edit touches, if this is an edit.
    pub fn edit_target(&self) -> Option<&PosId> {
        match &self.payload {
            Payload::Insert { pos, .. } | Payload::Delete { pos, .. } => Some(pos),
            _ => None,
        }
    }
}

fn write_refs(f: &mut fmt::Formatter<'_>, refs: &[FlatRef]) -> fmt::Result {
    if refs.is_empty() {
        return Ok(());
    }
    write!(f, " refs=")?;
    for (i, r) in refs.iter().enumerate() {
        if i > 0 {
            write!(f, ",")?;
        }
        write!(f, "{r}")?;
    }
    Ok(())
}

impl fmt::Display for Operation {
    /// One line per operation: `site seq vclock kind` plus the payload
    /// arguments. This is the log and trace interchange format.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.site, self.seq, self.clock, self.kind())?;
        match &self.payload {
            Payload::Insert { pos, atom, refs } => {
                write!(f, " {pos} {atom}")?;
                write_refs(f, refs)
            }
            Payload::Delete { pos, refs } => {
                write!(f, " {pos}")?;
                write_refs(f, refs)
            }
            Payload::NoOp | Payload::TxnStart | Payload::TxnEnd => Ok(()),
            Payload::FlattenPropose { root, content, refs } => {
                write!(f, " {root} \"")?;
                for a in content {
                    write!(f, "{a}")?;
                }
                write!(f, "\"")?;
                write_refs(f, refs)
            }
            Payload::FlattenVote { proposal, yes } => {
                write!(f, " {proposal} {}", if *yes { "yes" } else { "no" })
            }
            Payload::FlattenDecide { proposal, commit } => {
                write!(f, " {proposal} {}", if *commit { "commit" } else { "abort" })
            }
        }
    }
}

fn parse_refs(tok: Option<&str>) -> Result<Vec<FlatRef>> {
    let Some(tok) = tok else { return Ok(Vec::new()) };
    let bad = || Error::PreconditionViolated(format!("malformed refs {tok:?}"));
    let list = tok.strip_prefix("refs=").ok_or_else(bad)?;
    let mut out = Vec::new();
    for part in list.split(',') {
        // identifiers contain no '@'
        let (pos, epoch) = part.rsplit_once('@').ok_or_else(bad)?;
        out.push(FlatRef {
            origin: pos.parse()?,
            epoch: epoch.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

fn parse_op_id(tok: &str) -> Result<OpId> {
    let bad = || Error::PreconditionViolated(format!("malformed op id {tok:?}"));
    let (site, seq) = tok.split_once(':').ok_or_else(bad)?;
    Ok(OpId {
        site: SiteId(site.parse().map_err(|_| bad())?),
        seq: seq.parse().map_err(|_| bad())?,
    })
}

impl std::str::FromStr for Operation {
    type Err = Error;

    fn from_str(line: &str) -> Result<Operation> {
        let bad = |why: &str| Error::PreconditionViolated(format!("{why} in op line {line:?}"));
        let mut tok = line.split_whitespace();
        let site = SiteId(
            tok.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("missing site"))?,
        );
        let seq = tok
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("missing seq"))?;
        let clock: VectorClock = tok.next().ok_or_else(|| bad("missing clock"))?.parse()?;
        let kind = tok.next().ok_or_else(|| bad("missing kind"))?;
        let payload = match kind {
            "INSERT" => {
                let pos = tok.next().ok_or_else(|| bad("missing pos"))?.parse()?;
                let atom_tok = tok.next().ok_or_else(|| bad("missing atom"))?;
                let atom = Atom::parse(atom_tok)?;
                Payload::Insert { pos, atom, refs: parse_refs(tok.next())? }
            }
            "DELETE" => {
                let pos = tok.next().ok_or_else(|| bad("missing pos"))?.parse()?;
                Payload::Delete { pos, refs: parse_refs(tok.next())? }
            }
            "NOOP" => Payload::NoOp,
            "TXN_START" => Payload::TxnStart,
            "TXN_END" => Payload::TxnEnd,
            "FLATTEN_PROPOSE" => {
                let root = tok.next().ok_or_else(|| bad("missing root"))?.parse()?;
                let quoted = tok.next().ok_or_else(|| bad("missing content"))?;
                let inner = quoted
                    .strip_prefix('"')
                    .and_then(|t| t.strip_suffix('"'))
                    .ok_or_else(|| bad("unquoted content"))?;
                let content = inner.chars().map(Atom).collect();
                Payload::FlattenPropose { root, content, refs: parse_refs(tok.next())? }
            }
            "FLATTEN_VOTE" => {
                let proposal = parse_op_id(tok.next().ok_or_else(|| bad("missing proposal"))?)?;
                let yes = match tok.next() {
                    Some("yes") => true,
                    Some("no") => false,
                    _ => return Err(bad("missing vote")),
                };
                Payload::FlattenVote { proposal, yes }
            }
            "FLATTEN_DECIDE" => {
                let proposal = parse_op_id(tok.next().ok_or_else(|| bad("missing proposal"))?)?;
                let commit = match tok.next() {
                    Some("commit") => true,
                    Some("abort") => false,
                    _ => return Err(bad("missing outcome")),
                };
                Payload::FlattenDecide { proposal, commit }
            }
            _ => return Err(bad("unknown kind")),
        };
        if tok.next().is_some() {
            return Err(bad("trailing tokens"));
        }
        Ok(Operation { site, seq, clock, payload })
    }
}

/// Holds received operations until their causal dependencies are met.
#[derive(Clone, Debug, Default)]
pub struct DeliveryBuffer {
    pending: Vec<Operation>,
}

impl DeliveryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: Operation) {
        self.pending.push(op);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    fn ready(op: &Operation, clock: &VectorClock) -> bool {
        op.clock.get(op.site) == clock.get(op.site) + 1
            && op
                .clock
                .entries()
                .all(|(s, v)| s == op.site || v <= clock.get(s))
    }

    /// Moves every deliverable operation out of the buffer, advancing
    /// `clock` as each is delivered. Operations that become ready
    /// simultaneously leave in ascending `(site, seq)` order.
    pub fn drain_ready(&mut self, clock: &mut VectorClock) -> Vec<Operation> {
        let mut out = Vec::new();
        loop {
            let next = self
                .pending
                .iter()
                .enumerate()
                .filter(|(_, op)| Self::ready(op, clock))
                .min_by_key(|(_, op)| (op.site, op.seq))
                .map(|(i, _)| i);
            match next {
                Some(i) => {
                    let op = self.pending.remove(i);
                    clock.set(op.site, op.seq);
                    out.push(op);
                }
                None => return out,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vc(entries: &[(u32, u64)]) -> VectorClock {
        let mut c = VectorClock::new();
        for &(s, v) in entries {
            c.set(SiteId(s), v);
        }
        c
    }

    #[test]
    fn dominance_is_happened_before() {
        let a = vc(&[(0, 1)]);
        let b = vc(&[(0, 1), (1, 1)]);
        assert!(happens_before(&a, &b));
        assert!(!happens_before(&b, &a));
        assert!(!concurrent(&a, &b));
    }

    #[test]
    fn independent_stamps_are_concurrent() {
        let a = vc(&[(0, 1)]);
        let b = vc(&[(1, 1)]);
        assert!(concurrent(&a, &b));
        assert!(!happens_before(&a, &b));
        assert!(!happens_before(&b, &a));
    }

    /// Brute-force sanity over random histories: for stamps produced by a
    /// real run, happened-before is transitive and each ordered pair is
    /// exactly one of before, after, or concurrent.
    #[test]
    fn relations_partition_random_histories() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let mut clocks = vec![VectorClock::new(); 3];
            let mut stamps = Vec::new();
            for _ in 0..12 {
                let i = rng.gen_range(0..3usize);
                if rng.gen_bool(0.3) {
                    let j = rng.gen_range(0..3usize);
                    let other = clocks[j].clone();
                    clocks[i].merge(&other);
                }
                clocks[i].increment(SiteId(i as u32));
                stamps.push(clocks[i].clone());
            }
            for a in &stamps {
                for b in &stamps {
                    if a == b {
                        continue;
                    }
                    let rels = [
                        happens_before(a, b),
                        happens_before(b, a),
                        concurrent(a, b),
                    ];
                    assert_eq!(rels.iter().filter(|r| **r).count(), 1);
                    for c in &stamps {
                        if happens_before(a, b) && happens_before(b, c) {
                            assert!(happens_before(a, c));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn buffer_holds_gap_then_delivers_in_order() {
        let mut buf = DeliveryBuffer::new();
        let mut clock = VectorClock::new();
        let op2 = Operation {
            site: SiteId(0),
            seq: 2,
            clock: vc(&[(0, 2)]),
            payload: Payload::NoOp,
        };
        buf.push(op2);
        assert!(buf.drain_ready(&mut clock).is_empty());
        assert_eq!(buf.len(), 1);
        let op1 = Operation {
            site: SiteId(0),
            seq: 1,
            clock: vc(&[(0, 1)]),
            payload: Payload::NoOp,
        };
        buf.push(op1);
        let got = buf.drain_ready(&mut clock);
        assert_eq!(got.iter().map(|o| o.seq).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(clock.get(SiteId(0)), 2);
    }

    #[test]
    fn concurrent_ready_ops_deliver_in_site_order() {
        for flip in [false, true] {
            let mut buf = DeliveryBuffer::new();
            let mut clock = VectorClock::new();
            let a = Operation {
                site: SiteId(0),
                seq: 1,
                clock: vc(&[(0, 1)]),
                payload: Payload::NoOp,
            };
            let b = Operation {
                site: SiteId(1),
                seq: 1,
                clock: vc(&[(1, 1)]),
                payload: Payload::NoOp,
            };
            if flip {
                buf.push(b.clone());
                buf.push(a.clone());
            } else {
                buf.push(a.clone());
                buf.push(b.clone());
            }
            let got = buf.drain_ready(&mut clock);
            assert_eq!(got, vec![a.clone(), b.clone()]);
        }
    }

    #[test]
    fn missing_dependency_from_other_site_blocks() {
        let mut buf = DeliveryBuffer::new();
        let mut clock = VectorClock::new();
        // Depends on 0:1 which has not arrived.
        let op = Operation {
            site: SiteId(1),
            seq: 1,
            clock: vc(&[(0, 1), (1, 1)]),
            payload: Payload::NoOp,
        };
        buf.push(op);
        assert!(buf.drain_ready(&mut clock).is_empty());
        buf.push(Operation {
            site: SiteId(0),
            seq: 1,
            clock: vc(&[(0, 1)]),
            payload: Payload::NoOp,
        });
        let got = buf.drain_ready(&mut clock);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].site, SiteId(0));
    }

    #[test]
    fn matrix_rows_only_grow_and_gate_stability() {
        let mut mc = MatrixClock::new();
        mc.update_row(SiteId(1), &vc(&[(0, 3)]));
        mc.update_row(SiteId(1), &vc(&[(1, 2)]));
        assert_eq!(mc.row(SiteId(1)), vc(&[(0, 3), (1, 2)]));
        let stamp = vc(&[(0, 3)]);
        assert!(mc.stable(&stamp, [SiteId(1)]));
        assert!(!mc.stable(&stamp, [SiteId(1), SiteId(2)]));
        mc.update_row(SiteId(2), &vc(&[(0, 5)]));
        assert!(mc.stable(&stamp, [SiteId(1), SiteId(2)]));
    }

    #[test]
    fn clock_text_round_trip() {
        for s in ["{}", "{0:3}", "{0:3,1:2,5:9}"] {
            let c: VectorClock = s.parse().unwrap();
            assert_eq!(c.to_string(), s);
        }
        assert!("{0:3,}".parse::<VectorClock>().is_err());
        assert!("0:3".parse::<VectorClock>().is_err());
    }

    #[test]
    fn op_line_round_trip() {
        let lines = [
            "0 3 {0:3,1:2} INSERT [100(3,0)] X",
            "1 4 {0:3,1:4} DELETE [10]",
            "2 1 {2:1} NOOP",
            "0 5 {0:5} TXN_START",
            "0 6 {0:6} TXN_END",
            "0 9 {0:9} FLATTEN_PROPOSE [] \"abc\"",
            "1 2 {0:9,1:2} FLATTEN_VOTE 0:9 yes",
            "0 10 {0:10,1:2} FLATTEN_DECIDE 0:9 commit",
            "0 7 {0:7} INSERT [01(7,0)] Z refs=[]@1",
            "0 8 {0:8} DELETE [0(7,0)] refs=[]@1,[0]@2",
        ];
        for line in lines {
            let op: Operation = line.parse().unwrap();
            assert_eq!(op.to_string(), line, "round trip of {line:?}");
        }
        assert!("0 1 {0:1} SPLICE [0]".parse::<Operation>().is_err());
        assert!("0 1 {0:1} INSERT [0]".parse::<Operation>().is_err());
    }
}
