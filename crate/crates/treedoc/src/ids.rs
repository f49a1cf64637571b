//! Position identifiers.
//!
//! An atom's identifier is the path from the tree root to its node: a
//! sequence of branch directions, where a component additionally carries a
//! disambiguator when it names a side node (one of several nodes inserted
//! concurrently at the same position). The root is the empty path. A side
//! node hanging directly off the root is named by a bare disambiguator
//! with no direction.
//!
//! Identifiers order by infix position in the tree. That order is total
//! over the identifiers that can coexist in one document; it is exposed as
//! [`PosId::compare`] rather than `Ord` because a bare component and a
//! disambiguated component at the same position compare equal (they alias
//! the same slot before and after side-node promotion), which is not a
//! lawful `Eq`.

use std::cmp::Ordering;
use std::fmt;

use crate::{Error, Result};

/// Totally ordered identifier of a participating site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId(pub u32);

impl From<u32> for SiteId {
    fn from(v: u32) -> Self {
        SiteId(v)
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Tie-breaker attached to every node created by an insert.
///
/// Ordered by counter first, then by site, so that one site's later
/// inserts sort after its earlier ones no matter how sites interleave.
/// The counter is the initiating site's own clock entry at initiation
/// time, which makes the pair unique and never reissued.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Disambiguator {
    pub counter: u64,
    pub site: SiteId,
}

impl Disambiguator {
    pub fn new(counter: u64, site: SiteId) -> Self {
        Disambiguator { counter, site }
    }
}

impl fmt::Display for Disambiguator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.counter, self.site)
    }
}

/// Branch direction inside the binary tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dir {
    Left = 0,
    Right = 1,
}

impl Dir {
    pub fn bit(self) -> u8 {
        match self {
            Dir::Left => 0,
            Dir::Right => 1,
        }
    }
}

/// One step of a path: a direction, plus the side-node disambiguator when
/// the step names a side node rather than the main node at that position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PathComponent {
    pub dir: Dir,
    pub disamb: Option<Disambiguator>,
}

impl PathComponent {
    pub fn plain(dir: Dir) -> Self {
        PathComponent { dir, disamb: None }
    }

    pub fn side(dir: Dir, d: Disambiguator) -> Self {
        PathComponent { dir, disamb: Some(d) }
    }
}

/// Identifier of a position in the tree.
///
/// Equality and hashing are structural. Document order is [`compare`].
///
/// [`compare`]: PosId::compare
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct PosId {
    /// Set when the path starts at a side node of the root position.
    root_disamb: Option<Disambiguator>,
    steps: Vec<PathComponent>,
}

/// A path component in the uniform view used for comparisons: every path
/// conceptually begins with a root component that carries no direction.
#[derive(Clone, Copy)]
enum Comp {
    Root(Option<Disambiguator>),
    Step(Dir, Option<Disambiguator>),
}

impl PosId {
    /// The root position, `[]`.
    pub fn root() -> Self {
        PosId::default()
    }

    /// A side node hanging directly off the root position.
    pub fn root_side(d: Disambiguator) -> Self {
        PosId { root_disamb: Some(d), steps: Vec::new() }
    }

    pub fn from_steps(steps: Vec<PathComponent>) -> Self {
        PosId { root_disamb: None, steps }
    }

    /// Convenience for tests and fixtures: a path of bare directions,
    /// `0` for left and `1` for right.
    pub fn from_bits(bits: &[u8]) -> Self {
        let steps = bits
            .iter()
            .map(|b| PathComponent::plain(if *b == 0 { Dir::Left } else { Dir::Right }))
            .collect();
        PosId { root_disamb: None, steps }
    }

    pub fn root_disamb(&self) -> Option<Disambiguator> {
        self.root_disamb
    }

    pub fn steps(&self) -> &[PathComponent] {
        &self.steps
    }

    /// Number of components, counting a root disambiguator as one.
    pub fn len(&self) -> usize {
        self.steps.len() + usize::from(self.root_disamb.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.root_disamb.is_none() && self.steps.is_empty()
    }

    /// Extends the path with one child step.
    pub fn child(&self, dir: Dir, disamb: Option<Disambiguator>) -> PosId {
        let mut steps = self.steps.clone();
        steps.push(PathComponent { dir, disamb });
        PosId { root_disamb: self.root_disamb, steps }
    }

    /// The same position with its final component naming side node `d`.
    /// On the root path this names a root-level side node.
    pub fn with_side(&self, d: Disambiguator) -> PosId {
        let mut out = self.clone();
        match out.steps.last_mut() {
            Some(last) => last.disamb = Some(d),
            None => out.root_disamb = Some(d),
        }
        out
    }

    /// The position that contains this identifier's node: the final
    /// component stripped of its disambiguator.
    pub fn container(&self) -> PosId {
        let mut out = self.clone();
        match out.steps.last_mut() {
            Some(last) => last.disamb = None,
            None => out.root_disamb = None,
        }
        out
    }

    /// Disambiguator of the final component, if any.
    pub fn final_disamb(&self) -> Option<Disambiguator> {
        match self.steps.last() {
            Some(last) => last.disamb,
            None => self.root_disamb,
        }
    }

    /// The parent position, or `None` for the root.
    pub fn parent(&self) -> Option<PosId> {
        let mut out = self.clone();
        if out.steps.pop().is_some() {
            Some(out)
        } else if out.root_disamb.take().is_some() {
            Some(out)
        } else {
            None
        }
    }

    fn comps(&self) -> impl Iterator<Item = Comp> + '_ {
        std::iter::once(Comp::Root(self.root_disamb))
            .chain(self.steps.iter().map(|s| Comp::Step(s.dir, s.disamb)))
    }

    fn comp_count(&self) -> usize {
        1 + self.steps.len()
    }

    /// Infix document order.
    ///
    /// Walking component by component: differing directions order left
    /// before right; at the same direction, differing disambiguators
    /// order by disambiguator. A bare component against a disambiguated
    /// one is treated as the unique main node at that position and the
    /// walk continues. When one identifier is a prefix of the other, the
    /// longer one sorts before its ancestor if it continues left, after
    /// if it continues right.
    pub fn compare(&self, other: &PosId) -> Ordering {
        for pair in self.comps().zip(other.comps()) {
            match pair {
                (Comp::Root(a), Comp::Root(b)) => {
                    if let (Some(da), Some(db)) = (a, b) {
                        if da != db {
                            return da.cmp(&db);
                        }
                    }
                }
                (Comp::Step(d1, a), Comp::Step(d2, b)) => {
                    if d1 != d2 {
                        return d1.cmp(&d2);
                    }
                    if let (Some(da), Some(db)) = (a, b) {
                        if da != db {
                            return da.cmp(&db);
                        }
                    }
                }
                // Root components only pair with root components.
                _ => unreachable!("misaligned path comparison"),
            }
        }
        let (n, m) = (self.comp_count(), other.comp_count());
        match n.cmp(&m) {
            Ordering::Equal => Ordering::Equal,
            Ordering::Less => {
                // `self` is the ancestor; `other` continues below it.
                match other.steps[n - 1].dir {
                    Dir::Right => Ordering::Less,
                    Dir::Left => Ordering::Greater,
                }
            }
            Ordering::Greater => match self.steps[m - 1].dir {
                Dir::Right => Ordering::Greater,
                Dir::Left => Ordering::Less,
            },
        }
    }

    fn comp_matches(a: Comp, b: Comp) -> bool {
        match (a, b) {
            (Comp::Root(x), Comp::Root(y)) => match (x, y) {
                (Some(dx), Some(dy)) => dx == dy,
                _ => true,
            },
            (Comp::Step(d1, x), Comp::Step(d2, y)) => {
                d1 == d2
                    && match (x, y) {
                        (Some(dx), Some(dy)) => dx == dy,
                        _ => true,
                    }
            }
            _ => false,
        }
    }

    /// True when `self` is a strict ancestor of `other`.
    pub fn is_ancestor_of(&self, other: &PosId) -> bool {
        self.comp_count() < other.comp_count()
            && self
                .comps()
                .zip(other.comps())
                .all(|(a, b)| Self::comp_matches(a, b))
    }

    /// True when `other` lies in the subtree rooted at `self`, including
    /// `self`'s own position and its side nodes.
    pub fn contains(&self, other: &PosId) -> bool {
        self.comp_count() <= other.comp_count()
            && self
                .comps()
                .zip(other.comps())
                .all(|(a, b)| Self::comp_matches(a, b))
    }

    /// Rough per-atom metadata cost of this identifier, in bytes: one per
    /// step plus twelve per disambiguator carried.
    pub fn metadata_bytes(&self) -> usize {
        let disambs = usize::from(self.root_disamb.is_some())
            + self.steps.iter().filter(|s| s.disamb.is_some()).count();
        self.steps.len() + 12 * disambs
    }
}

impl fmt::Display for PosId {
    /// Canonical text form: components joined inside brackets, `0`/`1`
    /// for plain steps, `0(c,s)`/`1(c,s)` for side steps, a bare `(c,s)`
    /// for a root-level side node. The root is `[]`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        if let Some(d) = self.root_disamb {
            write!(f, "{d}")?;
        }
        for s in &self.steps {
            write!(f, "{}", s.dir.bit())?;
            if let Some(d) = s.disamb {
                write!(f, "{d}")?;
            }
        }
        write!(f, "]")
    }
}

impl std::str::FromStr for PosId {
    type Err = Error;

    fn from_str(s: &str) -> Result<PosId> {
        let bad = || Error::PreconditionViolated(format!("malformed identifier {s:?}"));
        let inner = s
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .ok_or_else(bad)?;
        let mut chars = inner.chars().peekable();
        let mut out = PosId::root();
        let mut first = true;
        while let Some(&c) = chars.peek() {
            let dir = match c {
                '0' => Some(Dir::Left),
                '1' => Some(Dir::Right),
                '(' if first => None,
                _ => return Err(bad()),
            };
            if dir.is_some() {
                chars.next();
            }
            let disamb = if chars.peek() == Some(&'(') {
                chars.next();
                let mut counter = String::new();
                while chars.peek().is_some_and(|c| c.is_ascii_digit()) {
                    counter.push(chars.next().unwrap());
                }
                if chars.next() != Some(',') {
                    return Err(bad());
                }
                let mut site = String::new();
                while chars.peek().is_some_and(|c| c.is_ascii_digit()) {
                    site.push(chars.next().unwrap());
                }
                if chars.next() != Some(')') || counter.is_empty() || site.is_empty() {
                    return Err(bad());
                }
                Some(Disambiguator::new(
                    counter.parse().map_err(|_| bad())?,
                    SiteId(site.parse().map_err(|_| bad())?),
                ))
            } else {
                None
            };
            match dir {
                Some(dir) => out.steps.push(PathComponent { dir, disamb }),
                None => out.root_disamb = disamb,
            }
            first = false;
        }
        Ok(out)
    }
}

/// Boundary for fresh-identifier allocation: a real neighbor, or one of
/// the virtual sentinels enclosing the whole document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Anchor {
    Begin,
    At(PosId),
    End,
}

impl Anchor {
    fn cmp_anchor(&self, other: &Anchor) -> Ordering {
        use Anchor::*;
        match (self, other) {
            (Begin, Begin) | (End, End) => Ordering::Equal,
            (Begin, _) | (_, End) => Ordering::Less,
            (End, _) | (_, Begin) => Ordering::Greater,
            (At(a), At(b)) => a.compare(b),
        }
    }

}

/// Allocates an identifier strictly between `prev` and `next`.
///
/// `occupied` must list every position present in the document, in infix
/// order, including empty nodes; the result is guaranteed unoccupied. The
/// final component of the result carries `d`, the initiator's fresh
/// disambiguator.
///
/// The allocation walks toward the left end of the gap: if any occupied
/// position lies strictly inside `(prev, next)`, the first such position
/// becomes the new right boundary. Once the gap is empty, the identifier
/// extends whichever boundary is the deeper node: below-left of the right
/// boundary when the left boundary is its ancestor (or virtual), below-
/// right of the left boundary otherwise.
pub fn new_uid(
    prev: &Anchor,
    next: &Anchor,
    occupied: &[PosId],
    d: Disambiguator,
) -> Result<PosId> {
    if prev.cmp_anchor(next) != Ordering::Less {
        return Err(Error::PreconditionViolated(format!(
            "new_uid boundaries out of order: {prev:?} !< {next:?}"
        )));
    }
    let inside = |id: &PosId| {
        let after_prev = match prev {
            Anchor::Begin => true,
            Anchor::At(p) => p.compare(id) == Ordering::Less,
            Anchor::End => false,
        };
        let before_next = match next {
            Anchor::Begin => false,
            Anchor::At(f) => id.compare(f) == Ordering::Less,
            Anchor::End => true,
        };
        after_prev && before_next
    };
    let mid = occupied.iter().find(|id| inside(id));
    let right = match (mid, next) {
        (Some(m), _) => Anchor::At(m.clone()),
        (None, n) => n.clone(),
    };
    let id = match (prev, &right) {
        (Anchor::Begin, Anchor::End) => PosId::root_side(d),
        (Anchor::Begin, Anchor::At(f)) => f.child(Dir::Left, Some(d)),
        (Anchor::At(p), Anchor::End) => p.child(Dir::Right, Some(d)),
        (Anchor::At(p), Anchor::At(f)) => {
            if p.is_ancestor_of(f) {
                f.child(Dir::Left, Some(d))
            } else {
                p.child(Dir::Right, Some(d))
            }
        }
        _ => unreachable!("boundaries were ordered"),
    };
    Ok(id)
}
