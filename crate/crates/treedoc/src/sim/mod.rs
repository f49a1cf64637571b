//! Deterministic multi-site simulation harness.
//!
//! A [`World`] owns every replica and runs a scripted or generated event
//! sequence against them. There is no real network: operations travel by
//! explicit `exchange` events that ship each side's operation log delta to
//! the other, and causal delivery falls out of the per-site buffers. All
//! state lives in ordered maps and every event handler visits sites in
//! ascending id order, so a given event sequence produces bit-identical
//! worlds on every run.
//!
//! Fault injection is part of the event vocabulary: sites disconnect and
//! reconnect (partitions), crash (permanent, with their unsent operations
//! counted as lost), and recover by cloning a donor replica under a fresh
//! site id. A `check` event compares every pair of replicas that claim the
//! same delivered set; a quiescent world must collapse to a single such
//! group with byte-identical renderings.
//!
//! Flatten proposals run their two-phase commitment inside the world:
//! applying a proposal mints the site's vote, the coordinator collects
//! votes and mints the decision, and a site that has voted yes defers its
//! own edit intents until the decision arrives. With
//! [`WorldConfig::false_suspicion`] set, the coordinator instead excludes
//! disconnected participants from the tally, which is exactly the unsafe
//! failure-detector shortcut that loses concurrent edits; the simulator
//! counts those drops rather than hiding them.

pub mod fuzz;
pub mod multilog;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::causal::{
    concurrent, DeliveryBuffer, FlatRef, MatrixClock, OpId, Operation, Payload, VectorClock,
};
use crate::ids::{Disambiguator, PosId, SiteId};
use crate::structure::{regions_overlap, Proposal, ProposalRound};
use crate::tree::{Applied, Atom, Treedoc};
use crate::txn::TxnTracker;
use crate::{Error, Result};

/// Connectivity of one site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Connected,
    /// Partitioned away: still editing locally, but no exchanges.
    Disconnected,
    /// Permanently gone. Never edits or exchanges again.
    Crashed,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Connected => "connected",
            Status::Disconnected => "disconnected",
            Status::Crashed => "crashed",
        };
        f.write_str(s)
    }
}

/// One scripted occurrence in a world.
///
/// The textual form of each variant is one line of a scenario file; see
/// [`parse_scenario`]. `Display` and `FromStr` round-trip exactly, which
/// is what makes fuzzer traces replayable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    /// Type `ch` at visible position `index` of `site`'s document.
    Insert { site: SiteId, index: usize, ch: char },
    /// Erase the atom at visible position `index` of `site`'s document.
    Delete { site: SiteId, index: usize },
    /// Bidirectional anti-entropy session between two connected sites.
    Exchange { a: SiteId, b: SiteId },
    Disconnect { site: SiteId },
    Reconnect { site: SiteId },
    /// Permanent failure. Operations nobody else has seen are lost.
    Crash { site: SiteId },
    /// Bring up a replacement for a crashed site by copying `donor`.
    Recover { site: SiteId, donor: SiteId },
    /// `site` proposes flattening the subtree at `root`.
    Flatten { site: SiteId, root: PosId },
    TxnBegin { site: SiteId },
    TxnEnd { site: SiteId },
    /// Heartbeat at every connected site; may trigger an automatic
    /// flatten proposal when a depth threshold is configured.
    Tick,
    /// Run tombstone removal and side promotion at every live site.
    Compact,
    /// Compare replicas with equal delivered sets and record the result.
    Check,
}

impl Event {
    fn intent_site(&self) -> Option<SiteId> {
        match self {
            Event::Insert { site, .. }
            | Event::Delete { site, .. }
            | Event::Flatten { site, .. }
            | Event::TxnBegin { site }
            | Event::TxnEnd { site } => Some(*site),
            _ => None,
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Insert { site, index, ch } => write!(f, "insert {site} {index} {ch}"),
            Event::Delete { site, index } => write!(f, "delete {site} {index}"),
            Event::Exchange { a, b } => write!(f, "exchange {a} {b}"),
            Event::Disconnect { site } => write!(f, "disconnect {site}"),
            Event::Reconnect { site } => write!(f, "reconnect {site}"),
            Event::Crash { site } => write!(f, "crash {site}"),
            Event::Recover { site, donor } => write!(f, "recover {site} {donor}"),
            Event::Flatten { site, root } => write!(f, "flatten {site} {root}"),
            Event::TxnBegin { site } => write!(f, "txn-begin {site}"),
            Event::TxnEnd { site } => write!(f, "txn-end {site}"),
            Event::Tick => f.write_str("tick"),
            Event::Compact => f.write_str("compact"),
            Event::Check => f.write_str("check"),
        }
    }
}

fn next_token<'a>(it: &mut impl Iterator<Item = &'a str>, what: &str) -> std::result::Result<&'a str, String> {
    it.next().ok_or_else(|| format!("missing {what}"))
}

fn parse_site<'a>(it: &mut impl Iterator<Item = &'a str>, what: &str) -> std::result::Result<SiteId, String> {
    let tok = next_token(it, what)?;
    tok.parse::<u32>().map(SiteId).map_err(|_| format!("{what} `{tok}` is not a site id"))
}

fn parse_index<'a>(it: &mut impl Iterator<Item = &'a str>) -> std::result::Result<usize, String> {
    let tok = next_token(it, "index")?;
    tok.parse::<usize>().map_err(|_| format!("index `{tok}` is not a number"))
}

impl FromStr for Event {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Event, String> {
        let mut it = s.split_whitespace();
        let kw = next_token(&mut it, "event keyword")?;
        let ev = match kw {
            "insert" => {
                let site = parse_site(&mut it, "site")?;
                let index = parse_index(&mut it)?;
                let tok = next_token(&mut it, "atom")?;
                let atom = Atom::parse(tok).map_err(|e| e.to_string())?;
                Event::Insert { site, index, ch: atom.0 }
            }
            "delete" => Event::Delete { site: parse_site(&mut it, "site")?, index: parse_index(&mut it)? },
            "exchange" => Event::Exchange { a: parse_site(&mut it, "site a")?, b: parse_site(&mut it, "site b")? },
            "disconnect" => Event::Disconnect { site: parse_site(&mut it, "site")? },
            "reconnect" => Event::Reconnect { site: parse_site(&mut it, "site")? },
            "crash" => Event::Crash { site: parse_site(&mut it, "site")? },
            "recover" => Event::Recover { site: parse_site(&mut it, "crashed site")?, donor: parse_site(&mut it, "donor site")? },
            "flatten" => {
                let site = parse_site(&mut it, "site")?;
                let tok = next_token(&mut it, "subtree position")?;
                let root = tok.parse::<PosId>().map_err(|e| e.to_string())?;
                Event::Flatten { site, root }
            }
            "txn-begin" => Event::TxnBegin { site: parse_site(&mut it, "site")? },
            "txn-end" => Event::TxnEnd { site: parse_site(&mut it, "site")? },
            "tick" => Event::Tick,
            "compact" => Event::Compact,
            "check" => Event::Check,
            other => return Err(format!("unknown event `{other}`")),
        };
        if let Some(extra) = it.next() {
            return Err(format!("trailing token `{extra}` after `{kw}` event"));
        }
        Ok(ev)
    }
}

/// A parsed scenario: the number of initial sites and the event script.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub sites: u32,
    pub events: Vec<Event>,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sites {}", self.sites)?;
        for ev in &self.events {
            writeln!(f, "{ev}")?;
        }
        Ok(())
    }
}

/// Parses the scenario text format: a `sites N` header followed by one
/// event per line. Blank lines and `#` comments are skipped. Errors carry
/// the 1-based line number.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut sites: Option<u32> = None;
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let ln = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if sites.is_none() {
            let rest = line.strip_prefix("sites").ok_or_else(|| Error::ParseError {
                line: ln,
                msg: format!("expected `sites N` header, found `{line}`"),
            })?;
            let n = rest.trim().parse::<u32>().map_err(|_| Error::ParseError {
                line: ln,
                msg: format!("`{}` is not a site count", rest.trim()),
            })?;
            if n == 0 {
                return Err(Error::ParseError { line: ln, msg: "need at least one site".into() });
            }
            sites = Some(n);
            continue;
        }
        let ev = line.parse::<Event>().map_err(|msg| Error::ParseError { line: ln, msg })?;
        events.push(ev);
    }
    let sites = sites.ok_or(Error::ParseError { line: 1, msg: "missing `sites N` header".into() })?;
    Ok(Scenario { sites, events })
}

/// Knobs that change world behavior but not the event vocabulary.
#[derive(Clone, Debug)]
pub struct WorldConfig {
    /// Propose flattening the whole document on a heartbeat once the
    /// deepest physical path exceeds this.
    pub auto_flatten_depth: Option<usize>,
    /// Heartbeats a coordinator waits after an abort before it may
    /// propose again.
    pub flatten_cooldown: u64,
    /// Model an unreliable failure detector: the coordinator excludes
    /// disconnected participants from the vote instead of aborting.
    /// Unsafe by design; concurrent edits at excluded sites are lost
    /// (and counted).
    pub false_suspicion: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { auto_flatten_depth: None, flatten_cooldown: 3, false_suspicion: false }
    }
}

/// One applied edit batch: which positions it touched and the clocks of
/// its operations. A flatten voter scans these for edits concurrent with
/// a proposal; a whole transaction conflicts if any of its operations
/// does.
#[derive(Clone, Debug)]
struct EditRecord {
    targets: Vec<PosId>,
    clocks: Vec<VectorClock>,
}

/// Voter-side record of a flatten round between applying the proposal
/// and applying the decision. Carries everything needed to replay the
/// commit locally.
#[derive(Clone, Debug)]
struct VoterRound {
    root: PosId,
    content: Vec<Atom>,
    refs: Vec<FlatRef>,
    my_vote: bool,
}

/// One replica plus its network-facing bookkeeping.
#[derive(Clone, Debug)]
pub struct SiteState {
    pub id: SiteId,
    status: Status,
    doc: Treedoc,
    /// The causal frontier of operations applied to the replica. Every
    /// mint stamps this clock, so a stamp never claims an operation the
    /// minter has not applied.
    clock: VectorClock,
    /// Counts every operation taken out of the delivery buffer, staged
    /// transaction operations included; gates buffer readiness only.
    delivered: VectorClock,
    /// Own operation counter; also the disambiguator counter source.
    seq: u64,
    mc: MatrixClock,
    buffer: DeliveryBuffer,
    txn: TxnTracker,
    /// Everything this site knows, one contiguous log per origin. The
    /// exchange delta and crash-recovery donor state both come from here.
    store: BTreeMap<SiteId, Vec<Operation>>,
    edit_history: Vec<EditRecord>,
    /// Rounds this site has voted in that are not yet decided.
    open_rounds: BTreeMap<OpId, VoterRound>,
    /// Rounds this site coordinates.
    coordinated: BTreeMap<OpId, ProposalRound>,
    /// Edit intents issued while this site was prepared (voted yes on an
    /// undecided round); flushed when the decision arrives.
    deferred: VecDeque<Event>,
    batch_targets: Vec<PosId>,
    batch_clocks: Vec<VectorClock>,
    cooldown_until: u64,
}

impl SiteState {
    fn new(id: SiteId) -> Self {
        SiteState {
            id,
            status: Status::Connected,
            doc: Treedoc::new(),
            clock: VectorClock::new(),
            delivered: VectorClock::new(),
            seq: 0,
            mc: MatrixClock::new(),
            buffer: DeliveryBuffer::new(),
            txn: TxnTracker::new(),
            store: BTreeMap::new(),
            edit_history: Vec::new(),
            open_rounds: BTreeMap::new(),
            coordinated: BTreeMap::new(),
            deferred: VecDeque::new(),
            batch_targets: Vec::new(),
            batch_clocks: Vec::new(),
            cooldown_until: 0,
        }
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn doc(&self) -> &Treedoc {
        &self.doc
    }

    pub fn clock(&self) -> &VectorClock {
        &self.clock
    }

    /// The visible document text at this replica.
    pub fn rendering(&self) -> String {
        self.doc.contents()
    }

    pub fn live(&self) -> Vec<(PosId, Atom)> {
        self.doc.live_atoms()
    }

    /// Every operation this site knows, ordered by origin then sequence.
    pub fn oplog(&self) -> Vec<Operation> {
        self.store.values().flatten().cloned().collect()
    }

    pub fn deferred_len(&self) -> usize {
        self.deferred.len()
    }

    /// Whether this site currently holds its own transaction open.
    pub fn txn_open(&self) -> bool {
        self.txn.local_open()
    }

    /// How many flatten rounds this site is currently coordinating.
    pub fn coordinating(&self) -> usize {
        self.coordinated.len()
    }

    /// Yes-voter in an undecided round: own edits must wait.
    fn prepared(&self) -> bool {
        self.open_rounds.values().any(|r| r.my_vote)
    }

    fn take_ready(&mut self) -> Vec<Operation> {
        let SiteState { buffer, delivered, .. } = self;
        buffer.drain_ready(delivered)
    }

    /// Accepts one shipped operation into the store and delivery buffer.
    /// Anything already known or out of origin order is dropped; the
    /// exchange delta never produces the latter unless an operation was
    /// deliberately discarded by fault injection.
    fn ingest(&mut self, op: Operation) {
        let log = self.store.entry(op.site).or_default();
        if op.seq != log.len() as u64 + 1 {
            return;
        }
        log.push(op.clone());
        self.buffer.push(op);
    }
}

/// Aggregate outcome of one run, printed as a single JSON object.
#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub sites: usize,
    pub events: u64,
    pub checks_passed: u64,
    pub checks_failed: u64,
    pub converged: bool,
    pub final_rendering: String,
    pub lost_ops: u64,
}

/// Structural health of the world's replicas.
#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    /// Deepest identifier of a live atom, in tree levels.
    pub max_path_len: usize,
    pub avg_path_len: f64,
    /// Tombstone share of all materialized nodes.
    pub nil_ratio: f64,
    pub metadata_bytes_per_atom: f64,
    pub lost_ops: u64,
}

/// The whole simulated system: every site, the shared configuration, and
/// the counters a run reports at the end.
pub struct World {
    sites: BTreeMap<SiteId, SiteState>,
    next_site: u32,
    config: WorldConfig,
    events: u64,
    ticks: u64,
    checks_passed: u64,
    checks_failed: u64,
    first_divergence: Option<String>,
    lost_ids: BTreeSet<OpId>,
    lost_unsent: u64,
}

impl World {
    pub fn new(sites: u32) -> World {
        World::with_config(sites, WorldConfig::default())
    }

    pub fn with_config(sites: u32, config: WorldConfig) -> World {
        let sites_map: BTreeMap<SiteId, SiteState> =
            (0..sites).map(|i| (SiteId(i), SiteState::new(SiteId(i)))).collect();
        World {
            sites: sites_map,
            next_site: sites,
            config,
            events: 0,
            ticks: 0,
            checks_passed: 0,
            checks_failed: 0,
            first_divergence: None,
            lost_ids: BTreeSet::new(),
            lost_unsent: 0,
        }
    }

    /// Builds a world and applies every event of a scenario.
    pub fn run(scenario: &Scenario) -> Result<World> {
        World::run_with_config(scenario, WorldConfig::default())
    }

    pub fn run_with_config(scenario: &Scenario, config: WorldConfig) -> Result<World> {
        let mut w = World::with_config(scenario.sites, config);
        for ev in &scenario.events {
            w.apply(ev.clone())?;
        }
        Ok(w)
    }

    pub fn site(&self, id: SiteId) -> &SiteState {
        self.sites.get(&id).expect("no such site")
    }

    pub fn sites(&self) -> impl Iterator<Item = &SiteState> {
        self.sites.values()
    }

    /// Ids of every site that has not crashed, ascending.
    pub fn live_site_ids(&self) -> Vec<SiteId> {
        self.sites
            .values()
            .filter(|s| s.status != Status::Crashed)
            .map(|s| s.id)
            .collect()
    }

    pub fn lost_ops(&self) -> u64 {
        self.lost_ids.len() as u64 + self.lost_unsent
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    /// Applies one event. An event that is not legal in the current
    /// state (exchanging with a crashed site, recovering a live one, and
    /// so on) returns [`Error::IllegalEvent`] and the run is invalid.
    pub fn apply(&mut self, event: Event) -> Result<()> {
        self.events += 1;
        match event {
            Event::Insert { .. }
            | Event::Delete { .. }
            | Event::Flatten { .. }
            | Event::TxnBegin { .. }
            | Event::TxnEnd { .. } => self.apply_intent(event, false)?,
            Event::Exchange { a, b } => self.do_exchange(a, b)?,
            Event::Disconnect { site } => {
                let s = self.site_mut(site)?;
                if s.status != Status::Connected {
                    return Err(Error::IllegalEvent(format!("site {site} is {}", s.status)));
                }
                s.status = Status::Disconnected;
            }
            Event::Reconnect { site } => {
                let s = self.site_mut(site)?;
                if s.status != Status::Disconnected {
                    return Err(Error::IllegalEvent(format!("site {site} is {}", s.status)));
                }
                s.status = Status::Connected;
                self.flush_deferred(site)?;
            }
            Event::Crash { site } => self.do_crash(site)?,
            Event::Recover { site, donor } => self.do_recover(site, donor)?,
            Event::Tick => self.do_tick()?,
            Event::Compact => self.do_compact(),
            Event::Check => self.do_check(),
        }
        self.evaluate_rounds()?;
        Ok(())
    }

    // ----- reading the world ---------------------------------------------

    pub fn summary(&self) -> Summary {
        let alive: Vec<&SiteState> =
            self.sites.values().filter(|s| s.status != Status::Crashed).collect();
        Summary {
            sites: alive.len(),
            events: self.events,
            checks_passed: self.checks_passed,
            checks_failed: self.checks_failed,
            converged: self.convergence().0,
            final_rendering: alive.first().map(|s| s.rendering()).unwrap_or_default(),
            lost_ops: self.lost_ops(),
        }
    }

    pub fn metrics(&self) -> Metrics {
        let mut max_len = 0usize;
        let mut len_sum = 0u64;
        let mut meta_sum = 0u64;
        let mut atoms = 0u64;
        let mut nodes = 0usize;
        let mut tombstones = 0usize;
        for s in self.sites.values().filter(|s| s.status != Status::Crashed) {
            let stats = s.doc.physical_stats();
            nodes += stats.nodes;
            tombstones += stats.tombstones;
            for (id, _) in s.doc.live_atoms() {
                let len = id.steps().len() + 1;
                max_len = max_len.max(len);
                len_sum += len as u64;
                meta_sum += id.metadata_bytes() as u64;
                atoms += 1;
            }
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        Metrics {
            max_path_len: max_len,
            avg_path_len: ratio(len_sum, atoms),
            nil_ratio: ratio(tombstones as u64, nodes as u64),
            metadata_bytes_per_atom: ratio(meta_sum, atoms),
            lost_ops: self.lost_ops(),
        }
    }

    /// Whether every live replica has delivered the same set and renders
    /// the same document, with a description of the first difference.
    pub fn convergence(&self) -> (bool, Option<String>) {
        let alive: Vec<&SiteState> =
            self.sites.values().filter(|s| s.status != Status::Crashed).collect();
        let Some(first) = alive.first() else { return (true, None) };
        for other in &alive[1..] {
            if let Some(w) = diff_sites(first, other, true) {
                return (false, Some(w));
            }
        }
        (true, None)
    }

    pub fn divergence_witness(&self) -> Option<String> {
        self.convergence().1
    }

    /// The first failed in-run check, if any.
    pub fn first_divergence(&self) -> Option<&str> {
        self.first_divergence.as_deref()
    }

    // ----- intents (events a site initiates on its own document) ---------

    fn site_mut(&mut self, id: SiteId) -> Result<&mut SiteState> {
        self.sites
            .get_mut(&id)
            .ok_or_else(|| Error::IllegalEvent(format!("unknown site {id}")))
    }

    fn apply_intent(&mut self, ev: Event, flushing: bool) -> Result<()> {
        let sid = ev.intent_site().expect("intent event");
        let site = self.site_mut(sid)?;
        if site.status == Status::Crashed {
            return Err(Error::IllegalEvent(format!("site {sid} has crashed")));
        }
        if !flushing && site.prepared() {
            site.deferred.push_back(ev);
            return Ok(());
        }
        match ev {
            Event::Insert { index, ch, .. } => {
                if ch.is_whitespace() || ch.is_control() {
                    return Err(Error::IllegalEvent(format!("unprintable atom {ch:?}")));
                }
                let site = self.site(sid);
                let index = if flushing { index.min(site.doc.visible_len()) } else { index };
                let (prev, next) = site.doc.neighbors_for_insert(index)?;
                let d = Disambiguator::new(site.seq + 1, sid);
                let pos = site.doc.new_uid(&prev, &next, d)?;
                let refs = site.doc.flat_refs_for(&pos);
                self.mint_apply(sid, Payload::Insert { pos, atom: Atom(ch), refs })?;
            }
            Event::Delete { index, .. } => {
                let site = self.site(sid);
                if flushing && index >= site.doc.visible_len() {
                    // The atom this intent was aimed at is gone; drop it.
                    return Ok(());
                }
                let pos = site.doc.uid_at_visible_index(index)?;
                let refs = site.doc.flat_refs_for(&pos);
                self.mint_apply(sid, Payload::Delete { pos, refs })?;
            }
            Event::TxnBegin { .. } => {
                self.site_mut(sid)?.txn.begin_local()?;
                self.mint_apply(sid, Payload::TxnStart)?;
            }
            Event::TxnEnd { .. } => {
                self.site_mut(sid)?.txn.end_local()?;
                let op = self.mint_apply(sid, Payload::TxnEnd)?;
                let site = self.sites.get_mut(&sid).unwrap();
                site.batch_clocks.push(op.clock.clone());
                let targets = std::mem::take(&mut site.batch_targets);
                let clocks = std::mem::take(&mut site.batch_clocks);
                if !targets.is_empty() {
                    site.edit_history.push(EditRecord { targets, clocks });
                }
            }
            Event::Flatten { root, .. } => {
                let site = self.site(sid);
                if site.txn.local_open() {
                    return Err(Error::IllegalEvent(
                        "flatten proposal inside an open transaction".into(),
                    ));
                }
                let content = site.doc.region_content(&root);
                let refs = site.doc.flat_refs_for(&root);
                let participants: Vec<SiteId> = self.live_site_ids();
                let pid = OpId { site: sid, seq: self.site(sid).seq + 1 };
                let mut stamp = self.site(sid).clock.clone();
                stamp.set(sid, pid.seq);
                let proposal = Proposal {
                    id: pid,
                    root: root.clone(),
                    content: content.clone(),
                    stamp,
                    refs: refs.clone(),
                    participants,
                };
                self.sites
                    .get_mut(&sid)
                    .unwrap()
                    .coordinated
                    .insert(pid, ProposalRound::new(proposal));
                self.mint_apply(sid, Payload::FlattenPropose { root, content, refs })?;
            }
            _ => unreachable!("not an intent event"),
        }
        Ok(())
    }

    // ----- operation pipeline --------------------------------------------

    /// Mints a fresh operation at `sid`, records it in the site's own
    /// log, and applies it locally.
    fn mint_apply(&mut self, sid: SiteId, payload: Payload) -> Result<Operation> {
        let site = self.sites.get_mut(&sid).expect("minting site exists");
        site.seq += 1;
        let seq = site.seq;
        site.clock.set(sid, seq);
        site.delivered.set(sid, seq);
        let op = Operation { site: sid, seq, clock: site.clock.clone(), payload };
        site.store.entry(sid).or_default().push(op.clone());
        let clock = site.clock.clone();
        site.mc.update_row(sid, &clock);
        if site.txn.local_open() {
            site.batch_clocks.push(op.clock.clone());
        }
        let applied = self.apply_one(sid, &op, true)?;
        if let Some(pos) = applied {
            let site = self.sites.get_mut(&sid).unwrap();
            if site.txn.local_open() {
                site.batch_targets.push(pos);
            } else {
                site.edit_history
                    .push(EditRecord { targets: vec![pos], clocks: vec![op.clock.clone()] });
            }
        }
        Ok(op)
    }

    /// Applies one delivered batch (a whole remote transaction, or a
    /// single operation) and records its edits as one history entry.
    fn dispatch_batch(&mut self, sid: SiteId, batch: Vec<Operation>) -> Result<()> {
        let clocks: Vec<VectorClock> = batch.iter().map(|o| o.clock.clone()).collect();
        let mut targets = Vec::new();
        for op in &batch {
            self.sites.get_mut(&sid).unwrap().clock.set(op.site, op.seq);
            if let Some(pos) = self.apply_one(sid, op, false)? {
                targets.push(pos);
            }
        }
        if !targets.is_empty() {
            let site = self.sites.get_mut(&sid).unwrap();
            site.edit_history.push(EditRecord { targets, clocks });
        }
        Ok(())
    }

    /// Applies a single operation's payload to `sid`'s replica. Returns
    /// the target position when the operation was an applied edit.
    fn apply_one(&mut self, sid: SiteId, op: &Operation, local: bool) -> Result<Option<PosId>> {
        match &op.payload {
            Payload::Insert { pos, atom, refs } => {
                let site = self.sites.get_mut(&sid).unwrap();
                match site.doc.apply_insert(pos, *atom, &op.clock, refs, local)? {
                    Applied::Done => Ok(Some(pos.clone())),
                    Applied::Lost => {
                        self.lost_ids.insert(op.id());
                        Ok(None)
                    }
                }
            }
            Payload::Delete { pos, refs } => {
                let site = self.sites.get_mut(&sid).unwrap();
                match site.doc.apply_delete(pos, &op.clock, refs, local)? {
                    Applied::Done => Ok(Some(pos.clone())),
                    Applied::Lost => {
                        self.lost_ids.insert(op.id());
                        Ok(None)
                    }
                }
            }
            Payload::NoOp | Payload::TxnStart | Payload::TxnEnd => Ok(None),
            Payload::FlattenPropose { root, content, refs } => {
                self.on_propose(sid, op, root.clone(), content.clone(), refs.clone())?;
                Ok(None)
            }
            Payload::FlattenVote { proposal, yes } => {
                self.on_vote(sid, op.site, *proposal, *yes);
                Ok(None)
            }
            Payload::FlattenDecide { proposal, commit } => {
                self.on_decide(sid, *proposal, *commit)?;
                Ok(None)
            }
        }
    }

    /// A proposal reached `sid`: compute and mint its vote. The vote is
    /// no when any applied edit batch inside the subtree is concurrent
    /// with the proposal, or when this site already voted yes in another
    /// undecided round whose subtree overlaps.
    fn on_propose(
        &mut self,
        sid: SiteId,
        op: &Operation,
        root: PosId,
        content: Vec<Atom>,
        refs: Vec<FlatRef>,
    ) -> Result<()> {
        let site = self.sites.get_mut(&sid).unwrap();
        debug_assert!(!site.txn.local_open(), "proposals are not delivered inside a transaction");
        let stamp = &op.clock;
        let conflict = site.edit_history.iter().any(|rec| {
            rec.targets.iter().any(|t| root.contains(t))
                && rec.clocks.iter().any(|c| concurrent(c, stamp))
        });
        let overlap = site
            .open_rounds
            .iter()
            .any(|(pid, r)| *pid != op.id() && r.my_vote && regions_overlap(&r.root, &root));
        let yes = !conflict && !overlap;
        site.open_rounds.insert(op.id(), VoterRound { root, content, refs, my_vote: yes });
        self.mint_apply(sid, Payload::FlattenVote { proposal: op.id(), yes })?;
        Ok(())
    }

    fn on_vote(&mut self, sid: SiteId, voter: SiteId, proposal: OpId, yes: bool) {
        let site = self.sites.get_mut(&sid).unwrap();
        if let Some(round) = site.coordinated.get_mut(&proposal) {
            round.record_vote(voter, yes);
        }
    }

    /// A decision reached `sid`: close the round, and on commit replace
    /// the subtree with the agreed content.
    fn on_decide(&mut self, sid: SiteId, proposal: OpId, commit: bool) -> Result<()> {
        let ticks = self.ticks;
        let cooldown = self.config.flatten_cooldown;
        let false_susp = self.config.false_suspicion;
        let site = self.sites.get_mut(&sid).unwrap();
        let coordinated_here = site.coordinated.remove(&proposal).is_some();
        let round = site.open_rounds.remove(&proposal);
        if !commit && coordinated_here {
            site.cooldown_until = ticks + cooldown;
        }
        if commit {
            if let Some(r) = round {
                debug_assert!(
                    site.doc.region_content(&r.root) == r.content || false_susp,
                    "flatten committed over a diverged subtree"
                );
                site.doc.commit_flatten(&r.root, &r.content, &r.refs)?;
            }
        }
        self.flush_deferred(sid)
    }

    /// Replays deferred intents once the site is no longer prepared.
    fn flush_deferred(&mut self, sid: SiteId) -> Result<()> {
        loop {
            let site = self.sites.get_mut(&sid).unwrap();
            if site.status == Status::Crashed || site.prepared() {
                return Ok(());
            }
            let Some(ev) = site.deferred.pop_front() else { return Ok(()) };
            self.apply_intent(ev, true)?;
        }
    }

    /// Coordinator duty, run after every event: abort rounds with an
    /// unreachable participant (or, under false suspicion, drop such
    /// participants from the tally) and decide rounds whose votes are
    /// complete.
    fn evaluate_rounds(&mut self) -> Result<()> {
        loop {
            let mut decisions: Vec<(SiteId, OpId, bool)> = Vec::new();
            for site in self.sites.values() {
                if site.status == Status::Crashed {
                    continue;
                }
                for (pid, round) in &site.coordinated {
                    let verdict = if self.config.false_suspicion {
                        self.tally_excluding_unreachable(round)
                    } else if round.proposal.participants.iter().any(|p| {
                        self.sites.get(p).map_or(true, |s| s.status != Status::Connected)
                    }) {
                        Some(false)
                    } else {
                        round.ready()
                    };
                    if let Some(commit) = verdict {
                        decisions.push((site.id, *pid, commit));
                    }
                }
            }
            if decisions.is_empty() {
                return Ok(());
            }
            for (sid, pid, commit) in decisions {
                if !self.sites[&sid].coordinated.contains_key(&pid) {
                    continue;
                }
                self.mint_apply(sid, Payload::FlattenDecide { proposal: pid, commit })?;
            }
        }
    }

    /// The unsafe tally: recorded no votes still abort, but participants
    /// that are not currently connected are excused from voting.
    fn tally_excluding_unreachable(&self, round: &ProposalRound) -> Option<bool> {
        if round.votes.values().any(|yes| !yes) {
            return Some(false);
        }
        let all_reachable_voted = round
            .proposal
            .participants
            .iter()
            .filter(|p| self.sites.get(p).map_or(false, |s| s.status == Status::Connected))
            .all(|p| round.votes.contains_key(p));
        if all_reachable_voted {
            Some(true)
        } else {
            None
        }
    }

    // ----- network events ------------------------------------------------

    fn do_exchange(&mut self, a: SiteId, b: SiteId) -> Result<()> {
        if a == b {
            return Err(Error::IllegalEvent(format!("site {a} cannot exchange with itself")));
        }
        for id in [a, b] {
            let s = self
                .sites
                .get(&id)
                .ok_or_else(|| Error::IllegalEvent(format!("unknown site {id}")))?;
            if s.status != Status::Connected {
                return Err(Error::IllegalEvent(format!("site {id} is {}", s.status)));
            }
        }
        let a_clock = self.sites[&a].clock.clone();
        let b_clock = self.sites[&b].clock.clone();
        let a_mc = self.sites[&a].mc.clone();
        let b_mc = self.sites[&b].mc.clone();
        self.ship(a, b)?;
        self.ship(b, a)?;
        {
            let sb = self.sites.get_mut(&b).unwrap();
            sb.mc.merge_from(&a_mc);
            sb.mc.update_row(a, &a_clock);
        }
        {
            let sa = self.sites.get_mut(&a).unwrap();
            sa.mc.merge_from(&b_mc);
            sa.mc.update_row(b, &b_clock);
        }
        self.drain_site(a)?;
        self.drain_site(b)?;
        Ok(())
    }

    /// Copies every operation `from` knows and `to` does not into `to`'s
    /// store and delivery buffer.
    fn ship(&mut self, from: SiteId, to: SiteId) -> Result<()> {
        let outgoing: Vec<Operation> = {
            let src = &self.sites[&from];
            let dst = &self.sites[&to];
            let mut v = Vec::new();
            for (origin, log) in &src.store {
                let known = dst.store.get(origin).map_or(0, |l| l.len());
                v.extend(log.iter().skip(known).cloned());
            }
            v
        };
        let dst = self.sites.get_mut(&to).unwrap();
        for op in outgoing {
            dst.ingest(op);
        }
        Ok(())
    }

    /// Applies everything causally ready at `sid`. A site holding its
    /// own transaction open does not interleave remote operations into
    /// the bracket; it catches up at the next exchange after the end.
    fn drain_site(&mut self, sid: SiteId) -> Result<()> {
        let site = self.sites.get_mut(&sid).unwrap();
        if site.txn.local_open() {
            return Ok(());
        }
        let ready = site.take_ready();
        let mut batches = Vec::new();
        for op in ready {
            batches.extend(site.txn.accept(op)?);
        }
        for batch in batches {
            self.dispatch_batch(sid, batch)?;
        }
        let site = self.sites.get_mut(&sid).unwrap();
        let clock = site.clock.clone();
        site.mc.update_row(sid, &clock);
        Ok(())
    }

    // ----- failures -------------------------------------------------------

    fn do_crash(&mut self, site: SiteId) -> Result<()> {
        let s = self.site_mut(site)?;
        if s.status == Status::Crashed {
            return Err(Error::IllegalEvent(format!("site {site} has already crashed")));
        }
        if !s.coordinated.is_empty() {
            return Err(Error::IllegalEvent(format!(
                "site {site} coordinates an open flatten round; coordinator crash is not modeled"
            )));
        }
        let own = s.store.get(&site).map_or(0, |l| l.len());
        let best_other = self
            .sites
            .values()
            .filter(|s| s.id != site && s.status != Status::Crashed)
            .map(|s| s.store.get(&site).map_or(0, |l| l.len()))
            .max()
            .unwrap_or(0);
        self.lost_unsent += own.saturating_sub(best_other) as u64;
        self.sites.get_mut(&site).unwrap().status = Status::Crashed;
        Ok(())
    }

    /// Spawns a replacement site under a fresh id by copying the donor's
    /// replica, delivery state, and store. Nothing of the crashed site
    /// itself survives; its unsent operations were already counted lost.
    fn do_recover(&mut self, site: SiteId, donor: SiteId) -> Result<()> {
        {
            let s = self
                .sites
                .get(&site)
                .ok_or_else(|| Error::IllegalEvent(format!("unknown site {site}")))?;
            if s.status != Status::Crashed {
                return Err(Error::IllegalEvent(format!("site {site} has not crashed")));
            }
            let d = self
                .sites
                .get(&donor)
                .ok_or_else(|| Error::IllegalEvent(format!("unknown donor {donor}")))?;
            if d.status != Status::Connected {
                return Err(Error::IllegalEvent(format!("donor {donor} is {}", d.status)));
            }
        }
        let new_id = SiteId(self.next_site);
        self.next_site += 1;
        let mut ns = self.sites[&donor].clone();
        ns.id = new_id;
        ns.status = Status::Connected;
        ns.seq = 0;
        ns.coordinated.clear();
        ns.deferred.clear();
        ns.batch_targets.clear();
        ns.batch_clocks.clear();
        ns.cooldown_until = 0;
        ns.buffer = DeliveryBuffer::new();
        for (origin, log) in &ns.store {
            for op in log.iter().skip(ns.delivered.get(*origin) as usize) {
                ns.buffer.push(op.clone());
            }
        }
        let clock = ns.clock.clone();
        ns.mc.update_row(new_id, &clock);
        self.sites.insert(new_id, ns);
        self.drain_site(new_id)
    }

    // ----- periodic events ------------------------------------------------

    /// Heartbeat: every connected site mints a no-op (keeping stability
    /// detection live through quiet periods), then at most one site may
    /// auto-propose a flatten if the depth threshold is exceeded.
    fn do_tick(&mut self) -> Result<()> {
        self.ticks += 1;
        let connected: Vec<SiteId> = self
            .sites
            .values()
            .filter(|s| s.status == Status::Connected)
            .map(|s| s.id)
            .collect();
        for sid in &connected {
            self.mint_apply(*sid, Payload::NoOp)?;
        }
        if let Some(threshold) = self.config.auto_flatten_depth {
            for sid in connected {
                let site = &self.sites[&sid];
                let idle = site.coordinated.is_empty()
                    && site.open_rounds.is_empty()
                    && !site.txn.local_open()
                    && self.ticks >= site.cooldown_until;
                if idle && site.doc.physical_stats().max_depth > threshold {
                    self.apply_intent(Event::Flatten { site: sid, root: PosId::root() }, false)?;
                    break;
                }
            }
        }
        Ok(())
    }

    fn do_compact(&mut self) {
        let alive = self.live_site_ids();
        for sid in alive.clone() {
            let site = self.sites.get_mut(&sid).unwrap();
            let SiteState { doc, mc, .. } = site;
            doc.compact(|stamp| mc.stable(stamp, alive.iter().copied()));
        }
    }

    /// Compares every pair of live replicas that have delivered the same
    /// operation set. Replicas with different clocks are incomparable
    /// mid-partition and are skipped; quiescent convergence is the
    /// [`World::convergence`] question.
    fn do_check(&mut self) {
        let mut groups: BTreeMap<String, Vec<SiteId>> = BTreeMap::new();
        for s in self.sites.values().filter(|s| s.status != Status::Crashed) {
            groups.entry(s.clock.to_string()).or_default().push(s.id);
        }
        let mut witness = None;
        for members in groups.values() {
            let first = &self.sites[&members[0]];
            for id in &members[1..] {
                if let Some(w) = diff_sites(first, &self.sites[id], false) {
                    witness.get_or_insert(w);
                }
            }
        }
        match witness {
            Some(w) => {
                self.checks_failed += 1;
                if self.first_divergence.is_none() {
                    self.first_divergence = Some(w);
                }
            }
            None => self.checks_passed += 1,
        }
    }

    // ----- quiescence ----------------------------------------------------

    /// Reconnects everyone and exchanges all pairs until nothing moves,
    /// then runs a final `check`. Every event applied is returned so a
    /// generated trace stays replayable verbatim.
    pub fn drain(&mut self) -> Result<Vec<Event>> {
        let mut applied = Vec::new();
        let mut run = |w: &mut World, ev: Event| -> Result<()> {
            w.apply(ev.clone())?;
            applied.push(ev);
            Ok(())
        };
        let disconnected: Vec<SiteId> = self
            .sites
            .values()
            .filter(|s| s.status == Status::Disconnected)
            .map(|s| s.id)
            .collect();
        for sid in disconnected {
            run(self, Event::Reconnect { site: sid })?;
        }
        loop {
            let before = self.quiescence_fingerprint();
            for (a, b) in self.connected_pairs() {
                run(self, Event::Exchange { a, b })?;
            }
            if self.quiescence_fingerprint() == before {
                break;
            }
        }
        // One more sweep so acknowledgment rows are as fresh as clocks.
        for (a, b) in self.connected_pairs() {
            run(self, Event::Exchange { a, b })?;
        }
        run(self, Event::Check)?;
        Ok(applied)
    }

    fn connected_pairs(&self) -> Vec<(SiteId, SiteId)> {
        let ids: Vec<SiteId> = self
            .sites
            .values()
            .filter(|s| s.status == Status::Connected)
            .map(|s| s.id)
            .collect();
        let mut pairs = Vec::new();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                pairs.push((*a, *b));
            }
        }
        pairs
    }

    fn quiescence_fingerprint(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for s in self.sites.values() {
            let stored: usize = s.store.values().map(Vec::len).sum();
            let _ = write!(
                out,
                "{}:{}/{}/{}/{}/{}/{}/{};",
                s.id,
                s.clock,
                s.delivered,
                stored,
                s.buffer.len(),
                s.deferred.len(),
                s.open_rounds.len(),
                s.coordinated.len()
            );
        }
        out
    }

    // ----- fault injection -------------------------------------------------

    /// Discards the newest operation minted by `origin` from its own log
    /// so it can never be shipped, while its local effect stays applied.
    /// This deliberately breaks eventual delivery; it exists so tests can
    /// prove the convergence check catches real divergence.
    pub fn drop_latest_op(&mut self, origin: SiteId) -> Option<OpId> {
        let site = self.sites.get_mut(&origin)?;
        let log = site.store.get_mut(&origin)?;
        log.pop().map(|op| op.id())
    }
}

/// First observable difference between two replicas, if any. With
/// `require_same_clock` the delivered sets must match too (the quiescent
/// convergence question); otherwise the caller already grouped by clock.
fn diff_sites(a: &SiteState, b: &SiteState, require_same_clock: bool) -> Option<String> {
    if require_same_clock && a.clock != b.clock {
        return Some(format!(
            "sites {} and {} have delivered different sets: {} vs {}",
            a.id, b.id, a.clock, b.clock
        ));
    }
    let ra = a.rendering();
    let rb = b.rendering();
    if ra != rb {
        return Some(format!(
            "sites {} and {} render {:?} vs {:?} at clock {}",
            a.id, b.id, ra, rb, a.clock
        ));
    }
    let la = a.live();
    let lb = b.live();
    if la != lb {
        let at = la
            .iter()
            .zip(&lb)
            .position(|(x, y)| x != y)
            .unwrap_or_else(|| la.len().min(lb.len()));
        return Some(format!(
            "sites {} and {} agree on text {:?} but disagree on identifiers at live index {}",
            a.id, b.id, ra, at
        ));
    }
    None
}
