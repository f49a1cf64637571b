//! Seeded random workload generation.
//!
//! The fuzzer draws legal events from a weighted distribution, applies
//! them as it goes (so each next event is generated against the real
//! current world), then drains the world to quiescence and appends the
//! drain events to the trace. The whole trace is a valid scenario: the
//! same seed always produces the same trace, and replaying the trace
//! through [`World::run`] reproduces the same final report byte for
//! byte. Transactions are generated as complete bursts so a trace never
//! leaves a bracket open, and crashes are capped at one per run so the
//! world keeps enough sites to stay interesting.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Event, Metrics, Scenario, Status, Summary, World};
use crate::ids::{PosId, SiteId};
use crate::Result;

/// Which failure modes the generator may inject.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultProfile {
    /// Reliable network, reliable sites.
    None,
    /// Disconnects and reconnects.
    Partition,
    /// At most one permanent crash, plus recovery.
    Crash,
    /// Both of the above.
    PartitionCrash,
}

impl FaultProfile {
    fn partitions(self) -> bool {
        matches!(self, FaultProfile::Partition | FaultProfile::PartitionCrash)
    }

    fn crashes(self) -> bool {
        matches!(self, FaultProfile::Crash | FaultProfile::PartitionCrash)
    }

    /// Flatten agreement needs every participant to stay votable, so
    /// proposals are only generated in crash-free profiles.
    fn flattens(self) -> bool {
        !self.crashes()
    }
}

impl fmt::Display for FaultProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FaultProfile::None => "none",
            FaultProfile::Partition => "partition",
            FaultProfile::Crash => "crash",
            FaultProfile::PartitionCrash => "partition-crash",
        };
        f.write_str(s)
    }
}

impl FromStr for FaultProfile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<FaultProfile, String> {
        match s {
            "none" => Ok(FaultProfile::None),
            "partition" => Ok(FaultProfile::Partition),
            "crash" => Ok(FaultProfile::Crash),
            "partition-crash" => Ok(FaultProfile::PartitionCrash),
            other => Err(format!(
                "unknown fault profile `{other}` (expected none, partition, crash, or partition-crash)"
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FuzzConfig {
    pub seed: u64,
    pub sites: u32,
    /// Events to generate before draining (bursts may overshoot by a
    /// few).
    pub ops: usize,
    pub faults: FaultProfile,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig { seed: 0, sites: 3, ops: 200, faults: FaultProfile::None }
    }
}

/// Everything one fuzz run produces.
#[derive(Clone, Debug)]
pub struct FuzzOutcome {
    /// The full replayable trace, drain events included.
    pub scenario: Scenario,
    pub summary: Summary,
    pub metrics: Metrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Action {
    Insert,
    Delete,
    Exchange,
    Tick,
    Compact,
    Check,
    TxnBurst,
    Disconnect,
    Reconnect,
    Crash,
    Recover,
    Flatten,
}

const ALPHABET: &[u8; 36] = b"abcdefghijklmnopqrstuvwxyz0123456789";

pub fn run_fuzz(cfg: &FuzzConfig) -> Result<FuzzOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut world = World::new(cfg.sites);
    let mut events: Vec<Event> = Vec::new();
    let mut crashed_once = false;
    while events.len() < cfg.ops {
        let burst = next_events(&mut rng, &world, cfg, crashed_once);
        if matches!(burst.first(), Some(Event::Crash { .. })) {
            crashed_once = true;
        }
        for ev in burst {
            world.apply(ev.clone())?;
            events.push(ev);
        }
    }
    events.extend(world.drain()?);
    Ok(FuzzOutcome {
        scenario: Scenario { sites: cfg.sites, events },
        summary: world.summary(),
        metrics: world.metrics(),
    })
}

/// Picks a weighted action and tries to realize it against the current
/// world; actions with no legal target are rerolled a few times before
/// falling back to a heartbeat.
fn next_events(
    rng: &mut ChaCha8Rng,
    world: &World,
    cfg: &FuzzConfig,
    crashed_once: bool,
) -> Vec<Event> {
    for _ in 0..16 {
        let action = pick_action(rng, cfg.faults, crashed_once);
        if let Some(events) = build(rng, world, action) {
            return events;
        }
    }
    vec![Event::Tick]
}

fn pick_action(rng: &mut ChaCha8Rng, faults: FaultProfile, crashed_once: bool) -> Action {
    let mut table: Vec<(Action, u32)> = vec![
        (Action::Insert, 30),
        (Action::Delete, 12),
        (Action::Exchange, 22),
        (Action::Tick, 8),
        (Action::Compact, 4),
        (Action::Check, 3),
        (Action::TxnBurst, 6),
    ];
    if faults.partitions() {
        table.push((Action::Disconnect, 6));
        table.push((Action::Reconnect, 6));
    }
    if faults.crashes() {
        if !crashed_once {
            table.push((Action::Crash, 1));
        }
        table.push((Action::Recover, 2));
    }
    if faults.flattens() {
        table.push((Action::Flatten, 2));
    }
    let total: u32 = table.iter().map(|(_, w)| w).sum();
    let mut roll = rng.gen_range(0..total);
    for (action, weight) in table {
        if roll < weight {
            return action;
        }
        roll -= weight;
    }
    unreachable!("roll is within the weight total")
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, from: &[T]) -> Option<T> {
    if from.is_empty() {
        None
    } else {
        Some(from[rng.gen_range(0..from.len())])
    }
}

fn rand_char(rng: &mut ChaCha8Rng) -> char {
    ALPHABET[rng.gen_range(0..ALPHABET.len())] as char
}

fn build(rng: &mut ChaCha8Rng, world: &World, action: Action) -> Option<Vec<Event>> {
    let editable: Vec<SiteId> = world
        .sites()
        .filter(|s| s.status() != Status::Crashed)
        .map(|s| s.id)
        .collect();
    let connected: Vec<SiteId> = world
        .sites()
        .filter(|s| s.status() == Status::Connected)
        .map(|s| s.id)
        .collect();
    match action {
        Action::Insert => {
            let site = pick(rng, &editable)?;
            let len = world.site(site).doc().visible_len();
            let index = rng.gen_range(0..=len);
            Some(vec![Event::Insert { site, index, ch: rand_char(rng) }])
        }
        Action::Delete => {
            let nonempty: Vec<SiteId> = editable
                .iter()
                .filter(|s| world.site(**s).doc().visible_len() > 0)
                .copied()
                .collect();
            let site = pick(rng, &nonempty)?;
            let index = rng.gen_range(0..world.site(site).doc().visible_len());
            Some(vec![Event::Delete { site, index }])
        }
        Action::Exchange => {
            if connected.len() < 2 {
                return None;
            }
            let i = rng.gen_range(0..connected.len());
            let mut j = rng.gen_range(0..connected.len() - 1);
            if j >= i {
                j += 1;
            }
            Some(vec![Event::Exchange { a: connected[i], b: connected[j] }])
        }
        Action::Tick => Some(vec![Event::Tick]),
        Action::Compact => Some(vec![Event::Compact]),
        Action::Check => Some(vec![Event::Check]),
        Action::TxnBurst => {
            let idle: Vec<SiteId> = editable
                .iter()
                .filter(|s| !world.site(**s).txn_open())
                .copied()
                .collect();
            let site = pick(rng, &idle)?;
            let mut len = world.site(site).doc().visible_len();
            let mut events = vec![Event::TxnBegin { site }];
            for _ in 0..rng.gen_range(2..=6usize) {
                if len == 0 || rng.gen_bool(0.7) {
                    events.push(Event::Insert {
                        site,
                        index: rng.gen_range(0..=len),
                        ch: rand_char(rng),
                    });
                    len += 1;
                } else {
                    events.push(Event::Delete { site, index: rng.gen_range(0..len) });
                    len -= 1;
                }
            }
            events.push(Event::TxnEnd { site });
            Some(events)
        }
        Action::Disconnect => {
            if connected.len() < 2 {
                return None;
            }
            let site = pick(rng, &connected)?;
            Some(vec![Event::Disconnect { site }])
        }
        Action::Reconnect => {
            let parted: Vec<SiteId> = world
                .sites()
                .filter(|s| s.status() == Status::Disconnected)
                .map(|s| s.id)
                .collect();
            let site = pick(rng, &parted)?;
            Some(vec![Event::Reconnect { site }])
        }
        Action::Crash => {
            if editable.len() < 2 {
                return None;
            }
            let candidates: Vec<SiteId> = editable
                .iter()
                .filter(|s| world.site(**s).coordinating() == 0)
                .copied()
                .collect();
            let site = pick(rng, &candidates)?;
            Some(vec![Event::Crash { site }])
        }
        Action::Recover => {
            let crashed: Vec<SiteId> = world
                .sites()
                .filter(|s| s.status() == Status::Crashed)
                .map(|s| s.id)
                .collect();
            let site = pick(rng, &crashed)?;
            let donor = pick(rng, &connected)?;
            Some(vec![Event::Recover { site, donor }])
        }
        Action::Flatten => {
            let candidates: Vec<SiteId> = connected
                .iter()
                .filter(|s| !world.site(**s).txn_open())
                .copied()
                .collect();
            let site = pick(rng, &candidates)?;
            let live = world.site(site).live();
            let root = if !live.is_empty() && rng.gen_bool(0.2) {
                live[rng.gen_range(0..live.len())].0.clone()
            } else {
                PosId::root()
            };
            Some(vec![Event::Flatten { site, root }])
        }
    }
}
