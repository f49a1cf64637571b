//! Acceptance suite: one test per claim the library stands on, from the
//! canonical tree shape of a small document up to convergence across
//! thousands of fuzzed multi-site schedules. Each test prints a single
//! `ACCEPTANCE nn PASS` line when its claim holds.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treedoc::causal::VectorClock;
use treedoc::ids::{Anchor, Dir, Disambiguator, PathComponent, PosId, SiteId};
use treedoc::sim::fuzz::{run_fuzz, FaultProfile, FuzzConfig};
use treedoc::sim::multilog::{Multilog, DEFAULT_BOUND};
use treedoc::sim::{Event, World};
use treedoc::structure::{explode, flatten_local};
use treedoc::tree::{Atom, Treedoc};

fn pass(n: u32, what: &str, t: Instant) {
    println!("ACCEPTANCE {n:02} PASS {what} ({:.2?})", t.elapsed());
}

fn stamp(site: u32, v: u64) -> VectorClock {
    let mut c = VectorClock::new();
    c.set(SiteId(site), v);
    c
}

fn ev(s: &str) -> Event {
    s.parse().expect("test event parses")
}

fn apply_all(w: &mut World, script: &[&str]) {
    for line in script {
        w.apply(ev(line)).unwrap();
    }
}

/// A six-atom document takes the canonical balanced shape, a mid-string
/// insert lands below-left of its right neighbor, and two sites inserting
/// into the same gap produce sibling side nodes at that position.
#[test]
fn acceptance_01_canonical_paths_and_side_nodes() {
    let t = Instant::now();

    // The reference document: six atoms whose tree paths spell "abcdef"
    // in infix order, with the root's inner-left slot left empty.
    let expected: Vec<(PosId, Atom)> = [
        ('a', vec![0, 0]),
        ('b', vec![0]),
        ('c', vec![]),
        ('d', vec![1, 0]),
        ('e', vec![1]),
        ('f', vec![1, 1]),
    ]
    .into_iter()
    .map(|(ch, bits)| (PosId::from_bits(&bits), Atom(ch)))
    .collect();
    let mut base = Treedoc::new();
    for (i, (pos, atom)) in expected.iter().enumerate() {
        base.apply_insert(pos, *atom, &stamp(0, i as u64 + 1), &[], false).unwrap();
    }
    assert_eq!(base.live_atoms(), expected, "paths order the atoms as written");
    assert_eq!(base.contents(), "abcdef");

    // A mid-string insert between the root atom and its right child gets
    // the leftmost free slot of that gap: below-left of the neighbor.
    let dx = Disambiguator::new(7, SiteId(1));
    let (prev, next) = base.neighbors_for_insert(3).unwrap();
    assert_eq!(prev, Anchor::At(PosId::root()));
    assert_eq!(next, Anchor::At(PosId::from_bits(&[1, 0])));
    let uid = base.new_uid(&prev, &next, dx).unwrap();
    let want_uid = PosId::from_steps(vec![
        PathComponent::plain(Dir::Right),
        PathComponent::plain(Dir::Left),
        PathComponent::side(Dir::Left, dx),
    ]);
    assert_eq!(uid, want_uid, "the insert extends below-left of [10]");
    let mut one_site = base.clone();
    one_site.apply_insert(&uid, Atom('X'), &stamp(1, 1), &[], true).unwrap();
    assert_eq!(one_site.contents(), "abcXdef");

    // The replayed form of the same edit: a bare [100] identifier is
    // equally valid and renders identically.
    let mut replayed = base.clone();
    let bare = PosId::from_bits(&[1, 0, 0]);
    replayed.apply_insert(&bare, Atom('X'), &stamp(1, 1), &[], false).unwrap();
    assert_eq!(replayed.contents(), "abcXdef");
    assert!(replayed.live_atoms().contains(&(bare, Atom('X'))));

    // Concurrent inserts into the same gap by two sites: both allocate
    // the same path and their disambiguators keep them apart as sibling
    // side nodes, ordered the same way on every replica.
    let dy = Disambiguator::new(7, SiteId(2));
    let (px, nx) = base.neighbors_for_insert(3).unwrap();
    let uid_x = base.new_uid(&px, &nx, dx).unwrap();
    let uid_y = base.new_uid(&px, &nx, dy).unwrap();
    let side = |d: Disambiguator| {
        PosId::from_steps(vec![
            PathComponent::plain(Dir::Right),
            PathComponent::plain(Dir::Left),
            PathComponent::side(Dir::Left, d),
        ])
    };
    assert_eq!(uid_x, side(dx));
    assert_eq!(uid_y, side(dy));
    let mut site_x = base.clone();
    site_x.apply_insert(&uid_x, Atom('X'), &stamp(1, 1), &[], true).unwrap();
    site_x.apply_insert(&uid_y, Atom('Y'), &stamp(2, 1), &[], false).unwrap();
    let mut site_y = base.clone();
    site_y.apply_insert(&uid_y, Atom('Y'), &stamp(2, 1), &[], true).unwrap();
    site_y.apply_insert(&uid_x, Atom('X'), &stamp(1, 1), &[], false).unwrap();
    assert_eq!(site_x.live_atoms(), site_y.live_atoms());
    assert_eq!(site_x.contents(), "abcXYdef", "lower site id orders first at equal counters");

    assert!(t.elapsed() < Duration::from_secs(1), "golden cases are instant");
    pass(1, "canonical paths, gap allocation, and concurrent side nodes", t);
}

const COMMUTATION_INSTANCES: usize = 10_000;

struct Minter {
    rng: ChaCha8Rng,
    ctr: u64,
}

impl Minter {
    fn new(seed: u64) -> Minter {
        Minter { rng: ChaCha8Rng::seed_from_u64(seed), ctr: 0 }
    }

    /// A fresh single-site document with up to two dozen surviving atoms.
    fn random_doc(&mut self) -> Treedoc {
        let mut doc = Treedoc::new();
        let edits = self.rng.gen_range(0..24);
        for _ in 0..edits {
            let len = doc.visible_len();
            if len > 0 && self.rng.gen_bool(0.2) {
                let uid = doc.uid_at_visible_index(self.rng.gen_range(0..len)).unwrap();
                self.ctr += 1;
                doc.apply_delete(&uid, &stamp(0, self.ctr), &[], true).unwrap();
            } else {
                let (uid, atom, st) = self.mint_insert(&doc, 0);
                doc.apply_insert(&uid, atom, &st, &[], true).unwrap();
            }
        }
        doc
    }

    /// An insert op at a random gap of `doc`, minted by `site` but not
    /// yet applied anywhere.
    fn mint_insert(&mut self, doc: &Treedoc, site: u32) -> (PosId, Atom, VectorClock) {
        let i = self.rng.gen_range(0..=doc.visible_len());
        let (prev, next) = doc.neighbors_for_insert(i).unwrap();
        self.ctr += 1;
        let uid = doc.new_uid(&prev, &next, Disambiguator::new(self.ctr, SiteId(site))).unwrap();
        let ch = Atom((b'a' + (self.ctr % 26) as u8) as char);
        (uid, ch, stamp(site, self.ctr))
    }

    fn random_live_uid(&mut self, doc: &Treedoc) -> PosId {
        doc.uid_at_visible_index(self.rng.gen_range(0..doc.visible_len())).unwrap()
    }
}

/// Two inserts with fresh identifiers, minted independently against the
/// same state, produce the same document in either application order.
#[test]
fn acceptance_02a_concurrent_inserts_commute() {
    let t = Instant::now();
    let mut m = Minter::new(0x1E44A_01);
    for case in 0..COMMUTATION_INSTANCES {
        let base = m.random_doc();
        let (u1, a1, s1) = m.mint_insert(&base, 1);
        let (u2, a2, s2) = m.mint_insert(&base, 2);
        let mut fwd = base.clone();
        fwd.apply_insert(&u1, a1, &s1, &[], false).unwrap();
        fwd.apply_insert(&u2, a2, &s2, &[], false).unwrap();
        let mut rev = base.clone();
        rev.apply_insert(&u2, a2, &s2, &[], false).unwrap();
        rev.apply_insert(&u1, a1, &s1, &[], false).unwrap();
        assert_eq!(fwd.live_atoms(), rev.live_atoms(), "case {case}: {u1} vs {u2}");
    }
    assert!(t.elapsed() < Duration::from_secs(60));
    pass(2, &format!("insert/insert commutation over {COMMUTATION_INSTANCES} instances"), t);
}

/// A fresh insert and a delete of a different identifier produce the
/// same document in either application order.
#[test]
fn acceptance_02b_insert_and_delete_commute() {
    let t = Instant::now();
    let mut m = Minter::new(0x1E44A_02);
    for case in 0..COMMUTATION_INSTANCES {
        let base = loop {
            let d = m.random_doc();
            if d.visible_len() > 0 {
                break d;
            }
        };
        let (u1, a1, s1) = m.mint_insert(&base, 1);
        let u2 = m.random_live_uid(&base);
        m.ctr += 1;
        let s2 = stamp(2, m.ctr);
        assert_ne!(u1, u2, "a fresh identifier never collides with a live one");
        let mut fwd = base.clone();
        fwd.apply_insert(&u1, a1, &s1, &[], false).unwrap();
        fwd.apply_delete(&u2, &s2, &[], false).unwrap();
        let mut rev = base.clone();
        rev.apply_delete(&u2, &s2, &[], false).unwrap();
        rev.apply_insert(&u1, a1, &s1, &[], false).unwrap();
        assert_eq!(fwd.live_atoms(), rev.live_atoms(), "case {case}: insert {u1}, delete {u2}");
    }
    assert!(t.elapsed() < Duration::from_secs(60));
    pass(2, &format!("insert/delete commutation over {COMMUTATION_INSTANCES} instances"), t);
}

/// Two deletes, same or different targets, produce the same document in
/// either application order.
#[test]
fn acceptance_02c_concurrent_deletes_commute() {
    let t = Instant::now();
    let mut m = Minter::new(0x1E44A_03);
    for case in 0..COMMUTATION_INSTANCES {
        let base = loop {
            let d = m.random_doc();
            if d.visible_len() > 0 {
                break d;
            }
        };
        let u1 = m.random_live_uid(&base);
        let u2 = m.random_live_uid(&base);
        let (s1, s2) = (stamp(1, case as u64 + 1), stamp(2, case as u64 + 1));
        let mut fwd = base.clone();
        fwd.apply_delete(&u1, &s1, &[], false).unwrap();
        fwd.apply_delete(&u2, &s2, &[], false).unwrap();
        let mut rev = base.clone();
        rev.apply_delete(&u2, &s2, &[], false).unwrap();
        rev.apply_delete(&u1, &s1, &[], false).unwrap();
        assert_eq!(fwd.live_atoms(), rev.live_atoms(), "case {case}: delete {u1}, delete {u2}");
    }
    assert!(t.elapsed() < Duration::from_secs(60));
    pass(2, &format!("delete/delete commutation over {COMMUTATION_INSTANCES} instances"), t);
}

/// Every complete schedule consistent with happens-before replays to the
/// same state: exhaustive linear-extension enumeration over 500 random
/// small multilogs harvested from scripted worlds.
#[test]
fn acceptance_03_all_schedules_of_small_multilogs_agree() {
    let t = Instant::now();
    let mut total_schedules = 0usize;
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5C4ED ^ (seed * 0x9E37_79B9));
        let sites = rng.gen_range(1..=3u32);
        let mut w = World::new(sites);
        let edits = rng.gen_range(2..=7);
        for _ in 0..edits {
            let s = SiteId(rng.gen_range(0..sites));
            let len = w.site(s).doc().visible_len();
            if len > 0 && rng.gen_bool(0.3) {
                w.apply(Event::Delete { site: s, index: rng.gen_range(0..len) }).unwrap();
            } else {
                let ch = (b'a' + rng.gen_range(0..26u8)) as char;
                w.apply(Event::Insert { site: s, index: rng.gen_range(0..=len), ch }).unwrap();
            }
            if sites > 1 && rng.gen_bool(0.2) {
                let a = rng.gen_range(0..sites);
                let b = (a + 1 + rng.gen_range(0..sites - 1)) % sites;
                w.apply(Event::Exchange { a: SiteId(a), b: SiteId(b) }).unwrap();
            }
        }
        let mut ops = Vec::new();
        for s in w.sites() {
            ops.extend(s.oplog());
        }
        let log = Multilog::from_ops(ops);
        assert!(log.len() <= 7, "seed {seed} harvested {} edits", log.len());
        let schedules = log
            .check_all_schedules(DEFAULT_BOUND)
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        total_schedules += schedules;
    }
    assert!(total_schedules >= 500, "every multilog admits at least one schedule");
    assert!(t.elapsed() < Duration::from_secs(300));
    pass(3, &format!("500 multilogs, {total_schedules} schedules, all equivalent"), t);
}

/// A thousand seeded fuzz runs with partitions, heartbeats, and
/// compaction all drain to identical renderings and identical live
/// identifier sets.
#[test]
fn acceptance_04_fuzzed_worlds_converge() {
    let t = Instant::now();
    for i in 0..1000u64 {
        let cfg = FuzzConfig {
            seed: 0xF00D_0000 + i,
            sites: 3 + (i % 4) as u32,
            ops: 100 + ((i * 37) % 401) as usize,
            faults: FaultProfile::Partition,
        };
        let out = run_fuzz(&cfg).unwrap_or_else(|e| panic!("seed {}: {e}", cfg.seed));
        assert!(
            out.summary.converged && out.summary.checks_failed == 0,
            "seed {} (sites {}, ops {}): {:?}",
            cfg.seed,
            cfg.sites,
            cfg.ops,
            out.summary
        );
        assert_eq!(out.summary.lost_ops, 0, "partitions lose nothing");
    }
    pass(4, "1000 fuzzed partitioned worlds converged", t);
}

/// Rebuilding a document from its rendering round-trips for every length
/// up to 1024, and the rebuilt tree is exactly as deep as the smallest
/// complete tree that fits.
#[test]
fn acceptance_05_explode_flatten_round_trip() {
    let t = Instant::now();
    for n in 0..=1024usize {
        let s: Vec<Atom> = (0..n).map(|i| Atom((b'a' + (i % 26) as u8) as char)).collect();
        let doc = Treedoc::from_root(explode(&s));
        assert_eq!(flatten_local(&doc, &PosId::root()), s, "length {n} round-trips");
        let want_depth = (n + 1).next_power_of_two().trailing_zeros() as usize;
        assert_eq!(doc.physical_stats().max_depth, want_depth, "length {n} depth");
    }
    pass(5, "explode/flatten round-trips through length 1024 at minimal depth", t);
}

/// A flatten proposal racing a concurrent edit inside its subtree aborts
/// everywhere and the edit survives; a quiescent proposal commits
/// everywhere, keeps the rendering, and caps the depth.
#[test]
fn acceptance_06_flatten_aborts_on_conflict_and_commits_when_quiescent() {
    let t = Instant::now();

    let mut w = World::new(3);
    apply_all(&mut w, &["insert 0 0 a", "insert 0 1 b", "exchange 0 1", "exchange 0 2"]);
    apply_all(&mut w, &["insert 2 2 z", "flatten 0 []"]);
    w.drain().unwrap();
    let (ok, witness) = w.convergence();
    assert!(ok, "{witness:?}");
    for s in w.sites() {
        assert_eq!(s.rendering(), "abz", "site {} kept the concurrent insert", s.id);
        assert_eq!(s.doc().epoch_of(&PosId::root()), 0, "site {} must not commit", s.id);
    }

    let mut w = World::new(3);
    for ch in ["h", "g", "f", "e", "d", "c", "b", "a"] {
        w.apply(ev(&format!("insert 0 0 {ch}"))).unwrap();
    }
    apply_all(&mut w, &["exchange 0 1", "exchange 0 2", "exchange 1 2"]);
    assert_eq!(w.metrics().max_path_len, 8, "prepending builds a spine");
    w.apply(ev("flatten 0 []")).unwrap();
    w.drain().unwrap();
    let (ok, witness) = w.convergence();
    assert!(ok, "{witness:?}");
    for s in w.sites() {
        assert_eq!(s.rendering(), "abcdefgh", "site {} rendering unchanged", s.id);
        assert_eq!(s.doc().epoch_of(&PosId::root()), 1, "site {} committed", s.id);
    }
    assert_eq!(w.metrics().max_path_len, 4, "eight atoms fit in depth four");

    pass(6, "flatten aborts under conflict, commits and rebalances when quiescent", t);
}

/// A flatten proposed while any site is disconnected aborts, and the
/// system still converges once the site is back.
#[test]
fn acceptance_07_flatten_aborts_while_disconnected() {
    let t = Instant::now();
    let mut w = World::new(3);
    apply_all(&mut w, &["insert 0 0 a", "exchange 0 1", "exchange 0 2", "disconnect 2"]);
    w.apply(ev("flatten 0 []")).unwrap();
    assert_eq!(w.site(SiteId(0)).doc().epoch_of(&PosId::root()), 0, "aborted at once");
    assert_eq!(w.site(SiteId(0)).coordinating(), 0, "no open round remains");
    apply_all(&mut w, &["reconnect 2"]);
    w.drain().unwrap();
    let (ok, witness) = w.convergence();
    assert!(ok, "{witness:?}");
    for s in w.sites() {
        assert_eq!(s.rendering(), "a");
        assert_eq!(s.doc().epoch_of(&PosId::root()), 0);
    }
    pass(7, "flatten aborts under disconnection and the world reconverges", t);
}

/// Compaction is invisible: replaying fuzz traces event by event, no
/// compaction pass ever changes a rendering; and in a quiescent world a
/// chain of stably deleted leaves is removed completely.
#[test]
fn acceptance_08_compaction_is_rendering_neutral_and_complete() {
    let t = Instant::now();

    let mut compactions = 0usize;
    for i in 0..12u64 {
        let cfg = FuzzConfig {
            seed: 0xC0713C7 + i,
            sites: 4,
            ops: 150,
            faults: FaultProfile::Partition,
        };
        let out = run_fuzz(&cfg).unwrap();
        let mut w = World::new(out.scenario.sites);
        for event in &out.scenario.events {
            let watched = matches!(event, Event::Compact);
            let before: Vec<(SiteId, String)> = if watched {
                w.sites().map(|s| (s.id, s.rendering())).collect()
            } else {
                Vec::new()
            };
            w.apply(event.clone()).unwrap();
            if watched {
                compactions += 1;
                let after: Vec<(SiteId, String)> = w.sites().map(|s| (s.id, s.rendering())).collect();
                assert_eq!(before, after, "seed {}: compaction changed a rendering", cfg.seed);
            }
        }
    }
    assert!(compactions >= 10, "the traces exercised compaction {compactions} times");

    let mut w = World::new(2);
    apply_all(
        &mut w,
        &["insert 0 0 a", "insert 0 1 b", "insert 0 2 c", "insert 0 3 d", "exchange 0 1"],
    );
    apply_all(&mut w, &["delete 1 3", "delete 1 2", "exchange 0 1"]);
    apply_all(&mut w, &["tick", "exchange 0 1", "compact", "check"]);
    let (ok, witness) = w.convergence();
    assert!(ok, "{witness:?}");
    for s in w.sites() {
        assert_eq!(s.rendering(), "ab");
        assert_eq!(
            s.doc().physical_stats().tombstones,
            0,
            "site {} kept a stably deleted leaf chain",
            s.id
        );
    }

    pass(8, &format!("{compactions} compactions were invisible; stable tombstones all removed"), t);
}

/// Two transactions typed concurrently at different sites arrive as
/// indivisible blocks: no replica ever renders part of a foreign
/// transaction, and every replica ends with the same document no matter
/// which transaction it received first.
#[test]
fn acceptance_09_concurrent_transactions_stay_atomic() {
    let t = Instant::now();
    let script = [
        "txn-begin 0",
        "insert 0 0 a",
        "insert 0 1 b",
        "insert 0 2 c",
        "insert 0 3 d",
        "txn-begin 1",
        "insert 1 0 k",
        "insert 1 1 l",
        "insert 1 2 m",
        "insert 1 3 n",
        "exchange 0 2",
        "exchange 1 2",
        "insert 0 4 e",
        "insert 0 5 f",
        "insert 0 6 g",
        "insert 0 7 h",
        "insert 0 8 i",
        "insert 0 9 j",
        "insert 1 4 o",
        "insert 1 5 p",
        "insert 1 6 q",
        "insert 1 7 r",
        "insert 1 8 s",
        "insert 1 9 t",
        "txn-end 0",
        "txn-end 1",
        "exchange 0 2",
        "exchange 1 2",
        "exchange 0 1",
    ];
    let groups = [(SiteId(0), 'a'..='j'), (SiteId(1), 'k'..='t')];
    let mut w = World::new(3);
    let check_snapshots = |w: &World| {
        for s in w.sites() {
            let r = s.rendering();
            for (origin, range) in groups.clone() {
                if s.id == origin {
                    continue;
                }
                let seen = r.chars().filter(|c| range.contains(c)).count();
                assert!(
                    seen == 0 || seen == 10,
                    "site {} renders {seen}/10 atoms of site {origin}'s transaction: {r:?}",
                    s.id
                );
            }
        }
    };
    for line in script {
        w.apply(ev(line)).unwrap();
        check_snapshots(&w);
    }
    let drained = w.drain().unwrap();
    for _ in drained {
        check_snapshots(&w);
    }
    let (ok, witness) = w.convergence();
    assert!(ok, "{witness:?}");
    let rendering = w.site(SiteId(0)).rendering();
    assert!(
        rendering == "abcdefghijklmnopqrst" || rendering == "klmnopqrstabcdefghij",
        "the two blocks stay contiguous: {rendering:?}"
    );
    for s in w.sites() {
        assert_eq!(s.rendering(), rendering, "site {} agrees on the interleaving", s.id);
    }
    pass(9, "concurrent transactions replay atomically in both orders", t);
}

/// The same fuzz seed reproduces the identical trace, summary, and
/// metrics, across every fault profile.
#[test]
fn acceptance_10_fuzz_runs_are_deterministic() {
    let t = Instant::now();
    let profiles = [
        FaultProfile::None,
        FaultProfile::Partition,
        FaultProfile::Crash,
        FaultProfile::PartitionCrash,
    ];
    for (i, faults) in profiles.into_iter().enumerate() {
        let cfg = FuzzConfig { seed: 41 + i as u64, sites: 4, ops: 160, faults };
        let a = run_fuzz(&cfg).unwrap();
        let b = run_fuzz(&cfg).unwrap();
        assert_eq!(
            a.scenario.to_string(),
            b.scenario.to_string(),
            "{faults}: traces must match byte for byte"
        );
        let json = |o: &treedoc::sim::Summary| serde_json::to_string(o).unwrap();
        assert_eq!(json(&a.summary), json(&b.summary), "{faults}: summaries must match");
        assert_eq!(
            serde_json::to_string(&a.metrics).unwrap(),
            serde_json::to_string(&b.metrics).unwrap(),
            "{faults}: metrics must match"
        );
    }
    pass(10, "identical traces and reports for every replayed seed", t);
}
