//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Expected values are recomputed here from first principles (successor
//! scans, replica offsets, the values the workload wrote) rather than taken
//! from the library's own oracles.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chord_bft::client::{Op, OpResult};
use chord_bft::dht::consensus::thresholds;
use chord_bft::dht::explore::{explore, ExploreConfig};
use chord_bft::harness::{self, Check, Expectation, Scenario, World};
use chord_bft::keyspace::{Key, KeySpace};
use chord_bft::node::{Node, NodeConfig, Participant};
use chord_bft::overlay::RoutingState;
use chord_bft::protocol::Timer;
use chord_bft::simnet::{ActorId, NetConfig, NodeAddress, RecordKind, Sim};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
/// Decided (version, proposal, value) per replica position.
type History = Vec<(u64, String, String)>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    }};
}

/// First node key at or after `k`, wrapping to the smallest key.
fn scan_owner(sorted: &[u64], k: u64) -> u64 {
    sorted
        .iter()
        .copied()
        .find(|x| *x >= k)
        .unwrap_or(sorted[0])
}

/// `uid + floor(n * 2^m / r) mod 2^m`.
fn replica_key(uid: u64, n: usize, r: usize, bits: u32) -> u64 {
    let size = 1u128 << bits;
    ((uid as u128 + n as u128 * size / r as u128) % size) as u64
}

fn bundled(name: &str) -> Scenario {
    Scenario::parse(harness::bundled(name).expect("bundled scenario").text)
        .expect("bundled scenario parses")
}

fn within(limit: Duration, start: Instant, detail: String) -> Outcome {
    let took = start.elapsed();
    ensure!(took < limit, "{detail}; took {took:.2?}, limit {limit:?}");
    Ok(format!("{detail}; {took:.2?}"))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let t = thresholds(1);
    ensure!(
        (t.replicas, t.votes, t.commits) == (4, 3, 2),
        "thresholds(1) = {t:?}"
    );
    for f in 0..=4 {
        let t = thresholds(f);
        ensure!(
            (t.replicas, t.votes, t.commits) == (3 * f + 1, 2 * f + 1, f + 1),
            "thresholds({f}) = {t:?}"
        );
    }
    within(
        Duration::from_secs(1),
        start,
        "thresholds(1) = (4, 3, 2); f in 0..=4 checked".into(),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let sc = bundled("stable-lookups");
    let probes = sc.probes.expect("probes configured");
    ensure!(
        sc.bits == 16
            && sc.nodes.count == Some(64)
            && probes.entries == 5
            && probes.per_entry == 1000,
        "stable-lookups no longer has the required shape"
    );
    let resolved = sc.resolve().map_err(|e| e.to_string())?;
    let world = harness::simulate(&resolved);
    let mut keys: Vec<u64> = world.live_ring().iter().map(|a| a.key.0).collect();
    keys.sort_unstable();
    ensure!(keys.len() == 64, "{} live nodes", keys.len());
    let results = world.probe_results();
    ensure!(results.len() == 5000, "{} probes", results.len());
    let entries: BTreeSet<ActorId> = results.iter().map(|(p, _)| p.entry).collect();
    ensure!(entries.len() == 5, "{} entry nodes", entries.len());
    let mut agree = 0;
    let mut hops = 0;
    for (p, out) in &results {
        let out = out.ok_or_else(|| format!("probe of {} never finished", p.target))?;
        hops += out.hops();
        if out
            .result
            .as_ref()
            .is_ok_and(|a| a.key.0 == scan_owner(&keys, p.target.0))
        {
            agree += 1;
        }
    }
    let mean = hops as f64 / results.len() as f64;
    ensure!(
        agree == 5000,
        "{agree}/5000 lookups agree with the successor scan"
    );
    ensure!(mean <= 12.0, "mean hops {mean:.2} > 12");
    within(
        Duration::from_secs(5),
        start,
        format!("5000/5000 agree, mean hops {mean:.2} <= 12"),
    )
}

/// Builds a ring by protocol joins and returns each node's final state.
fn joined_ring(ks: KeySpace, keys: &[u64], seed: u64) -> Vec<RoutingState> {
    let mut sim: Sim<Participant> = Sim::new(NetConfig {
        seed,
        ..NetConfig::default()
    });
    let config = NodeConfig::default();
    let addr = |i: usize| NodeAddress {
        id: ActorId(i as u32),
        key: Key(keys[i]),
    };
    let first = RoutingState::alone(addr(0), ks.bits());
    sim.add(Participant::Node(Box::new(Node::new(ks, 1, config, first))));
    for i in 1..keys.len() {
        sim.add(Participant::Node(Box::new(Node::joining(
            ks,
            1,
            config,
            addr(i),
            addr(0),
        ))));
    }
    sim.with_actor(ActorId(0), |p, ctx| {
        let n = p.as_node_mut().expect("node");
        n.overlay.start_maintenance(ctx, 1);
    });
    for i in 1..keys.len() {
        sim.with_actor(ActorId(i as u32), |_, ctx| {
            ctx.set_timer(20 * i as u64, Timer::Join)
        });
    }
    sim.run_until(20 * keys.len() as u64 + 2000)
        .expect("ring settles");
    sim.actors
        .iter()
        .map(|p| p.as_node().expect("node").overlay.state().clone())
        .collect()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let bits = 8;
    let r = 4;
    let ks = KeySpace::new(bits).expect("valid bits");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for size in [1usize, 2, 5, 16] {
        for trial in 0..3 {
            let mut all: Vec<u64> = (0..256).collect();
            all.shuffle(&mut rng);
            let keys: Vec<u64> = all[..size].to_vec();
            let states = joined_ring(ks, &keys, rng.gen());
            let mut sorted = keys.clone();
            sorted.sort_unstable();
            let ranges: Vec<_> = states
                .iter()
                .map(|s| s.responsibility().map(|rg| (s.me.key.0, rg)))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| {
                    format!("size {size} trial {trial}: a node never finished joining")
                })?;
            for k in 0..256u64 {
                let holders: Vec<u64> = ranges
                    .iter()
                    .filter(|(_, rg)| ks.contains(rg, Key(k)))
                    .map(|(n, _)| *n)
                    .collect();
                ensure!(
                    holders == [scan_owner(&sorted, k)],
                    "size {size} trial {trial}: key {k} held by {holders:?}"
                );
                let mut positions = BTreeSet::new();
                for n in 0..r {
                    let rk = replica_key(k, n, r, bits);
                    ensure!(
                        ks.replica_key(Key(k), n, r).0 == rk,
                        "replica key of {k}[{n}] is {}, expected {rk}",
                        ks.replica_key(Key(k), n, r)
                    );
                    ensure!(
                        ks.replica_index_of(Key(k), Key(rk), r) == Some(n),
                        "replica key {rk} of uid {k} does not map back to position {n}"
                    );
                    let owners = ranges
                        .iter()
                        .filter(|(_, rg)| ks.contains(rg, Key(rk)))
                        .count();
                    ensure!(
                        owners == 1,
                        "uid {k} position {n}: {owners} responsible nodes"
                    );
                    positions.insert(rk);
                }
                ensure!(positions.len() == r, "uid {k}: replica keys collide");
                checked += 1;
            }
        }
    }
    within(
        Duration::from_secs(1),
        start,
        format!("{checked} (ring, key) pairs: one owner and one position per replica index"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let sc = bundled("byz-get");
    let resolved = sc.resolve().map_err(|e| e.to_string())?;
    ensure!(resolved.r == 4 && sc.f == 1, "byz-get must use r=4, f=1");
    let world = harness::simulate(&resolved);
    let bits = sc.bits;
    let sorted: Vec<u64> = resolved.keys.iter().map(|k| k.0).collect();
    let faulty: BTreeSet<u64> = resolved.faults.iter().map(|f| sorted[f.node]).collect();

    let mut written: BTreeMap<u64, String> = BTreeMap::new();
    let mut gets = 0;
    let mut uids = BTreeSet::new();
    for ops in resolved.clients.values() {
        for o in ops {
            match &o.op {
                Op::Put { key, value } => {
                    written.insert(key.0, value.clone());
                }
                Op::Get { key } => {
                    gets += 1;
                    uids.insert(key.0);
                }
            }
        }
    }
    ensure!(
        gets == 500 && uids.len() == 50,
        "{gets} gets over {} uids",
        uids.len()
    );
    for uid in &uids {
        let bad = (0..4)
            .map(|n| scan_owner(&sorted, replica_key(*uid, n, 4, bits)))
            .filter(|o| faulty.contains(o))
            .count();
        ensure!(
            bad == 1,
            "uid {uid}: {bad} wrong-value replicas in its peer set"
        );
    }
    let mut correct = 0;
    for id in &world.clients {
        for o in world.client(*id).outcomes() {
            match (&o.op, &o.result) {
                (Op::Get { key }, OpResult::Found { value, .. }) => {
                    ensure!(
                        Some(value) == written.get(&key.0),
                        "get of {key} returned {value:?}, wrote {:?}",
                        written.get(&key.0)
                    );
                    correct += 1;
                }
                (Op::Get { key }, other) => return Err(format!("get of {key} ended {other:?}")),
                (Op::Put { key, .. }, r) => ensure!(
                    matches!(r, OpResult::Stored { .. }),
                    "put {key} ended {r:?}"
                ),
            }
        }
    }
    ensure!(
        correct == 500,
        "{correct}/500 gets returned the written value"
    );
    let corrupted = world
        .sim
        .net
        .trace()
        .records()
        .filter(|(_, r)| r.label == "get-ack" && r.honest.is_some())
        .count();
    ensure!(
        corrupted > 0,
        "no corrupted replies were sent, so nothing was tested"
    );
    within(
        Duration::from_secs(10),
        start,
        format!("500/500 gets correct; {corrupted} corrupted replies rejected"),
    )
}

/// Independent check of one contention run.
fn contention_run(seed: u64) -> Result<bool, String> {
    let mut sc = bundled("contention");
    sc.seed = seed;
    let resolved = sc.resolve().map_err(|e| e.to_string())?;
    let world = harness::simulate(&resolved);
    let uid = resolved.clients[&0][0].op.key();
    let proposed: BTreeSet<String> = resolved
        .clients
        .values()
        .flatten()
        .filter_map(|o| match &o.op {
            Op::Put { value, .. } => Some(value.clone()),
            Op::Get { .. } => None,
        })
        .collect();
    let mut histories: BTreeMap<(ActorId, usize), History> = BTreeMap::new();
    for id in &world.nodes {
        for d in world.node(*id).replica.decisions() {
            ensure!(
                d.uid == uid,
                "seed {seed}: decision for unexpected uid {}",
                d.uid
            );
            histories.entry((*id, d.index)).or_default().push((
                d.version,
                d.id.to_string(),
                String::from_utf8_lossy(&d.value).into_owned(),
            ));
        }
    }
    ensure!(
        histories.len() == 4,
        "seed {seed}: {} replica positions decided",
        histories.len()
    );
    let reference = histories.values().next().cloned().unwrap_or_default();
    for ((node, index), h) in &histories {
        ensure!(
            *h == reference,
            "seed {seed}: history of position {index} on {node} differs"
        );
    }
    for (i, (version, _, value)) in reference.iter().enumerate() {
        ensure!(
            *version == i as u64 + 1,
            "seed {seed}: version {version} at position {}",
            i + 1
        );
        ensure!(
            proposed.contains(value),
            "seed {seed}: committed {value:?} was never proposed"
        );
    }
    let ids: BTreeSet<&String> = reference.iter().map(|(_, id, _)| id).collect();
    ensure!(
        ids.len() == reference.len(),
        "seed {seed}: a proposal id was committed twice"
    );
    let last = reference
        .last()
        .ok_or_else(|| format!("seed {seed}: nothing decided"))?;
    for id in &world.nodes {
        if let Some(e) = world
            .node(*id)
            .replica
            .store()
            .iter()
            .find(|e| e.uid == uid)
        {
            ensure!(
                e.version == last.0 && String::from_utf8_lossy(&e.value) == last.2,
                "seed {seed}: {id} stores v{} rather than v{}",
                e.version,
                last.0
            );
        }
    }
    // Evidence of escaping a split vote: a backoff note, then a decision by
    // the same replica.
    let mut backed_off = BTreeSet::new();
    let mut escaped = false;
    for (_, r) in world.sim.net.trace().records() {
        if r.kind != RecordKind::Note {
            continue;
        }
        match r.label.as_str() {
            "backoff" => {
                backed_off.insert(r.from);
            }
            "decide" if backed_off.contains(&r.from) => escaped = true,
            _ => {}
        }
    }
    Ok(escaped)
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut escapes = 0;
    for seed in 0..100 {
        if contention_run(seed)? {
            escapes += 1;
        }
    }
    ensure!(escapes > 0, "no seed shows a backoff followed by a commit");
    within(
        Duration::from_secs(60),
        start,
        format!("100 seeds: identical gap-free histories of proposed values; {escapes} seeds show backoff then commit"),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let config = ExploreConfig::default();
    ensure!(
        config.f == 1 && config.proposals == 2,
        "explorer defaults changed"
    );
    let report = explore(config);
    ensure!(
        !report.truncated,
        "exploration truncated at {} states",
        report.states
    );
    ensure!(
        report.violations.is_empty(),
        "{} violations, first: {:?}",
        report.violations.len(),
        report.violations.first()
    );
    within(
        Duration::from_secs(120),
        start,
        format!(
            "{} states, {} terminal, zero agreement or validity violations",
            report.states, report.terminal_states
        ),
    )
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let sc = bundled("recovery");
    let resolved = sc.resolve().map_err(|e| e.to_string())?;
    let world = harness::simulate(&resolved);
    let bits = sc.bits;
    let r = resolved.r;
    let mut written: BTreeMap<u64, String> = BTreeMap::new();
    for o in resolved.clients.values().flatten() {
        if let Op::Put { key, value } = &o.op {
            written.insert(key.0, value.clone());
        }
    }
    ensure!(written.len() == 100, "{} uids populated", written.len());
    let crashed: Vec<ActorId> = world
        .nodes
        .iter()
        .copied()
        .filter(|id| world.sim.net.is_crashed(*id))
        .collect();
    ensure!(crashed.len() == 1, "{} nodes crashed", crashed.len());
    let live: Vec<_> = world.live_ring();
    let mut sorted: Vec<u64> = live.iter().map(|a| a.key.0).collect();
    sorted.sort_unstable();
    let by_key: BTreeMap<u64, ActorId> = live.iter().map(|a| (a.key.0, a.id)).collect();

    let mut holders: BTreeMap<(u64, usize), Vec<ActorId>> = BTreeMap::new();
    let mut phantoms = 0;
    for a in &live {
        for e in world.node(a.id).replica.store().iter() {
            if !written.contains_key(&e.uid.0) {
                phantoms += 1;
            }
            holders.entry((e.uid.0, e.index)).or_default().push(a.id);
        }
    }
    ensure!(phantoms == 0, "{phantoms} entries for uids nobody wrote");
    let mut restored_on_taker = 0;
    for (uid, value) in &written {
        let mut versions = BTreeSet::new();
        let mut nodes = BTreeSet::new();
        for n in 0..r {
            let owner = by_key[&scan_owner(&sorted, replica_key(*uid, n, r, bits))];
            let h = holders.get(&(*uid, n)).cloned().unwrap_or_default();
            ensure!(
                h == [owner],
                "uid {uid} position {n} held by {h:?}, owner {owner}"
            );
            let e = world
                .node(owner)
                .replica
                .store()
                .get(Key(*uid), n)
                .expect("holder has entry");
            ensure!(
                String::from_utf8_lossy(&e.value) == *value,
                "uid {uid} position {n} on {owner} has a different value"
            );
            versions.insert(e.version);
            nodes.insert(owner);
            if world.node(owner).recovery.reports().next().is_some() {
                restored_on_taker += 1;
            }
        }
        ensure!(
            versions.len() == 1,
            "uid {uid}: versions {versions:?} differ across replicas"
        );
        ensure!(
            nodes.len() == r,
            "uid {uid}: only {} distinct live replicas",
            nodes.len()
        );
    }
    let fabricated = world
        .sim
        .net
        .trace()
        .records()
        .filter(|(_, rec)| rec.label == "key-list-reply" && rec.honest.is_some())
        .count();
    ensure!(
        fabricated > 0,
        "the Byzantine peer never sent a fabricated key list"
    );
    ensure!(
        restored_on_taker > 0,
        "no entry was restored by the node that took over"
    );
    within(
        Duration::from_secs(30),
        start,
        format!(
            "100 uids on exactly {r} live replicas with identical values; {restored_on_taker} entries restored; {fabricated} fabricated key lists, 0 phantom entries"
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let naive = bundled("naive-misroute");
    let full = bundled("bft-misroute");
    ensure!(
        naive.client.naive && !full.client.naive,
        "scenario modes changed"
    );
    let (rn, rf) = (
        naive.resolve().map_err(|e| e.to_string())?,
        full.resolve().map_err(|e| e.to_string())?,
    );
    ensure!(rn.keys == rf.keys, "different rings");
    ensure!(rn.faults == rf.faults, "different fault schedules");
    ensure!(rn.faults.len() == 1, "expected a single faulty node");
    ensure!(
        rn.clients.iter().zip(&rf.clients).all(|(a, b)| a == b),
        "different workloads"
    );
    let a = harness::run(&rn).report;
    let b = harness::run(&rf).report;
    let va = a
        .verdict(Check::Availability)
        .ok_or("naive run has no availability verdict")?;
    let vb = b
        .verdict(Check::Availability)
        .ok_or("full run has no availability verdict")?;
    ensure!(
        va.status == harness::Status::Fail,
        "naive mode passed availability: {}",
        va.detail
    );
    ensure!(
        vb.status == harness::Status::Pass,
        "full protocol failed availability: {}",
        vb.detail
    );
    ensure!(
        b.verdict(Check::ClientSafety)
            .is_some_and(|v| v.status == harness::Status::Pass),
        "full protocol failed client safety"
    );
    within(
        Duration::from_secs(10),
        start,
        format!("naive: {}; full: {}", va.detail, vb.detail),
    )
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    for b in harness::BUNDLED {
        let sc = Scenario::parse(b.text).map_err(|e| e.to_string())?;
        let resolved = sc.resolve().map_err(|e| e.to_string())?;
        let first = harness::simulate(&resolved).sim.net.trace().digest();
        let second = harness::simulate(&resolved).sim.net.trace().digest();
        ensure!(
            first == second,
            "{}: digests {first} and {second} differ",
            b.name
        );
    }
    within(
        Duration::from_secs(180),
        start,
        format!(
            "{} bundled scenarios replay to identical digests",
            harness::BUNDLED.len()
        ),
    )
}

fn liveness(world: &World<'_>, crashed: usize) -> Result<(usize, usize, usize), String> {
    let res = world.resolved;
    let down: Vec<ActorId> = world
        .nodes
        .iter()
        .copied()
        .filter(|id| world.sim.net.is_crashed(*id))
        .collect();
    ensure!(
        down.len() == crashed,
        "{} nodes down, expected {crashed}",
        down.len()
    );
    let mut decided: BTreeSet<(Key, u64)> = BTreeSet::new();
    for id in &world.nodes {
        for d in world.node(*id).replica.decisions() {
            decided.insert((d.uid, d.version));
        }
    }
    let (mut stored, mut refused, mut false_acks) = (0, 0, 0);
    for id in &world.clients {
        for o in world.client(*id).outcomes() {
            if let Op::Put { key, .. } = &o.op {
                match o.result {
                    OpResult::Stored { version } => {
                        stored += 1;
                        if !decided.contains(&(*key, version)) {
                            false_acks += 1;
                        }
                    }
                    OpResult::Timeout | OpResult::Failed => refused += 1,
                    _ => return Err(format!("put ended {:?}", o.result)),
                }
            }
        }
    }
    let puts = res
        .clients
        .values()
        .flatten()
        .filter(|o| matches!(o.op, Op::Put { .. }))
        .count();
    ensure!(
        stored + refused == puts,
        "{} of {puts} puts finished",
        stored + refused
    );
    Ok((stored, refused, false_acks))
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let over = bundled("liveness-f-plus-one");
    let under = bundled("liveness-f");
    let ro = over.resolve().map_err(|e| e.to_string())?;
    let ru = under.resolve().map_err(|e| e.to_string())?;

    // The crashed nodes must hold f+1 (resp. f) positions of every affected peer set.
    for (res, want) in [(&ro, 2usize), (&ru, 1)] {
        let sorted: Vec<u64> = res.keys.iter().map(|k| k.0).collect();
        let down: BTreeSet<u64> = res.faults.iter().map(|f| sorted[f.node]).collect();
        for o in res.clients.values().flatten() {
            let hits = (0..res.r)
                .filter(|n| {
                    down.contains(&scan_owner(
                        &sorted,
                        replica_key(o.op.key().0, *n, res.r, res.scenario.bits),
                    ))
                })
                .count();
            ensure!(
                hits == want,
                "{}: uid {} has {hits} crashed replicas",
                res.scenario.name,
                o.op.key()
            );
        }
    }
    let wo = harness::simulate(&ro);
    let (stored, refused, false_acks) = liveness(&wo, 2)?;
    ensure!(
        stored == 0 && false_acks == 0,
        "f+1 crashed: {stored} puts acknowledged"
    );
    let wu = harness::simulate(&ru);
    let (ok, failed, bad) = liveness(&wu, 1)?;
    ensure!(
        failed == 0 && bad == 0,
        "f crashed: {failed} puts failed, {bad} false acks"
    );
    ensure!(
        ro.scenario.expect.get(&Check::Availability) == Some(&Expectation::Fail),
        "the over-budget scenario should expect unavailability"
    );
    within(
        Duration::from_secs(10),
        start,
        format!(
            "f+1 crashed: {refused} puts refused, 0 acknowledged; f crashed: {ok} puts committed"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("threshold arithmetic", criterion_1),
        ("lookup oracle equivalence", criterion_2),
        ("exhaustive keyspace partition", criterion_3),
        ("BFT read safety", criterion_4),
        ("serialization under contention", criterion_5),
        ("small-model consensus exploration", criterion_6),
        ("recovery restoration", criterion_7),
        ("motivating-failure demonstration", criterion_8),
        ("determinism", criterion_9),
        ("liveness boundary", criterion_10),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let label = format!("criterion {}", n + 1);
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| label.ends_with(f.as_str()) || name.contains(f.as_str()))
        {
            continue;
        }
        match check() {
            Ok(detail) => println!("{label:<13} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{label:<13} FAIL  {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
