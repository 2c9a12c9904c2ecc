//! Checks a finished run against independent oracles.
//!
//! Every check reads final actor state and the recorded outcomes; none of
//! them reuse protocol code paths beyond the keyspace arithmetic. A failure
//! points at the first offending trace record when one exists.

use std::collections::{BTreeMap, BTreeSet};

use super::report::Verdict;
use super::run::World;
use super::scenario::{Check, Expectation};
use crate::client::{Op, OpResult};
use crate::dht::consensus::ProposalId;
use crate::keyspace::Key;
use crate::overlay::oracle_owner;
use crate::simnet::ActorId;

type Outcome = Result<String, (String, Option<u64>)>;

fn skipped(why: &str) -> Outcome {
    Ok(format!("skipped: {why}"))
}

fn fail<T>(detail: String, evidence: Option<u64>) -> Result<T, (String, Option<u64>)> {
    Err((detail, evidence))
}

/// What correct replicas decided for one version of a uid.
#[derive(Debug, Clone)]
struct Decided {
    id: ProposalId,
    value: Vec<u8>,
    position: u64,
}

pub fn evaluate(world: &World<'_>, replay: Option<&str>) -> Vec<Verdict> {
    let res = world.resolved;
    res.checks
        .iter()
        .map(|check| {
            let expected = res
                .scenario
                .expect
                .get(check)
                .copied()
                .unwrap_or(Expectation::Pass);
            let outcome = match check {
                Check::LookupOracle => lookup_oracle(world),
                Check::HopBound => hop_bound(world),
                Check::Serialization => serialization(world),
                Check::Convergence => convergence(world),
                Check::ClientSafety => client_safety(world),
                Check::Availability => availability(world),
                Check::Replication => replication(world),
                Check::NoFabrication => no_fabrication(world),
                Check::Determinism => determinism(world, replay),
            };
            Verdict::new(*check, expected, outcome)
        })
        .collect()
}

fn lookup_oracle(world: &World<'_>) -> Outcome {
    let results = world.probe_results();
    if results.is_empty() {
        return skipped("no lookup probes");
    }
    let mut agree = 0;
    let mut first_bad = None;
    for (p, out) in &results {
        match out.map(|o| &o.result) {
            Some(Ok(a)) if *a == p.expected => agree += 1,
            got => {
                first_bad.get_or_insert_with(|| {
                    format!(
                        "lookup of {} from {} gave {:?}, expected {}",
                        p.target, p.entry, got, p.expected
                    )
                });
            }
        }
    }
    match first_bad {
        None => Ok(format!(
            "{agree}/{} lookups agree with the successor scan",
            results.len()
        )),
        Some(msg) => fail(format!("{agree}/{} agree; {msg}", results.len()), None),
    }
}

fn hop_bound(world: &World<'_>) -> Outcome {
    let results = world.probe_results();
    if results.is_empty() {
        return skipped("no lookup probes");
    }
    let hops: Vec<usize> = results
        .iter()
        .filter_map(|(_, o)| o.map(|o| o.hops()))
        .collect();
    let mean = hops.iter().sum::<usize>() as f64 / hops.len().max(1) as f64;
    let bound = 2.0 * (world.ring_at_probe.max(2) as f64).log2();
    let detail = format!(
        "mean {mean:.2} hops over {} lookups, bound {bound:.2}",
        hops.len()
    );
    if mean <= bound {
        Ok(detail)
    } else {
        fail(detail, None)
    }
}

fn correct_nodes<'w>(world: &'w World<'_>) -> impl Iterator<Item = ActorId> + 'w {
    world
        .nodes
        .iter()
        .copied()
        .filter(|id| !world.is_byzantine(*id))
}

/// Proposal id to the value its put carried, over every client.
fn proposals(world: &World<'_>) -> BTreeMap<ProposalId, Vec<u8>> {
    let mut out = BTreeMap::new();
    for id in &world.clients {
        let c = world.client(*id);
        for (pid, seq) in c.proposals() {
            if let Op::Put { value, .. } = &c.script()[*seq].op {
                out.insert(*pid, value.as_bytes().to_vec());
            }
        }
    }
    out
}

/// Decisions of correct replicas per (uid, version). The first decision
/// seen wins; conflicts are reported by [`serialization`].
fn decided(world: &World<'_>) -> BTreeMap<(Key, u64), Decided> {
    let mut out = BTreeMap::new();
    for id in correct_nodes(world) {
        for d in world.node(id).replica.decisions() {
            out.entry((d.uid, d.version)).or_insert_with(|| Decided {
                id: d.id,
                value: d.value.clone(),
                position: d.position,
            });
        }
    }
    out
}

fn serialization(world: &World<'_>) -> Outcome {
    let props = proposals(world);
    let mut seen: BTreeMap<(Key, u64), (ProposalId, Vec<u8>, u64)> = BTreeMap::new();
    let mut all: Vec<(u64, ActorId, &crate::dht::service::Decision)> = Vec::new();
    for id in correct_nodes(world) {
        for d in world.node(id).replica.decisions() {
            all.push((d.position, id, d));
        }
    }
    all.sort_by_key(|(p, _, _)| *p);
    if all.is_empty() {
        return skipped("no decisions");
    }
    let mut last: BTreeMap<(ActorId, Key, usize), u64> = BTreeMap::new();
    for (pos, node, d) in &all {
        match seen.get(&(d.uid, d.version)) {
            Some((id, value, _)) if *id != d.id || *value != d.value => {
                return fail(
                    format!(
                        "agreement: {node} decided {} for {} v{}, another correct replica decided {id}",
                        d.id, d.uid, d.version
                    ),
                    Some(*pos),
                );
            }
            Some(_) => {}
            None => {
                seen.insert((d.uid, d.version), (d.id, d.value.clone(), *pos));
            }
        }
        match props.get(&d.id) {
            Some(v) if *v == d.value => {}
            _ => {
                return fail(
                    format!(
                        "validity: {node} decided {} for {}, which no client proposed",
                        d.id, d.uid
                    ),
                    Some(*pos),
                )
            }
        }
        let prev = last.insert((*node, d.uid, d.index), d.version);
        if prev.is_some_and(|p| p >= d.version) {
            return fail(
                format!(
                    "{node} decided {} v{} after v{}",
                    d.uid,
                    d.version,
                    prev.unwrap_or_default()
                ),
                Some(*pos),
            );
        }
    }
    let mut per_uid: BTreeMap<Key, Vec<u64>> = BTreeMap::new();
    for (uid, v) in seen.keys() {
        per_uid.entry(*uid).or_default().push(*v);
    }
    for (uid, versions) in &per_uid {
        if let Some((i, v)) = versions
            .iter()
            .enumerate()
            .find(|(i, v)| **v != *i as u64 + 1)
        {
            let pos = seen[&(*uid, *v)].2;
            return fail(
                format!(
                    "gap in versions of {uid}: expected v{} but found v{v}",
                    i + 1
                ),
                Some(pos),
            );
        }
    }
    // Stored entries must be the decided value of their version.
    for id in correct_nodes(world) {
        if world.sim.net.is_crashed(id) {
            continue;
        }
        for e in world.node(id).replica.store().iter() {
            if let Some((_, value, pos)) = seen.get(&(e.uid, e.version)) {
                if *value != e.value {
                    return fail(
                        format!(
                            "{id} stores a value for {} v{} that differs from the decision",
                            e.uid, e.version
                        ),
                        Some(*pos),
                    );
                }
            }
        }
    }
    Ok(format!(
        "{} decisions over {} uids agree, are gap-free and were proposed",
        all.len(),
        per_uid.len()
    ))
}

fn convergence(world: &World<'_>) -> Outcome {
    let res = world.resolved;
    let ks = res.ks;
    let dec = decided(world);
    if dec.is_empty() {
        return skipped("no decisions");
    }
    let live = world.live_ring();
    let mut latest: BTreeMap<Key, u64> = BTreeMap::new();
    for (uid, v) in dec.keys() {
        latest.insert(*uid, *v);
    }
    let mut checked = 0;
    for (uid, version) in &latest {
        let want = &dec[&(*uid, *version)];
        for index in 0..res.r {
            let Some(owner) = oracle_owner(&ks, &live, ks.replica_key(*uid, index, res.r)) else {
                continue;
            };
            if world.is_byzantine(owner.id) {
                continue;
            }
            checked += 1;
            let got = world.node(owner.id).replica.store().get(*uid, index);
            match got {
                Some(e) if e.version == *version && e.value == want.value => {}
                Some(e) => {
                    return fail(
                        format!(
                            "{} holds {uid}[{index}] at v{}, latest decision is v{version}",
                            owner, e.version
                        ),
                        Some(want.position),
                    )
                }
                None => return fail(
                    format!(
                        "{owner} holds nothing for {uid}[{index}], latest decision is v{version}"
                    ),
                    Some(want.position),
                ),
            }
        }
    }
    Ok(format!(
        "{checked} correct replicas over {} uids hold the latest decision",
        latest.len()
    ))
}

fn client_safety(world: &World<'_>) -> Outcome {
    let naive = world.resolved.scenario.client.naive;
    let dec = decided(world);
    let props = proposals(world);
    let mut ops: Vec<_> = world
        .clients
        .iter()
        .flat_map(|c| world.client(*c).outcomes().iter())
        .collect();
    ops.sort_by_key(|o| o.position);
    if ops.is_empty() {
        return skipped("no completed operations");
    }
    let put_values: BTreeMap<Key, BTreeSet<&str>> = world
        .resolved
        .clients
        .values()
        .flatten()
        .filter_map(|o| match &o.op {
            Op::Put { key, value } => Some((*key, value.as_str())),
            Op::Get { .. } => None,
        })
        .fold(BTreeMap::new(), |mut m, (k, v)| {
            m.entry(k).or_default().insert(v);
            m
        });
    let mut acked: BTreeMap<Key, u64> = BTreeMap::new();
    let mut checked = 0;
    for o in &ops {
        let key = o.op.key();
        match &o.result {
            OpResult::Found { value, version } => {
                checked += 1;
                if naive {
                    if !put_values
                        .get(&key)
                        .is_some_and(|s| s.contains(value.as_str()))
                    {
                        return fail(
                            format!("get of {key} returned {value:?}, which was never written"),
                            Some(o.position),
                        );
                    }
                    continue;
                }
                match dec.get(&(key, *version)) {
                    Some(d) if d.value == value.as_bytes() => {}
                    Some(_) => {
                        return fail(
                            format!("get of {key} returned {value:?} v{version}, which differs from the committed value"),
                            Some(o.position),
                        )
                    }
                    None => {
                        return fail(
                            format!("get of {key} returned {value:?} v{version}, which was never committed"),
                            Some(o.position),
                        )
                    }
                }
            }
            OpResult::NotFound => {
                checked += 1;
                if acked.keys().any(|k| *k == key) {
                    return fail(
                        format!("get of {key} found nothing after a put was acknowledged"),
                        Some(o.position),
                    );
                }
            }
            OpResult::Stored { version } => {
                checked += 1;
                acked.insert(key, *version);
                if naive {
                    continue;
                }
                let ok = dec
                    .get(&(key, *version))
                    .is_some_and(|d| Some(d.id) == o.id && props.contains_key(&d.id));
                if !ok {
                    return fail(
                        format!("put to {key} was acknowledged as v{version}, which correct replicas did not commit for it"),
                        Some(o.position),
                    );
                }
            }
            OpResult::Timeout | OpResult::Failed => {}
        }
    }
    Ok(format!("{checked} results match committed state"))
}

fn availability(world: &World<'_>) -> Outcome {
    let mut total = 0;
    let mut ok = 0;
    let mut first_bad: Option<(String, u64)> = None;
    for id in &world.clients {
        let c = world.client(*id);
        total += c.script().len();
        for o in c.outcomes() {
            if o.result.is_success() {
                ok += 1;
            } else if first_bad.as_ref().is_none_or(|(_, p)| o.position < *p) {
                first_bad = Some((
                    format!("{:?} on {} ended {:?}", o.op, o.client, o.result),
                    o.position,
                ));
            }
        }
    }
    if total == 0 {
        return skipped("no workload");
    }
    let detail = format!("{ok}/{total} operations succeeded");
    match first_bad {
        None if ok == total => Ok(detail),
        None => fail(format!("{detail}; {} never finished", total - ok), None),
        Some((msg, pos)) => fail(format!("{detail}; first failure: {msg}"), Some(pos)),
    }
}

fn replication(world: &World<'_>) -> Outcome {
    let res = world.resolved;
    let ks = res.ks;
    let dec = decided(world);
    if dec.is_empty() {
        return skipped("no decisions");
    }
    let live = world.live_ring();
    let mut latest: BTreeMap<Key, u64> = BTreeMap::new();
    for (uid, v) in dec.keys() {
        latest.insert(*uid, *v);
    }
    let mut holders: BTreeMap<(Key, usize), Vec<ActorId>> = BTreeMap::new();
    for a in &live {
        for e in world.node(a.id).replica.store().iter() {
            holders.entry((e.uid, e.index)).or_default().push(a.id);
        }
    }
    for (uid, version) in &latest {
        let want = &dec[&(*uid, *version)];
        for index in 0..res.r {
            let owner = oracle_owner(&ks, &live, ks.replica_key(*uid, index, res.r))
                .expect("ring is not empty");
            let h = holders
                .get(&(*uid, index))
                .map(Vec::as_slice)
                .unwrap_or_default();
            if h != [owner.id] {
                return fail(
                    format!(
                        "{uid}[{index}] is held by {h:?} rather than exactly its owner {owner}"
                    ),
                    Some(want.position),
                );
            }
            let e = world
                .node(owner.id)
                .replica
                .store()
                .get(*uid, index)
                .expect("holder has the entry");
            if e.version != *version || e.value != want.value {
                return fail(
                    format!(
                        "{owner} holds {uid}[{index}] v{}, expected v{version}",
                        e.version
                    ),
                    Some(want.position),
                );
            }
        }
    }
    Ok(format!(
        "{} uids each on exactly {} live replicas with the latest value",
        latest.len(),
        res.r
    ))
}

fn no_fabrication(world: &World<'_>) -> Outcome {
    let written: BTreeSet<Key> = world
        .resolved
        .clients
        .values()
        .flatten()
        .filter(|o| matches!(o.op, Op::Put { .. }))
        .map(|o| o.op.key())
        .collect();
    let mut entries = 0;
    for a in world.live_ring() {
        let node = world.node(a.id);
        for e in node.replica.store().iter() {
            entries += 1;
            if !written.contains(&e.uid) {
                return fail(
                    format!("{a} stores {}[{}], which no client wrote", e.uid, e.index),
                    None,
                );
            }
        }
        for uid in node.replica.naive_store().keys() {
            entries += 1;
            if !written.contains(uid) {
                return fail(format!("{a} stores {uid}, which no client wrote"), None);
            }
        }
    }
    Ok(format!("{entries} stored entries, all written by clients"))
}

fn determinism(world: &World<'_>, replay: Option<&str>) -> Outcome {
    let digest = world.sim.net.trace().digest();
    match replay {
        None => skipped("no replay"),
        Some(d) if d == digest => Ok(format!("replay digest {} matches", &digest[..16])),
        Some(d) => fail(
            format!("replay digest {} differs from {}", &d[..16], &digest[..16]),
            None,
        ),
    }
}
