//! Scenario files: a TOML description of one run.
//!
//! A scenario names the ring, the fault schedule and an explicit timed
//! workload. Parsing rejects unknown fields, and [`Scenario::resolve`]
//! checks every cross-field constraint before anything runs.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientConfig, Op};
use crate::keyspace::{Key, KeySpace};
use crate::node::NodeConfig;
use crate::simnet::{DelayModel, FaultKind, Tick};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Distinct uniformly random keys.
    #[default]
    Random,
    /// `count / r` random keys in the first replica arc, copied into every
    /// other arc, so each peer set has exactly one member per arc.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nodes {
    #[serde(default)]
    pub keys: Vec<u64>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub layout: Layout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    #[serde(default)]
    pub delay: DelayModel,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
}

fn default_max_events() -> u64 {
    20_000_000
}

impl Default for Network {
    fn default() -> Self {
        Self {
            delay: DelayModel::default(),
            max_events: default_max_events(),
        }
    }
}

/// Selects nodes by position in key order, or by key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEntry {
    #[serde(default)]
    pub node: Option<usize>,
    #[serde(default)]
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub key: Option<u64>,
    pub kind: FaultKind,
    #[serde(default)]
    pub at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinEntry {
    pub key: u64,
    pub at: Tick,
    /// Position of the bootstrap node in key order.
    #[serde(default)]
    pub via: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Put,
    Get,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadEntry {
    pub at: Tick,
    #[serde(default)]
    pub client: u32,
    pub op: OpKind,
    #[serde(default)]
    pub key: Option<u64>,
    /// Name of a generated key set; expands to one operation per key.
    #[serde(default)]
    pub key_set: Option<String>,
    /// Value template for puts; `{key}`, `{rep}` and `{client}` are substituted.
    #[serde(default)]
    pub value: Option<String>,
    #[serde(default = "one")]
    pub repeat: u32,
    /// Ticks between consecutive expanded operations.
    #[serde(default)]
    pub every: Tick,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySetSpec {
    pub count: usize,
    /// Draw keys from the range this initial node (by position) is
    /// responsible for, instead of the whole circle.
    #[serde(default)]
    pub owned_by: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probes {
    pub at: Tick,
    /// Number of entry nodes, spread evenly around the ring.
    pub entries: usize,
    pub per_entry: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    LookupOracle,
    HopBound,
    Serialization,
    Convergence,
    ClientSafety,
    Availability,
    Replication,
    NoFabrication,
    Determinism,
}

impl Check {
    pub const ALL: [Check; 9] = [
        Check::LookupOracle,
        Check::HopBound,
        Check::Serialization,
        Check::Convergence,
        Check::ClientSafety,
        Check::Availability,
        Check::Replication,
        Check::NoFabrication,
        Check::Determinism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::LookupOracle => "lookup-oracle",
            Check::HopBound => "hop-bound",
            Check::Serialization => "serialization",
            Check::Convergence => "convergence",
            Check::ClientSafety => "client-safety",
            Check::Availability => "availability",
            Check::Replication => "replication",
            Check::NoFabrication => "no-fabrication",
            Check::Determinism => "determinism",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "schema")]
    pub schema: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub bits: u32,
    pub f: usize,
    #[serde(default)]
    pub r: Option<usize>,
    pub stop_at: Tick,
    pub nodes: Nodes,
    #[serde(default)]
    pub network: Network,
    #[serde(default)]
    pub node: NodeConfig,
    #[serde(default)]
    pub client: ClientConfig,
    /// Entry nodes per client; defaults to `2r`, capped at the ring size.
    #[serde(default)]
    pub entry_nodes: Option<usize>,
    #[serde(default)]
    pub faults: Vec<FaultEntry>,
    #[serde(default)]
    pub joins: Vec<JoinEntry>,
    #[serde(default)]
    pub key_sets: BTreeMap<String, KeySetSpec>,
    #[serde(default)]
    pub workload: Vec<WorkloadEntry>,
    #[serde(default)]
    pub probes: Option<Probes>,
    /// Oracles to evaluate; all of them when absent.
    #[serde(default)]
    pub checks: Option<Vec<Check>>,
    /// Expected verdicts that differ from `pass`.
    #[serde(default)]
    pub expect: BTreeMap<Check, Expectation>,
}

fn schema() -> u32 {
    SCHEMA_VERSION
}

/// A fault bound to a node position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ResolvedFault {
    pub node: usize,
    pub kind: FaultKind,
    pub at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolvedOp {
    pub client: u32,
    pub at: Tick,
    pub op: Op,
}

/// A validated scenario with every generated value fixed.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scenario: Scenario,
    pub ks: KeySpace,
    pub r: usize,
    /// Initial ring, sorted by key.
    pub keys: Vec<Key>,
    pub joins: Vec<JoinEntry>,
    pub faults: Vec<ResolvedFault>,
    /// Operations per client id, in start order.
    pub clients: BTreeMap<u32, Vec<ResolvedOp>>,
    pub entry_nodes: usize,
    pub checks: BTreeSet<Check>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Validates the scenario and generates keys, using `self.seed`.
    pub fn resolve(&self) -> Result<Resolved, ScenarioError> {
        if self.schema != SCHEMA_VERSION {
            return invalid(format!(
                "schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema
            ));
        }
        let ks = KeySpace::new(self.bits).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let r = 3 * self.f + 1;
        if let Some(given) = self.r {
            if given != r {
                return invalid(format!(
                    "r must equal 3f+1 = {r} for f = {}, got r = {given}",
                    self.f
                ));
            }
        }
        if r as u128 > ks.size() as u128 {
            return invalid(format!("r = {r} exceeds the keyspace size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6b65_7973);
        let keys = self.node_keys(&ks, r, &mut rng)?;
        let n = keys.len();

        let mut taken: BTreeSet<u64> = keys.iter().map(|k| k.0).collect();
        for j in &self.joins {
            if ks.key(j.key).is_err() {
                return invalid(format!(
                    "join key {} does not fit in {} bits",
                    j.key, self.bits
                ));
            }
            if !taken.insert(j.key) {
                return invalid(format!("join key {} is already used", j.key));
            }
            if j.via >= n {
                return invalid(format!("join bootstrap position {} is out of range", j.via));
            }
        }

        let mut faults = Vec::new();
        for f in &self.faults {
            let mut targets: Vec<usize> = f.nodes.clone();
            targets.extend(f.node);
            if let Some(k) = f.key {
                match keys.iter().position(|x| x.0 == k) {
                    Some(p) => targets.push(p),
                    None => {
                        return invalid(format!(
                            "fault names key {k}, which is not an initial node"
                        ))
                    }
                }
            }
            if targets.is_empty() {
                return invalid("a fault entry names no node");
            }
            for t in targets {
                if t >= n {
                    return invalid(format!(
                        "fault node position {t} is out of range (ring has {n} nodes)"
                    ));
                }
                faults.push(ResolvedFault {
                    node: t,
                    kind: f.kind,
                    at: f.at,
                });
            }
        }

        let mut sets: BTreeMap<&str, Vec<Key>> = BTreeMap::new();
        for (name, spec) in &self.key_sets {
            let (lower, width) = match spec.owned_by {
                None => (0, ks.size()),
                Some(p) if p < n => {
                    let lower = keys[(p + n - 1) % n];
                    let width = if n == 1 {
                        ks.size()
                    } else {
                        ks.distance(lower, keys[p])
                    };
                    (lower.0 + 1, width)
                }
                Some(p) => {
                    return invalid(format!(
                        "key set {name} names node position {p}, which is out of range"
                    ))
                }
            };
            if spec.count as u128 > width as u128 {
                return invalid(format!(
                    "key set {name} wants more keys than its range holds"
                ));
            }
            let mut chosen = BTreeSet::new();
            while chosen.len() < spec.count {
                chosen.insert(ks.wrap(lower.wrapping_add(rng.gen_range(0..width))));
            }
            let mut v: Vec<Key> = chosen.into_iter().collect();
            v.shuffle(&mut rng);
            sets.insert(name, v);
        }

        let mut clients: BTreeMap<u32, Vec<ResolvedOp>> = BTreeMap::new();
        for w in &self.workload {
            let keys: Vec<Key> = match (&w.key, &w.key_set) {
                (Some(k), None) => vec![ks
                    .key(*k)
                    .map_err(|e| ScenarioError::Invalid(e.to_string()))?],
                (None, Some(s)) => match sets.get(s.as_str()) {
                    Some(v) => v.clone(),
                    None => return invalid(format!("unknown key set {s}")),
                },
                _ => return invalid("a workload entry needs exactly one of key and key_set"),
            };
            if w.op == OpKind::Put && w.value.is_none() {
                return invalid("a put needs a value");
            }
            let mut step = 0;
            for rep in 0..w.repeat {
                for key in &keys {
                    let op = match w.op {
                        OpKind::Get => Op::Get { key: *key },
                        OpKind::Put => Op::Put {
                            key: *key,
                            value: w
                                .value
                                .as_deref()
                                .unwrap_or_default()
                                .replace("{key}", &key.to_string())
                                .replace("{rep}", &rep.to_string())
                                .replace("{client}", &w.client.to_string()),
                        },
                    };
                    clients.entry(w.client).or_default().push(ResolvedOp {
                        client: w.client,
                        at: w.at + step * w.every,
                        op,
                    });
                    step += 1;
                }
            }
        }
        for ops in clients.values_mut() {
            ops.sort_by_key(|o| o.at);
        }
        if let Some(p) = &self.probes {
            if p.entries == 0 || p.entries > n {
                return invalid(format!("probe entries must be in 1..={n}"));
            }
        }
        let entry_nodes = self.entry_nodes.unwrap_or(2 * r).clamp(1, n);
        let checks = match &self.checks {
            Some(v) => v.iter().copied().collect(),
            None => Check::ALL.into_iter().collect(),
        };
        Ok(Resolved {
            scenario: self.clone(),
            ks,
            r,
            keys,
            joins: self.joins.clone(),
            faults,
            clients,
            entry_nodes,
            checks,
        })
    }

    fn node_keys(
        &self,
        ks: &KeySpace,
        r: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Key>, ScenarioError> {
        let n = &self.nodes;
        let mut keys: Vec<u64> = match (n.keys.is_empty(), n.count) {
            (false, None) => n.keys.clone(),
            (true, Some(0)) => return invalid("a ring needs at least one node"),
            (true, Some(count)) => match n.layout {
                Layout::Random => {
                    if count as u128 > ks.size() as u128 {
                        return invalid("more nodes than keys");
                    }
                    let mut set = BTreeSet::new();
                    while set.len() < count {
                        set.insert(rng.gen_range(0..ks.size()));
                    }
                    set.into_iter().collect()
                }
                Layout::Symmetric => {
                    if count % r != 0 {
                        return invalid(format!(
                            "a symmetric layout needs a node count divisible by r = {r}"
                        ));
                    }
                    let arc = ks.replica_offset(1, r);
                    if ((count / r) as u64) > arc {
                        return invalid("more nodes than keys in one replica arc");
                    }
                    let mut bases = BTreeSet::new();
                    while bases.len() < count / r {
                        bases.insert(rng.gen_range(0..arc));
                    }
                    (0..r)
                        .flat_map(|i| bases.iter().map(move |b| (i, *b)))
                        .map(|(i, b)| ks.add(Key(b), ks.replica_offset(i, r)).0)
                        .collect()
                }
            },
            _ => return invalid("nodes needs exactly one of keys and count"),
        };
        keys.sort_unstable();
        let before = keys.len();
        keys.dedup();
        if keys.len() != before {
            return invalid("node keys must be distinct");
        }
        if keys.is_empty() {
            return invalid("a ring needs at least one node");
        }
        keys.into_iter()
            .map(|k| ks.key(k).map_err(|e| ScenarioError::Invalid(e.to_string())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
bits = 8
f = 1
stop_at = 100
[nodes]
keys = [10, 80, 150, 220]
"#;

    #[test]
    fn minimal_scenario_resolves() {
        let s = Scenario::parse(BASE).unwrap();
        let r = s.resolve().unwrap();
        assert_eq!(r.r, 4);
        assert_eq!(r.keys.len(), 4);
        assert_eq!(r.checks.len(), Check::ALL.len());
    }

    #[test]
    fn r_must_match_f() {
        let s = Scenario::parse(&format!("r = 3\n{BASE}")).unwrap();
        let err = s.resolve().unwrap_err().to_string();
        assert!(err.contains("3f+1"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(Scenario::parse(&format!("colour = 3\n{BASE}")).is_err());
    }

    #[test]
    fn symmetric_layout_repeats_every_arc() {
        let text = BASE.replace(
            "keys = [10, 80, 150, 220]",
            "count = 8\nlayout = \"symmetric\"",
        );
        let r = Scenario::parse(&text).unwrap().resolve().unwrap();
        let ks = KeySpace::new(8).unwrap();
        for k in &r.keys {
            assert!(r.keys.contains(&ks.add(*k, 64)));
        }
    }

    #[test]
    fn workload_expands_key_sets() {
        let text = format!(
            "{BASE}\n[key_sets]\nhot = {{ count = 5 }}\n[[workload]]\nat = 10\nop = \"put\"\nkey_set = \"hot\"\nvalue = \"v{{key}}-{{rep}}\"\nrepeat = 2\nevery = 3\n"
        );
        let r = Scenario::parse(&text).unwrap().resolve().unwrap();
        let ops = &r.clients[&0];
        assert_eq!(ops.len(), 10);
        assert_eq!(ops[9].at, 10 + 9 * 3);
        match &ops[5].op {
            Op::Put { key, value } => assert_eq!(value, &format!("v{key}-1")),
            other => panic!("{other:?}"),
        }
    }
}
