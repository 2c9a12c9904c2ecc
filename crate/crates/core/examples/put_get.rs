//! Write a value, overwrite it, and read it back through the replicated DHT.

use chord_bft::harness::{self, Scenario};

const SCENARIO: &str = r#"
name = "put-get"
seed = 1
bits = 14
f = 1
stop_at = 5000

[nodes]
count = 12

[[workload]]
at = 10
client = 0
op = "put"
key = 4242
value = "first"

[[workload]]
at = 1000
client = 0
op = "put"
key = 4242
value = "second"

[[workload]]
at = 2000
client = 1
op = "get"
key = 4242

[[workload]]
at = 2000
client = 1
op = "get"
key = 17
"#;

fn main() {
    let resolved = Scenario::parse(SCENARIO).unwrap().resolve().unwrap();
    let world = harness::simulate(&resolved);
    for c in &world.clients {
        for o in world.client(*c).outcomes() {
            println!(
                "client {} t={:>4}..{:<4} {:?} -> {:?} ({} lookup hops)",
                o.client, o.start, o.end, o.op, o.result, o.hops
            );
        }
    }
    let uid = chord_bft::keyspace::Key(4242);
    for n in &world.nodes {
        let node = world.node(*n);
        for index in 0..4 {
            if let Some(e) = node.replica.store().get(uid, index) {
                println!(
                    "node {} holds replica {index} at key {}: {:?} v{}",
                    node.address().key.0,
                    e.calculated.0,
                    String::from_utf8_lossy(&e.value),
                    e.version
                );
            }
        }
    }
}
