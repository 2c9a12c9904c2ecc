//! Concurrent puts to one uid are serialized into a single version history.

use chord_bft::harness::{self, Scenario};
use chord_bft::keyspace::Key;

fn main() {
    let sc = Scenario::parse(harness::bundled("contention").unwrap().text).unwrap();
    let resolved = sc.resolve().unwrap();
    let world = harness::simulate(&resolved);

    for c in &world.clients {
        for o in world.client(*c).outcomes() {
            println!("client {} attempts={} {:?}", o.client, o.attempts, o.result);
        }
    }
    for n in &world.nodes {
        let node = world.node(*n);
        let history: Vec<String> = node
            .replica
            .decisions()
            .iter()
            .filter(|d| d.uid == Key(1234))
            .map(|d| format!("v{}={}", d.version, String::from_utf8_lossy(&d.value)))
            .collect();
        if !history.is_empty() {
            println!("node {:>4}: {}", node.address().key.0, history.join(" "));
        }
    }
}
