//! Resolve keys on a settled ring, then compare simulated lookups with a
//! brute-force owner scan.

use chord_bft::harness;
use chord_bft::keyspace::{Key, KeySpace};
use chord_bft::overlay::{oracle_owner, settled};
use chord_bft::protocol::Hop;
use chord_bft::simnet::{ActorId, NodeAddress};

fn main() {
    let ks = KeySpace::new(8).unwrap();
    let nodes: Vec<NodeAddress> = [12u64, 40, 99, 150, 201, 240]
        .iter()
        .enumerate()
        .map(|(i, &k)| NodeAddress {
            id: ActorId(i as u32),
            key: Key(k),
        })
        .collect();
    let states = settled(&ks, &nodes, 3);

    for target in [0u64, 41, 150, 241] {
        let mut at = 0;
        let mut path = vec![states[at].me.key.0];
        let owner = loop {
            match states[at].hop(&ks, Key(target)) {
                Hop::Owner { owner, .. } => break owner,
                Hop::Next { next, .. } => {
                    at = next.id.0 as usize;
                    path.push(next.key.0);
                }
            }
        };
        let scan = oracle_owner(&ks, &nodes, Key(target)).unwrap();
        println!(
            "key {target:>3}: path {path:?} -> owner {} (scan says {})",
            owner.key.0, scan.key.0
        );
    }

    let art = harness::run_text(harness::bundled("stable-lookups").unwrap().text, None).unwrap();
    let l = &art.report.lookups;
    println!(
        "\n64-node ring: {} probes, {} agreed with the scan, mean {:.2} hops",
        l.probes, l.agreed, l.mean_hops
    );
    for (hops, n) in &l.histogram {
        println!("  {hops:>2} hops: {n}");
    }
}
