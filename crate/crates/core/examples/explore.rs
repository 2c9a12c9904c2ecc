//! Exhaustively explore interleavings of the put consensus for one slot.

use chord_bft::dht::explore::{explore, ExploreConfig, ReplicaFault};

fn main() {
    let small = ExploreConfig {
        max_slot: 2,
        ..ExploreConfig::default()
    };
    for (label, config) in [
        ("all correct", small.clone()),
        (
            "one wrong-value replica",
            ExploreConfig {
                faults: vec![(3, ReplicaFault::WrongValue)],
                ..small.clone()
            },
        ),
    ] {
        let r = explore(config);
        println!(
            "{label}: {} states, {} terminals ({} fully decided), {} violations{}",
            r.states,
            r.terminal_states,
            r.fully_decided_terminals,
            r.violations.len(),
            if r.truncated { ", truncated" } else { "" }
        );
    }
}
