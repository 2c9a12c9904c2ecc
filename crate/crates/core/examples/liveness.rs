//! Puts commit with f crashed replicas in a peer set and stall with f+1.

use chord_bft::harness;

fn main() {
    for name in ["liveness-f", "liveness-f-plus-one"] {
        let r = harness::run_text(harness::bundled(name).unwrap().text, None)
            .unwrap()
            .report;
        println!("{name}:");
        for o in &r.ops {
            println!("  {:?} {:?} after {} attempts", o.op, o.result, o.attempts);
        }
        println!("  fault model exceeded: {}", r.fault_model.exceeded);
    }
}
