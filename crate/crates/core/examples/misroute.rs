//! One node answers every lookup with itself. Primary-only replication loses
//! the keys behind it; the BFT client reaches the other replicas.

use chord_bft::harness::{self, Check};

fn main() {
    for name in ["naive-misroute", "bft-misroute"] {
        let art = harness::run_text(harness::bundled(name).unwrap().text, None).unwrap();
        let r = &art.report;
        let v = r.verdict(Check::Availability).unwrap();
        println!(
            "{name:<15} success rate {:.2}  availability {:?}: {}",
            r.success_rate(),
            v.status,
            v.detail
        );
    }
}
