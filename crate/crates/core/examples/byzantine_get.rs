//! Reads stay correct while a wrong-value replica sits in every peer set.

use chord_bft::client::OpResult;
use chord_bft::harness;

fn main() {
    let art = harness::run_text(harness::bundled("byz-get").unwrap().text, None).unwrap();
    let r = &art.report;
    let gets: Vec<_> = r
        .ops
        .iter()
        .filter(|o| matches!(o.op, chord_bft::client::Op::Get { .. }))
        .collect();
    let found = gets
        .iter()
        .filter(|o| matches!(o.result, OpResult::Found { .. }))
        .count();
    println!("{} gets, {} returned a value", gets.len(), found);
    for n in r.nodes.iter().filter(|n| n.fault.is_some()) {
        println!("node {} is {}", n.id, n.fault.unwrap());
    }
    print!("{}", r.render());
}
