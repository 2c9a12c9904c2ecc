//! A node joins a loaded ring; data in its new range stays readable.

use chord_bft::harness;

fn main() {
    let art = harness::run_text(harness::bundled("churn-join").unwrap().text, None).unwrap();
    let r = &art.report;
    for (_, rec) in art
        .trace
        .records()
        .filter(|(_, rec)| rec.label.starts_with("join") || rec.label == "keyspace-change")
    {
        println!("t={:>5} {} {}", rec.time, rec.label, rec.detail);
    }
    println!("success rate {:.3}", r.success_rate());
    print!("{}", r.render());
}
