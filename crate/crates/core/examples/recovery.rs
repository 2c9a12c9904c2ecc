//! A node crashes; its successor rebuilds the lost range from the other
//! replicas even though one of them fabricates entries.

use chord_bft::harness;

fn main() {
    let art = harness::run_text(harness::bundled("recovery").unwrap().text, None).unwrap();
    let r = &art.report;
    for t in &r.recovery {
        println!(
            "node {} task {}: {:?} started={} finished={:?} admitted={} recovered={} rejected={}",
            t.node,
            t.task.id,
            t.task.status,
            t.task.started,
            t.task.finished,
            t.task.admitted,
            t.task.recovered,
            t.task.rejected
        );
    }
    if let Some(mean) = r.mean_recovery_ticks() {
        println!("mean recovery time: {mean:.0} ticks");
    }
    println!("get success rate after the crash: {:.3}", r.success_rate());
    print!("{}", r.render());
}
