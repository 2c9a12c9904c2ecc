//! Run a scenario across many seeds in parallel and print the summary table.

use chord_bft::harness::{self, Scenario};

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "byz-get".into());
    let Some(b) = harness::bundled(&name) else {
        eprintln!("unknown scenario {name}");
        std::process::exit(2);
    };
    let sc = Scenario::parse(b.text).unwrap();
    let seeds: Vec<u64> = (0..16).collect();
    let (summary, _) = harness::sweep(&sc, &seeds).unwrap();
    print!("{}", summary.table());
}
