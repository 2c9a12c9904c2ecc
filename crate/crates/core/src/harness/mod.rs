//! Scenario runner: builds rings from scenario files, injects faults and
//! workloads, runs the simulation and checks the result against oracles.

mod oracles;
pub mod report;
pub mod run;
pub mod scenario;

use rayon::prelude::*;

pub use report::{RunReport, Status, SweepRow, SweepSummary, Verdict};
pub use run::{run, run_scenario, run_text, simulate, RunArtifacts, World};
pub use scenario::{Check, Expectation, Resolved, Scenario, ScenarioError};

/// A scenario shipped with the crate.
#[derive(Debug, Clone, Copy)]
pub struct Bundled {
    pub name: &'static str,
    pub text: &'static str,
}

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        &[$(Bundled {
            name: $name,
            text: include_str!(concat!("../../scenarios/", $name, ".toml")),
        }),*]
    };
}

pub const BUNDLED: &[Bundled] = bundled![
    "stable-lookups",
    "byz-get",
    "contention",
    "recovery",
    "naive-misroute",
    "bft-misroute",
    "liveness-f",
    "liveness-f-plus-one",
    "churn-join",
];

pub fn bundled(name: &str) -> Option<&'static Bundled> {
    BUNDLED.iter().find(|b| b.name == name)
}

/// Runs `scenario` once per seed, in parallel, and summarizes the runs.
pub fn sweep(
    scenario: &Scenario,
    seeds: &[u64],
) -> Result<(SweepSummary, Vec<RunReport>), ScenarioError> {
    let resolved: Vec<Resolved> = seeds
        .iter()
        .map(|s| {
            let mut sc = scenario.clone();
            sc.seed = *s;
            sc.resolve()
        })
        .collect::<Result<_, _>>()?;
    let reports: Vec<RunReport> = resolved.par_iter().map(|r| run(r).report).collect();
    let rows = reports.iter().map(SweepRow::from_report).collect();
    Ok((SweepSummary::new(&scenario.name, rows), reports))
}
