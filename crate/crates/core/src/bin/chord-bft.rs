use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chord_bft::harness::{self, RunReport, Scenario};

#[derive(Parser)]
#[command(version, about = "Run Chord BFT DHT simulation scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and check its oracles.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Report mismatched verdicts but exit 0.
        #[arg(long)]
        warn_only: bool,
    },
    /// Run one scenario per seed and summarize.
    Sweep {
        #[arg(long)]
        scenario: String,
        /// Seed range: `a..b` (end exclusive) or `a..=b`.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// List bundled scenarios.
    ListScenarios,
}

enum Failure {
    Usage(String),
    Oracle,
}

fn load(spec: &str) -> Result<Scenario, Failure> {
    let path = Path::new(spec);
    let text = if path.exists() {
        fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {spec}: {e}")))?
    } else if let Some(b) = harness::bundled(spec) {
        b.text.to_string()
    } else {
        return Err(Failure::Usage(format!(
            "no scenario file or bundled scenario named {spec}"
        )));
    };
    let scenario = Scenario::parse(&text).map_err(|e| Failure::Usage(format!("{spec}: {e}")))?;
    scenario
        .resolve()
        .map_err(|e| Failure::Usage(format!("{spec}: {e}")))?;
    Ok(scenario)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::Usage(format!("seeds must look like a..b or a..=b, got {s}"));
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let a: u64 = a.trim().parse().map_err(|_| bad())?;
    let b: u64 = b.trim().parse().map_err(|_| bad())?;
    Ok(if inclusive {
        (a..=b).collect()
    } else {
        (a..b).collect()
    })
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn run(spec: &str, seed: Option<u64>, out: &Path, warn_only: bool) -> Result<(), Failure> {
    let mut scenario = load(spec)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let resolved = scenario
        .resolve()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let artifacts = harness::run(&resolved);
    create_dir(out)?;
    write(&out.join("report.json"), &artifacts.report.to_json())?;
    write(&out.join("trace.ndjson"), &artifacts.trace.to_ndjson())?;
    print!("{}", artifacts.report.render());
    finish(&artifacts.report, warn_only)
}

fn finish(report: &RunReport, warn_only: bool) -> Result<(), Failure> {
    if report.passed {
        return Ok(());
    }
    if warn_only {
        eprintln!(
            "warning: {} verdicts did not match expectations",
            report.mismatches().len()
        );
        return Ok(());
    }
    Err(Failure::Oracle)
}

fn sweep(spec: &str, seeds: &str, out: &Path) -> Result<(), Failure> {
    let scenario = load(spec)?;
    let seeds = parse_seeds(seeds)?;
    let (summary, reports) =
        harness::sweep(&scenario, &seeds).map_err(|e| Failure::Usage(e.to_string()))?;
    create_dir(out)?;
    for r in &reports {
        write(&out.join(format!("report-{}.json", r.seed)), &r.to_json())?;
    }
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&out.join("summary.json"), &json)?;
    let table = summary.table();
    write(&out.join("summary.txt"), &table)?;
    print!("{table}");
    if summary.all_passed() {
        Ok(())
    } else {
        Err(Failure::Oracle)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            warn_only,
        } => run(scenario, *seed, out, *warn_only),
        Command::Sweep {
            scenario,
            seeds,
            out,
        } => sweep(scenario, seeds, out),
        Command::ListScenarios => {
            for b in harness::BUNDLED {
                let description = Scenario::parse(b.text)
                    .map(|s| s.description)
                    .unwrap_or_default();
                println!("{:<22} {description}", b.name);
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Oracle) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
