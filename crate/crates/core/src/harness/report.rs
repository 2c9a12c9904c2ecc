//! Run reports and sweep summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::scenario::{Check, Expectation};
use crate::client::OpOutcome;
use crate::keyspace::Key;
use crate::recovery::TaskReport;
use crate::simnet::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    /// Nothing in the run exercised the check.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub check: Check,
    pub status: Status,
    pub expected: Expectation,
    /// The status agrees with the expectation (skipped checks always agree).
    pub as_expected: bool,
    pub detail: String,
    /// Trace position of the first offending record, when there is one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evidence: Option<u64>,
}

impl Verdict {
    pub fn new(
        check: Check,
        expected: Expectation,
        outcome: Result<String, (String, Option<u64>)>,
    ) -> Self {
        let (status, detail, evidence) = match outcome {
            Ok(detail) if detail.starts_with("skipped") => (Status::Skipped, detail, None),
            Ok(detail) => (Status::Pass, detail, None),
            Err((detail, evidence)) => (Status::Fail, detail, evidence),
        };
        let as_expected = match status {
            Status::Skipped => true,
            Status::Pass => expected == Expectation::Pass,
            Status::Fail => expected == Expectation::Fail,
        };
        Self {
            check,
            status,
            expected,
            as_expected,
            detail,
            evidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct LookupStats {
    pub probes: usize,
    pub agreed: usize,
    pub failed: usize,
    pub mean_hops: f64,
    pub histogram: BTreeMap<usize, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeSummary {
    pub id: u32,
    pub key: Key,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<&'static str>,
    pub joined: bool,
    pub entries: usize,
    pub decisions: usize,
    pub store_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoverySummary {
    pub node: u32,
    #[serde(flatten)]
    pub task: TaskReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FaultModel {
    /// Some peer set holds more than `f` faulty members.
    pub exceeded: bool,
    /// Workload uids whose peer set is over budget.
    pub affected_uids: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub digest: String,
    pub trace_records: u64,
    pub ended_at: Tick,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_error: Option<String>,
    pub fault_model: FaultModel,
    /// Every verdict matched its expectation.
    pub passed: bool,
    pub verdicts: Vec<Verdict>,
    pub ops: Vec<OpOutcome>,
    /// Scripted operations without an outcome when the run stopped.
    pub unfinished_ops: usize,
    pub lookups: LookupStats,
    /// Lookup hops spent per client operation.
    pub client_hops: BTreeMap<usize, u64>,
    pub messages: BTreeMap<String, u64>,
    pub recovery: Vec<RecoverySummary>,
    pub nodes: Vec<NodeSummary>,
}

impl RunReport {
    pub fn verdict(&self, check: Check) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.check == check)
    }

    pub fn mismatches(&self) -> Vec<&Verdict> {
        self.verdicts.iter().filter(|v| !v.as_expected).collect()
    }

    pub fn success_rate(&self) -> f64 {
        let total = self.ops.len() + self.unfinished_ops;
        if total == 0 {
            return 1.0;
        }
        self.ops.iter().filter(|o| o.result.is_success()).count() as f64 / total as f64
    }

    /// Mean ticks from the start of a finished recovery task to its end.
    pub fn mean_recovery_ticks(&self) -> Option<f64> {
        let done: Vec<Tick> = self
            .recovery
            .iter()
            .filter_map(|r| r.task.finished.map(|f| f - r.task.started))
            .collect();
        (!done.is_empty()).then(|| done.iter().sum::<Tick>() as f64 / done.len() as f64)
    }

    pub fn mean_client_hops(&self) -> Option<f64> {
        (!self.ops.is_empty())
            .then(|| self.ops.iter().map(|o| o.hops).sum::<usize>() as f64 / self.ops.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per verdict, for terminals.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{} seed={} digest={} records={} ended_at={}\n",
            self.scenario,
            self.seed,
            &self.digest[..16],
            self.trace_records,
            self.ended_at
        );
        if self.fault_model.exceeded {
            let _ = writeln!(
                out,
                "  note: exceeds the fault model ({} uids with more than f faulty replicas)",
                self.fault_model.affected_uids
            );
        }
        if let Some(e) = &self.sim_error {
            let _ = writeln!(out, "  simulation stopped: {e}");
        }
        for v in &self.verdicts {
            let mark = match (v.status, v.as_expected) {
                (Status::Skipped, _) => "skip",
                (_, true) => "ok",
                (_, false) => "MISMATCH",
            };
            let _ = write!(
                out,
                "  [{mark:>8}] {:<15} {:?} (expected {:?}): {}",
                v.check.name(),
                v.status,
                v.expected,
                v.detail
            );
            if let Some(e) = v.evidence {
                let _ = write!(out, " @{e}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub passed: bool,
    pub digest: String,
    pub mismatches: Vec<String>,
    pub ops: usize,
    pub success_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_lookup_hops: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_client_hops: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_recovery_ticks: Option<f64>,
    pub exceeds_fault_model: bool,
}

impl SweepRow {
    pub fn from_report(r: &RunReport) -> Self {
        Self {
            seed: r.seed,
            passed: r.passed,
            digest: r.digest.clone(),
            mismatches: r
                .mismatches()
                .iter()
                .map(|v| v.check.name().to_string())
                .collect(),
            ops: r.ops.len() + r.unfinished_ops,
            success_rate: r.success_rate(),
            mean_lookup_hops: (r.lookups.probes > 0).then_some(r.lookups.mean_hops),
            mean_client_hops: r.mean_client_hops(),
            mean_recovery_ticks: r.mean_recovery_ticks(),
            exceeds_fault_model: r.fault_model.exceeded,
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub scenario: String,
    pub runs: usize,
    pub passed: usize,
    pub failing_seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_lookup_hops: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_client_hops: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_recovery_ticks: Option<f64>,
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn new(scenario: &str, mut rows: Vec<SweepRow>) -> Self {
        rows.sort_by_key(|r| r.seed);
        Self {
            scenario: scenario.to_string(),
            runs: rows.len(),
            passed: rows.iter().filter(|r| r.passed).count(),
            failing_seeds: rows.iter().filter(|r| !r.passed).map(|r| r.seed).collect(),
            mean_lookup_hops: mean(rows.iter().filter_map(|r| r.mean_lookup_hops)),
            mean_client_hops: mean(rows.iter().filter_map(|r| r.mean_client_hops)),
            mean_success_rate: mean(rows.iter().map(|r| r.success_rate)),
            mean_recovery_ticks: mean(rows.iter().filter_map(|r| r.mean_recovery_ticks)),
            rows,
        }
    }

    pub fn all_passed(&self) -> bool {
        self.failing_seeds.is_empty()
    }

    pub fn table(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
        }
        let mut out = format!(
            "{:>8}  {:<6}  {:>5}  {:>8}  {:>11}  {:>11}  {:>13}  mismatches\n",
            "seed", "result", "ops", "success", "lookup hops", "client hops", "recovery ticks"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8}  {:<6}  {:>5}  {:>8.3}  {:>11}  {:>11}  {:>13}  {}",
                r.seed,
                if r.passed { "pass" } else { "FAIL" },
                r.ops,
                r.success_rate,
                opt(r.mean_lookup_hops),
                opt(r.mean_client_hops),
                opt(r.mean_recovery_ticks),
                r.mismatches.join(",")
            );
        }
        let _ = writeln!(
            out,
            "{} runs, {} passed; mean lookup hops {}; mean client hops {}; mean success {}; mean recovery ticks {}",
            self.runs,
            self.passed,
            opt(self.mean_lookup_hops),
            opt(self.mean_client_hops),
            opt(self.mean_success_rate),
            opt(self.mean_recovery_ticks)
        );
        if !self.failing_seeds.is_empty() {
            let seeds: Vec<String> = self.failing_seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "failing seeds: {}", seeds.join(" "));
        }
        out
    }
}
