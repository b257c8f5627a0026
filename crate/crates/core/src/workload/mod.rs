//! Test plans, closed-loop arrivals and request records.

pub mod live;
pub mod stub;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{FunctionName, MAX_FIB_N};
use crate::config::{parse_f64, parse_u64};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Overhead,
    Intensive,
    Payload,
    Scalability,
    Workflow,
}

impl TestKind {
    pub const ALL: [TestKind; 5] = [
        TestKind::Overhead,
        TestKind::Intensive,
        TestKind::Payload,
        TestKind::Scalability,
        TestKind::Workflow,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TestKind::Overhead => "overhead",
            TestKind::Intensive => "intensive",
            TestKind::Payload => "payload",
            TestKind::Scalability => "scalability",
            TestKind::Workflow => "workflow",
        }
    }

    pub fn function(&self) -> FunctionName {
        match self {
            TestKind::Overhead => FunctionName::HelloWorld,
            TestKind::Intensive => FunctionName::ImgClassifierHub,
            TestKind::Payload | TestKind::Workflow => FunctionName::PayloadEcho,
            TestKind::Scalability => FunctionName::FibGo,
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TestKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown test `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainMode {
    None,
    Client,
    Server,
}

impl ChainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChainMode::None => "none",
            ChainMode::Client => "client",
            ChainMode::Server => "server",
        }
    }
}

impl fmt::Display for ChainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ChainMode::None),
            "client" => Ok(ChainMode::Client),
            "server" => Ok(ChainMode::Server),
            _ => Err(Error::config(format!("unknown chain mode `{s}` (expected client|server)"))),
        }
    }
}

/// When a thread stops issuing requests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Total requests (or chain iterations) across all threads.
    Requests(u64),
    /// Threads stop issuing once this much simulated or wall time passed.
    DurationMs(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPlan {
    pub kind: TestKind,
    pub function: FunctionName,
    pub threads: u32,
    pub pacing_ms: f64,
    pub stop: StopRule,
    pub payload_kb: u64,
    pub fib_n: u32,
    pub chain_len: u32,
    pub chain_mode: ChainMode,
}

pub const SCALABILITY_THREADS: std::ops::RangeInclusive<u32> = 100..=500;
pub const DEFAULT_INTENSIVE_PAYLOAD_KB: u64 = 14;

/// Plan override keys accepted by [`build_plan`].
pub const PLAN_KEYS: [&str; 8] = [
    "threads",
    "pacing_ms",
    "total_requests",
    "duration_ms",
    "payload_kb",
    "fib_n",
    "chain_len",
    "chain_mode",
];

impl TestPlan {
    pub fn defaults(kind: TestKind) -> TestPlan {
        let base = TestPlan {
            kind,
            function: kind.function(),
            threads: 1,
            pacing_ms: 200.0,
            stop: StopRule::Requests(100),
            payload_kb: 0,
            fib_n: 0,
            chain_len: 1,
            chain_mode: ChainMode::None,
        };
        match kind {
            TestKind::Overhead => base,
            TestKind::Intensive => TestPlan {
                pacing_ms: 2000.0,
                payload_kb: DEFAULT_INTENSIVE_PAYLOAD_KB,
                ..base
            },
            TestKind::Payload => TestPlan {
                pacing_ms: 5000.0,
                payload_kb: 1,
                ..base
            },
            TestKind::Scalability => TestPlan {
                threads: 100,
                pacing_ms: 250.0,
                stop: StopRule::DurationMs(300_000.0),
                fib_n: 1,
                ..base
            },
            TestKind::Workflow => TestPlan {
                pacing_ms: 100.0,
                payload_kb: 1,
                chain_len: 5,
                chain_mode: ChainMode::Client,
                ..base
            },
        }
    }

    pub fn req_bytes(&self) -> u64 {
        self.payload_kb * 1024
    }

    /// Offered rate with instant responses, in requests per second.
    pub fn offered_rps(&self) -> f64 {
        f64::from(self.threads) * 1000.0 / self.pacing_ms
    }

    pub fn duration_ms(&self) -> Option<f64> {
        match self.stop {
            StopRule::DurationMs(d) => Some(d),
            StopRule::Requests(_) => None,
        }
    }

    /// Short label identifying the plan variant in records and reports.
    pub fn test_id(&self) -> String {
        match self.kind {
            TestKind::Overhead | TestKind::Intensive => self.kind.to_string(),
            TestKind::Payload => format!("payload-{}kb", self.payload_kb),
            TestKind::Scalability => format!("scalability-fib{}-t{}", self.fib_n, self.threads),
            TestKind::Workflow => format!("workflow-{}-{}", self.chain_mode, self.chain_len),
        }
    }

    /// Requests each thread issues under a request-count stop rule.
    pub fn requests_for_thread(&self, thread: u32) -> Option<u64> {
        match self.stop {
            StopRule::Requests(total) => {
                let t = u64::from(self.threads);
                let th = u64::from(thread);
                Some(total / t + u64::from(th < total % t))
            }
            StopRule::DurationMs(_) => None,
        }
    }

    /// Checks structural validity and, unless `force`, the ranges each
    /// test kind is defined for.
    pub fn validate(&self, force: bool) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("threads must be >= 1"));
        }
        if !(self.pacing_ms.is_finite() && self.pacing_ms > 0.0) {
            return Err(Error::config("pacing_ms must be > 0"));
        }
        match self.stop {
            StopRule::Requests(0) => return Err(Error::config("total_requests must be >= 1")),
            StopRule::DurationMs(d) if !(d.is_finite() && d > 0.0) => {
                return Err(Error::config("duration_ms must be > 0"))
            }
            _ => {}
        }
        if self.chain_len == 0 {
            return Err(Error::config("chain_len must be >= 1"));
        }
        if self.fib_n > MAX_FIB_N {
            return Err(Error::config(format!("fib_n must be <= {MAX_FIB_N}")));
        }
        if self.function != self.kind.function() {
            return Err(Error::config(format!("{} runs {}, not {}", self.kind, self.kind.function(), self.function)));
        }
        match (self.kind, self.chain_mode) {
            (TestKind::Workflow, ChainMode::None) => {
                return Err(Error::config("workflow needs chain_mode client or server"))
            }
            (TestKind::Workflow, _) => {}
            (_, ChainMode::None) => {}
            (k, _) => return Err(Error::config(format!("{k} does not chain functions"))),
        }
        if self.kind == TestKind::Scalability && !force && !SCALABILITY_THREADS.contains(&self.threads) {
            return Err(Error::config(format!(
                "scalability threads must be in [{}, {}], got {} (use --force to override)",
                SCALABILITY_THREADS.start(),
                SCALABILITY_THREADS.end(),
                self.threads
            )));
        }
        Ok(())
    }
}

/// Builds a plan from its defaults and applies overrides by field name.
pub fn build_plan(kind: TestKind, overrides: &BTreeMap<String, String>) -> Result<TestPlan> {
    build_plan_forced(kind, overrides, false)
}

pub fn build_plan_forced(kind: TestKind, overrides: &BTreeMap<String, String>, force: bool) -> Result<TestPlan> {
    let mut plan = TestPlan::defaults(kind);
    for (k, v) in overrides {
        match k.as_str() {
            "threads" => plan.threads = parse_u64(k, v)? as u32,
            "pacing_ms" => plan.pacing_ms = parse_f64(k, v)?,
            "total_requests" => plan.stop = StopRule::Requests(parse_u64(k, v)?),
            "duration_ms" => plan.stop = StopRule::DurationMs(parse_f64(k, v)?),
            "payload_kb" => plan.payload_kb = parse_u64(k, v)?,
            "fib_n" => plan.fib_n = parse_u64(k, v)? as u32,
            "chain_len" => plan.chain_len = parse_u64(k, v)? as u32,
            "chain_mode" => plan.chain_mode = v.parse()?,
            _ => return Err(Error::config(format!("unknown test override `{k}`"))),
        }
    }
    plan.validate(force)?;
    Ok(plan)
}

/// Closed-loop pacing: a thread issues its next request at
/// `max(previous_issue + pacing, previous_completion)`. Thread start times
/// are spread evenly over one pacing interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoop {
    pub threads: u32,
    pub pacing_ms: f64,
}

impl ClosedLoop {
    pub fn new(plan: &TestPlan) -> Self {
        ClosedLoop {
            threads: plan.threads,
            pacing_ms: plan.pacing_ms,
        }
    }

    pub fn first_issue(&self, thread: u32) -> f64 {
        f64::from(thread) * self.pacing_ms / f64::from(self.threads)
    }

    pub fn next_issue(&self, previous_issue: f64, previous_completion: f64) -> f64 {
        (previous_issue + self.pacing_ms).max(previous_completion)
    }
}

pub fn thread_arrivals(plan: &TestPlan) -> ClosedLoop {
    ClosedLoop::new(plan)
}

/// Issue times per thread when every request of thread `t` issued at `s`
/// takes `response(t, s)` ms. Used to reason about the schedule without a
/// cluster behind it.
pub fn issue_schedule(plan: &TestPlan, mut response: impl FnMut(u32, f64) -> f64) -> Vec<Vec<f64>> {
    let lp = ClosedLoop::new(plan);
    (0..plan.threads)
        .map(|t| {
            let mut out = Vec::new();
            let mut issue = lp.first_issue(t);
            loop {
                let done = match (plan.stop, plan.requests_for_thread(t)) {
                    (_, Some(n)) => out.len() as u64 >= n,
                    (StopRule::DurationMs(d), None) => issue >= d,
                    _ => unreachable!(),
                };
                if done {
                    break;
                }
                out.push(issue);
                let completion = issue + response(t, issue);
                issue = lp.next_issue(issue, completion);
            }
            out
        })
        .collect()
}

/// Elapsed time of a client-side chain: each call is a full independent
/// round trip started when the previous one returned.
pub fn chain_elapsed_client(per_request_times: &[f64]) -> Result<f64> {
    if per_request_times.is_empty() {
        return Err(Error::input("client chain needs at least one request"));
    }
    if let Some(bad) = per_request_times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::input(format!("request time must be >= 0, got {bad}")));
    }
    Ok(per_request_times.iter().sum())
}

/// One measured request, or one chain iteration for workflow tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    #[serde(rename = "test")]
    pub test_id: String,
    pub scenario: String,
    pub profile: String,
    pub thread: u32,
    pub seq: u64,
    pub start_ms: f64,
    pub elapsed_ms: f64,
    pub success: bool,
    pub chain_len: u32,
    pub chain_mode: String,
}

impl RequestRecord {
    pub fn completion_ms(&self) -> f64 {
        self.start_ms + self.elapsed_ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn paper_defaults() {
        let p = build_plan(TestKind::Overhead, &kv(&[])).unwrap();
        assert_eq!((p.threads, p.pacing_ms, p.stop), (1, 200.0, StopRule::Requests(100)));
        assert_eq!(p.function, FunctionName::HelloWorld);
        let p = build_plan(TestKind::Intensive, &kv(&[])).unwrap();
        assert_eq!((p.pacing_ms, p.function), (2000.0, FunctionName::ImgClassifierHub));
        let p = build_plan(TestKind::Payload, &kv(&[])).unwrap();
        assert_eq!(p.pacing_ms, 5000.0);
        let p = build_plan(TestKind::Workflow, &kv(&[])).unwrap();
        assert_eq!(p.offered_rps(), 10.0);
        assert_eq!(p.stop, StopRule::Requests(100));
    }

    #[test]
    fn scalability_threads_override() {
        let p = build_plan(TestKind::Scalability, &kv(&[("threads", "500")])).unwrap();
        assert_eq!((p.threads, p.pacing_ms), (500, 250.0));
        assert_eq!(p.duration_ms(), Some(300_000.0));
        assert_eq!(p.offered_rps(), 2000.0);
        assert!(matches!(
            build_plan(TestKind::Scalability, &kv(&[("threads", "50")])),
            Err(Error::Config(_))
        ));
        assert!(build_plan_forced(TestKind::Scalability, &kv(&[("threads", "50")]), true).is_ok());
    }

    #[test]
    fn custom_payload_size() {
        let p = build_plan(TestKind::Payload, &kv(&[("payload_kb", "7")])).unwrap();
        assert_eq!(p.payload_kb, 7);
        assert_eq!(p.req_bytes(), 7 * 1024);
    }

    #[test]
    fn invalid_overrides() {
        assert!(build_plan(TestKind::Overhead, &kv(&[("bogus", "1")])).is_err());
        assert!(build_plan(TestKind::Overhead, &kv(&[("chain_mode", "server")])).is_err());
        assert!(build_plan(TestKind::Workflow, &kv(&[("chain_len", "0")])).is_err());
        assert!(build_plan(TestKind::Overhead, &kv(&[("pacing_ms", "0")])).is_err());
        assert!(build_plan(TestKind::Scalability, &kv(&[("fib_n", "41")])).is_err());
    }

    #[test]
    fn pacing_floor_binds_with_fast_responses() {
        let plan = build_plan(TestKind::Overhead, &kv(&[])).unwrap();
        let issues = issue_schedule(&plan, |_, _| 0.0);
        assert_eq!(issues[0][..4], [0.0, 200.0, 400.0, 600.0]);
        assert_eq!(issues[0].len(), 100);
    }

    #[test]
    fn completion_binds_with_slow_responses() {
        let plan = build_plan(TestKind::Overhead, &kv(&[])).unwrap();
        let issues = issue_schedule(&plan, |_, _| 300.0);
        assert_eq!(issues[0][..3], [0.0, 300.0, 600.0]);
    }

    #[test]
    fn hundred_threads_offer_four_hundred_per_second() {
        let plan = build_plan(TestKind::Scalability, &kv(&[("duration_ms", "10000")])).unwrap();
        let issues = issue_schedule(&plan, |_, _| 0.0);
        let total: usize = issues.iter().map(Vec::len).sum();
        let rate = total as f64 / 10.0;
        assert!((rate - 400.0).abs() <= 4.0, "rate={rate}");
        // staggered starts: no two threads start together
        let mut starts: Vec<f64> = issues.iter().map(|v| v[0]).collect();
        starts.dedup();
        assert_eq!(starts.len(), 100);
    }

    #[test]
    fn request_split_across_threads() {
        let plan = build_plan_forced(TestKind::Overhead, &kv(&[("threads", "3"), ("total_requests", "10")]), true).unwrap();
        let n: Vec<_> = (0..3).map(|t| plan.requests_for_thread(t).unwrap()).collect();
        assert_eq!(n, vec![4, 3, 3]);
    }

    #[test]
    fn client_chain_sums() {
        assert_eq!(chain_elapsed_client(&[10.0; 5]).unwrap(), 50.0);
        assert_eq!(chain_elapsed_client(&[0.0]).unwrap(), 0.0);
        assert!(matches!(chain_elapsed_client(&[]), Err(Error::Input(_))));
        let five = chain_elapsed_client(&[12.5; 5]).unwrap();
        let twenty = chain_elapsed_client(&[12.5; 20]).unwrap();
        assert_eq!(twenty / five, 4.0);
    }
}
