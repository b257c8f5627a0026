//! Drives a real gateway over HTTP with the same closed-loop contract as
//! the simulator. Every request opens its own TCP connection.

use std::time::{Duration, Instant};

use ureq::Agent;
use url::Url;

use crate::error::{Error, Result};
use crate::workload::{ChainMode, ClosedLoop, RequestRecord, StopRule, TestPlan};

#[derive(Debug, Clone)]
pub struct LiveDriver {
    gateway: Url,
    timeout: Duration,
    scenario_label: String,
    profile_label: String,
}

/// JSON body of exactly `len` bytes: `{"data":"..."}` padded with a fixed
/// alphabet cycle. Bodies too short for the envelope are `{}` plus spaces.
pub fn json_payload(len: usize) -> Vec<u8> {
    const ENVELOPE: usize = r#"{"data":""}"#.len();
    if len < ENVELOPE {
        let mut v = b"{}".to_vec();
        v.truncate(len);
        v.resize(len, b' ');
        return v;
    }
    let mut v = Vec::with_capacity(len);
    v.extend_from_slice(br#"{"data":""#);
    v.extend((0..len - ENVELOPE).map(|i| b'a' + (i % 26) as u8));
    v.extend_from_slice(br#""}"#);
    v
}

impl LiveDriver {
    pub fn new(gateway_url: &str, timeout_ms: f64) -> Result<Self> {
        let gateway = Url::parse(gateway_url).map_err(|e| Error::config(format!("bad gateway url `{gateway_url}`: {e}")))?;
        if gateway.scheme() != "http" || gateway.host().is_none() {
            return Err(Error::config(format!("gateway url must be http://host[:port], got `{gateway_url}`")));
        }
        if !(timeout_ms.is_finite() && timeout_ms > 0.0) {
            return Err(Error::config("timeout must be > 0"));
        }
        Ok(LiveDriver {
            gateway,
            timeout: Duration::from_secs_f64(timeout_ms / 1000.0),
            scenario_label: "live".into(),
            profile_label: "live".into(),
        })
    }

    pub fn with_labels(mut self, scenario: &str, profile: &str) -> Self {
        self.scenario_label = scenario.to_string();
        self.profile_label = profile.to_string();
        self
    }

    pub fn function_url(&self, function: &str) -> String {
        let base = self.gateway.as_str().trim_end_matches('/');
        format!("{base}/function/{function}")
    }

    fn agent(&self) -> Agent {
        Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .max_idle_connections(0)
            .max_idle_connections_per_host(0)
            .build()
            .into()
    }

    /// Runs the plan and returns records sorted by `(thread, seq)`.
    pub fn run(&self, plan: &TestPlan) -> Result<Vec<RequestRecord>> {
        plan.validate(true)?;
        let agent = self.agent();
        let url = self.function_url(plan.function.as_str());
        let body = json_payload(plan.req_bytes() as usize);
        let lp = ClosedLoop::new(plan);
        let origin = Instant::now();
        let mut records: Vec<RequestRecord> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..plan.threads)
                .map(|t| {
                    let (agent, url, body) = (agent.clone(), url.as_str(), body.as_slice());
                    s.spawn(move || self.thread_loop(plan, lp, t, origin, &agent, url, body))
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().unwrap_or_default())
                .collect()
        });
        records.sort_by_key(|r| (r.thread, r.seq));
        Ok(records)
    }

    #[allow(clippy::too_many_arguments)]
    fn thread_loop(
        &self,
        plan: &TestPlan,
        lp: ClosedLoop,
        thread: u32,
        origin: Instant,
        agent: &Agent,
        url: &str,
        body: &[u8],
    ) -> Vec<RequestRecord> {
        let limit = plan.requests_for_thread(thread);
        let mut out = Vec::new();
        let mut issue_ms = lp.first_issue(thread);
        loop {
            let stop = match (limit, plan.stop) {
                (Some(n), _) => out.len() as u64 >= n,
                (None, StopRule::DurationMs(d)) => issue_ms >= d,
                (None, StopRule::Requests(_)) => true,
            };
            if stop {
                break;
            }
            sleep_until(origin, issue_ms);
            let start = origin.elapsed().as_secs_f64() * 1000.0;
            let success = match plan.chain_mode {
                ChainMode::Client => (0..plan.chain_len).all(|_| post(agent, url, body, None)),
                ChainMode::Server => post(agent, url, body, Some(plan.chain_len)),
                ChainMode::None => post(agent, url, body, None),
            };
            let end = origin.elapsed().as_secs_f64() * 1000.0;
            out.push(RequestRecord {
                test_id: plan.test_id(),
                scenario: self.scenario_label.clone(),
                profile: self.profile_label.clone(),
                thread,
                seq: out.len() as u64,
                start_ms: start,
                elapsed_ms: end - start,
                success,
                chain_len: plan.chain_len,
                chain_mode: plan.chain_mode.to_string(),
            });
            issue_ms = lp.next_issue(issue_ms, end);
        }
        out
    }
}

fn sleep_until(origin: Instant, at_ms: f64) {
    let target = origin + Duration::from_secs_f64(at_ms / 1000.0);
    let now = Instant::now();
    if target > now {
        std::thread::sleep(target - now);
    }
}

/// One POST on a fresh connection; true on a 2xx answer with a fully read
/// body. `chain` asks the function to call itself `chain - 1` more times.
fn post(agent: &Agent, url: &str, body: &[u8], chain: Option<u32>) -> bool {
    let mut req = agent
        .post(url)
        .header("Connection", "close")
        .header("Content-Type", "application/json");
    if let Some(n) = chain {
        req = req.header("X-Chain-Length", &n.to_string());
    }
    match req.send(body) {
        Ok(mut resp) => resp.status().is_success() && resp.body_mut().read_to_vec().is_ok(),
        Err(_) => false,
    }
}

/// Runs `plan` against `gateway_url` with default record labels.
pub fn execute_plan_live(gateway_url: &str, plan: &TestPlan, timeout_ms: f64) -> Result<Vec<RequestRecord>> {
    LiveDriver::new(gateway_url, timeout_ms)?.run(plan)
}
