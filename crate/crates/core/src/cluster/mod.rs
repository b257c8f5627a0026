//! FaaS cluster model: function service times, replica autoscaling and the
//! discrete-event engine that runs a test plan against a topology.

mod engine;

pub use engine::{run_sim, run_sim_traced, SimTrace};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::netmodel::RngStream;
use crate::scenario::ProfileName;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FunctionName {
    #[serde(rename = "hello-world")]
    HelloWorld,
    #[serde(rename = "img-classifier-hub")]
    ImgClassifierHub,
    #[serde(rename = "payload-echo")]
    PayloadEcho,
    #[serde(rename = "fib-go")]
    FibGo,
}

impl FunctionName {
    pub const ALL: [FunctionName; 4] = [
        FunctionName::HelloWorld,
        FunctionName::ImgClassifierHub,
        FunctionName::PayloadEcho,
        FunctionName::FibGo,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FunctionName::HelloWorld => "hello-world",
            FunctionName::ImgClassifierHub => "img-classifier-hub",
            FunctionName::PayloadEcho => "payload-echo",
            FunctionName::FibGo => "fib-go",
        }
    }

    pub fn default_kind(&self) -> ServiceKind {
        match self {
            FunctionName::HelloWorld | FunctionName::ImgClassifierHub => ServiceKind::Constant,
            FunctionName::PayloadEcho => ServiceKind::LinearBytes,
            FunctionName::FibGo => ServiceKind::FibCost,
        }
    }

    /// CPU-bound functions get one execution slot per vCPU instead of two.
    pub fn cpu_bound(&self) -> bool {
        matches!(self, FunctionName::ImgClassifierHub | FunctionName::FibGo)
    }

    pub fn spec(&self) -> FunctionSpec {
        FunctionSpec {
            name: *self,
            echoes_payload: *self == FunctionName::PayloadEcho,
        }
    }
}

impl fmt::Display for FunctionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FunctionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FunctionName::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown function `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FunctionSpec {
    pub name: FunctionName,
    pub echoes_payload: bool,
}

impl FunctionSpec {
    pub fn response_bytes(&self, req_bytes: u64, small_response_bytes: u64) -> u64 {
        if self.echoes_payload {
            req_bytes
        } else {
            small_response_bytes
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Constant,
    LinearBytes,
    FibCost,
}

/// Execution time of one invocation on one node profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceModel {
    pub kind: ServiceKind,
    pub base_ms: f64,
    pub per_kb_ms: f64,
    pub per_call_ns: f64,
}

impl ServiceModel {
    pub fn zero(kind: ServiceKind) -> Self {
        ServiceModel {
            kind,
            base_ms: 0.0,
            per_kb_ms: 0.0,
            per_call_ns: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.base_ms, self.per_kb_ms, self.per_call_ns] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config("service constants must be finite and >= 0"));
            }
        }
        let stray = match self.kind {
            ServiceKind::Constant => self.per_kb_ms != 0.0 || self.per_call_ns != 0.0,
            ServiceKind::LinearBytes => self.per_call_ns != 0.0,
            ServiceKind::FibCost => self.per_kb_ms != 0.0,
        };
        if stray {
            return Err(Error::config(format!("{:?} model has a coefficient it does not use", self.kind)));
        }
        Ok(())
    }

    /// Noise-free execution time.
    pub fn nominal_ms(&self, req_bytes: u64, fib_n: u32) -> Result<f64> {
        Ok(match self.kind {
            ServiceKind::Constant => self.base_ms,
            ServiceKind::LinearBytes => self.base_ms + self.per_kb_ms * (req_bytes as f64 / 1024.0),
            ServiceKind::FibCost => self.base_ms + self.per_call_ns * fib_calls(fib_n)? as f64 / 1e6,
        })
    }
}

pub const MAX_FIB_N: u32 = 40;

/// Number of calls made by the naive recursive Fibonacci for `n`.
pub fn fib_calls(n: u32) -> Result<u64> {
    if n > MAX_FIB_N {
        return Err(Error::input(format!("fib n must be in [0, {MAX_FIB_N}], got {n}")));
    }
    let (mut prev, mut cur) = (1u64, 1u64);
    for _ in 1..n {
        (prev, cur) = (cur, cur + prev + 1);
    }
    Ok(cur)
}

/// Sampled execution time: the nominal time scaled by a factor drawn
/// uniformly from `[1 - eps, 1 + eps]`.
pub fn service_time(model: &ServiceModel, req_bytes: u64, fib_n: u32, eps: f64, rng: &mut RngStream) -> Result<f64> {
    let nominal = model.nominal_ms(req_bytes, fib_n)?;
    if eps == 0.0 {
        return Ok(nominal);
    }
    let factor = 1.0 + eps * (2.0 * rng.uniform() - 1.0);
    Ok(nominal * factor)
}

/// [`service_time`] with the model looked up for a function and profile.
pub fn service_time_for(
    cfg: &ModelConfig,
    func: FunctionName,
    profile: ProfileName,
    req_bytes: u64,
    fib_n: u32,
    rng: &mut RngStream,
) -> Result<f64> {
    service_time(cfg.service(func, profile)?, req_bytes, fib_n, cfg.noise_eps, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoscalerConfig {
    pub rps_threshold_per_replica: f64,
    pub scale_step: u32,
    pub reaction_ms: f64,
    pub max_replicas_per_worker: u32,
}

impl Default for AutoscalerConfig {
    fn default() -> Self {
        AutoscalerConfig {
            rps_threshold_per_replica: 50.0,
            scale_step: 1,
            reaction_ms: 5000.0,
            max_replicas_per_worker: 1,
        }
    }
}

impl AutoscalerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rps_threshold_per_replica.is_finite() && self.rps_threshold_per_replica > 0.0) {
            return Err(Error::config("autoscale.threshold must be > 0"));
        }
        if self.scale_step == 0 || self.max_replicas_per_worker == 0 {
            return Err(Error::config("autoscale.scale_step and max_replicas_per_worker must be >= 1"));
        }
        Ok(())
    }
}

/// Replica placement of the function under test.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaState {
    pub per_worker: Vec<u32>,
    /// Replicas ordered but not yet running, by worker.
    pub pending: Vec<u32>,
    cursor: usize,
}

/// A replica that becomes available on `worker` at `at_ms`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleAction {
    pub at_ms: f64,
    pub worker: usize,
}

impl ReplicaState {
    /// One replica on the first worker.
    pub fn initial(workers: usize) -> Self {
        let mut per_worker = vec![0; workers];
        per_worker[0] = 1;
        ReplicaState {
            per_worker,
            pending: vec![0; workers],
            cursor: 1 % workers,
        }
    }

    pub fn running(&self) -> u32 {
        self.per_worker.iter().sum()
    }

    pub fn total(&self) -> u32 {
        self.running() + self.pending.iter().sum::<u32>()
    }

    /// Moves one pending replica on `worker` into service.
    pub fn activate(&mut self, worker: usize) {
        self.pending[worker] = self.pending[worker].saturating_sub(1);
        self.per_worker[worker] += 1;
    }
}

/// Scale-up rule: when the observed rate exceeds the per-replica threshold
/// times the replica count, order `scale_step` more replicas, placed
/// round-robin across workers and ready after the reaction delay. Pending
/// replicas count as present, so one overload is not acted on twice.
pub fn autoscale_step(
    state: &mut ReplicaState,
    observed_rps: f64,
    cfg: &AutoscalerConfig,
    now_ms: f64,
) -> Vec<ScaleAction> {
    let workers = state.per_worker.len();
    let max_total = cfg.max_replicas_per_worker * workers as u32;
    let total = state.total().max(1);
    if observed_rps <= cfg.rps_threshold_per_replica * f64::from(total) || total >= max_total {
        return Vec::new();
    }
    let wanted = cfg.scale_step.min(max_total - total);
    let mut actions = Vec::with_capacity(wanted as usize);
    while (actions.len() as u32) < wanted {
        let w = state.cursor;
        state.cursor = (state.cursor + 1) % workers;
        if state.per_worker[w] + state.pending[w] < cfg.max_replicas_per_worker {
            state.pending[w] += 1;
            actions.push(ScaleAction {
                at_ms: now_ms + cfg.reaction_ms,
                worker: w,
            });
        }
    }
    actions
}
