//! Model parameters and the flat `key = value` configuration format.
//!
//! A config file is a list of lines `key = value`. Blank lines and lines
//! starting with `#` are ignored; a `#` after a value starts a comment.
//! Keys are dotted paths such as `service.payload-echo.rp.metal.per_kb_ms`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{AutoscalerConfig, FunctionName, ServiceKind, ServiceModel};
use crate::error::{Error, Result};
use crate::netmodel::TransferModelParams;
use crate::scenario::ProfileName;

/// Parsed `key = value` pairs in file order (later keys win).
pub type KeyValues = BTreeMap<String, String>;

pub fn parse_key_values(text: &str) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", lineno + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<KeyValues> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text)
}

pub(crate) fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| Error::config(format!("{key}: expected a number, got `{v}`")))?;
    if !x.is_finite() || x < 0.0 {
        return Err(Error::config(format!("{key}: expected a finite non-negative number, got `{v}`")));
    }
    Ok(x)
}

pub(crate) fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: expected a non-negative integer, got `{v}`")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CapacityConfig {
    /// Concurrent executions per replica as a multiple of vCPUs; `None`
    /// picks 1 for CPU-bound functions and 2 otherwise.
    pub slots_factor: Option<u32>,
    /// Requests per second the gateway can forward; `None` is unlimited.
    pub gateway_rps_cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub services: BTreeMap<(FunctionName, ProfileName), ServiceModel>,
    /// Half-width of the multiplicative uniform service-time noise.
    pub noise_eps: f64,
    pub capacity: BTreeMap<ProfileName, CapacityConfig>,
    pub autoscale: AutoscalerConfig,
    pub tcp: TransferModelParams,
    /// Fixed LAN and proxy cost of every external request.
    pub lan_floor_ms: f64,
    pub request_timeout_ms: f64,
    /// Gateway cost of each function-to-function call in a server-side chain.
    pub server_hop_overhead_ms: f64,
    /// Response size of functions that do not echo their input.
    pub small_response_bytes: u64,
}

const fn constant(base_ms: f64) -> ServiceModel {
    ServiceModel {
        kind: ServiceKind::Constant,
        base_ms,
        per_kb_ms: 0.0,
        per_call_ns: 0.0,
    }
}

const fn linear(base_ms: f64, per_kb_ms: f64) -> ServiceModel {
    ServiceModel {
        kind: ServiceKind::LinearBytes,
        base_ms,
        per_kb_ms,
        per_call_ns: 0.0,
    }
}

const fn fib(base_ms: f64, per_call_ns: f64) -> ServiceModel {
    ServiceModel {
        kind: ServiceKind::FibCost,
        base_ms,
        per_kb_ms: 0.0,
        per_call_ns,
    }
}

pub const RP_GATEWAY_RPS_CAP: f64 = 420.0;

/// Service constants fitted to the bundled reference medians
/// (`reference/reference_medians.json`) by `calibrate`.
fn default_services() -> BTreeMap<(FunctionName, ProfileName), ServiceModel> {
    use FunctionName::*;
    use ProfileName::*;
    let rows = [
        (HelloWorld, RpMetal, constant(10.619)),
        (HelloWorld, VmSmall, constant(8.0)),
        (HelloWorld, VmMedium, constant(8.0)),
        (HelloWorld, VmLarge, constant(8.0)),
        (ImgClassifierHub, RpMetal, constant(655.619)),
        (ImgClassifierHub, VmSmall, constant(180.0)),
        (ImgClassifierHub, VmMedium, constant(188.0)),
        (ImgClassifierHub, VmLarge, constant(175.0)),
        (PayloadEcho, RpMetal, linear(15.083, 0.5333)),
        (PayloadEcho, VmSmall, linear(10.551, 0.1135)),
        (PayloadEcho, VmMedium, linear(10.551, 0.1135)),
        (PayloadEcho, VmLarge, linear(10.551, 0.1135)),
        (FibGo, RpMetal, fib(10.0, 20.0)),
        (FibGo, VmSmall, fib(3.3, 5.0)),
        (FibGo, VmMedium, fib(3.0, 5.0)),
        (FibGo, VmLarge, fib(3.0, 5.0)),
    ];
    rows.into_iter().map(|(f, p, m)| ((f, p), m)).collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        let capacity = ProfileName::ALL
            .into_iter()
            .map(|p| {
                let cap = (p == ProfileName::RpMetal).then_some(RP_GATEWAY_RPS_CAP);
                (
                    p,
                    CapacityConfig {
                        slots_factor: None,
                        gateway_rps_cap: cap,
                    },
                )
            })
            .collect();
        ModelConfig {
            services: default_services(),
            noise_eps: 0.08,
            capacity,
            autoscale: AutoscalerConfig::default(),
            tcp: TransferModelParams::default(),
            lan_floor_ms: 1.0,
            request_timeout_ms: 30_000.0,
            server_hop_overhead_ms: 15.0,
            small_response_bytes: 64,
        }
    }
}

impl ModelConfig {
    pub fn service(&self, func: FunctionName, profile: ProfileName) -> Result<&ServiceModel> {
        self.services
            .get(&(func, profile))
            .ok_or_else(|| Error::config(format!("no service model for {func} on {profile}")))
    }

    pub fn capacity(&self, profile: ProfileName) -> CapacityConfig {
        self.capacity.get(&profile).copied().unwrap_or_default()
    }

    /// Per-request processing time of the gateway on this profile.
    pub fn gateway_service_ms(&self, profile: ProfileName) -> f64 {
        match self.capacity(profile).gateway_rps_cap {
            Some(cap) if cap > 0.0 => 1000.0 / cap,
            _ => 0.0,
        }
    }

    /// Response time of a request over unemulated links with zero service
    /// time: the part of a local median that is not function execution.
    pub fn zero_wan_floor_ms(&self, profile: ProfileName) -> f64 {
        self.lan_floor_ms + self.gateway_service_ms(profile)
    }

    /// Applies every model key in `kv`; returns the keys it did not
    /// recognise so the caller can handle its own namespaces.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<Vec<String>> {
        let mut rest = Vec::new();
        for (k, v) in kv {
            if !self.apply_one(k, v)? {
                rest.push(k.clone());
            }
        }
        self.validate()?;
        Ok(rest)
    }

    fn apply_one(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "service.noise_eps" => self.noise_eps = parse_f64(key, v)?,
            "network.lan_floor_ms" => self.lan_floor_ms = parse_f64(key, v)?,
            "test.timeout_ms" => self.request_timeout_ms = parse_f64(key, v)?,
            "chain.server_hop_overhead_ms" => self.server_hop_overhead_ms = parse_f64(key, v)?,
            "service.small_response_bytes" => self.small_response_bytes = parse_u64(key, v)?,
            "tcp.mss_bytes" => self.tcp.mss_bytes = parse_u64(key, v)?,
            "tcp.init_window_segs" => self.tcp.init_window_segs = parse_u64(key, v)?,
            "tcp.warm_window_segs" => self.tcp.warm_window_segs = parse_u64(key, v)?,
            "tcp.handshake_rounds" => self.tcp.handshake_rounds = parse_u64(key, v)? as u32,
            "tcp.max_retries_per_round" => self.tcp.max_retries_per_round = parse_u64(key, v)? as u32,
            "autoscale.threshold" => self.autoscale.rps_threshold_per_replica = parse_f64(key, v)?,
            "autoscale.reaction_ms" => self.autoscale.reaction_ms = parse_f64(key, v)?,
            "autoscale.scale_step" => self.autoscale.scale_step = parse_u64(key, v)? as u32,
            "autoscale.max_replicas_per_worker" => {
                self.autoscale.max_replicas_per_worker = parse_u64(key, v)? as u32
            }
            _ => {
                if let Some(rest) = key.strip_prefix("service.") {
                    return self.apply_service(key, rest, v).map(|_| true);
                }
                if let Some(rest) = key.strip_prefix("capacity.") {
                    return self.apply_capacity(key, rest, v).map(|_| true);
                }
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn apply_service(&mut self, key: &str, rest: &str, v: &str) -> Result<()> {
        // service.<function>.<profile>.<field>; profile names contain a dot
        let (head, field) = rest
            .rsplit_once('.')
            .ok_or_else(|| Error::config(format!("malformed key `{key}`")))?;
        let (func, profile) = head
            .split_once('.')
            .ok_or_else(|| Error::config(format!("malformed key `{key}`")))?;
        let func: FunctionName = func.parse()?;
        let profile: ProfileName = profile.parse()?;
        let value = parse_f64(key, v)?;
        let model = self
            .services
            .entry((func, profile))
            .or_insert_with(|| ServiceModel::zero(func.default_kind()));
        match field {
            "base_ms" => model.base_ms = value,
            "per_kb_ms" => model.per_kb_ms = value,
            "per_call_ns" => model.per_call_ns = value,
            _ => return Err(Error::config(format!("unknown service field in `{key}`"))),
        }
        Ok(())
    }

    fn apply_capacity(&mut self, key: &str, rest: &str, v: &str) -> Result<()> {
        let (profile, field) = rest
            .rsplit_once('.')
            .ok_or_else(|| Error::config(format!("malformed key `{key}`")))?;
        let profile: ProfileName = profile.parse()?;
        let cap = self.capacity.entry(profile).or_default();
        match field {
            "slots_factor" => {
                let f = parse_u64(key, v)? as u32;
                if f == 0 {
                    return Err(Error::config(format!("{key} must be >= 1")));
                }
                cap.slots_factor = Some(f);
            }
            "gateway_rps_cap" => {
                cap.gateway_rps_cap = match v {
                    "none" | "0" => None,
                    _ => Some(parse_f64(key, v)?),
                }
            }
            _ => return Err(Error::config(format!("unknown capacity field in `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.tcp.validate()?;
        self.autoscale.validate()?;
        if self.noise_eps >= 1.0 {
            return Err(Error::config("service.noise_eps must be < 1"));
        }
        for ((func, profile), m) in &self.services {
            m.validate()
                .map_err(|e| Error::config(format!("service {func} on {profile}: {e}")))?;
        }
        if self.request_timeout_ms <= 0.0 {
            return Err(Error::config("test.timeout_ms must be > 0"));
        }
        Ok(())
    }

    /// Service constants in config-file syntax, e.g. for `calibrate` output.
    pub fn render_services(&self) -> String {
        let mut out = String::new();
        for ((func, profile), m) in &self.services {
            let prefix = format!("service.{func}.{profile}");
            let _ = writeln!(out, "{prefix}.base_ms = {}", fmt_num(m.base_ms));
            match m.kind {
                ServiceKind::LinearBytes => {
                    let _ = writeln!(out, "{prefix}.per_kb_ms = {}", fmt_num(m.per_kb_ms));
                }
                ServiceKind::FibCost => {
                    let _ = writeln!(out, "{prefix}.per_call_ns = {}", fmt_num(m.per_call_ns));
                }
                ServiceKind::Constant => {}
            }
        }
        out
    }
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}
