//! Network scenarios, node profiles and cluster topologies.
//!
//! Every emulated link is described by a [`WanParams`]. Scenarios place those
//! parameters either on the tester-to-cluster segment (C-WAN, the cloud case)
//! or on every node-to-node segment inside the cluster (E-WAN, the edge
//! cases), where the cloud values are divided by a per-scenario divisor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added one-way delay, jitter and loss on one emulated link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct WanParams {
    pub latency_ms: f64,
    pub jitter_ms: f64,
    pub loss_pct: f64,
}

impl WanParams {
    pub const ZERO: WanParams = WanParams {
        latency_ms: 0.0,
        jitter_ms: 0.0,
        loss_pct: 0.0,
    };

    pub fn new(latency_ms: f64, jitter_ms: f64, loss_pct: f64) -> Result<Self> {
        let p = WanParams {
            latency_ms,
            jitter_ms,
            loss_pct,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("latency_ms", self.latency_ms),
            ("jitter_ms", self.jitter_ms),
            ("loss_pct", self.loss_pct),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.loss_pct > 100.0 {
            return Err(Error::config(format!("loss_pct must be <= 100, got {}", self.loss_pct)));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.latency_ms == 0.0 && self.jitter_ms == 0.0 && self.loss_pct == 0.0
    }

    /// Loss as a probability in [0, 1].
    pub fn loss_prob(&self) -> f64 {
        self.loss_pct / 100.0
    }

    fn divided(&self, n: u32) -> WanParams {
        let n = f64::from(n);
        WanParams {
            latency_ms: self.latency_ms / n,
            jitter_ms: self.jitter_ms / n,
            loss_pct: self.loss_pct / n,
        }
    }
}

/// Cloud-case link parameters that every scenario is derived from.
pub const CLOUD_BASE: WanParams = WanParams {
    latency_ms: 25.0,
    jitter_ms: 5.0,
    loss_pct: 0.4,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioName {
    #[serde(rename = "loc")]
    Loc,
    #[serde(rename = "cld")]
    Cld,
    #[serde(rename = "ewst")]
    Ewst,
    #[serde(rename = "etyp")]
    Etyp,
    #[serde(rename = "eopt")]
    Eopt,
}

impl ScenarioName {
    /// Column order used by every report.
    pub const ALL: [ScenarioName; 5] = [
        ScenarioName::Loc,
        ScenarioName::Cld,
        ScenarioName::Ewst,
        ScenarioName::Etyp,
        ScenarioName::Eopt,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioName::Loc => "loc",
            ScenarioName::Cld => "cld",
            ScenarioName::Ewst => "ewst",
            ScenarioName::Etyp => "etyp",
            ScenarioName::Eopt => "eopt",
        }
    }

    /// Divisor applied to the base parameters; 1 for the non-edge scenarios.
    pub fn divisor(&self) -> u32 {
        match self {
            ScenarioName::Loc | ScenarioName::Cld => 1,
            ScenarioName::Ewst => 2,
            ScenarioName::Etyp => 3,
            ScenarioName::Eopt => 5,
        }
    }

    pub fn is_edge(&self) -> bool {
        matches!(self, ScenarioName::Ewst | ScenarioName::Etyp | ScenarioName::Eopt)
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario `{s}` (expected loc|cld|ewst|etyp|eopt)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    /// Tester to master segment.
    pub cwan: WanParams,
    /// Master to worker segments.
    pub ewan: WanParams,
    pub divisor: u32,
}

impl ScenarioSpec {
    /// Builds `name` from arbitrary base parameters instead of the cloud
    /// defaults. Placement and divisor still follow the scenario name.
    pub fn with_base(name: ScenarioName, base: WanParams) -> Result<Self> {
        base.validate()?;
        let divisor = name.divisor();
        let (cwan, ewan) = match name {
            ScenarioName::Loc => (WanParams::ZERO, WanParams::ZERO),
            ScenarioName::Cld => (base, WanParams::ZERO),
            _ => {
                let edge = base.divided(divisor);
                (edge, edge)
            }
        };
        Ok(ScenarioSpec {
            name,
            cwan,
            ewan,
            divisor,
        })
    }
}

pub fn derive_scenario(name: &str) -> Result<ScenarioSpec> {
    let name: ScenarioName = name.parse()?;
    ScenarioSpec::with_base(name, CLOUD_BASE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProfileName {
    #[serde(rename = "rp.metal")]
    RpMetal,
    #[serde(rename = "vm.small")]
    VmSmall,
    #[serde(rename = "vm.medium")]
    VmMedium,
    #[serde(rename = "vm.large")]
    VmLarge,
}

impl ProfileName {
    pub const ALL: [ProfileName; 4] = [
        ProfileName::RpMetal,
        ProfileName::VmSmall,
        ProfileName::VmMedium,
        ProfileName::VmLarge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProfileName::RpMetal => "rp.metal",
            ProfileName::VmSmall => "vm.small",
            ProfileName::VmMedium => "vm.medium",
            ProfileName::VmLarge => "vm.large",
        }
    }

    pub fn profile(&self) -> NodeProfile {
        let (vcpus, ram_gb) = match self {
            ProfileName::RpMetal => (4, 8),
            ProfileName::VmSmall => (1, 2),
            ProfileName::VmMedium => (2, 4),
            ProfileName::VmLarge => (4, 8),
        };
        NodeProfile {
            name: *self,
            vcpus,
            ram_gb,
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "rpi.metal" {
            return Ok(ProfileName::RpMetal);
        }
        ProfileName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown profile `{s}` (expected rp.metal|vm.small|vm.medium|vm.large)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeProfile {
    pub name: ProfileName,
    pub vcpus: u32,
    pub ram_gb: u32,
}

pub const MAX_WORKERS: u32 = 3;

/// A homogeneous cluster: one master hosting the gateway plus
/// `worker_count` workers that run the functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub profile: NodeProfile,
    pub worker_count: u32,
}

pub fn build_topology(profile: &str, worker_count: u32) -> Result<Topology> {
    let profile: ProfileName = profile.parse()?;
    Topology::new(profile, worker_count)
}

impl Topology {
    pub fn new(profile: ProfileName, worker_count: u32) -> Result<Self> {
        if !(1..=MAX_WORKERS).contains(&worker_count) {
            return Err(Error::config(format!(
                "worker count must be in [1, {MAX_WORKERS}], got {worker_count}"
            )));
        }
        Ok(Topology {
            profile: profile.profile(),
            worker_count,
        })
    }
}

/// Formats a value with at most three decimals and no trailing zeros.
pub(crate) fn trim_decimal(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn netem_args(p: &WanParams) -> String {
    format!(
        "delay {}ms {}ms loss {}%",
        trim_decimal(p.latency_ms),
        trim_decimal(p.jitter_ms),
        trim_decimal(p.loss_pct)
    )
}

/// Distinct non-zero link configurations of a scenario, C-WAN first.
fn emulated_segments(spec: &ScenarioSpec) -> Vec<WanParams> {
    let mut out: Vec<WanParams> = Vec::new();
    for seg in [spec.cwan, spec.ewan] {
        if !seg.is_zero() && !out.contains(&seg) {
            out.push(seg);
        }
    }
    out
}

/// `tc` lines installing the scenario's netem disciplines on `iface`.
/// Edge scenarios apply one identical configuration on every node, so they
/// produce a single line.
pub fn emit_netem_commands(spec: &ScenarioSpec, iface: &str) -> Vec<String> {
    emulated_segments(spec)
        .iter()
        .map(|seg| format!("tc qdisc add dev {iface} root netem {}", netem_args(seg)))
        .collect()
}

/// Matching teardown lines for [`emit_netem_commands`].
pub fn emit_netem_teardown(spec: &ScenarioSpec, iface: &str) -> Vec<String> {
    emulated_segments(spec)
        .iter()
        .map(|_| format!("tc qdisc del dev {iface} root netem"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wan(l: f64, j: f64, p: f64) -> WanParams {
        WanParams::new(l, j, p).unwrap()
    }

    #[test]
    fn cloud_scenario() {
        let s = derive_scenario("cld").unwrap();
        assert_eq!(s.cwan, wan(25.0, 5.0, 0.4));
        assert!(s.ewan.is_zero());
        assert_eq!(s.divisor, 1);
    }

    #[test]
    fn local_scenario_is_unemulated() {
        let s = derive_scenario("loc").unwrap();
        assert!(s.cwan.is_zero() && s.ewan.is_zero());
    }

    #[test]
    fn edge_scenarios_divide_cloud_values() {
        let s = derive_scenario("eopt").unwrap();
        assert_eq!(s.divisor, 5);
        assert_eq!(s.cwan, wan(5.0, 1.0, 0.08));
        assert_eq!(s.ewan, s.cwan);
        for name in ["ewst", "etyp", "eopt"] {
            let s = derive_scenario(name).unwrap();
            let n = f64::from(s.divisor);
            assert_eq!(s.ewan.latency_ms, 25.0 / n);
            assert_eq!(s.ewan.jitter_ms, 5.0 / n);
            assert_eq!(s.ewan.loss_pct, 0.4 / n);
        }
    }

    #[test]
    fn unknown_scenario_is_config_error() {
        assert!(matches!(derive_scenario("mars"), Err(Error::Config(_))));
    }

    #[test]
    fn derive_is_pure() {
        for name in ScenarioName::ALL {
            assert_eq!(derive_scenario(name.as_str()).unwrap(), derive_scenario(name.as_str()).unwrap());
        }
    }

    #[test]
    fn wan_params_validation() {
        assert!(WanParams::new(-1.0, 0.0, 0.0).is_err());
        assert!(WanParams::new(1.0, f64::NAN, 0.0).is_err());
        assert!(WanParams::new(1.0, 0.0, 100.5).is_err());
        assert!(WanParams::new(0.0, 0.0, 100.0).is_ok());
    }

    #[test]
    fn profiles_match_hardware_list() {
        let dims: Vec<_> = ProfileName::ALL
            .iter()
            .map(|p| (p.profile().vcpus, p.profile().ram_gb))
            .collect();
        assert_eq!(dims, vec![(4, 8), (1, 2), (2, 4), (4, 8)]);
        assert_eq!("rpi.metal".parse::<ProfileName>().unwrap(), ProfileName::RpMetal);
    }

    #[test]
    fn topology_bounds() {
        assert_eq!(build_topology("vm.large", 1).unwrap().worker_count, 1);
        assert_eq!(build_topology("rp.metal", 3).unwrap().worker_count, 3);
        assert!(matches!(build_topology("vm.small", 4), Err(Error::Config(_))));
        assert!(build_topology("vm.small", 0).is_err());
        assert!(build_topology("vm.huge", 1).is_err());
    }

    #[test]
    fn netem_lines() {
        let cld = derive_scenario("cld").unwrap();
        assert_eq!(
            emit_netem_commands(&cld, "nebula1"),
            vec!["tc qdisc add dev nebula1 root netem delay 25ms 5ms loss 0.4%"]
        );
        assert!(emit_netem_commands(&derive_scenario("loc").unwrap(), "nebula1").is_empty());
        assert_eq!(
            emit_netem_commands(&derive_scenario("ewst").unwrap(), "nebula1"),
            vec!["tc qdisc add dev nebula1 root netem delay 12.5ms 2.5ms loss 0.2%"]
        );
        assert_eq!(
            emit_netem_commands(&derive_scenario("etyp").unwrap(), "eth0"),
            vec!["tc qdisc add dev eth0 root netem delay 8.333ms 1.667ms loss 0.133%"]
        );
    }

    #[test]
    fn trimming() {
        assert_eq!(trim_decimal(25.0), "25");
        assert_eq!(trim_decimal(0.08), "0.08");
        assert_eq!(trim_decimal(12.5), "12.5");
        assert_eq!(trim_decimal(0.0), "0");
    }
}
