//! Command-line front end: `run`, `live`, `sweep`, `calibrate`, `netem`
//! and a loopback `stub` gateway.
//!
//! Settings resolve as flag, then config file, then built-in default. The
//! config file uses the flat `key = value` syntax of [`crate::config`]; on
//! top of the model keys it accepts `scenario.{name,latency_ms,jitter_ms,
//! loss_pct}`, `topology.{profile,workers}`, `test.kind`, `test.<override>`
//! for every plan override, `test.intensive.payload_kb`, `run.seed` and
//! `run.repetitions`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cluster::{fib_calls, run_sim, FunctionName, ServiceKind};
use crate::config::{read_key_values, KeyValues, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::{export_records, render_table, summarize, write_summaries, SummaryLine, TableRow};
use crate::scenario::{emit_netem_commands, emit_netem_teardown, ProfileName, ScenarioName, ScenarioSpec, Topology, WanParams, CLOUD_BASE};
use crate::workload::live::LiveDriver;
use crate::workload::stub::StubGateway;
use crate::workload::{build_plan_forced, RequestRecord, TestKind, TestPlan, PLAN_KEYS};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_REPETITIONS: u32 = 10;
pub const DEFAULT_WORKERS: u32 = 3;

#[derive(Debug, Parser)]
#[command(name = "faasbench", version, about = "Edge/cloud FaaS latency benchmark: simulator, live driver and netem planner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one test on one scenario/profile (live when --gateway is set)
    Run(RunArgs),
    /// Run one test against a real gateway
    Live(RunArgs),
    /// Run a tests x profiles x scenarios grid and print a results table
    Sweep(SweepArgs),
    /// Fit service-model constants to reference medians
    Calibrate(CalibrateArgs),
    /// Print tc/netem commands for a scenario
    Netem(NetemArgs),
    /// Serve a loopback echo gateway with a fixed delay
    Stub(StubArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Base seed; repetition i uses seed + i
    #[arg(long, env = "FAASBENCH_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repetitions: Option<u32>,
    #[arg(long, default_value = "results")]
    pub out_dir: PathBuf,
    /// Key-value config file; flags take precedence over it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Accept plans outside the ranges a test is defined for
    #[arg(long)]
    pub force: bool,
    /// Run independent simulations one after another
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub workers: Option<u32>,
    /// overhead|intensive|payload|scalability|workflow
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long)]
    pub payload_kb: Option<u64>,
    #[arg(long)]
    pub fib_n: Option<u32>,
    #[arg(long)]
    pub threads: Option<u32>,
    #[arg(long)]
    pub chain_len: Option<u32>,
    /// client|server
    #[arg(long)]
    pub chain_mode: Option<String>,
    #[arg(long)]
    pub pacing_ms: Option<f64>,
    #[arg(long)]
    pub total_requests: Option<u64>,
    #[arg(long)]
    pub duration_ms: Option<f64>,
    /// Gateway base URL; switches to live mode
    #[arg(long)]
    pub gateway: Option<String>,
    /// Per-request timeout
    #[arg(long)]
    pub timeout_ms: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Comma-separated test kinds
    #[arg(long = "test", value_delimiter = ',', default_value = "overhead")]
    pub tests: Vec<String>,
    #[arg(long = "scenario", value_delimiter = ',', default_value = "loc,cld,ewst,etyp,eopt")]
    pub scenarios: Vec<String>,
    #[arg(long = "profile", value_delimiter = ',', default_value = "rp.metal,vm.large")]
    pub profiles: Vec<String>,
    #[arg(long)]
    pub workers: Option<u32>,
    /// Payload sizes for payload rows
    #[arg(long, value_delimiter = ',')]
    pub payload_kb: Vec<u64>,
    #[arg(long)]
    pub fib_n: Option<u32>,
    /// Thread counts for scalability rows
    #[arg(long, value_delimiter = ',')]
    pub threads: Vec<u32>,
    /// Chain lengths for workflow rows
    #[arg(long, value_delimiter = ',')]
    pub chain_len: Vec<u32>,
    /// Chain modes for workflow rows
    #[arg(long, value_delimiter = ',')]
    pub chain_mode: Vec<String>,
    #[arg(long)]
    pub pacing_ms: Option<f64>,
    #[arg(long)]
    pub total_requests: Option<u64>,
    #[arg(long)]
    pub duration_ms: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// JSON file with reference medians
    #[arg(long)]
    pub reference: PathBuf,
    /// Output file name inside --out-dir
    #[arg(long, default_value = "calibrated.conf")]
    pub output: String,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct NetemArgs {
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long, default_value = "eth0")]
    pub iface: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StubArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: String,
    #[arg(long, default_value_t = 50.0)]
    pub delay_ms: f64,
}

/// How independent simulations are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    fn from_flag(sequential: bool) -> Self {
        if sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }

    /// Maps `f` over `items`, keeping input order. Falls back to a plain
    /// loop when built without the `parallel` feature.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            ExecMode::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }
}

/// Config-file keys split into model keys and front-end keys.
#[derive(Debug, Clone, Default)]
pub struct FileSettings {
    pub model: ModelConfig,
    pub kv: KeyValues,
}

impl FileSettings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let kv = match path {
            Some(p) => read_key_values(p)?,
            None => KeyValues::new(),
        };
        Self::from_kv(kv)
    }

    pub fn from_kv(kv: KeyValues) -> Result<Self> {
        let mut model = ModelConfig::default();
        let rest = model.apply(&kv)?;
        for k in &rest {
            if !front_end_key(k) {
                return Err(Error::config(format!("unknown config key `{k}`")));
            }
        }
        Ok(FileSettings { model, kv })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.kv.get(key).map(String::as_str)
    }

    fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::config(format!("{key}: cannot parse `{v}`"))))
            .transpose()
    }

    /// Scenario by name, with the file's custom link parameters if any.
    pub fn scenario(&self, flag: Option<&str>) -> Result<ScenarioSpec> {
        let name: ScenarioName = flag.or(self.get("scenario.name")).unwrap_or("loc").parse()?;
        let lat = self.get_parsed::<f64>("scenario.latency_ms")?;
        let jit = self.get_parsed::<f64>("scenario.jitter_ms")?;
        let loss = self.get_parsed::<f64>("scenario.loss_pct")?;
        let base = if lat.is_none() && jit.is_none() && loss.is_none() {
            CLOUD_BASE
        } else {
            WanParams::new(
                lat.unwrap_or(CLOUD_BASE.latency_ms),
                jit.unwrap_or(CLOUD_BASE.jitter_ms),
                loss.unwrap_or(CLOUD_BASE.loss_pct),
            )?
        };
        ScenarioSpec::with_base(name, base)
    }

    pub fn profile(&self, flag: Option<&str>) -> Result<ProfileName> {
        flag.or(self.get("topology.profile")).unwrap_or("vm.large").parse()
    }

    pub fn workers(&self, flag: Option<u32>) -> Result<u32> {
        Ok(match flag {
            Some(w) => w,
            None => self.get_parsed("topology.workers")?.unwrap_or(DEFAULT_WORKERS),
        })
    }

    pub fn test_kind(&self, flag: Option<&str>) -> Result<TestKind> {
        flag.or(self.get("test.kind")).unwrap_or("overhead").parse()
    }

    /// Plan overrides from the file for `kind`; flags are merged on top by
    /// the caller.
    pub fn plan_overrides(&self, kind: TestKind) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for key in PLAN_KEYS {
            if let Some(v) = self.get(&format!("test.{key}")) {
                out.insert(key.to_string(), v.to_string());
            }
        }
        if kind == TestKind::Intensive {
            if let Some(v) = self.get("test.intensive.payload_kb") {
                out.insert("payload_kb".into(), v.to_string());
            }
        }
        out
    }

    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        Ok(match flag {
            Some(s) => s,
            None => self.get_parsed("run.seed")?.unwrap_or(DEFAULT_SEED),
        })
    }

    pub fn repetitions(&self, flag: Option<u32>) -> Result<u32> {
        let r = match flag {
            Some(r) => r,
            None => self.get_parsed("run.repetitions")?.unwrap_or(DEFAULT_REPETITIONS),
        };
        if r == 0 {
            return Err(Error::config("repetitions must be >= 1"));
        }
        Ok(r)
    }
}

fn front_end_key(k: &str) -> bool {
    matches!(
        k,
        "scenario.name"
            | "scenario.latency_ms"
            | "scenario.jitter_ms"
            | "scenario.loss_pct"
            | "topology.profile"
            | "topology.workers"
            | "test.kind"
            | "test.intensive.payload_kb"
            | "run.seed"
            | "run.repetitions"
    ) || k
        .strip_prefix("test.")
        .is_some_and(|rest| PLAN_KEYS.contains(&rest))
}

/// Everything one `run` needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    pub topology: Topology,
    pub plan: TestPlan,
    pub model: ModelConfig,
    pub seed: u64,
    pub repetitions: u32,
    pub out_dir: PathBuf,
    pub gateway: Option<String>,
    pub timeout_ms: f64,
    pub mode: ExecMode,
}

impl RunConfig {
    pub fn new(scenario: ScenarioSpec, topology: Topology, plan: TestPlan) -> Self {
        let model = ModelConfig::default();
        RunConfig {
            scenario,
            topology,
            plan,
            timeout_ms: model.request_timeout_ms,
            model,
            seed: DEFAULT_SEED,
            repetitions: DEFAULT_REPETITIONS,
            out_dir: PathBuf::from("results"),
            gateway: None,
            mode: ExecMode::Parallel,
        }
    }

    pub fn from_args(args: &RunArgs) -> Result<Self> {
        let file = FileSettings::load(args.common.config.as_deref())?;
        let kind = file.test_kind(args.test.as_deref())?;
        let mut ov = file.plan_overrides(kind);
        let flags: [(&str, Option<String>); 8] = [
            ("threads", args.threads.map(|v| v.to_string())),
            ("pacing_ms", args.pacing_ms.map(|v| v.to_string())),
            ("total_requests", args.total_requests.map(|v| v.to_string())),
            ("duration_ms", args.duration_ms.map(|v| v.to_string())),
            ("payload_kb", args.payload_kb.map(|v| v.to_string())),
            ("fib_n", args.fib_n.map(|v| v.to_string())),
            ("chain_len", args.chain_len.map(|v| v.to_string())),
            ("chain_mode", args.chain_mode.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                ov.insert(k.to_string(), v);
            }
        }
        // a flag picking one stop rule replaces the other from the file
        if args.total_requests.is_some() {
            ov.remove("duration_ms");
        } else if args.duration_ms.is_some() {
            ov.remove("total_requests");
        }
        if ov.contains_key("total_requests") && ov.contains_key("duration_ms") {
            return Err(Error::config("set either total_requests or duration_ms, not both"));
        }
        let plan = build_plan_forced(kind, &ov, args.common.force)?;
        let scenario = file.scenario(args.scenario.as_deref())?;
        let topology = Topology::new(file.profile(args.profile.as_deref())?, file.workers(args.workers)?)?;
        let timeout_ms = args.timeout_ms.unwrap_or(file.model.request_timeout_ms);
        if !(timeout_ms.is_finite() && timeout_ms > 0.0) {
            return Err(Error::config("timeout must be > 0"));
        }
        let mut model = file.model.clone();
        model.request_timeout_ms = timeout_ms;
        Ok(RunConfig {
            scenario,
            topology,
            plan,
            model,
            seed: file.seed(args.common.seed)?,
            repetitions: file.repetitions(args.common.repetitions)?,
            out_dir: args.common.out_dir.clone(),
            gateway: args.gateway.clone(),
            timeout_ms,
            mode: ExecMode::from_flag(args.common.sequential),
        })
    }

    /// File stem shared by the records CSV and the summary JSONL.
    pub fn file_stem(&self) -> String {
        let mode = if self.gateway.is_some() { "live_" } else { "" };
        format!(
            "{mode}{}_{}_{}_w{}_s{}",
            self.plan.test_id(),
            self.scenario.name,
            self.topology.profile.name,
            self.topology.worker_count,
            self.seed
        )
    }
}

/// Records of `repetitions` simulations seeded `seed, seed + 1, ...`,
/// concatenated in repetition order.
pub fn simulate_repetitions(
    plan: &TestPlan,
    scenario: &ScenarioSpec,
    topology: &Topology,
    model: &ModelConfig,
    seed: u64,
    repetitions: u32,
    mode: ExecMode,
) -> Result<Vec<RequestRecord>> {
    let seeds: Vec<u64> = (0..u64::from(repetitions)).map(|i| seed.wrapping_add(i)).collect();
    let runs = mode.map(&seeds, |&s| run_sim(plan, scenario, topology, model, s));
    let mut out = Vec::new();
    for r in runs {
        out.extend(r?);
    }
    Ok(out)
}

/// Simulates one cell and summarises it.
pub fn simulate_cell(
    plan: &TestPlan,
    scenario: &ScenarioSpec,
    topology: &Topology,
    model: &ModelConfig,
    seed: u64,
    repetitions: u32,
    mode: ExecMode,
) -> Result<SummaryLine> {
    let records = simulate_repetitions(plan, scenario, topology, model, seed, repetitions, mode)?;
    Ok(summarize(
        &plan.test_id(),
        scenario.name.as_str(),
        topology.profile.name.as_str(),
        &records,
        plan.duration_ms(),
        repetitions,
    ))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RequestRecord>,
    pub summary: SummaryLine,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn execute_run(cfg: &RunConfig) -> Result<RunOutput> {
    let records = match &cfg.gateway {
        Some(url) => {
            let driver = LiveDriver::new(url, cfg.timeout_ms)?
                .with_labels(cfg.scenario.name.as_str(), cfg.topology.profile.name.as_str());
            let mut all = Vec::new();
            for _ in 0..cfg.repetitions {
                all.extend(driver.run(&cfg.plan)?);
            }
            all
        }
        None => simulate_repetitions(
            &cfg.plan,
            &cfg.scenario,
            &cfg.topology,
            &cfg.model,
            cfg.seed,
            cfg.repetitions,
            cfg.mode,
        )?,
    };
    let summary = summarize(
        &cfg.plan.test_id(),
        cfg.scenario.name.as_str(),
        cfg.topology.profile.name.as_str(),
        &records,
        cfg.plan.duration_ms(),
        cfg.repetitions,
    );
    ensure_dir(&cfg.out_dir)?;
    let stem = cfg.file_stem();
    let csv_path = cfg.out_dir.join(format!("{stem}.csv"));
    let summary_path = cfg.out_dir.join(format!("{stem}.jsonl"));
    export_records(&records, &csv_path)?;
    write_summaries(std::slice::from_ref(&summary), &summary_path)?;
    Ok(RunOutput {
        records,
        summary,
        csv_path,
        summary_path,
    })
}

/// One row variant of a sweep: a test kind plus its overrides.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub kind: TestKind,
    pub overrides: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub rows: Vec<SweepRow>,
    pub profiles: Vec<String>,
    pub scenarios: Vec<String>,
    pub workers: u32,
    pub model: ModelConfig,
    /// Link parameters for non-default scenarios from the config file.
    pub file: FileSettings,
    pub seed: u64,
    pub repetitions: u32,
    pub force: bool,
    pub mode: ExecMode,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub table: String,
    pub rows: Vec<TableRow>,
    pub summaries: Vec<SummaryLine>,
    /// `(row label, profile, scenario, error)` of every failed cell.
    pub failures: Vec<(String, String, String, Error)>,
}

impl SweepOutput {
    pub fn exit_code(&self) -> i32 {
        self.failures.first().map_or(0, |f| f.3.exit_code())
    }
}

impl SweepArgs {
    pub fn to_spec(&self) -> Result<SweepSpec> {
        let file = FileSettings::load(self.common.config.as_deref())?;
        let nonempty = |v: &[String]| v.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect::<Vec<_>>();
        let tests = nonempty(&self.tests);
        let profiles = nonempty(&self.profiles);
        let scenarios = nonempty(&self.scenarios);
        if tests.is_empty() || profiles.is_empty() || scenarios.is_empty() {
            return Err(Error::config("sweep grid is empty"));
        }
        let mut rows = Vec::new();
        for t in &tests {
            let kind: TestKind = t.parse()?;
            let mut base = file.plan_overrides(kind);
            for (k, v) in [
                ("fib_n", self.fib_n.map(|v| v.to_string())),
                ("pacing_ms", self.pacing_ms.map(|v| v.to_string())),
                ("total_requests", self.total_requests.map(|v| v.to_string())),
                ("duration_ms", self.duration_ms.map(|v| v.to_string())),
            ] {
                if let Some(v) = v {
                    base.insert(k.to_string(), v);
                }
            }
            let variants: Vec<BTreeMap<String, String>> = match kind {
                TestKind::Payload if !self.payload_kb.is_empty() => self
                    .payload_kb
                    .iter()
                    .map(|kb| with(&base, "payload_kb", kb.to_string()))
                    .collect(),
                TestKind::Scalability if !self.threads.is_empty() => self
                    .threads
                    .iter()
                    .map(|t| with(&base, "threads", t.to_string()))
                    .collect(),
                TestKind::Workflow => {
                    let lens: Vec<String> = if self.chain_len.is_empty() {
                        vec![base.get("chain_len").cloned().unwrap_or_else(|| "5".into())]
                    } else {
                        self.chain_len.iter().map(u32::to_string).collect()
                    };
                    let modes: Vec<String> = if self.chain_mode.is_empty() {
                        vec![base.get("chain_mode").cloned().unwrap_or_else(|| "client".into())]
                    } else {
                        self.chain_mode.clone()
                    };
                    let mut out = Vec::new();
                    for m in &modes {
                        for l in &lens {
                            out.push(with(&with(&base, "chain_mode", m.clone()), "chain_len", l.clone()));
                        }
                    }
                    out
                }
                _ => vec![base],
            };
            rows.extend(variants.into_iter().map(|overrides| SweepRow { kind, overrides }));
        }
        Ok(SweepSpec {
            rows,
            profiles,
            scenarios,
            workers: file.workers(self.workers)?,
            model: file.model.clone(),
            seed: file.seed(self.common.seed)?,
            repetitions: file.repetitions(self.common.repetitions)?,
            force: self.common.force,
            mode: ExecMode::from_flag(self.common.sequential),
            file,
        })
    }
}

fn with(base: &BTreeMap<String, String>, k: &str, v: String) -> BTreeMap<String, String> {
    let mut m = base.clone();
    m.insert(k.to_string(), v);
    m
}

/// Runs every cell of the grid; failed cells become `n/a`.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepOutput> {
    if spec.rows.is_empty() || spec.profiles.is_empty() || spec.scenarios.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let mut cells = Vec::new();
    for (ri, _) in spec.rows.iter().enumerate() {
        for p in &spec.profiles {
            for s in &spec.scenarios {
                cells.push((ri, p.clone(), s.clone()));
            }
        }
    }
    // Repetitions stay sequential inside a cell; the cells are the unit of
    // parallel work.
    let results = spec.mode.map(&cells, |(ri, p, s)| -> Result<(String, SummaryLine)> {
        let row = &spec.rows[*ri];
        let plan = build_plan_forced(row.kind, &row.overrides, spec.force)?;
        let profile: ProfileName = p.parse()?;
        let topology = Topology::new(profile, spec.workers)?;
        let scenario = spec.file.scenario(Some(s))?;
        let line = simulate_cell(&plan, &scenario, &topology, &spec.model, spec.seed, spec.repetitions, ExecMode::Sequential)?;
        Ok((plan.test_id(), line))
    });

    let mut table_rows: Vec<TableRow> = Vec::new();
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    let per_row = spec.profiles.len() * spec.scenarios.len();
    for (ri, row) in spec.rows.iter().enumerate() {
        let fallback_label = build_plan_forced(row.kind, &row.overrides, true)
            .map(|p| p.test_id())
            .unwrap_or_else(|_| row.kind.to_string());
        for (pi, p) in spec.profiles.iter().enumerate() {
            let mut tr = TableRow {
                test: fallback_label.clone(),
                profile: p.clone(),
                cells: [None; 5],
            };
            for (si, s) in spec.scenarios.iter().enumerate() {
                let idx = ri * per_row + pi * spec.scenarios.len() + si;
                match &results[idx] {
                    Ok((label, line)) => {
                        tr.test = label.clone();
                        if let Some(col) = ScenarioName::ALL.iter().position(|n| n.as_str() == s) {
                            tr.cells[col] = Some((line.median_ms, line.iqr_ms));
                        }
                        summaries.push(line.clone());
                    }
                    Err(e) => failures.push((fallback_label.clone(), p.clone(), s.clone(), clone_err(e))),
                }
            }
            table_rows.push(tr);
        }
    }
    let table = render_table(&table_rows)?;
    Ok(SweepOutput {
        table,
        rows: table_rows,
        summaries,
        failures,
    })
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(m.clone()),
        Error::Input(m) => Error::Input(m.clone()),
        Error::Io { path, source } => Error::io(path.clone(), std::io::Error::new(source.kind(), source.to_string())),
    }
}

/// Reference medians, one entry per table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub entries: Vec<ReferenceEntry>,
    #[serde(default)]
    pub fib_targets: Vec<FibTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub test: TestKind,
    pub profile: ProfileName,
    pub scenario: ScenarioName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_kb: Option<u64>,
    pub median_ms: f64,
    #[serde(default)]
    pub iqr_ms: f64,
}

/// Execution time of fib-go on a profile for one `n`, without network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FibTarget {
    pub profile: ProfileName,
    pub fib_n: u32,
    pub service_ms: f64,
}

impl Reference {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    fn loc(&self, test: TestKind, profile: ProfileName) -> impl Iterator<Item = &ReferenceEntry> {
        self.entries
            .iter()
            .filter(move |e| e.test == test && e.profile == profile && e.scenario == ScenarioName::Loc)
    }
}

/// Profiles each function must have reference data for.
pub const REQUIRED_PROFILES: [(FunctionName, &[ProfileName]); 4] = [
    (FunctionName::HelloWorld, &[ProfileName::RpMetal, ProfileName::VmLarge]),
    (
        FunctionName::ImgClassifierHub,
        &[ProfileName::RpMetal, ProfileName::VmSmall, ProfileName::VmMedium, ProfileName::VmLarge],
    ),
    (FunctionName::PayloadEcho, &[ProfileName::RpMetal, ProfileName::VmLarge]),
    (FunctionName::FibGo, &[ProfileName::RpMetal, ProfileName::VmLarge]),
];

/// Least squares line `y = a + b x` minimising relative residuals
/// `(y - fit) / y`. Returns `(a, b)`.
pub fn fit_relative_ls(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::input("need at least two points to fit a line"));
    }
    let w: Vec<f64> = points.iter().map(|&(_, y)| 1.0 / y.abs().max(1e-9).powi(2)).collect();
    weighted_line(points, &w)
}

/// Ordinary least squares line. Returns `(a, b)`.
pub fn fit_ls(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::input("need at least two points to fit a line"));
    }
    weighted_line(points, &vec![1.0; points.len()])
}

fn weighted_line(points: &[(f64, f64)], w: &[f64]) -> Result<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    let xm = points.iter().zip(w).map(|(p, w)| w * p.0).sum::<f64>() / sw;
    let ym = points.iter().zip(w).map(|(p, w)| w * p.1).sum::<f64>() / sw;
    let sxx: f64 = points.iter().zip(w).map(|(p, w)| w * (p.0 - xm).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::input("fit needs at least two distinct x values"));
    }
    let sxy: f64 = points.iter().zip(w).map(|(p, w)| w * (p.0 - xm) * (p.1 - ym)).sum();
    let mut b = sxy / sxx;
    // flat data leaves rounding noise in the slope
    if b.abs() < 1e-9 * (1.0 + ym.abs()) {
        b = 0.0;
    }
    Ok((ym - b * xm, b))
}

#[derive(Debug, Clone)]
pub struct Residual {
    pub label: String,
    pub profile: ProfileName,
    pub reference_ms: f64,
    pub simulated_ms: f64,
}

impl Residual {
    pub fn relative(&self) -> f64 {
        (self.simulated_ms - self.reference_ms) / self.reference_ms
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub model: ModelConfig,
    pub residuals: Vec<Residual>,
}

/// Fits service constants from loc medians (minus the zero-WAN floor) and
/// fib targets, starting from `base`.
pub fn fit_services(reference: &Reference, base: &ModelConfig) -> Result<ModelConfig> {
    let mut missing = Vec::new();
    for (func, profiles) in REQUIRED_PROFILES {
        for &p in profiles {
            let ok = match func {
                FunctionName::HelloWorld => reference.loc(TestKind::Overhead, p).next().is_some(),
                FunctionName::ImgClassifierHub => reference.loc(TestKind::Intensive, p).next().is_some(),
                FunctionName::PayloadEcho => {
                    let mut sizes: Vec<u64> = reference.loc(TestKind::Payload, p).filter_map(|e| e.payload_kb).collect();
                    sizes.sort_unstable();
                    sizes.dedup();
                    sizes.len() >= 2
                }
                FunctionName::FibGo => reference.fib_targets.iter().any(|t| t.profile == p),
            };
            if !ok {
                missing.push(match func {
                    FunctionName::PayloadEcho => format!("payload/{p}/loc (two or more payload_kb)"),
                    FunctionName::FibGo => format!("fib_targets/{p}"),
                    FunctionName::HelloWorld => format!("overhead/{p}/loc"),
                    FunctionName::ImgClassifierHub => format!("intensive/{p}/loc"),
                });
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::config(format!("reference is missing: {}", missing.join(", "))));
    }

    let mut model = base.clone();
    for p in ProfileName::ALL {
        let floor = base.zero_wan_floor_ms(p);
        let mean_loc = |t: TestKind| {
            let v: Vec<f64> = reference.loc(t, p).map(|e| e.median_ms).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        if let Some(m) = mean_loc(TestKind::Overhead) {
            set_model(&mut model, FunctionName::HelloWorld, p, |s| s.base_ms = (m - floor).max(0.0));
        }
        if let Some(m) = mean_loc(TestKind::Intensive) {
            set_model(&mut model, FunctionName::ImgClassifierHub, p, |s| s.base_ms = (m - floor).max(0.0));
        }
        let pts: Vec<(f64, f64)> = reference
            .loc(TestKind::Payload, p)
            .filter_map(|e| e.payload_kb.map(|kb| (kb as f64, e.median_ms - floor)))
            .collect();
        if let Ok((a, b)) = fit_relative_ls(&pts) {
            set_model(&mut model, FunctionName::PayloadEcho, p, |s| {
                s.base_ms = a.max(0.0);
                s.per_kb_ms = b.max(0.0);
            });
        }
        let fib: Vec<(f64, f64)> = reference
            .fib_targets
            .iter()
            .filter(|t| t.profile == p)
            .map(|t| Ok((fib_calls(t.fib_n)? as f64, t.service_ms)))
            .collect::<Result<_>>()?;
        match fit_ls(&fib) {
            Ok((a, b)) => set_model(&mut model, FunctionName::FibGo, p, |s| {
                s.base_ms = a.max(0.0);
                s.per_call_ns = (b * 1e6).max(0.0);
            }),
            Err(_) if !fib.is_empty() => {
                // one target: keep the base, fit the per-call cost through it
                let base_ms = model.service(FunctionName::FibGo, p).map_or(0.0, |s| s.base_ms);
                let (calls, y) = fib[0];
                set_model(&mut model, FunctionName::FibGo, p, |s| {
                    s.per_call_ns = ((y - base_ms) / calls * 1e6).max(0.0)
                });
            }
            Err(_) => {}
        }
    }
    model.validate()?;
    Ok(model)
}

fn set_model(model: &mut ModelConfig, func: FunctionName, p: ProfileName, f: impl FnOnce(&mut crate::cluster::ServiceModel)) {
    let entry = model
        .services
        .entry((func, p))
        .or_insert_with(|| crate::cluster::ServiceModel::zero(func.default_kind()));
    debug_assert!(entry.kind == func.default_kind() || entry.kind != ServiceKind::Constant);
    f(entry);
}

/// Re-simulates every loc reference cell with `model`.
pub fn residuals(
    reference: &Reference,
    model: &ModelConfig,
    workers: u32,
    seed: u64,
    repetitions: u32,
    mode: ExecMode,
) -> Result<Vec<Residual>> {
    let locs: Vec<&ReferenceEntry> = reference.entries.iter().filter(|e| e.scenario == ScenarioName::Loc).collect();
    let scenario = ScenarioSpec::with_base(ScenarioName::Loc, CLOUD_BASE)?;
    let sims = mode.map(&locs, |e| -> Result<Residual> {
        let mut ov = BTreeMap::new();
        if let Some(kb) = e.payload_kb {
            ov.insert("payload_kb".to_string(), kb.to_string());
        }
        let plan = build_plan_forced(e.test, &ov, true)?;
        let topology = Topology::new(e.profile, workers)?;
        let line = simulate_cell(&plan, &scenario, &topology, model, seed, repetitions, ExecMode::Sequential)?;
        Ok(Residual {
            label: plan.test_id(),
            profile: e.profile,
            reference_ms: e.median_ms,
            simulated_ms: line.median_ms,
        })
    });
    sims.into_iter().collect()
}

pub fn calibrate(reference: &Reference, base: &ModelConfig, seed: u64, repetitions: u32, mode: ExecMode) -> Result<Calibration> {
    let model = fit_services(reference, base)?;
    let residuals = residuals(reference, &model, DEFAULT_WORKERS, seed, repetitions, mode)?;
    Ok(Calibration { model, residuals })
}

pub fn render_residuals(res: &[Residual]) -> String {
    let mut out = String::new();
    for r in res {
        let _ = writeln!(
            out,
            "{:<16} {:<10} ref {:>8.1}  sim {:>8.1}  {:>+6.1}%",
            r.label,
            r.profile,
            r.reference_ms,
            r.simulated_ms,
            100.0 * r.relative()
        );
    }
    out
}

/// `tc` script: setup lines then matching teardown lines.
pub fn netem_plan(spec: &ScenarioSpec, iface: &str) -> String {
    let mut out = String::new();
    for line in emit_netem_commands(spec, iface).iter().chain(&emit_netem_teardown(spec, iface)) {
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn cmd_run(args: &RunArgs, live: bool) -> Result<i32> {
    let cfg = RunConfig::from_args(args)?;
    if live && cfg.gateway.is_none() {
        return Err(Error::config("live needs --gateway"));
    }
    let out = execute_run(&cfg)?;
    let line = serde_json::to_string(&out.summary).map_err(|e| Error::input(e.to_string()))?;
    println!("{line}");
    eprintln!("wrote {} and {}", out.csv_path.display(), out.summary_path.display());
    Ok(0)
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let spec = args.to_spec()?;
    let out = run_sweep(&spec)?;
    ensure_dir(&args.common.out_dir)?;
    let table_path = args.common.out_dir.join("table.txt");
    std::fs::write(&table_path, &out.table).map_err(|e| Error::io(&table_path, e))?;
    write_summaries(&out.summaries, &args.common.out_dir.join("summary.jsonl"))?;
    print!("{}", out.table);
    for (row, p, s, e) in &out.failures {
        eprintln!("cell {row}/{p}/{s} failed: {e}");
    }
    Ok(out.exit_code())
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<i32> {
    let file = FileSettings::load(args.common.config.as_deref())?;
    let reference = Reference::read(&args.reference)?;
    let cal = calibrate(
        &reference,
        &file.model,
        file.seed(args.common.seed)?,
        file.repetitions(args.common.repetitions)?,
        ExecMode::from_flag(args.common.sequential),
    )?;
    ensure_dir(&args.common.out_dir)?;
    let path = args.common.out_dir.join(&args.output);
    let text = format!("# fitted service constants\n{}", cal.model.render_services());
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    print!("{}", render_residuals(&cal.residuals));
    eprintln!("wrote {}", path.display());
    Ok(0)
}

fn cmd_netem(args: &NetemArgs) -> Result<i32> {
    let file = FileSettings::load(args.config.as_deref())?;
    if args.scenario.is_none() && file.get("scenario.name").is_none() {
        return Err(Error::config("netem needs --scenario"));
    }
    let spec = file.scenario(args.scenario.as_deref())?;
    print!("{}", netem_plan(&spec, &args.iface));
    Ok(0)
}

fn cmd_stub(args: &StubArgs) -> Result<i32> {
    if !(args.delay_ms.is_finite() && args.delay_ms >= 0.0) {
        return Err(Error::config("delay must be >= 0"));
    }
    let stub = StubGateway::start(&args.listen, Duration::from_secs_f64(args.delay_ms / 1000.0))?;
    eprintln!("stub gateway on {}", stub.url());
    stub.wait();
    Ok(0)
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, false),
        Command::Live(a) => cmd_run(a, true),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Netem(a) => cmd_netem(a),
        Command::Stub(a) => cmd_stub(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("faasbench: {e}");
            e.exit_code()
        }
    }
}
