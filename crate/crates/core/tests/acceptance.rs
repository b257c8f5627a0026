//! Acceptance checks 1-11. Runs as a plain binary so each criterion prints
//! one PASS/FAIL line whatever the outcome.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use faasbench::cli::{fit_services, main_with_args, netem_plan, residuals, simulate_cell, ExecMode, Reference};
use faasbench::cluster::fib_calls;
use faasbench::config::ModelConfig;
use faasbench::metrics::{iqr, median};
use faasbench::netmodel::{request_network_time, rounds_for, LinkStreams, TransferModelParams};
use faasbench::scenario::{derive_scenario, ProfileName, ScenarioName, ScenarioSpec, Topology, WanParams};
use faasbench::workload::live::LiveDriver;
use faasbench::workload::stub::StubGateway;
use faasbench::workload::{build_plan, build_plan_forced, TestKind, TestPlan};
use rand::{Rng, SeedableRng};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

const REPS: u32 = 10;
const SEED: u64 = 42;

fn kv(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn plan(kind: TestKind, pairs: &[(&str, String)]) -> TestPlan {
    build_plan_forced(kind, &kv(pairs), true).expect("plan")
}

fn cell(p: &TestPlan, s: ScenarioName, prof: ProfileName, cfg: &ModelConfig) -> (f64, f64) {
    let scenario = derive_scenario(s.as_str()).unwrap();
    let topo = Topology::new(prof, 3).unwrap();
    let line = simulate_cell(p, &scenario, &topo, cfg, SEED, REPS, ExecMode::Parallel).unwrap();
    (line.median_ms, line.steady_rps)
}

fn med(p: &TestPlan, s: ScenarioName, prof: ProfileName) -> f64 {
    cell(p, s, prof, &ModelConfig::default()).0
}

const BOTH: [ProfileName; 2] = [ProfileName::RpMetal, ProfileName::VmLarge];

fn c1_overhead_shift() -> Check {
    let t = Instant::now();
    let p = plan(TestKind::Overhead, &[]);
    let mut parts = Vec::new();
    for prof in BOTH {
        let d = med(&p, ScenarioName::Cld, prof) - med(&p, ScenarioName::Loc, prof);
        parts.push(format!("{prof} +{d:.1} ms"));
        if !(20.0..=32.0).contains(&d) {
            return Err(format!("{prof}: cld - loc = {d:.1} ms"));
        }
    }
    let el = t.elapsed();
    if el > Duration::from_secs(5) {
        return Err(format!("took {el:?}"));
    }
    Ok(format!("{} in {el:.2?}", parts.join(", ")))
}

fn c2_scenario_ordering() -> Check {
    let t = Instant::now();
    let mut plans = vec![plan(TestKind::Overhead, &[])];
    for kb in [1, 10, 100, 1000] {
        plans.push(plan(TestKind::Payload, &[("payload_kb", kb.to_string())]));
    }
    let mut checked = 0;
    for p in &plans {
        for prof in BOTH {
            let m: Vec<f64> = ScenarioName::ALL.iter().map(|&s| med(p, s, prof)).collect();
            let (loc, cld, ewst, etyp, eopt) = (m[0], m[1], m[2], m[3], m[4]);
            let ok = loc < eopt && eopt < etyp && etyp < ewst && ewst <= cld * 1.05;
            if !ok {
                return Err(format!("{} {prof}: {m:?}", p.test_id()));
            }
            if p.payload_kb >= 100 && cld <= ewst {
                return Err(format!("{} {prof}: cld {cld:.1} not above ewst {ewst:.1}", p.test_id()));
            }
            checked += 1;
        }
    }
    let el = t.elapsed();
    if el > Duration::from_secs(30) {
        return Err(format!("took {el:?}"));
    }
    Ok(format!("{checked} rows ordered in {el:.2?}"))
}

fn c3_payload_mechanism() -> Check {
    let params = TransferModelParams::default();
    let cld = derive_scenario("cld").unwrap();
    let ewst = derive_scenario("ewst").unwrap();
    let zero = |w: WanParams| WanParams::new(w.latency_ms, 0.0, 0.0).unwrap();
    let (c_ext, e_ext, e_int) = (zero(cld.cwan), zero(ewst.cwan), zero(ewst.ewan));
    let mut strict = 0;
    let mut sizes: Vec<u64> = (0..=40).map(|i| i * 1024).collect();
    sizes.extend((1..=200).map(|i| i * 10 * 1024));
    for &b in &sizes {
        for resp in [b, 64] {
            let mut s = LinkStreams::new(1);
            let c = request_network_time(&c_ext, &[], b, resp, &params, &mut s);
            let e = request_network_time(&e_ext, &[e_int], b, resp, &params, &mut s);
            if c < e {
                return Err(format!("{b} B: cld {c} < ewst {e}"));
            }
            if rounds_for(b.max(resp), &params) > 2 {
                if c <= e {
                    return Err(format!("{b} B: cld {c} not strictly above ewst {e}"));
                }
                strict += 1;
            }
        }
    }
    Ok(format!("{} sizes, {strict} strictly greater", sizes.len() * 2))
}

fn reference() -> Reference {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../reference/reference_medians.json");
    Reference::read(&p).expect("reference file")
}

fn c4_intensive() -> Check {
    let p = plan(TestKind::Intensive, &[]);
    let targets = [
        (ProfileName::RpMetal, 659.0),
        (ProfileName::VmSmall, 181.0),
        (ProfileName::VmMedium, 189.0),
        (ProfileName::VmLarge, 176.0),
    ];
    for (prof, want) in targets {
        let got = med(&p, ScenarioName::Loc, prof);
        if (got - want).abs() > 0.15 * want {
            return Err(format!("{prof} loc {got:.1} vs {want}"));
        }
    }
    // the calibrate op reproduces the same cells from the reference file
    let fitted = fit_services(&reference(), &ModelConfig::default()).map_err(|e| e.to_string())?;
    let res = residuals(&reference(), &fitted, 3, SEED, 3, ExecMode::Parallel).map_err(|e| e.to_string())?;
    if let Some(r) = res.iter().find(|r| r.relative().abs() > 0.15) {
        return Err(format!("calibrated {} {}: {:.1} vs {:.1}", r.label, r.profile, r.simulated_ms, r.reference_ms));
    }
    let mut worst = f64::INFINITY;
    for s in ScenarioName::ALL {
        let ratio = med(&p, s, ProfileName::RpMetal) / med(&p, s, ProfileName::VmLarge);
        worst = worst.min(ratio);
        if ratio <= 3.0 {
            return Err(format!("{s}: rp.metal/vm.large = {ratio:.2}"));
        }
    }
    Ok(format!("loc within 15%, {} calibrated cells within 15%, min ratio {worst:.2}", res.len()))
}

fn c5_scalability() -> Check {
    let t = Instant::now();
    let threads = [100u32, 200, 300, 400, 500];
    let mut cells = Vec::new();
    for prof in BOTH {
        for s in [ScenarioName::Loc, ScenarioName::Cld] {
            for &n in &threads {
                cells.push((prof, s, n));
            }
        }
    }
    let rps = ExecMode::Parallel.map(&cells, |&(prof, s, n)| {
        let p = plan(TestKind::Scalability, &[("threads", n.to_string())]);
        let scenario = derive_scenario(s.as_str()).unwrap();
        let topo = Topology::new(prof, 3).unwrap();
        simulate_cell(&p, &scenario, &topo, &ModelConfig::default(), SEED, 1, ExecMode::Sequential)
            .unwrap()
            .steady_rps
    });
    let get = |prof, s, n| {
        let i = cells.iter().position(|c| *c == (prof, s, n)).unwrap();
        rps[i]
    };
    let mut notes = Vec::new();
    for s in [ScenarioName::Loc, ScenarioName::Cld] {
        let r: Vec<f64> = threads.iter().map(|&n| get(ProfileName::RpMetal, s, n)).collect();
        if !(350.0..=450.0).contains(&r[2]) || r[0] > r[2] {
            return Err(format!("rp.metal {s}: {r:?}"));
        }
        if r[3] > r[2] * 1.02 || r[4] > r[3] * 1.02 {
            return Err(format!("rp.metal {s} keeps rising: {r:?}"));
        }
        notes.push(format!("rp {s} plateau {:.0}", r[2]));
        for &n in &threads {
            let offered = f64::from(n) * 4.0;
            let got = get(ProfileName::VmLarge, s, n);
            if (got - offered).abs() > 0.1 * offered {
                return Err(format!("vm.large {s} {n} threads: {got:.0} vs offered {offered}"));
            }
        }
    }
    let top = get(ProfileName::VmLarge, ScenarioName::Cld, 500);
    if top < 1600.0 {
        return Err(format!("vm.large cld at 2000 offered: {top:.0}"));
    }
    let el = t.elapsed();
    if el > Duration::from_secs(120) {
        return Err(format!("took {el:?}"));
    }
    notes.push(format!("vm.large cld {top:.0} at 500 threads"));
    Ok(format!("{} in {el:.1?}", notes.join(", ")))
}

fn chain(mode: &str, len: u32) -> TestPlan {
    build_plan(TestKind::Workflow, &kv(&[("chain_mode", mode.into()), ("chain_len", len.to_string())])).unwrap()
}

fn c6_workflow_factor() -> Check {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for mode in ["client", "server"] {
        for prof in BOTH {
            for s in ScenarioName::ALL {
                let r = med(&chain(mode, 20), s, prof) / med(&chain(mode, 5), s, prof);
                lo = lo.min(r);
                hi = hi.max(r);
                if !(3.4..=4.6).contains(&r) {
                    return Err(format!("{mode} {prof} {s}: ratio {r:.2}"));
                }
            }
        }
    }
    Ok(format!("chain 20 / chain 5 in [{lo:.2}, {hi:.2}]"))
}

fn c7_workflow_crossover() -> Check {
    let mut notes = Vec::new();
    for prof in BOTH {
        for s in ScenarioName::ALL.into_iter().filter(|s| *s != ScenarioName::Loc) {
            let srv = med(&chain("server", 5), s, prof);
            let cli = med(&chain("client", 5), s, prof);
            let ok = if s == ScenarioName::Cld { srv < cli } else { srv >= cli };
            if !ok {
                return Err(format!("{prof} {s}: server {srv:.1} client {cli:.1}"));
            }
            if prof == ProfileName::VmLarge {
                notes.push(format!("{s} {srv:.0}/{cli:.0}"));
            }
        }
    }
    Ok(format!("server/client vm.large: {}", notes.join(" ")))
}

fn run_cli(dir: &Path, args: &[&str]) -> i32 {
    let mut full = vec!["faasbench", "run", "--out-dir", dir.to_str().unwrap()];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn dir_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn c8_determinism() -> Check {
    let cases: [&[&str]; 5] = [
        &["--test", "overhead", "--scenario", "loc", "--profile", "vm.large"],
        &["--test", "payload", "--payload-kb", "1", "--scenario", "loc", "--profile", "vm.large", "--seed", "1"],
        &["--test", "payload", "--payload-kb", "100", "--scenario", "cld", "--profile", "rp.metal", "--seed", "9"],
        &["--test", "workflow", "--chain-mode", "server", "--chain-len", "20", "--scenario", "etyp"],
        &["--test", "scalability", "--threads", "20", "--force", "--duration-ms", "20000", "--scenario", "eopt", "--repetitions", "2"],
    ];
    let mut files = 0;
    for args in cases {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let codes = (run_cli(a.path(), args), run_cli(b.path(), args));
        if codes != (0, 0) {
            return Err(format!("{args:?} exited {codes:?}"));
        }
        let (x, y) = (dir_bytes(a.path()), dir_bytes(b.path()));
        if x != y || x.len() != 2 {
            return Err(format!("{args:?}: outputs differ"));
        }
        files += x.len();
    }
    Ok(format!("{files} files byte-identical across paired runs"))
}

fn kth_smallest(v: &[f64], k: usize) -> f64 {
    // the value with exactly k elements strictly below it (ties resolved by
    // counting those equal as well)
    *v.iter()
        .find(|&&x| {
            let below = v.iter().filter(|&&y| y < x).count();
            let equal = v.iter().filter(|&&y| y == x).count();
            below <= k && k < below + equal
        })
        .unwrap()
}

fn brute_quantile(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    let (a, b) = (kth_smallest(v, lo), kth_smallest(v, hi));
    a + (h - lo as f64) * (b - a)
}

fn count_calls(n: u32) -> u64 {
    if n < 2 {
        1
    } else {
        1 + count_calls(n - 1) + count_calls(n - 2)
    }
}

fn c9_statistics_oracle() -> Check {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    for i in 0..10_000 {
        let n = rng.random_range(1..=60);
        let v: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    f64::from(rng.random_range(0..5))
                } else {
                    rng.random_range(-1000.0..1000.0)
                }
            })
            .collect();
        let m = if n % 2 == 1 {
            kth_smallest(&v, n / 2)
        } else {
            (kth_smallest(&v, n / 2 - 1) + kth_smallest(&v, n / 2)) / 2.0
        };
        let q = brute_quantile(&v, 0.75) - brute_quantile(&v, 0.25);
        let (gm, gq) = (median(&v).unwrap(), iqr(&v).unwrap());
        if gm.to_bits() != m.to_bits() || gq.to_bits() != q.to_bits() {
            return Err(format!("list {i}: median {gm} vs {m}, iqr {gq} vs {q}"));
        }
    }
    let calls = count_calls(30);
    if fib_calls(30).unwrap() != calls || calls != 2_692_537 {
        return Err(format!("fib_calls(30) = {:?}, counter {calls}", fib_calls(30)));
    }
    Ok("10000 lists exact; fib_calls(30) = 2692537".into())
}

fn c10_netem_golden() -> Check {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for s in ScenarioName::ALL {
        let spec: ScenarioSpec = derive_scenario(s.as_str()).unwrap();
        let want = std::fs::read(golden.join(format!("netem_{s}.txt"))).map_err(|e| e.to_string())?;
        if netem_plan(&spec, "nebula1").as_bytes() != want.as_slice() {
            return Err(format!("{s} differs from golden file"));
        }
    }
    Ok("5 scenarios match golden files".into())
}

fn c11_live_driver() -> Check {
    let stub = StubGateway::start("127.0.0.1:0", Duration::from_millis(50)).map_err(|e| e.to_string())?;
    let closed = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let p = plan(TestKind::Overhead, &[]);
    let good_url = stub.url();
    let (good, bad) = std::thread::scope(|sc| {
        let g = sc.spawn(|| LiveDriver::new(&good_url, 5000.0).and_then(|d| d.run(&p)));
        let b = sc.spawn(|| LiveDriver::new(&format!("http://{closed}"), 5000.0).and_then(|d| d.run(&p)));
        (g.join().unwrap(), b.join().unwrap())
    });
    let good = good.map_err(|e| e.to_string())?;
    let bad = bad.map_err(|e| format!("closed port did not exit cleanly: {e}"))?;
    let el: Vec<f64> = good.iter().map(|r| r.elapsed_ms).collect();
    let m = median(&el).unwrap();
    let ok = good.iter().filter(|r| r.success).count();
    if good.len() != 100 || ok != 100 || !(50.0..=65.0).contains(&m) {
        return Err(format!("stub: {} records, {ok} ok, median {m:.1}", good.len()));
    }
    if bad.len() != 100 || bad.iter().any(|r| r.success) {
        return Err(format!("closed port: {} records, some succeeded", bad.len()));
    }
    Ok(format!("stub median {m:.1} ms, 100/100 ok; closed port 0/100 ok"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("overhead shift", c1_overhead_shift),
        ("scenario ordering", c2_scenario_ordering),
        ("payload mechanism", c3_payload_mechanism),
        ("intensive calibration", c4_intensive),
        ("scalability shape", c5_scalability),
        ("workflow factor", c6_workflow_factor),
        ("workflow crossover", c7_workflow_crossover),
        ("determinism", c8_determinism),
        ("statistics oracle", c9_statistics_oracle),
        ("netem emission", c10_netem_golden),
        ("live driver", c11_live_driver),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(msg) => println!("PASS {:>2} {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
