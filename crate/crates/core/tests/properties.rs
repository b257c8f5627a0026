use faasbench::metrics::{export_records, iqr, median, parse_table, quantile, read_records, render_table, TableRow};
use faasbench::netmodel::{
    request_network_time, rounds_for, sample_delay, transfer_rounds_with_loss, LinkStreams, RngStream, TransferModelParams,
};
use faasbench::scenario::{ScenarioName, ScenarioSpec, WanParams};
use faasbench::workload::{chain_elapsed_client, issue_schedule, RequestRecord, StopRule, TestKind, TestPlan};
use proptest::prelude::*;

fn base_link() -> impl Strategy<Value = WanParams> {
    (0.0..200.0f64, 0.0..50.0f64, 0.0..5.0f64).prop_map(|(l, j, p)| WanParams::new(l, j, p).unwrap())
}

proptest! {
    #[test]
    fn edge_links_are_base_over_n(base in base_link()) {
        for name in [ScenarioName::Ewst, ScenarioName::Etyp, ScenarioName::Eopt] {
            let s = ScenarioSpec::with_base(name, base).unwrap();
            let n = f64::from(name.divisor());
            for seg in [s.cwan, s.ewan] {
                prop_assert_eq!(seg.latency_ms, base.latency_ms / n);
                prop_assert_eq!(seg.jitter_ms, base.jitter_ms / n);
                prop_assert_eq!(seg.loss_pct, base.loss_pct / n);
            }
        }
    }

    #[test]
    fn rounds_monotone_in_bytes(a in 0u64..5_000_000, b in 0u64..5_000_000) {
        let p = TransferModelParams::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rounds_for(lo, &p) <= rounds_for(hi, &p));
        prop_assert!(rounds_for(lo, &p) >= 1);
    }

    #[test]
    fn loss_only_adds_rounds(bytes in 0u64..3_000_000, loss in 0.0..20.0f64, seed: u64) {
        let p = TransferModelParams::default();
        let link = WanParams::new(25.0, 0.0, loss).unwrap();
        let mut rng = RngStream::new(seed, "loss");
        let r = transfer_rounds_with_loss(bytes, &link, &p, &mut rng);
        let base = rounds_for(bytes, &p);
        prop_assert!(r >= base);
        prop_assert!(r <= base * (1 + p.max_retries_per_round));
        let clean = WanParams::new(25.0, 0.0, 0.0).unwrap();
        prop_assert_eq!(transfer_rounds_with_loss(bytes, &clean, &p, &mut rng), base);
    }

    #[test]
    fn delay_never_negative(link in base_link(), seed: u64) {
        let mut rng = RngStream::new(seed, "ext-delay");
        for _ in 0..20 {
            prop_assert!(sample_delay(&link, &mut rng) >= 0.0);
        }
    }

    #[test]
    fn cloud_never_cheaper_than_edge(lat in 0.0..200.0f64, req in 0u64..3_000_000, resp in 0u64..3_000_000) {
        let p = TransferModelParams::default();
        let base = WanParams::new(lat, 0.0, 0.0).unwrap();
        let cld = ScenarioSpec::with_base(ScenarioName::Cld, base).unwrap();
        for name in [ScenarioName::Ewst, ScenarioName::Etyp, ScenarioName::Eopt] {
            let e = ScenarioSpec::with_base(name, base).unwrap();
            let mut s = LinkStreams::new(0);
            let c = request_network_time(&cld.cwan, &[], req, resp, &p, &mut s);
            let ed = request_network_time(&e.cwan, &[e.ewan], req, resp, &p, &mut s);
            prop_assert!(c + 1e-9 >= ed, "{} {} < {}", name, c, ed);
        }
    }

    #[test]
    fn order_statistics(v in prop::collection::vec(-1e6..1e6f64, 1..200)) {
        let m = median(&v).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi);
        prop_assert!(iqr(&v).unwrap() >= 0.0);
        prop_assert!(quantile(&v, 0.25).unwrap() <= quantile(&v, 0.75).unwrap());
        let mut r = v.clone();
        r.reverse();
        prop_assert_eq!(median(&r).unwrap().to_bits(), m.to_bits());
    }

    #[test]
    fn table_round_trip(cells in prop::collection::vec(prop::option::of((0.0..5000.0f64, 0.0..500.0f64)), 5)) {
        let row = TableRow {
            test: "payload-10kb".into(),
            profile: "vm.large".into(),
            cells: [cells[0], cells[1], cells[2], cells[3], cells[4]],
        };
        let text = render_table(std::slice::from_ref(&row)).unwrap();
        let back = parse_table(&text).unwrap();
        for (a, b) in row.cells.iter().zip(&back[0].cells) {
            match (a, b) {
                (Some((m, i)), Some((pm, pi))) => {
                    prop_assert!((m - pm).abs() <= 0.05 + 1e-9);
                    prop_assert!((i - pi).abs() <= 0.05 + 1e-9);
                }
                (None, None) => {}
                _ => prop_assert!(false, "n/a mismatch"),
            }
        }
    }

    #[test]
    fn client_chain_is_plain_sum(v in prop::collection::vec(0.0..1e4f64, 1..50)) {
        let s: f64 = v.iter().sum();
        prop_assert_eq!(chain_elapsed_client(&v).unwrap(), s);
    }

    #[test]
    fn request_split_and_pacing(threads in 1u32..40, total in 1u64..500, pacing in 1.0..1000.0f64) {
        let plan = TestPlan {
            threads,
            pacing_ms: pacing,
            stop: StopRule::Requests(total),
            ..TestPlan::defaults(TestKind::Overhead)
        };
        let split: u64 = (0..threads).map(|t| plan.requests_for_thread(t).unwrap()).sum();
        prop_assert_eq!(split, total);
        let sched = issue_schedule(&plan, |t, _| f64::from(t) * 3.0);
        for times in sched {
            for w in times.windows(2) {
                prop_assert!(w[1] - w[0] >= pacing - 1e-9);
            }
        }
    }
}

#[test]
fn csv_round_trip_and_header() {
    let recs: Vec<RequestRecord> = (0..5)
        .map(|i| RequestRecord {
            test_id: "workflow-client-5".into(),
            scenario: "etyp".into(),
            profile: "rp.metal".into(),
            thread: 4 - i,
            seq: u64::from(i),
            start_ms: f64::from(i) * 100.0,
            elapsed_ms: 12.25 + f64::from(i),
            success: i != 2,
            chain_len: 5,
            chain_mode: "client".into(),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    export_records(&recs, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "test,scenario,profile,thread,seq,start_ms,elapsed_ms,success,chain_len,chain_mode"
    );
    let back = read_records(&p).unwrap();
    let mut want = recs.clone();
    want.sort_by_key(|r| (r.thread, r.seq));
    assert_eq!(back, want);

    export_records(&[], &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1);
}
