//! Per-request network time over emulated links.
//!
//! A transfer of `n` bytes needs a number of round trips given by a
//! slow-start doubling model; loss adds retransmission rounds. Every round
//! trip over an emulated link pays one sampled netem delay (the delay sits on
//! one egress direction only).
//!
//! Connections from the tester to the gateway are opened fresh for every
//! request, so they start from the initial congestion window. The gateway
//! keeps pooled connections to the function replicas; those run with an
//! already opened window and only pay slow start for very large bodies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scenario::WanParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferModelParams {
    pub mss_bytes: u64,
    pub init_window_segs: u64,
    /// Extra round trips charged before the request on a fresh connection.
    pub handshake_rounds: u32,
    pub max_retries_per_round: u32,
    /// Congestion window of the pooled gateway-to-replica connections.
    pub warm_window_segs: u64,
}

impl Default for TransferModelParams {
    fn default() -> Self {
        TransferModelParams {
            mss_bytes: 1460,
            init_window_segs: 10,
            handshake_rounds: 0,
            max_retries_per_round: 5,
            warm_window_segs: 1024,
        }
    }
}

impl TransferModelParams {
    pub fn validate(&self) -> crate::Result<()> {
        if self.mss_bytes == 0 || self.init_window_segs == 0 || self.warm_window_segs == 0 {
            return Err(crate::Error::config(
                "tcp.mss_bytes, tcp.init_window_segs and tcp.warm_window_segs must be > 0",
            ));
        }
        Ok(())
    }
}

/// Named, seeded random stream. Two streams with the same seed and label
/// produce the same sequence on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
        RngStream {
            seed,
            label: label.to_string(),
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        match Normal::new(mean, sd) {
            Ok(d) => d.sample(&mut self.rng),
            Err(_) => mean,
        }
    }
}

/// Random streams for one simulation's links.
#[derive(Debug, Clone)]
pub struct LinkStreams {
    pub external: RngStream,
    pub internal: RngStream,
}

impl LinkStreams {
    pub fn new(seed: u64) -> Self {
        LinkStreams {
            external: RngStream::new(seed, "ext-delay"),
            internal: RngStream::new(seed, "int-delay"),
        }
    }
}

/// One netem delay draw: normal around the mean latency, clamped at zero.
pub fn sample_delay(link: &WanParams, rng: &mut RngStream) -> f64 {
    if link.jitter_ms == 0.0 {
        return link.latency_ms;
    }
    rng.normal(link.latency_ms, link.jitter_ms).max(0.0)
}

fn segments(bytes: u64, mss: u64) -> u64 {
    bytes.div_ceil(mss)
}

/// Round trips for a window that starts at `window` segments and doubles
/// until it covers the whole transfer.
pub fn rounds_for_window(bytes: u64, mss: u64, window: u64) -> u32 {
    let segs = segments(bytes, mss);
    if segs <= window {
        return 1;
    }
    // 1 + ceil(log2(segs / window)), in integer arithmetic
    let mut rounds = 1;
    let mut w = window;
    while w < segs {
        w = w.saturating_mul(2);
        rounds += 1;
    }
    rounds
}

/// Round trips a fresh connection needs to move `bytes`.
pub fn rounds_for(bytes: u64, params: &TransferModelParams) -> u32 {
    rounds_for_window(bytes, params.mss_bytes, params.init_window_segs)
}

/// Segments in flight during each base round; never less than one.
fn round_loads(bytes: u64, mss: u64, window: u64) -> Vec<u64> {
    let segs = segments(bytes, mss).max(1);
    let rounds = rounds_for_window(bytes, mss, window);
    let mut w = window;
    (0..rounds)
        .map(|_| {
            let k = w.min(segs).max(1);
            w = w.saturating_mul(2);
            k
        })
        .collect()
}

fn retransmission_rounds(load: u64, loss: f64, cap: u32, rng: &mut RngStream) -> u32 {
    if loss <= 0.0 {
        return 0;
    }
    let mut extra = 0;
    let mut k = load;
    while extra < cap {
        let p_any = 1.0 - (1.0 - loss).powf(k as f64);
        if rng.uniform() >= p_any {
            break;
        }
        extra += 1;
        k = ((k as f64 * loss).round() as u64).max(1);
    }
    extra
}

fn rounds_with_loss_window(
    bytes: u64,
    window: u64,
    link: &WanParams,
    params: &TransferModelParams,
    rng: &mut RngStream,
) -> u32 {
    let loads = round_loads(bytes, params.mss_bytes, window);
    let base = loads.len() as u32;
    let loss = link.loss_prob();
    if loss <= 0.0 {
        return base;
    }
    let extra: u32 = loads
        .iter()
        .map(|&k| retransmission_rounds(k, loss, params.max_retries_per_round, rng))
        .sum();
    base + extra
}

/// Round trips for a fresh connection including loss recovery rounds.
pub fn transfer_rounds_with_loss(
    bytes: u64,
    link: &WanParams,
    params: &TransferModelParams,
    rng: &mut RngStream,
) -> u32 {
    rounds_with_loss_window(bytes, params.init_window_segs, link, params, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connection {
    /// New TCP connection per request, starting from the initial window.
    Fresh,
    /// Pooled connection with an open window and no handshake.
    Pooled,
}

/// Network time of one request/response exchange over a single link, split
/// into the part before the callee sees the full request and the part
/// spent returning the response.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LegTiming {
    pub forward_ms: f64,
    pub back_ms: f64,
}

impl LegTiming {
    pub fn total(&self) -> f64 {
        self.forward_ms + self.back_ms
    }
}

/// Round trips for one exchange: handshake plus request rounds forward, the
/// response rounds minus the one that overlaps the last request round back.
pub fn exchange_rounds(
    link: &WanParams,
    req_bytes: u64,
    resp_bytes: u64,
    params: &TransferModelParams,
    conn: Connection,
    rng: &mut RngStream,
) -> (u32, u32) {
    let (window, handshake) = match conn {
        Connection::Fresh => (params.init_window_segs, params.handshake_rounds),
        Connection::Pooled => (params.warm_window_segs, 0),
    };
    let req = rounds_with_loss_window(req_bytes, window, link, params, rng);
    let resp = rounds_with_loss_window(resp_bytes, window, link, params, rng);
    (handshake + req, resp - 1)
}

pub fn leg_timing(
    link: &WanParams,
    req_bytes: u64,
    resp_bytes: u64,
    params: &TransferModelParams,
    conn: Connection,
    rng: &mut RngStream,
) -> LegTiming {
    if link.is_zero() {
        return LegTiming::default();
    }
    let (fwd, back) = exchange_rounds(link, req_bytes, resp_bytes, params, conn, rng);
    let forward_ms = (0..fwd).map(|_| sample_delay(link, rng)).sum();
    let back_ms = (0..back).map(|_| sample_delay(link, rng)).sum();
    LegTiming { forward_ms, back_ms }
}

/// Total added network time of one request: the fresh tester-to-gateway
/// exchange plus one pooled exchange per internal hop.
pub fn request_network_time(
    ext: &WanParams,
    int_hops: &[WanParams],
    req_bytes: u64,
    resp_bytes: u64,
    params: &TransferModelParams,
    streams: &mut LinkStreams,
) -> f64 {
    let mut total = leg_timing(ext, req_bytes, resp_bytes, params, Connection::Fresh, &mut streams.external).total();
    for hop in int_hops {
        total += leg_timing(hop, req_bytes, resp_bytes, params, Connection::Pooled, &mut streams.internal).total();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{derive_scenario, CLOUD_BASE};

    fn p() -> TransferModelParams {
        TransferModelParams::default()
    }

    /// Window-doubling oracle, independent of the integer-log shortcut.
    fn doubling_oracle(bytes: u64, mss: u64, iw: u64) -> u32 {
        let segs = (bytes as f64 / mss as f64).ceil();
        let mut w = iw as f64;
        let mut r = 1;
        while w < segs {
            w *= 2.0;
            r += 1;
        }
        r
    }

    #[test]
    fn defaults() {
        let d = p();
        assert_eq!((d.mss_bytes, d.init_window_segs, d.handshake_rounds, d.max_retries_per_round), (1460, 10, 0, 5));
    }

    #[test]
    fn delay_degenerate_cases() {
        let mut rng = RngStream::new(1, "ext-delay");
        assert_eq!(sample_delay(&WanParams::new(25.0, 0.0, 0.0).unwrap(), &mut rng), 25.0);
        assert_eq!(sample_delay(&WanParams::ZERO, &mut rng), 0.0);
    }

    #[test]
    fn delay_seed_42_regression() {
        let link = WanParams::new(25.0, 5.0, 0.0).unwrap();
        let a = sample_delay(&link, &mut RngStream::new(42, "ext-delay"));
        let b = sample_delay(&link, &mut RngStream::new(42, "ext-delay"));
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a, DELAY_SEED_42);
    }

    // First draw of Normal(25, 5) on stream (42, "ext-delay").
    const DELAY_SEED_42: f64 = 27.27434637560814;

    #[test]
    fn delay_never_negative() {
        let link = WanParams::new(1.0, 50.0, 0.0).unwrap();
        let mut rng = RngStream::new(3, "x");
        assert!((0..10_000).all(|_| sample_delay(&link, &mut rng) >= 0.0));
    }

    #[test]
    fn streams_differ_by_label() {
        let mut a = RngStream::new(9, "ext-delay");
        let mut b = RngStream::new(9, "int-delay");
        assert_ne!(a.uniform(), b.uniform());
    }

    #[test]
    fn rounds_examples() {
        assert_eq!(rounds_for(0, &p()), 1);
        assert_eq!(rounds_for(14_600, &p()), 1);
        assert_eq!(rounds_for(14_601, &p()), 2);
        assert_eq!(rounds_for(1_000_000, &p()), 8);
        assert_eq!(rounds_for(102_400, &p()), 4);
        assert_eq!(rounds_for(1_024_000, &p()), 8);
    }

    #[test]
    fn rounds_match_doubling_oracle() {
        for bytes in (0..3_000_000u64).step_by(997) {
            assert_eq!(rounds_for(bytes, &p()), doubling_oracle(bytes, 1460, 10), "bytes={bytes}");
        }
    }

    #[test]
    fn zero_loss_is_noop() {
        let link = WanParams::new(25.0, 5.0, 0.0).unwrap();
        let mut rng = RngStream::new(1, "loss");
        for bytes in [0, 1, 14_600, 100_000, 1_000_000] {
            assert_eq!(transfer_rounds_with_loss(bytes, &link, &p(), &mut rng), rounds_for(bytes, &p()));
        }
    }

    #[test]
    fn total_loss_hits_the_cap_every_round() {
        let link = WanParams::new(25.0, 0.0, 100.0).unwrap();
        let mut rng = RngStream::new(1, "loss");
        let base = rounds_for(1_000_000, &p());
        assert_eq!(transfer_rounds_with_loss(1_000_000, &link, &p(), &mut rng), base + 5 * base);
        assert_eq!(transfer_rounds_with_loss(0, &link, &p(), &mut rng), 6);
    }

    #[test]
    fn loss_seed_7_regression() {
        let mut rng = RngStream::new(7, "loss");
        let r = transfer_rounds_with_loss(1_000_000, &CLOUD_BASE, &p(), &mut rng);
        assert!(r >= 8);
        assert_eq!(r, LOSS_SEED_7);
    }

    const LOSS_SEED_7: u32 = 12;

    /// Mean rounds for 1 MB at 0.4 % loss, from the exact expectation of the
    /// per-round retransmission process (computed offline).
    const EXPECTED_MEAN_ROUNDS_1MB: f64 = 11.62297343829895;

    #[test]
    fn loss_mean_matches_expectation() {
        let n = 100_000;
        let mut total = 0u64;
        for seed in 0..n {
            let mut rng = RngStream::new(seed, "loss");
            total += u64::from(transfer_rounds_with_loss(1_000_000, &CLOUD_BASE, &p(), &mut rng));
        }
        let mean = total as f64 / n as f64;
        assert!((mean - EXPECTED_MEAN_ROUNDS_1MB).abs() < 0.02, "mean={mean}");
    }

    #[test]
    fn zero_links_cost_nothing() {
        let mut s = LinkStreams::new(5);
        for (req, resp) in [(0, 0), (1_000_000, 64), (5, 5_000_000)] {
            let t = request_network_time(&WanParams::ZERO, &[WanParams::ZERO; 3], req, resp, &p(), &mut s);
            assert_eq!(t, 0.0);
        }
    }

    fn no_jitter_no_loss(name: &str) -> (WanParams, WanParams) {
        let s = derive_scenario(name).unwrap();
        let strip = |w: WanParams| WanParams::new(w.latency_ms, 0.0, 0.0).unwrap();
        (strip(s.cwan), strip(s.ewan))
    }

    #[test]
    fn overhead_shift_cloud_and_edge() {
        let mut s = LinkStreams::new(1);
        let (c, _) = no_jitter_no_loss("cld");
        assert_eq!(request_network_time(&c, &[], 0, 0, &p(), &mut s), 25.0);
        let (e_ext, e_int) = no_jitter_no_loss("ewst");
        assert_eq!(request_network_time(&e_ext, &[e_int], 0, 0, &p(), &mut s), 25.0);
    }

    #[test]
    fn handshake_rounds_add_external_round_trips() {
        let link = WanParams::new(25.0, 0.0, 0.0).unwrap();
        let params = TransferModelParams { handshake_rounds: 2, ..p() };
        let mut s = LinkStreams::new(1);
        assert_eq!(request_network_time(&link, &[link], 0, 0, &params, &mut s), 100.0);
    }

    #[test]
    fn cloud_never_faster_than_worst_edge() {
        let (c, _) = no_jitter_no_loss("cld");
        let (e_ext, e_int) = no_jitter_no_loss("ewst");
        let mut s = LinkStreams::new(1);
        for kb in [0u64, 1, 10, 14, 15, 50, 100, 500, 1000, 3000, 10_000] {
            for resp_kb in [0u64, kb] {
                let (req, resp) = (kb * 1024, resp_kb * 1024);
                let cld = request_network_time(&c, &[], req, resp, &p(), &mut s);
                let edge = request_network_time(&e_ext, &[e_int], req, resp, &p(), &mut s);
                assert!(cld >= edge, "kb={kb}");
                if rounds_for(req, &p()) + rounds_for(resp, &p()) > 2 {
                    assert!(cld > edge, "kb={kb}");
                }
            }
        }
    }

    #[test]
    fn leg_split_adds_up() {
        let link = WanParams::new(10.0, 0.0, 0.0).unwrap();
        let mut rng = RngStream::new(1, "x");
        let t = leg_timing(&link, 102_400, 102_400, &p(), Connection::Fresh, &mut rng);
        assert_eq!(t.forward_ms, 40.0);
        assert_eq!(t.back_ms, 30.0);
        let t = leg_timing(&link, 102_400, 102_400, &p(), Connection::Pooled, &mut rng);
        assert_eq!((t.forward_ms, t.back_ms), (10.0, 0.0));
    }
}
