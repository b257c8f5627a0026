//! Single-threaded discrete-event run of one test plan.
//!
//! A request travels tester -> gateway (master) -> worker replica and back.
//! The gateway is a FIFO server when its profile has a throughput cap;
//! workers run up to `slots x replicas` executions at once and queue the
//! rest in arrival order. Server-side chains re-enter the gateway for every
//! nested call; the calling function does not hold an execution slot while
//! it waits for its callee.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::cluster::{autoscale_step, ReplicaState, ServiceModel};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::netmodel::{leg_timing, Connection, LinkStreams, RngStream};
use crate::scenario::{ScenarioSpec, Topology};
use crate::workload::{ChainMode, ClosedLoop, RequestRecord, StopRule, TestPlan};

const SCALE_CHECK_MS: f64 = 1000.0;

#[derive(Debug, Clone, Copy)]
enum Ev {
    Issue { thread: u32 },
    GatewayArrive { job: usize },
    GatewayDone { job: usize },
    WorkerArrive { job: usize, worker: usize },
    ServiceEnd { job: usize, worker: usize },
    Complete { job: usize },
    Timeout { job: usize },
    ScaleCheck,
    ReplicaReady { worker: usize },
}

struct Scheduled {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap and we pop the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct Calendar {
    heap: BinaryHeap<Scheduled>,
    seq: u64,
}

impl Calendar {
    fn at(&mut self, time: f64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Scheduled {
            time,
            seq: self.seq,
            ev,
        });
    }

    fn pop(&mut self) -> Option<(f64, Ev)> {
        self.heap.pop().map(|s| (s.time, s.ev))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JobState {
    Active,
    Done,
    TimedOut,
}

struct Job {
    thread: u32,
    /// Index of the function in a server-side chain, starting at 1.
    hop: u32,
    /// Return-path time accumulated on the way in.
    back_ms: f64,
    state: JobState,
}

struct ThreadState {
    issued: u64,
    limit: Option<u64>,
    iteration_start: f64,
    chain_step: u32,
    done: bool,
}

struct Worker {
    busy: u32,
    queue: VecDeque<usize>,
}

/// Ordering and capacity observations of one run, for invariant checks.
#[derive(Debug, Clone, Default)]
pub struct SimTrace {
    /// Job ids in the order they reached each worker.
    pub worker_arrivals: Vec<Vec<usize>>,
    /// Job ids in the order each worker started executing them.
    pub worker_starts: Vec<Vec<usize>>,
    /// Largest `busy / capacity` seen on any worker.
    pub peak_utilisation: f64,
    /// Replica count when the run finished.
    pub final_replicas: u32,
    pub events: u64,
}

struct Sim<'a> {
    plan: &'a TestPlan,
    scenario: &'a ScenarioSpec,
    cfg: &'a ModelConfig,
    model: ServiceModel,
    slots_per_replica: u32,
    gateway_ms: f64,
    req_bytes: u64,
    resp_bytes: u64,
    test_id: String,
    profile: String,
    loop_: ClosedLoop,

    cal: Calendar,
    streams: LinkStreams,
    service_rng: RngStream,
    jobs: Vec<Job>,
    threads: Vec<ThreadState>,
    workers: Vec<Worker>,
    replicas: ReplicaState,
    /// Worker of each running replica, in creation order.
    replica_ring: Vec<usize>,
    rr_cursor: usize,
    gateway_busy: bool,
    gateway_queue: VecDeque<usize>,
    gateway_arrivals: u64,
    live_threads: usize,
    in_flight: usize,
    records: Vec<RequestRecord>,
    trace: Option<SimTrace>,
}

/// Runs `plan` on `topology` under `scenario`. Records come out in
/// completion order; the run is a pure function of its inputs and `seed`.
pub fn run_sim(
    plan: &TestPlan,
    scenario: &ScenarioSpec,
    topology: &Topology,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Vec<RequestRecord>> {
    Ok(run(plan, scenario, topology, cfg, seed, false)?.0)
}

pub fn run_sim_traced(
    plan: &TestPlan,
    scenario: &ScenarioSpec,
    topology: &Topology,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(Vec<RequestRecord>, SimTrace)> {
    let (records, trace) = run(plan, scenario, topology, cfg, seed, true)?;
    Ok((records, trace.unwrap_or_default()))
}

fn run(
    plan: &TestPlan,
    scenario: &ScenarioSpec,
    topology: &Topology,
    cfg: &ModelConfig,
    seed: u64,
    traced: bool,
) -> Result<(Vec<RequestRecord>, Option<SimTrace>)> {
    if topology.worker_count == 0 {
        return Err(Error::config("topology has no workers"));
    }
    if plan.stop == StopRule::Requests(0) {
        return Ok((Vec::new(), traced.then(SimTrace::default)));
    }
    plan.validate(true)?;
    cfg.validate()?;
    let profile = topology.profile.name;
    let model = *cfg.service(plan.function, profile)?;
    // surfaces an out-of-range fib_n before any event runs
    model.nominal_ms(plan.req_bytes(), plan.fib_n)?;
    let factor = cfg
        .capacity(profile)
        .slots_factor
        .unwrap_or(if plan.function.cpu_bound() { 1 } else { 2 });
    let workers = topology.worker_count as usize;
    let func = plan.function.spec();
    let req_bytes = plan.req_bytes();

    let mut sim = Sim {
        plan,
        scenario,
        cfg,
        model,
        slots_per_replica: topology.profile.vcpus * factor,
        gateway_ms: cfg.gateway_service_ms(profile),
        req_bytes,
        resp_bytes: func.response_bytes(req_bytes, cfg.small_response_bytes),
        test_id: plan.test_id(),
        profile: profile.to_string(),
        loop_: ClosedLoop::new(plan),
        cal: Calendar::default(),
        streams: LinkStreams::new(seed),
        service_rng: RngStream::new(seed, "service"),
        jobs: Vec::new(),
        threads: (0..plan.threads)
            .map(|t| ThreadState {
                issued: 0,
                limit: plan.requests_for_thread(t),
                iteration_start: 0.0,
                chain_step: 0,
                done: false,
            })
            .collect(),
        workers: (0..workers)
            .map(|_| Worker {
                busy: 0,
                queue: VecDeque::new(),
            })
            .collect(),
        replicas: ReplicaState::initial(workers),
        replica_ring: vec![0],
        rr_cursor: 0,
        gateway_busy: false,
        gateway_queue: VecDeque::new(),
        gateway_arrivals: 0,
        live_threads: plan.threads as usize,
        in_flight: 0,
        records: Vec::new(),
        trace: traced.then(|| SimTrace {
            worker_arrivals: vec![Vec::new(); workers],
            worker_starts: vec![Vec::new(); workers],
            ..SimTrace::default()
        }),
    };
    sim.execute()?;
    let mut trace = sim.trace.take();
    if let Some(t) = trace.as_mut() {
        t.final_replicas = sim.replicas.running();
    }
    Ok((sim.records, trace))
}

impl Sim<'_> {
    fn execute(&mut self) -> Result<()> {
        for t in 0..self.plan.threads {
            let first = self.loop_.first_issue(t);
            self.cal.at(first, Ev::Issue { thread: t });
        }
        self.cal.at(SCALE_CHECK_MS, Ev::ScaleCheck);
        while let Some((now, ev)) = self.cal.pop() {
            if let Some(t) = self.trace.as_mut() {
                t.events += 1;
            }
            match ev {
                Ev::Issue { thread } => self.on_issue(now, thread),
                Ev::GatewayArrive { job } => self.on_gateway_arrive(now, job),
                Ev::GatewayDone { job } => self.on_gateway_done(now, job),
                Ev::WorkerArrive { job, worker } => self.on_worker_arrive(now, job, worker)?,
                Ev::ServiceEnd { job, worker } => self.on_service_end(now, job, worker)?,
                Ev::Complete { job } => self.on_complete(now, job),
                Ev::Timeout { job } => self.on_timeout(now, job),
                Ev::ScaleCheck => self.on_scale_check(now),
                Ev::ReplicaReady { worker } => self.on_replica_ready(now, worker)?,
            }
        }
        Ok(())
    }

    fn stop_thread(&mut self, thread: u32) {
        let th = &mut self.threads[thread as usize];
        if !th.done {
            th.done = true;
            self.live_threads -= 1;
        }
    }

    fn on_issue(&mut self, now: f64, thread: u32) {
        let th = &mut self.threads[thread as usize];
        let exhausted = match (th.limit, self.plan.stop) {
            (Some(n), _) => th.issued >= n,
            (None, StopRule::DurationMs(d)) => now >= d,
            (None, StopRule::Requests(_)) => true,
        };
        if exhausted {
            self.stop_thread(thread);
            return;
        }
        th.issued += 1;
        th.iteration_start = now;
        th.chain_step = 1;
        self.start_request(now, thread);
    }

    fn start_request(&mut self, now: f64, thread: u32) {
        let ext = leg_timing(
            &self.scenario.cwan,
            self.req_bytes,
            self.resp_bytes,
            &self.cfg.tcp,
            Connection::Fresh,
            &mut self.streams.external,
        );
        let job = self.jobs.len();
        self.jobs.push(Job {
            thread,
            hop: 1,
            back_ms: ext.back_ms,
            state: JobState::Active,
        });
        self.in_flight += 1;
        self.cal.at(now + self.cfg.lan_floor_ms + ext.forward_ms, Ev::GatewayArrive { job });
        self.cal.at(now + self.cfg.request_timeout_ms, Ev::Timeout { job });
    }

    fn on_gateway_arrive(&mut self, now: f64, job: usize) {
        self.gateway_arrivals += 1;
        if self.gateway_ms == 0.0 {
            self.dispatch(now, job);
        } else if self.gateway_busy {
            self.gateway_queue.push_back(job);
        } else {
            self.gateway_busy = true;
            self.cal.at(now + self.gateway_ms, Ev::GatewayDone { job });
        }
    }

    fn on_gateway_done(&mut self, now: f64, job: usize) {
        self.dispatch(now, job);
        match self.gateway_queue.pop_front() {
            Some(next) => self.cal.at(now + self.gateway_ms, Ev::GatewayDone { job: next }),
            None => self.gateway_busy = false,
        }
    }

    /// Round-robin over running replicas, then the gateway-to-worker leg.
    fn dispatch(&mut self, now: f64, job: usize) {
        let worker = self.replica_ring[self.rr_cursor % self.replica_ring.len()];
        self.rr_cursor = (self.rr_cursor + 1) % self.replica_ring.len();
        let leg = leg_timing(
            &self.scenario.ewan,
            self.req_bytes,
            self.resp_bytes,
            &self.cfg.tcp,
            Connection::Pooled,
            &mut self.streams.internal,
        );
        self.jobs[job].back_ms += leg.back_ms;
        self.cal.at(now + leg.forward_ms, Ev::WorkerArrive { job, worker });
    }

    fn capacity(&self, worker: usize) -> u32 {
        self.slots_per_replica * self.replicas.per_worker[worker]
    }

    fn on_worker_arrive(&mut self, now: f64, job: usize, worker: usize) -> Result<()> {
        if let Some(t) = self.trace.as_mut() {
            t.worker_arrivals[worker].push(job);
        }
        if self.workers[worker].busy < self.capacity(worker) && self.workers[worker].queue.is_empty() {
            self.start_service(now, job, worker)?;
        } else {
            self.workers[worker].queue.push_back(job);
        }
        Ok(())
    }

    fn start_service(&mut self, now: f64, job: usize, worker: usize) -> Result<()> {
        self.workers[worker].busy += 1;
        if let Some(t) = self.trace.as_mut() {
            t.worker_starts[worker].push(job);
            let cap = self.slots_per_replica * self.replicas.per_worker[worker];
            let u = f64::from(self.workers[worker].busy) / f64::from(cap);
            t.peak_utilisation = t.peak_utilisation.max(u);
        }
        let st = crate::cluster::service_time(
            &self.model,
            self.req_bytes,
            self.plan.fib_n,
            self.cfg.noise_eps,
            &mut self.service_rng,
        )?;
        self.cal.at(now + st, Ev::ServiceEnd { job, worker });
        Ok(())
    }

    fn drain(&mut self, now: f64, worker: usize) -> Result<()> {
        while self.workers[worker].busy < self.capacity(worker) {
            match self.workers[worker].queue.pop_front() {
                Some(next) => self.start_service(now, next, worker)?,
                None => break,
            }
        }
        Ok(())
    }

    fn on_service_end(&mut self, now: f64, job: usize, worker: usize) -> Result<()> {
        self.workers[worker].busy -= 1;
        self.drain(now, worker)?;
        let j = &mut self.jobs[job];
        if self.plan.chain_mode == ChainMode::Server && j.hop < self.plan.chain_len {
            j.hop += 1;
            self.cal.at(now + self.cfg.server_hop_overhead_ms, Ev::GatewayArrive { job });
        } else {
            self.cal.at(now + j.back_ms, Ev::Complete { job });
        }
        Ok(())
    }

    fn finish_iteration(&mut self, now: f64, thread: u32, success: bool) {
        let th = &self.threads[thread as usize];
        let start = th.iteration_start;
        self.records.push(RequestRecord {
            test_id: self.test_id.clone(),
            scenario: self.scenario.name.to_string(),
            profile: self.profile.clone(),
            thread,
            seq: th.issued - 1,
            start_ms: start,
            elapsed_ms: now - start,
            success,
            chain_len: self.plan.chain_len,
            chain_mode: self.plan.chain_mode.to_string(),
        });
        let next = self.loop_.next_issue(start, now);
        self.cal.at(next, Ev::Issue { thread });
    }

    fn on_complete(&mut self, now: f64, job: usize) {
        self.in_flight -= 1;
        if self.jobs[job].state == JobState::TimedOut {
            return;
        }
        self.jobs[job].state = JobState::Done;
        let thread = self.jobs[job].thread;
        let th = &mut self.threads[thread as usize];
        if self.plan.chain_mode == ChainMode::Client && th.chain_step < self.plan.chain_len {
            th.chain_step += 1;
            self.start_request(now, thread);
        } else {
            self.finish_iteration(now, thread, true);
        }
    }

    fn on_timeout(&mut self, now: f64, job: usize) {
        if self.jobs[job].state != JobState::Active {
            return;
        }
        self.jobs[job].state = JobState::TimedOut;
        let thread = self.jobs[job].thread;
        self.finish_iteration(now, thread, false);
    }

    fn on_scale_check(&mut self, now: f64) {
        let rps = self.gateway_arrivals as f64 * 1000.0 / SCALE_CHECK_MS;
        self.gateway_arrivals = 0;
        for action in autoscale_step(&mut self.replicas, rps, &self.cfg.autoscale, now) {
            self.cal.at(action.at_ms, Ev::ReplicaReady { worker: action.worker });
        }
        if self.live_threads > 0 || self.in_flight > 0 {
            self.cal.at(now + SCALE_CHECK_MS, Ev::ScaleCheck);
        }
    }

    fn on_replica_ready(&mut self, now: f64, worker: usize) -> Result<()> {
        self.replicas.activate(worker);
        self.replica_ring.push(worker);
        self.drain(now, worker)
    }
}
