//! Deterministic discrete-event engine.
//!
//! Events are processed in `(time, seq)` order where `seq` is assigned at
//! insertion. `EndOfRun` is scheduled before anything else, so it wins every
//! tie at the horizon and the run stops with the pending set discarded.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use thiserror::Error;

use crate::balancer::{Backend, BalancerError, BalancerState, PolicyTag};
use crate::event_log::{Entry, LogRecord, RunHeader, SampleCounts, ServerInfo};
use crate::farm::{agent_decide, agent_observe, build_report, AgentEvent, FarmError, ServerId, ServerState, ACTION_COUNT, BATCH_SIZES, STATE_COUNT};
use crate::metrics::{MetricsAccumulator, MetricsError, MetricsReport};
use crate::queue_tier::{admit, EnqueueOutcome, LbQueue, QueueError, QueueTier, RuleSet};
use crate::rng::Stream;
use crate::scenario::{Mode, ScenarioConfig};
use crate::supervisor::{qualify, supervisor_tick, CreditLedger, PolicyState, SupervisorConfig, SupervisorError};
use crate::workload::{ArrivalStream, Request, WorkloadError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("invariant violated: {invariant} at t={t}: {detail}")]
    InvariantViolation { invariant: &'static str, t: f64, detail: String },
}

impl EngineError {
    fn violation(invariant: &'static str, t: f64, detail: impl Into<String>) -> Self {
        EngineError::InvariantViolation {
            invariant,
            t,
            detail: detail.into(),
        }
    }
}

macro_rules! internal {
    ($name:literal, $t:expr) => {
        |e| EngineError::violation($name, $t, e.to_string())
    };
}

impl From<WorkloadError> for EngineError {
    fn from(e: WorkloadError) -> Self {
        EngineError::Config(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    Arrival(Request),
    /// A secured request leaving SSL offload.
    Admitted(Request),
    AgentEpoch(ServerId),
    ServiceCompletion(ServerId, u64),
    SupervisorTick,
    Fault(ServerId, f64),
    MetricsSample,
    EndOfRun,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    // reversed so the max-heap yields the minimum (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Pending event set plus the simulation clock.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
    clock: f64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Inserts an event no earlier than the clock; returns its seq.
    pub fn schedule(&mut self, time: f64, kind: EventKind) -> Result<u64, EngineError> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
        if !(time >= self.clock) {
            return Err(EngineError::violation(
                "causality",
                self.clock,
                format!("event {kind:?} scheduled at {time} before the clock"),
            ));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
        Ok(seq)
    }

    /// Removes the minimum `(time, seq)` event and advances the clock to it.
    pub fn pop(&mut self) -> Option<Event> {
        let ev = self.heap.pop()?;
        debug_assert!(ev.time >= self.clock);
        self.clock = ev.time;
        Some(ev)
    }

    pub fn clear(&mut self) {
        self.heap.clear();
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub log: Vec<LogRecord>,
}

struct PullState {
    cfg: SupervisorConfig,
    ledger: CreditLedger,
    policies: Vec<PolicyState>,
    rngs: Vec<Stream>,
    last_tick: f64,
}

struct PushState {
    policy: PolicyTag,
    balancer: BalancerState,
    last_busy: Vec<f64>,
}

enum ModeState {
    Pull(PullState),
    Push(PushState),
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    events: EventQueue,
    tier: QueueTier,
    rules: RuleSet,
    servers: Vec<ServerState>,
    index: BTreeMap<ServerId, usize>,
    arrivals: ArrivalStream,
    generated: u64,
    in_admission: u64,
    mode: ModeState,
    log: Vec<LogRecord>,
    acc: MetricsAccumulator,
}

/// Runs a validated scenario to its horizon.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, EngineError> {
    let mut sim = Sim::new(cfg)?;
    sim.start()?;
    while let Some(ev) = sim.events.pop() {
        if sim.handle(ev)? {
            break;
        }
    }
    let report = sim.acc.finalize().map_err(|e: MetricsError| EngineError::violation("report", cfg.workload.horizon, e.to_string()))?;
    Ok(RunOutput { report, log: sim.log })
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self, EngineError> {
        let tier = QueueTier::new(cfg.queues.iter().map(|q| LbQueue::new(q.name.clone(), q.capacity)).collect());
        let rules = RuleSet::new(cfg.rules.clone(), cfg.queues.len()).map_err(|e| EngineError::Config(e.to_string()))?;
        let seed = cfg.seed();
        let servers: Vec<ServerState> = cfg
            .servers
            .iter()
            .map(|s| {
                let backlog = match cfg.mode {
                    Mode::PullRl(_) => s.backlog_limit,
                    // push mode: the local backlog is the server's own queue
                    Mode::Push(_) => usize::MAX,
                };
                ServerState::new(s.id, s.base_rate, s.concurrency, backlog, s.subscription.clone())
            })
            .collect();
        let index = servers.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        let mode = match &cfg.mode {
            Mode::PullRl(sup) => ModeState::Pull(PullState {
                cfg: sup.clone(),
                ledger: CreditLedger::new(servers.iter().map(|s| s.id), sup.initial_credits),
                policies: vec![PolicyState::new(STATE_COUNT, ACTION_COUNT, sup.epsilon_initial); servers.len()],
                rngs: servers.iter().map(|s| Stream::new(seed, &format!("agent.{}", s.id.0))).collect(),
                last_tick: 0.0,
            }),
            Mode::Push(policy) => ModeState::Push(PushState {
                policy: *policy,
                balancer: BalancerState::new(
                    cfg.servers.iter().map(|s| Backend::new(s.id, s.weight)).collect(),
                    Stream::new(seed, "balancer"),
                ),
                last_busy: vec![0.0; servers.len()],
            }),
        };
        let mut servers = servers;
        if let ModeState::Pull(p) = &mode {
            for s in &mut servers {
                s.credits = p.cfg.initial_credits;
            }
        }
        Ok(Self {
            cfg,
            events: EventQueue::new(),
            tier,
            rules,
            servers,
            index,
            arrivals: ArrivalStream::new(cfg.workload.clone())?,
            generated: 0,
            in_admission: 0,
            mode,
            log: Vec::new(),
            acc: MetricsAccumulator::new(),
        })
    }

    fn now(&self) -> f64 {
        self.events.clock()
    }

    fn emit(&mut self, server: Option<ServerId>, request: Option<u64>, entry: Entry) {
        let rec = LogRecord {
            t: self.now(),
            seq: self.log.len() as u64,
            server: server.map(|s| s.0),
            request,
            entry,
        };
        self.acc.observe(&rec);
        self.log.push(rec);
    }

    fn idx(&self, id: ServerId) -> Result<usize, EngineError> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| EngineError::violation("known server", self.now(), format!("no server {id}")))
    }

    fn start(&mut self) -> Result<(), EngineError> {
        let cfg = self.cfg;
        let horizon = cfg.workload.horizon;
        let initial_credits = match &self.mode {
            ModeState::Pull(p) => Some(p.cfg.initial_credits),
            ModeState::Push(_) => None,
        };
        self.emit(
            None,
            None,
            Entry::RunStart(RunHeader {
                run_id: cfg.run_id(),
                mode: cfg.mode.name().into(),
                policy: cfg.mode.policy_label(),
                seed: cfg.seed(),
                horizon,
                servers: cfg
                    .servers
                    .iter()
                    .map(|s| ServerInfo {
                        id: s.id.0,
                        concurrency: s.concurrency,
                    })
                    .collect(),
                queues: cfg.queue_names(),
                initial_credits,
            }),
        );
        self.events.schedule(horizon, EventKind::EndOfRun)?;
        for f in &cfg.faults {
            if f.time < horizon {
                self.events.schedule(f.time, EventKind::Fault(f.server, f.degrade_factor))?;
            }
        }
        if let Some(req) = self.arrivals.next() {
            self.events.schedule(req.arrival_time, EventKind::Arrival(req))?;
        }
        let n = self.servers.len() as f64;
        let dt = cfg.engine.agent_epoch;
        if let ModeState::Pull(p) = &self.mode {
            let tick = p.cfg.tick_interval;
            for (i, s) in self.servers.iter().enumerate() {
                // stagger agents within the first epoch
                self.events.schedule((i as f64 + 1.0) * dt / n, EventKind::AgentEpoch(s.id))?;
            }
            self.events.schedule(tick, EventKind::SupervisorTick)?;
        }
        self.events.schedule(cfg.engine.sample_interval, EventKind::MetricsSample)?;
        Ok(())
    }

    /// Applies one event; returns true at end of run.
    fn handle(&mut self, ev: Event) -> Result<bool, EngineError> {
        match ev.kind {
            EventKind::Arrival(req) => self.on_arrival(req)?,
            EventKind::Admitted(req) => {
                self.in_admission -= 1;
                self.route(req)?;
            }
            EventKind::AgentEpoch(id) => self.on_epoch(id)?,
            EventKind::ServiceCompletion(id, req) => self.on_completion(id, req)?,
            EventKind::SupervisorTick => self.on_tick()?,
            EventKind::Fault(id, factor) => {
                let i = self.idx(id)?;
                self.servers[i].degrade_factor = factor;
                self.emit(Some(id), None, Entry::Fault { degrade_factor: factor });
            }
            EventKind::MetricsSample => self.on_sample()?,
            EventKind::EndOfRun => {
                self.events.clear();
                self.emit(None, None, Entry::End {});
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn on_arrival(&mut self, req: Request) -> Result<(), EngineError> {
        let now = self.now();
        self.generated += 1;
        self.emit(
            None,
            Some(req.id),
            Entry::Arrival {
                rtype: req.rtype,
                priority: req.priority,
                secured: req.secured,
                demand: req.service_demand,
                source_ip: req.source_ip,
                url_path: req.url_path.clone(),
            },
        );
        if let Some(next) = self.arrivals.next() {
            self.events.schedule(next.arrival_time, EventKind::Arrival(next))?;
        }
        let ready = admit(&req, &self.cfg.admission, now);
        if ready > now {
            self.in_admission += 1;
            self.events.schedule(ready, EventKind::Admitted(req))?;
            Ok(())
        } else {
            self.route(req)
        }
    }

    /// Pull mode: classify and enqueue. Push mode: select and dispatch.
    fn route(&mut self, req: Request) -> Result<(), EngineError> {
        match &self.mode {
            ModeState::Pull(_) => self.enqueue(req, false),
            ModeState::Push(_) => self.dispatch(req),
        }
    }

    fn enqueue(&mut self, req: Request, requeue: bool) -> Result<(), EngineError> {
        let now = self.now();
        let q = self.rules.classify(&req);
        let id = req.id;
        match self.tier.enqueue(q, req, now).map_err(internal!("known queue", now))? {
            EnqueueOutcome::Accepted => {
                let depth = self.tier.depth(q).map_err(|e: QueueError| EngineError::violation("known queue", now, e.to_string()))?;
                self.emit(None, Some(id), Entry::Enqueue { queue: q.0, depth, requeue });
            }
            EnqueueOutcome::Overflowed => self.emit(None, Some(id), Entry::Drop { queue: q.0 }),
        }
        Ok(())
    }

    fn dispatch(&mut self, req: Request) -> Result<(), EngineError> {
        let now = self.now();
        let ModeState::Push(p) = &mut self.mode else {
            return Err(EngineError::violation("mode isolation", now, "dispatch in pull mode"));
        };
        let sid = p.balancer.select(p.policy, &req).map_err(|e: BalancerError| EngineError::violation("live backend", now, e.to_string()))?;
        p.balancer.note_dispatch(sid).map_err(internal!("known server", now))?;
        let i = self.idx(sid)?;
        let rid = req.id;
        self.servers[i].accept(req, now);
        self.emit(Some(sid), Some(rid), Entry::Dispatch {});
        self.start_ready(i)
    }

    fn credit_gain(&self) -> f64 {
        match &self.mode {
            ModeState::Pull(p) => p.cfg.credit_gain,
            ModeState::Push(_) => 0.0,
        }
    }

    fn start_ready(&mut self, i: usize) -> Result<(), EngineError> {
        let now = self.now();
        let gain = self.credit_gain();
        while self.servers[i].can_start() {
            let s = &mut self.servers[i];
            let id = s.id;
            let started = s.start_service(now, gain).map_err(|e: FarmError| EngineError::violation("service start", now, e.to_string()))?;
            let (rid, completes_at) = (started.request.id, started.completes_at);
            self.emit(Some(id), Some(rid), Entry::Start { completes_at });
            self.events.schedule(completes_at, EventKind::ServiceCompletion(id, rid))?;
        }
        Ok(())
    }

    fn on_completion(&mut self, id: ServerId, rid: u64) -> Result<(), EngineError> {
        let now = self.now();
        let i = self.idx(id)?;
        // stale after eviction: the request was already reclaimed
        let Some(done) = self.servers[i].complete(rid, now) else {
            return Ok(());
        };
        self.emit(Some(id), Some(rid), Entry::Complete {});
        if let ModeState::Push(p) = &mut self.mode {
            let alpha = self.cfg.engine.ewma_alpha;
            p.balancer.note_completion(id, now - done.assigned_at, alpha).map_err(internal!("dispatch accounting", now))?;
        }
        self.start_ready(i)
    }

    fn on_epoch(&mut self, id: ServerId) -> Result<(), EngineError> {
        let now = self.now();
        let i = self.idx(id)?;
        if !self.servers[i].alive {
            return Ok(());
        }
        let ModeState::Pull(p) = &mut self.mode else {
            return Err(EngineError::violation("mode isolation", now, "agent epoch in push mode"));
        };
        let cap = p.cfg.credit_cap;
        let obs = agent_observe(&self.servers[i], &self.tier, cap);
        let action = agent_decide(obs, &p.policies[i], &mut p.rngs[i]);
        let room = self.servers[i].pull_room();
        let n = BATCH_SIZES[action].min(room);
        let sub = self.servers[i].subscription.clone();
        let pulled = self.tier.pull(&sub, n, now).map_err(internal!("known queue", now))?;
        self.events.schedule(now + self.cfg.engine.agent_epoch, EventKind::AgentEpoch(id))?;
        if pulled.is_empty() {
            return Ok(());
        }
        let batch = pulled.len();
        let mut max_wait: f64 = 0.0;
        for pr in pulled {
            max_wait = max_wait.max(pr.wait);
            let rid = pr.request.id;
            let s = &mut self.servers[i];
            s.history.push(AgentEvent::Pull { t: now, wait: pr.wait });
            s.accept(pr.request, now);
            self.emit(Some(id), Some(rid), Entry::Pull { queue: pr.queue.0, wait: pr.wait });
        }
        let ModeState::Pull(p) = &mut self.mode else { unreachable!() };
        let qualified = qualify(batch, max_wait, &p.cfg);
        let delta = p
            .ledger
            .settle(id, qualified, &p.cfg)
            .map_err(|e: SupervisorError| EngineError::violation("settle on live server", now, e.to_string()))?;
        let credits = p.ledger.credits(id).expect("registered server");
        if !(p.cfg.evict_floor..=p.cfg.credit_cap).contains(&credits) {
            return Err(EngineError::violation("credit bounds", now, format!("{id} has {credits} credits")));
        }
        self.servers[i].credits = credits;
        let (alpha, gamma) = (p.cfg.q_alpha, p.cfg.q_gamma);
        let next = agent_observe(&self.servers[i], &self.tier, cap);
        let state = obs.index();
        let next_state = next.index();
        let reward = delta as f64;
        let value = p.policies[i].q_update(state, action, reward, next_state, alpha, gamma);
        self.emit(
            Some(id),
            None,
            Entry::Settle {
                batch,
                max_wait,
                qualified,
                delta,
                credits,
            },
        );
        self.emit(
            Some(id),
            None,
            Entry::QUpdate {
                state,
                action,
                reward,
                next_state,
                value,
            },
        );
        self.start_ready(i)
    }

    fn on_tick(&mut self) -> Result<(), EngineError> {
        let now = self.now();
        let ModeState::Pull(p) = &mut self.mode else {
            return Err(EngineError::violation("mode isolation", now, "supervisor tick in push mode"));
        };
        let start = p.last_tick;
        p.last_tick = now;
        let interval = p.cfg.tick_interval;
        let mut reports = Vec::new();
        for s in self.servers.iter_mut().filter(|s| s.alive) {
            let r = build_report(s.id, &s.history, start, now).map_err(internal!("report window", now))?;
            s.history.retain(|e| match *e {
                AgentEvent::Pull { t, .. } | AgentEvent::Completion { t, .. } => t >= now,
            });
            reports.push(r);
        }
        let evicted = supervisor_tick(&mut p.ledger, p.policies.iter_mut(), &p.cfg, now);
        for r in reports {
            let id = r.server_id;
            self.emit(Some(id), None, Entry::Report(r));
        }
        for id in evicted {
            let i = self.idx(id)?;
            let reclaimed = self.servers[i].evict(now);
            self.emit(Some(id), None, Entry::Evict { reclaimed: reclaimed.len() });
            for req in reclaimed {
                self.enqueue(req, true)?;
            }
        }
        self.events.schedule(now + interval, EventKind::SupervisorTick)?;
        Ok(())
    }

    fn on_sample(&mut self) -> Result<(), EngineError> {
        let now = self.now();
        let counts = SampleCounts {
            generated: self.generated,
            completed: self.servers.iter().map(|s| s.completed).sum(),
            queued: self.tier.total_depth() as u64,
            in_admission: self.in_admission,
            backlog: self.servers.iter().map(|s| s.local_backlog.len() as u64).sum(),
            in_service: self.servers.iter().map(|s| s.in_service.len() as u64).sum(),
            dropped: self.tier.dropped().len() as u64,
        };
        if !counts.balanced() {
            return Err(EngineError::violation("global conservation", now, format!("{counts:?}")));
        }
        self.emit(None, None, Entry::Sample(counts));
        let interval = self.cfg.engine.sample_interval;
        if let ModeState::Push(p) = &mut self.mode {
            let alpha = self.cfg.engine.ewma_alpha;
            for (i, s) in self.servers.iter().enumerate() {
                let busy = s.busy_time(now);
                let sample = (busy - p.last_busy[i]) / (s.concurrency_limit as f64 * interval);
                p.last_busy[i] = busy;
                p.balancer.note_utilization(s.id, sample, alpha).map_err(internal!("known server", now))?;
            }
        }
        self.events.schedule(now + interval, EventKind::MetricsSample)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    #[test]
    fn equal_times_pop_by_seq() {
        let mut q = EventQueue::new();
        q.schedule(1.0, EventKind::MetricsSample).unwrap();
        q.schedule(1.0, EventKind::SupervisorTick).unwrap();
        q.schedule(0.5, EventKind::EndOfRun).unwrap();
        assert_eq!(q.pop().unwrap().kind, EventKind::EndOfRun);
        let a = q.pop().unwrap();
        assert_eq!((a.seq, a.kind), (0, EventKind::MetricsSample));
        assert_eq!(q.pop().unwrap().seq, 1);
        assert!(q.schedule(0.9, EventKind::EndOfRun).is_err());
    }

    #[test]
    fn zero_horizon_is_empty() {
        let cfg = parse_scenario("[workload]\nhorizon = 0.0\n").unwrap();
        let out = run(&cfg).unwrap();
        assert_eq!(out.report.generated, 0);
        assert_eq!(out.report.completed, 0);
        assert_eq!(out.report.response_time, None);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn single_request_completes_in_pull_mode() {
        let text = r#"
[workload]
horizon = 50.0
arrival = { kind = "deterministic", interval = 40.0 }
secured_fraction = 0.0
[[servers]]
id = 0
base_rate = 1.0
[supervisor]
stipulated_time = 100.0
"#;
        let out = run(&parse_scenario(text).unwrap()).unwrap();
        assert_eq!(out.report.generated, 1);
        assert_eq!(out.report.completed, 1);
        assert_eq!(out.report.dropped, 0);
        let kinds: Vec<&str> = out.log.iter().map(|r| r.entry.kind()).collect();
        assert!(!kinds.contains(&"dispatch"));
        assert!(kinds.contains(&"settle"));
    }
}
