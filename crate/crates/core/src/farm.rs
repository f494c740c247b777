//! Heterogeneous backend servers and their queue-client agents.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::queue_tier::{QueueId, QueueTier};
use crate::rng::Stream;
use crate::supervisor::PolicyState;
use crate::workload::Request;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServerId(pub u32);

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FarmError {
    #[error("server {0} has been evicted")]
    DeadServer(ServerId),
    #[error("server {0} is already at its concurrency limit")]
    ConcurrencyExceeded(ServerId),
    #[error("server {0} has nothing in its local backlog")]
    EmptyBacklog(ServerId),
    #[error("report window [{start}, {end}) is empty or inverted")]
    InvertedWindow { start: f64, end: f64 },
}

/// Pull-batch actions, indexed by action number.
pub const BATCH_SIZES: [usize; 5] = [0, 1, 2, 4, 8];
pub const ACTION_COUNT: usize = BATCH_SIZES.len();

#[derive(Clone, Debug, PartialEq)]
pub struct Assigned {
    pub request: Request,
    /// Pull time (pull mode) or dispatch time (push mode).
    pub assigned_at: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InService {
    pub request: Request,
    pub assigned_at: f64,
    pub started_at: f64,
    pub completes_at: f64,
}

/// Raw agent-side history used to build supervisor reports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AgentEvent {
    Pull { t: f64, wait: f64 },
    Completion { t: f64, processing_time: f64 },
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub id: ServerId,
    pub base_rate: f64,
    pub credits: u32,
    pub local_backlog: VecDeque<Assigned>,
    pub in_service: Vec<InService>,
    pub concurrency_limit: usize,
    /// Pulled-but-unstarted requests the agent may hold.
    pub backlog_limit: usize,
    pub alive: bool,
    pub degrade_factor: f64,
    pub subscription: Vec<QueueId>,
    pub pulled: u64,
    pub completed: u64,
    pub history: Vec<AgentEvent>,
    busy_integral: f64,
    busy_since: f64,
}

impl ServerState {
    pub fn new(id: ServerId, base_rate: f64, concurrency_limit: usize, backlog_limit: usize, subscription: Vec<QueueId>) -> Self {
        Self {
            id,
            base_rate,
            credits: 0,
            local_backlog: VecDeque::new(),
            in_service: Vec::new(),
            concurrency_limit,
            backlog_limit,
            alive: true,
            degrade_factor: 1.0,
            subscription,
            pulled: 0,
            completed: 0,
            history: Vec::new(),
            busy_integral: 0.0,
            busy_since: 0.0,
        }
    }

    /// `base_rate * degrade_factor * (1 + gain * credits)`.
    pub fn effective_rate(&self, credit_gain: f64) -> Result<f64, FarmError> {
        if !self.alive {
            return Err(FarmError::DeadServer(self.id));
        }
        Ok(self.base_rate * self.degrade_factor * (1.0 + credit_gain * self.credits as f64))
    }

    pub fn can_start(&self) -> bool {
        self.alive && self.in_service.len() < self.concurrency_limit && !self.local_backlog.is_empty()
    }

    /// How many more requests the agent may pull right now.
    pub fn pull_room(&self) -> usize {
        if !self.alive {
            return 0;
        }
        let free_slots = self.concurrency_limit.saturating_sub(self.in_service.len());
        (free_slots + self.backlog_limit).saturating_sub(self.local_backlog.len())
    }

    pub fn accept(&mut self, request: Request, assigned_at: f64) {
        self.pulled += 1;
        self.local_backlog.push_back(Assigned { request, assigned_at });
    }

    /// Moves the backlog head into service; returns its completion time.
    pub fn start_service(&mut self, now: f64, credit_gain: f64) -> Result<&InService, FarmError> {
        let rate = self.effective_rate(credit_gain)?;
        if self.in_service.len() >= self.concurrency_limit {
            return Err(FarmError::ConcurrencyExceeded(self.id));
        }
        let Assigned { request, assigned_at } = self.local_backlog.pop_front().ok_or(FarmError::EmptyBacklog(self.id))?;
        self.touch(now);
        let completes_at = now + request.service_demand / rate;
        debug_assert!(completes_at > now);
        self.in_service.push(InService {
            request,
            assigned_at,
            started_at: now,
            completes_at,
        });
        Ok(self.in_service.last().expect("just pushed"))
    }

    /// Removes a finished request. Returns `None` for stale completions
    /// (the request was reclaimed when the server was evicted).
    pub fn complete(&mut self, request_id: u64, now: f64) -> Option<InService> {
        if !self.alive {
            return None;
        }
        let pos = self.in_service.iter().position(|s| s.request.id == request_id)?;
        self.touch(now);
        let done = self.in_service.swap_remove(pos);
        self.completed += 1;
        self.history.push(AgentEvent::Completion {
            t: now,
            processing_time: now - done.started_at,
        });
        Some(done)
    }

    /// Marks the server dead and hands back everything it held, backlog
    /// first, then in-service work in start order.
    pub fn evict(&mut self, now: f64) -> Vec<Request> {
        self.touch(now);
        self.alive = false;
        let mut reclaimed: Vec<Request> = self.local_backlog.drain(..).map(|a| a.request).collect();
        let mut running = std::mem::take(&mut self.in_service);
        running.sort_by(|a, b| a.started_at.total_cmp(&b.started_at).then(a.request.id.cmp(&b.request.id)));
        reclaimed.extend(running.into_iter().map(|s| s.request));
        reclaimed
    }

    fn touch(&mut self, now: f64) {
        self.busy_integral += self.in_service.len() as f64 * (now - self.busy_since);
        self.busy_since = now;
    }

    /// Integral of the in-service count over `[0, now]`.
    pub fn busy_time(&self, now: f64) -> f64 {
        self.busy_integral + self.in_service.len() as f64 * (now - self.busy_since)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    /// Bucket of the total depth over the subscribed LB queues.
    pub depth: u8,
    pub backlog: u8,
    pub credits: u8,
}

pub const STATE_COUNT: usize = 4 * 4 * 3;

impl Observation {
    pub fn index(self) -> usize {
        self.depth as usize * 12 + self.backlog as usize * 3 + self.credits as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            depth: (i / 12) as u8,
            backlog: ((i / 3) % 4) as u8,
            credits: (i % 3) as u8,
        }
    }
}

/// `{0}`, `{1..=3}`, `{4..=10}`, `{>10}` as 0..=3.
pub fn count_bucket(n: usize) -> u8 {
    match n {
        0 => 0,
        1..=3 => 1,
        4..=10 => 2,
        _ => 3,
    }
}

/// Splits the `cap + 1` integer credit levels into low/mid/high thirds.
pub fn credit_bucket(credits: u32, cap: u32) -> u8 {
    let c = credits.min(cap) as u64;
    ((3 * c) / (cap as u64 + 1)).min(2) as u8
}

pub fn agent_observe(server: &ServerState, tier: &QueueTier, credit_cap: u32) -> Observation {
    Observation {
        depth: count_bucket(tier.subscribed_depth(&server.subscription)),
        backlog: count_bucket(server.local_backlog.len()),
        credits: credit_bucket(server.credits, credit_cap),
    }
}

/// Epsilon-greedy choice of an action index (see [`BATCH_SIZES`]).
///
/// Always consumes one uniform draw for the exploration coin, plus one
/// index draw when exploring.
pub fn agent_decide(obs: Observation, policy: &PolicyState, rng: &mut Stream) -> usize {
    decide_in_state(obs.index(), policy, rng)
}

pub fn decide_in_state(state: usize, policy: &PolicyState, rng: &mut Stream) -> usize {
    if rng.uniform() < policy.epsilon {
        rng.below(policy.action_count() as u64) as usize
    } else {
        policy.greedy(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub server_id: ServerId,
    pub window_start: f64,
    pub window_end: f64,
    pub completed: u64,
    pub mean_processing_time: f64,
    pub max_pull_wait: f64,
    pub pulls: u64,
}

/// Aggregates agent events with `window_start <= t < window_end`.
pub fn build_report(server_id: ServerId, events: &[AgentEvent], window_start: f64, window_end: f64) -> Result<AgentReport, FarmError> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
    if !(window_end > window_start) {
        return Err(FarmError::InvertedWindow {
            start: window_start,
            end: window_end,
        });
    }
    let inside = |t: f64| t >= window_start && t < window_end;
    let mut completed = 0u64;
    let mut proc_sum = 0.0;
    let mut pulls = 0u64;
    let mut max_wait: f64 = 0.0;
    for ev in events {
        match *ev {
            AgentEvent::Completion { t, processing_time } if inside(t) => {
                completed += 1;
                proc_sum += processing_time;
            }
            AgentEvent::Pull { t, wait } if inside(t) => {
                pulls += 1;
                max_wait = max_wait.max(wait);
            }
            _ => {}
        }
    }
    Ok(AgentReport {
        server_id,
        window_start,
        window_end,
        completed,
        mean_processing_time: if completed == 0 { 0.0 } else { proc_sum / completed as f64 },
        max_pull_wait: max_wait,
        pulls,
    })
}
