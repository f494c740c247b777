//! Run metrics, computed purely from the event log.
//!
//! [`MetricsAccumulator`] folds [`LogRecord`]s one at a time; the engine
//! feeds it every record it emits, so a report can always be rebuilt from a
//! persisted log with [`report_from_log`].
//!
//! Summation orders are part of the definition (they fix the floating-point
//! result): response and distribution means sum samples in log order; the
//! time-in-system area accumulates `N * dt` at every arrival, drop and
//! completion; per-server busy time adds `complete.t - start.t` at each
//! completion, then reclaimed work at eviction in request-id order, then
//! work still running at the end in request-id order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{Entry, LogRecord, RunHeader};
use crate::supervisor::Eviction;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("percentile of an empty sample set")]
    EmptySamples,
    #[error("percentile {0} outside [0, 100]")]
    PercentileOutOfRange(f64),
    #[error("fairness index needs at least one server with a nonzero count")]
    AllZero,
    #[error("event log has no run_start header")]
    MissingHeader,
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p * n / 100)`
/// of the sorted samples, with `p = 0` giving the minimum.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(MetricsError::PercentileOutOfRange(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(p, sorted.len()) - 1])
}

fn nearest_rank(p: f64, n: usize) -> usize {
    ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    sorted[nearest_rank(p, sorted.len()) - 1]
}

/// Jain's index `(sum x)^2 / (n * sum x^2)`.
pub fn jain_fairness(values: &[f64]) -> Result<f64, MetricsError> {
    let sum: f64 = values.iter().sum();
    let sum_sq: f64 = values.iter().map(|x| x * x).sum();
    if values.is_empty() || sum_sq == 0.0 {
        return Err(MetricsError::AllZero);
    }
    Ok(sum * sum / (values.len() as f64 * sum_sq))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            mean,
            p50: percentile_sorted(&sorted, 50.0),
            p95: percentile_sorted(&sorted, 95.0),
            p99: percentile_sorted(&sorted, 99.0),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub p95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerMetrics {
    pub server: u32,
    pub assigned: u64,
    pub utilization: f64,
    pub final_credits: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueMetrics {
    pub queue: String,
    pub max_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub mode: String,
    pub policy: String,
    pub seed: u64,
    pub horizon: f64,
    pub generated: u64,
    pub completed: u64,
    pub dropped: u64,
    pub throughput: f64,
    /// Completion minus arrival; `None` when nothing completed.
    pub response_time: Option<Summary>,
    /// Arrival to first assignment (pull or dispatch).
    pub distribution_time: Option<Spread>,
    pub servers: Vec<ServerMetrics>,
    /// Max minus min of per-server assigned counts.
    pub skew: u64,
    /// Jain index of assigned counts.
    pub jain: Option<f64>,
    /// Jain index of per-server utilization.
    pub utilization_jain: Option<f64>,
    /// Time-average number of requests in the system.
    pub mean_in_system: f64,
    pub evictions: Vec<Eviction>,
    pub queues: Vec<QueueMetrics>,
}

#[derive(Debug, Default)]
pub struct MetricsAccumulator {
    header: Option<RunHeader>,
    arrivals: HashMap<u64, f64>,
    distributed: HashSet<u64>,
    rt: Vec<f64>,
    dt: Vec<f64>,
    generated: u64,
    completed: u64,
    dropped: u64,
    assigned: BTreeMap<u32, u64>,
    running: BTreeMap<(u32, u64), f64>,
    busy: BTreeMap<u32, f64>,
    credits: BTreeMap<u32, u32>,
    evictions: Vec<Eviction>,
    queue_max: Vec<usize>,
    in_system: u64,
    area: f64,
    last_t: f64,
    end_t: Option<f64>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    fn advance_area(&mut self, t: f64) {
        self.area += self.in_system as f64 * (t - self.last_t);
        self.last_t = t;
    }

    pub fn observe(&mut self, rec: &LogRecord) {
        let t = rec.t;
        match &rec.entry {
            Entry::RunStart(h) => {
                for s in &h.servers {
                    self.assigned.insert(s.id, 0);
                    self.busy.insert(s.id, 0.0);
                    if let Some(c) = h.initial_credits {
                        self.credits.insert(s.id, c);
                    }
                }
                self.queue_max = vec![0; h.queues.len()];
                self.header = Some(h.clone());
            }
            Entry::Arrival { .. } => {
                self.advance_area(t);
                self.generated += 1;
                self.in_system += 1;
                if let Some(id) = rec.request {
                    self.arrivals.insert(id, t);
                }
            }
            Entry::Enqueue { queue, depth, .. } => {
                if let Some(m) = self.queue_max.get_mut(*queue) {
                    *m = (*m).max(*depth);
                }
            }
            Entry::Drop { .. } => {
                self.advance_area(t);
                self.dropped += 1;
                self.in_system -= 1;
                if let Some(id) = rec.request {
                    self.arrivals.remove(&id);
                }
            }
            Entry::Pull { .. } | Entry::Dispatch {} => {
                if let (Some(s), Some(id)) = (rec.server, rec.request) {
                    *self.assigned.entry(s).or_default() += 1;
                    if self.distributed.insert(id) {
                        if let Some(a) = self.arrivals.get(&id) {
                            self.dt.push(t - a);
                        }
                    }
                }
            }
            Entry::Start { .. } => {
                if let (Some(s), Some(id)) = (rec.server, rec.request) {
                    self.running.insert((s, id), t);
                }
            }
            Entry::Complete {} => {
                self.advance_area(t);
                self.completed += 1;
                self.in_system -= 1;
                if let (Some(s), Some(id)) = (rec.server, rec.request) {
                    if let Some(start) = self.running.remove(&(s, id)) {
                        *self.busy.entry(s).or_default() += t - start;
                    }
                    if let Some(a) = self.arrivals.remove(&id) {
                        self.rt.push(t - a);
                    }
                    self.distributed.remove(&id);
                }
            }
            Entry::Settle { credits, .. } => {
                if let Some(s) = rec.server {
                    self.credits.insert(s, *credits);
                }
            }
            Entry::Evict { .. } => {
                if let Some(s) = rec.server {
                    self.close_running(Some(s), t);
                    self.evictions.push(Eviction {
                        server: crate::farm::ServerId(s),
                        t,
                    });
                }
            }
            Entry::End {} => {
                self.advance_area(t);
                self.close_running(None, t);
                self.end_t = Some(t);
            }
            Entry::QUpdate { .. } | Entry::Fault { .. } | Entry::Report(_) | Entry::Sample(_) => {}
        }
    }

    fn close_running(&mut self, server: Option<u32>, t: f64) {
        let keys: Vec<(u32, u64)> = self
            .running
            .keys()
            .filter(|(s, _)| server.is_none_or(|x| x == *s))
            .copied()
            .collect();
        let mut by_request: Vec<(u64, u32)> = keys.iter().map(|&(s, r)| (r, s)).collect();
        by_request.sort_unstable();
        for (r, s) in by_request {
            let start = self.running.remove(&(s, r)).expect("key collected above");
            *self.busy.entry(s).or_default() += t - start;
        }
    }

    pub fn finalize(self) -> Result<MetricsReport, MetricsError> {
        let h = self.header.ok_or(MetricsError::MissingHeader)?;
        let horizon = self.end_t.unwrap_or(h.horizon);
        let per_time = |x: f64| if horizon > 0.0 { x / horizon } else { 0.0 };
        let servers: Vec<ServerMetrics> = h
            .servers
            .iter()
            .map(|s| ServerMetrics {
                server: s.id,
                assigned: self.assigned.get(&s.id).copied().unwrap_or(0),
                utilization: per_time(self.busy.get(&s.id).copied().unwrap_or(0.0) / s.concurrency as f64),
                final_credits: self.credits.get(&s.id).copied(),
            })
            .collect();
        let counts: Vec<f64> = servers.iter().map(|s| s.assigned as f64).collect();
        let utils: Vec<f64> = servers.iter().map(|s| s.utilization).collect();
        let skew = match (servers.iter().map(|s| s.assigned).max(), servers.iter().map(|s| s.assigned).min()) {
            (Some(hi), Some(lo)) => hi - lo,
            _ => 0,
        };
        let distribution_time = if self.dt.is_empty() {
            None
        } else {
            let mut sorted = self.dt.clone();
            sorted.sort_by(f64::total_cmp);
            Some(Spread {
                mean: self.dt.iter().sum::<f64>() / self.dt.len() as f64,
                p95: percentile_sorted(&sorted, 95.0),
            })
        };
        Ok(MetricsReport {
            run_id: h.run_id.clone(),
            mode: h.mode.clone(),
            policy: h.policy.clone(),
            seed: h.seed,
            horizon,
            generated: self.generated,
            completed: self.completed,
            dropped: self.dropped,
            throughput: per_time(self.completed as f64),
            response_time: Summary::of(&self.rt),
            distribution_time,
            skew,
            jain: jain_fairness(&counts).ok(),
            utilization_jain: jain_fairness(&utils).ok(),
            servers,
            mean_in_system: per_time(self.area),
            evictions: self.evictions,
            queues: h
                .queues
                .iter()
                .zip(self.queue_max)
                .map(|(q, m)| QueueMetrics {
                    queue: q.clone(),
                    max_depth: m,
                })
                .collect(),
        })
    }
}

pub fn report_from_log(records: &[LogRecord]) -> Result<MetricsReport, MetricsError> {
    let mut acc = MetricsAccumulator::new();
    for r in records {
        acc.observe(r);
    }
    acc.finalize()
}

pub const CSV_COLUMNS: [&str; 17] = [
    "run_id",
    "mode",
    "policy",
    "seed",
    "generated",
    "completed",
    "dropped",
    "throughput",
    "rt_mean",
    "rt_p50",
    "rt_p95",
    "rt_p99",
    "dt_mean",
    "dt_p95",
    "skew",
    "jain",
    "evictions",
];

pub fn csv_header() -> String {
    CSV_COLUMNS.join(",")
}

/// `%g`-style rendering with 6 significant digits and no locale.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig6).unwrap_or_default()
}

pub fn csv_row(r: &MetricsReport) -> String {
    let rt = r.response_time;
    let dt = r.distribution_time;
    let mut s = String::new();
    let _ = write!(
        s,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.run_id,
        r.mode,
        r.policy,
        r.seed,
        r.generated,
        r.completed,
        r.dropped,
        fmt_sig6(r.throughput),
        opt(rt.map(|x| x.mean)),
        opt(rt.map(|x| x.p50)),
        opt(rt.map(|x| x.p95)),
        opt(rt.map(|x| x.p99)),
        opt(dt.map(|x| x.mean)),
        opt(dt.map(|x| x.p95)),
        r.skew,
        opt(r.jain),
        r.evictions.len()
    );
    s
}
