//! Synthetic request streams.
//!
//! Arrival times, request types, demands, SSL flags, URL paths and source
//! identities are each drawn from their own labelled [`Stream`], so changing
//! one knob (say the type mix) leaves the arrival instants untouched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RequestType {
    Get,
    Post,
    Put,
    Email,
    Chat,
    Upload,
    Download,
    Sync,
}

impl RequestType {
    pub const ALL: [RequestType; 8] = [
        RequestType::Get,
        RequestType::Post,
        RequestType::Put,
        RequestType::Email,
        RequestType::Chat,
        RequestType::Upload,
        RequestType::Download,
        RequestType::Sync,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RequestType::Get => "GET",
            RequestType::Post => "POST",
            RequestType::Put => "PUT",
            RequestType::Email => "EMAIL",
            RequestType::Chat => "CHAT",
            RequestType::Upload => "UPLOAD",
            RequestType::Download => "DOWNLOAD",
            RequestType::Sync => "SYNC",
        }
    }

    /// Static priority map; 0 is the most urgent.
    pub fn default_priority(self) -> u8 {
        match self {
            RequestType::Chat => 0,
            RequestType::Get | RequestType::Post | RequestType::Put => 1,
            RequestType::Email => 2,
            RequestType::Upload | RequestType::Download | RequestType::Sync => 3,
        }
    }
}

impl fmt::Display for RequestType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown request type `{0}`")]
pub struct UnknownRequestType(pub String);

impl FromStr for RequestType {
    type Err = UnknownRequestType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RequestType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownRequestType(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub rtype: RequestType,
    pub priority: u8,
    pub source_ip: u32,
    pub url_path: String,
    pub service_demand: f64,
    pub secured: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalProcess {
    Poisson {
        rate: f64,
    },
    Deterministic {
        interval: f64,
    },
    /// Alternating phases starting with a quiet gap: `gap_len` seconds at
    /// `base_rate`, then `burst_len` seconds at `burst_rate`, repeated.
    /// Arrivals within each phase are Poisson.
    Bursty {
        base_rate: f64,
        burst_rate: f64,
        burst_len: f64,
        gap_len: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DemandDist {
    Constant { value: f64 },
    Exponential { mean: f64 },
    Lognormal { mu: f64, sigma: f64 },
}

impl DemandDist {
    pub fn sample(&self, rng: &mut Stream) -> f64 {
        match *self {
            DemandDist::Constant { value } => value,
            DemandDist::Exponential { mean } => -mean * open_unit(rng).ln(),
            DemandDist::Lognormal { mu, sigma } => (mu + sigma * rng.standard_normal()).exp(),
        }
    }

    fn validate(&self, field: &str) -> Result<(), WorkloadError> {
        match *self {
            DemandDist::Constant { value } => positive(field, "value", value),
            DemandDist::Exponential { mean } => positive(field, "mean", mean),
            DemandDist::Lognormal { mu, sigma } => {
                if !mu.is_finite() {
                    return Err(WorkloadError::invalid(format!("{field}.mu"), "must be finite"));
                }
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(WorkloadError::invalid(format!("{field}.sigma"), "must be finite and >= 0"));
                }
                Ok(())
            }
        }
    }
}

/// Uniform strictly inside `(0, 1)`, so `ln` is finite and nonzero.
fn open_unit(rng: &mut Stream) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub horizon: f64,
    pub arrival: ArrivalProcess,
    /// Weights indexed by [`RequestType::index`]; normalized at draw time.
    pub type_mix: [f64; 8],
    pub demand: [DemandDist; 8],
    pub priorities: [u8; 8],
    pub secured_fraction: f64,
    pub url_paths: Vec<String>,
    /// Number of distinct client addresses requests are drawn from.
    pub source_pool: u32,
    pub seed: u64,
}

pub const DEFAULT_URL_PATHS: usize = 16;

pub fn default_url_paths(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("/svc/{:02}", i)).collect()
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            horizon: 1000.0,
            arrival: ArrivalProcess::Poisson { rate: 5.0 },
            type_mix: [0.40, 0.15, 0.05, 0.10, 0.10, 0.05, 0.10, 0.05],
            demand: [DemandDist::Exponential { mean: 1.0 }; 8],
            priorities: RequestType::ALL.map(RequestType::default_priority),
            secured_fraction: 0.1,
            url_paths: default_url_paths(DEFAULT_URL_PATHS),
            source_pool: 256,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("invalid workload config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
}

impl WorkloadError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        WorkloadError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

fn positive(prefix: &str, name: &str, v: f64) -> Result<(), WorkloadError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(WorkloadError::invalid(format!("{prefix}.{name}"), format!("must be finite and > 0, got {v}")))
    }
}

impl WorkloadConfig {
    /// Checks every invariant and returns all violations.
    ///
    /// A zero horizon is accepted and yields an empty stream.
    pub fn validate_all(&self) -> Vec<WorkloadError> {
        let mut errs = Vec::new();
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            errs.push(WorkloadError::invalid("horizon", format!("must be finite and >= 0, got {}", self.horizon)));
        }
        let arrival = match self.arrival {
            ArrivalProcess::Poisson { rate } => positive("arrival", "rate", rate),
            ArrivalProcess::Deterministic { interval } => positive("arrival", "interval", interval),
            ArrivalProcess::Bursty {
                base_rate,
                burst_rate,
                burst_len,
                gap_len,
            } => positive("arrival", "base_rate", base_rate)
                .and(positive("arrival", "burst_rate", burst_rate))
                .and(positive("arrival", "burst_len", burst_len))
                .and(positive("arrival", "gap_len", gap_len)),
        };
        errs.extend(arrival.err());
        for t in RequestType::ALL {
            let w = self.type_mix[t.index()];
            if !(w.is_finite() && w >= 0.0) {
                errs.push(WorkloadError::invalid(format!("type_mix.{t}"), "weight must be finite and >= 0"));
            }
            errs.extend(self.demand[t.index()].validate(&format!("demand.{t}")).err());
        }
        if self.type_mix.iter().sum::<f64>() <= 0.0 {
            errs.push(WorkloadError::invalid("type_mix", "weights sum to zero"));
        }
        if !(0.0..=1.0).contains(&self.secured_fraction) {
            errs.push(WorkloadError::invalid("secured_fraction", "must lie in [0, 1]"));
        }
        if self.url_paths.is_empty() {
            errs.push(WorkloadError::invalid("url_paths", "path set is empty"));
        }
        if self.source_pool == 0 {
            errs.push(WorkloadError::invalid("source_pool", "must be positive"));
        }
        errs
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self.validate_all().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Draws a service demand for `rtype` from its configured distribution.
pub fn sample_demand(rtype: RequestType, cfg: &WorkloadConfig, rng: &mut Stream) -> f64 {
    cfg.demand[rtype.index()].sample(rng)
}

struct ArrivalClock {
    process: ArrivalProcess,
    rng: Stream,
    now: f64,
    count: u64,
    phase: u64,
}

impl ArrivalClock {
    fn next(&mut self) -> f64 {
        match self.process {
            ArrivalProcess::Poisson { rate } => {
                self.now += self.rng.exponential(1.0 / rate);
            }
            ArrivalProcess::Deterministic { interval } => {
                self.count += 1;
                self.now = self.count as f64 * interval;
            }
            ArrivalProcess::Bursty {
                base_rate,
                burst_rate,
                burst_len,
                gap_len,
            } => {
                let period = gap_len + burst_len;
                loop {
                    // even phases are gaps, odd phases bursts
                    let cycle_start = (self.phase / 2) as f64 * period;
                    let (rate, phase_end) = if self.phase % 2 == 0 {
                        (base_rate, cycle_start + gap_len)
                    } else {
                        (burst_rate, cycle_start + period)
                    };
                    let candidate = self.now + self.rng.exponential(1.0 / rate);
                    if candidate < phase_end {
                        self.now = candidate;
                        break;
                    }
                    // Memoryless: restart the draw at the phase boundary.
                    self.now = phase_end;
                    self.phase += 1;
                }
            }
        }
        self.now
    }
}

/// Lazily yields requests in arrival order until the horizon.
pub struct ArrivalStream {
    cfg: WorkloadConfig,
    clock: ArrivalClock,
    types: Stream,
    demand: Stream,
    secured: Stream,
    urls: Stream,
    sources: Stream,
    cumulative: [f64; 8],
    next_id: u64,
    done: bool,
}

impl ArrivalStream {
    pub fn new(cfg: WorkloadConfig) -> Result<Self, WorkloadError> {
        cfg.validate()?;
        let seed = cfg.seed;
        let mut cumulative = [0.0; 8];
        let mut acc = 0.0;
        for (i, w) in cfg.type_mix.iter().enumerate() {
            acc += w;
            cumulative[i] = acc;
        }
        Ok(Self {
            clock: ArrivalClock {
                process: cfg.arrival,
                rng: Stream::new(seed, "workload.arrivals"),
                now: 0.0,
                count: 0,
                phase: 0,
            },
            types: Stream::new(seed, "workload.types"),
            demand: Stream::new(seed, "workload.demand"),
            secured: Stream::new(seed, "workload.secured"),
            urls: Stream::new(seed, "workload.urls"),
            sources: Stream::new(seed, "workload.sources"),
            cumulative,
            next_id: 0,
            done: false,
            cfg,
        })
    }

    fn draw_type(&mut self) -> RequestType {
        let total = self.cumulative[7];
        let x = self.types.uniform() * total;
        let idx = self.cumulative.iter().position(|&c| x < c).unwrap_or_else(|| {
            // x == total only through rounding; take the last positive weight
            self.cfg.type_mix.iter().rposition(|&w| w > 0.0).unwrap_or(0)
        });
        RequestType::ALL[idx]
    }
}

impl Iterator for ArrivalStream {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        if self.done {
            return None;
        }
        let t = self.clock.next();
        if t >= self.cfg.horizon {
            self.done = true;
            return None;
        }
        let rtype = self.draw_type();
        let service_demand = sample_demand(rtype, &self.cfg, &mut self.demand);
        let secured = self.secured.uniform() < self.cfg.secured_fraction;
        let url_idx = self.urls.below(self.cfg.url_paths.len() as u64) as usize;
        let source_ip = 0x0A00_0000u32.wrapping_add(self.sources.below(self.cfg.source_pool as u64) as u32);
        let id = self.next_id;
        self.next_id += 1;
        Some(Request {
            id,
            arrival_time: t,
            rtype,
            priority: self.cfg.priorities[rtype.index()],
            source_ip,
            url_path: self.cfg.url_paths[url_idx].clone(),
            service_demand,
            secured,
        })
    }
}

/// Materializes the whole request stream for `cfg`.
pub fn generate_arrivals(cfg: &WorkloadConfig) -> Result<Vec<Request>, WorkloadError> {
    Ok(ArrivalStream::new(cfg.clone())?.collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorkloadConfig {
        WorkloadConfig::default()
    }

    #[test]
    fn deterministic_arrivals_are_exact() {
        let c = WorkloadConfig {
            horizon: 3.5,
            arrival: ArrivalProcess::Deterministic { interval: 1.0 },
            ..cfg()
        };
        let times: Vec<f64> = generate_arrivals(&c).unwrap().iter().map(|r| r.arrival_time).collect();
        assert_eq!(times, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_rate_rejected_with_field_name() {
        let c = WorkloadConfig {
            arrival: ArrivalProcess::Poisson { rate: 0.0 },
            ..cfg()
        };
        match generate_arrivals(&c) {
            Err(WorkloadError::InvalidConfig { field, .. }) => assert_eq!(field, "arrival.rate"),
            other => panic!("expected error, got {other:?}"),
        }
    }

    #[test]
    fn poisson_count_within_three_sd() {
        // N(1000) ~ Poisson(5000): mean 5000, sd sqrt(5000).
        let sd = 5000f64.sqrt();
        for seed in [1, 2, 3, 99] {
            let c = WorkloadConfig {
                horizon: 1000.0,
                arrival: ArrivalProcess::Poisson { rate: 5.0 },
                seed,
                ..cfg()
            };
            let n = generate_arrivals(&c).unwrap().len() as f64;
            assert!((n - 5000.0).abs() <= 3.0 * sd, "seed {seed}: n = {n}");
        }
    }

    #[test]
    fn degenerate_mix_yields_single_type() {
        let mut mix = [0.0; 8];
        mix[RequestType::Get.index()] = 1.0;
        let c = WorkloadConfig { type_mix: mix, ..cfg() };
        assert!(generate_arrivals(&c).unwrap().iter().all(|r| r.rtype == RequestType::Get));
    }

    #[test]
    fn mix_fidelity() {
        let c = WorkloadConfig {
            horizon: 4000.0,
            ..cfg()
        };
        let reqs = generate_arrivals(&c).unwrap();
        assert!(reqs.len() >= 10_000);
        let total: f64 = c.type_mix.iter().sum();
        for t in RequestType::ALL {
            let freq = reqs.iter().filter(|r| r.rtype == t).count() as f64 / reqs.len() as f64;
            assert!((freq - c.type_mix[t.index()] / total).abs() < 0.05, "{t}: {freq}");
        }
    }

    #[test]
    fn constant_and_degenerate_lognormal_demands() {
        let mut rng = Stream::new(5, "d");
        let mut c = cfg();
        c.demand[0] = DemandDist::Constant { value: 2.5 };
        c.demand[1] = DemandDist::Lognormal { mu: 0.0, sigma: 0.0 };
        for _ in 0..100 {
            assert_eq!(sample_demand(RequestType::Get, &c, &mut rng), 2.5);
            assert_eq!(sample_demand(RequestType::Post, &c, &mut rng), 1.0);
        }
    }

    #[test]
    fn exponential_mean_within_two_percent() {
        let mut rng = Stream::new(11, "d");
        let d = DemandDist::Exponential { mean: 1.0 };
        let n = 100_000;
        let mean = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn bursty_rates_by_phase() {
        let c = WorkloadConfig {
            horizon: 2000.0,
            arrival: ArrivalProcess::Bursty {
                base_rate: 1.0,
                burst_rate: 10.0,
                burst_len: 5.0,
                gap_len: 15.0,
            },
            ..cfg()
        };
        let reqs = generate_arrivals(&c).unwrap();
        let in_burst = reqs.iter().filter(|r| r.arrival_time % 20.0 >= 15.0).count() as f64;
        let in_gap = reqs.len() as f64 - in_burst;
        // expected 100 cycles * 50 = 5000 and 100 * 15 = 1500
        assert!((in_burst - 5000.0).abs() < 4.0 * 5000f64.sqrt(), "{in_burst}");
        assert!((in_gap - 1500.0).abs() < 4.0 * 1500f64.sqrt(), "{in_gap}");
    }

    #[test]
    fn parse_request_type() {
        assert_eq!("Email".parse::<RequestType>().unwrap(), RequestType::Email);
        assert_eq!("SYNC".parse::<RequestType>().unwrap(), RequestType::Sync);
        assert!("PATCH".parse::<RequestType>().is_err());
    }

    #[test]
    fn zero_horizon_is_empty() {
        let c = WorkloadConfig { horizon: 0.0, ..cfg() };
        assert!(generate_arrivals(&c).unwrap().is_empty());
    }
}
