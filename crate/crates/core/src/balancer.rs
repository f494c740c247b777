//! Push-mode selection policies used as baselines.
//!
//! | Tag        | Selection                                         |
//! |------------|---------------------------------------------------|
//! | `RR`       | cyclic over the live list                         |
//! | `WRR`      | smooth weighted round robin                       |
//! | `LC`       | fewest in-flight requests                         |
//! | `WLC`      | fewest in-flight per unit weight                  |
//! | `ADAPTIVE` | lowest utilization estimate                       |
//! | `WRT`      | lowest EWMA response time                         |
//! | `IP_HASH`  | FNV-1a of the source address, mod live count      |
//! | `URL_HASH` | FNV-1a of the URL path, mod live count            |
//! | `RANDOM`   | uniform over live servers                         |
//!
//! Every argmin/argmax tie goes to the lowest server id.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::farm::ServerId;
use crate::hash::fnv1a64;
use crate::rng::Stream;
use crate::workload::Request;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyTag {
    #[serde(rename = "RR")]
    RoundRobin,
    #[serde(rename = "WRR")]
    WeightedRoundRobin,
    #[serde(rename = "LC")]
    LeastConnection,
    #[serde(rename = "WLC")]
    WeightedLeastConnection,
    #[serde(rename = "ADAPTIVE")]
    Adaptive,
    #[serde(rename = "WRT")]
    WeightedResponseTime,
    #[serde(rename = "IP_HASH")]
    SourceIpHash,
    #[serde(rename = "URL_HASH")]
    UrlHash,
    #[serde(rename = "RANDOM")]
    Random,
}

impl PolicyTag {
    pub const ALL: [PolicyTag; 9] = [
        PolicyTag::RoundRobin,
        PolicyTag::WeightedRoundRobin,
        PolicyTag::LeastConnection,
        PolicyTag::WeightedLeastConnection,
        PolicyTag::Adaptive,
        PolicyTag::WeightedResponseTime,
        PolicyTag::SourceIpHash,
        PolicyTag::UrlHash,
        PolicyTag::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyTag::RoundRobin => "RR",
            PolicyTag::WeightedRoundRobin => "WRR",
            PolicyTag::LeastConnection => "LC",
            PolicyTag::WeightedLeastConnection => "WLC",
            PolicyTag::Adaptive => "ADAPTIVE",
            PolicyTag::WeightedResponseTime => "WRT",
            PolicyTag::SourceIpHash => "IP_HASH",
            PolicyTag::UrlHash => "URL_HASH",
            PolicyTag::Random => "RANDOM",
        }
    }

    /// Only URL hashing needs layer-7 parsing.
    pub fn content_aware(self) -> bool {
        matches!(self, PolicyTag::UrlHash)
    }
}

impl fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown balancing policy `{0}`")]
pub struct UnknownPolicy(pub String);

impl FromStr for PolicyTag {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyTag::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BalancerError {
    #[error("no live servers to select from")]
    NoLiveServers,
    #[error("unknown server {0}")]
    UnknownServer(ServerId),
    #[error("completion reported for server {0} with no request in flight")]
    CompletionWithoutDispatch(ServerId),
}

/// Balancer-local view of one backend.
#[derive(Clone, Debug, PartialEq)]
pub struct Backend {
    pub id: ServerId,
    pub live: bool,
    pub weight: u32,
    /// Smooth-WRR running counter.
    pub current: i64,
    pub connections: u32,
    pub ewma_response: Option<f64>,
    pub ewma_util: f64,
}

impl Backend {
    pub fn new(id: ServerId, weight: u32) -> Self {
        Self {
            id,
            live: true,
            weight: weight.max(1),
            current: 0,
            connections: 0,
            ewma_response: None,
            ewma_util: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BalancerState {
    /// Sorted by id.
    backends: Vec<Backend>,
    rr_cursor: usize,
    rng: Stream,
}

impl BalancerState {
    pub fn new(mut backends: Vec<Backend>, rng: Stream) -> Self {
        backends.sort_by_key(|b| b.id);
        Self {
            backends,
            rr_cursor: 0,
            rng,
        }
    }

    pub fn backends(&self) -> &[Backend] {
        &self.backends
    }

    pub fn backend(&self, id: ServerId) -> Option<&Backend> {
        self.position(id).map(|i| &self.backends[i])
    }

    fn position(&self, id: ServerId) -> Option<usize> {
        self.backends.binary_search_by_key(&id, |b| b.id).ok()
    }

    fn backend_mut(&mut self, id: ServerId) -> Result<&mut Backend, BalancerError> {
        let i = self.position(id).ok_or(BalancerError::UnknownServer(id))?;
        Ok(&mut self.backends[i])
    }

    pub fn live_ids(&self) -> Vec<ServerId> {
        self.backends.iter().filter(|b| b.live).map(|b| b.id).collect()
    }

    pub fn rr_cursor(&self) -> usize {
        self.rr_cursor
    }

    pub fn set_live(&mut self, id: ServerId, live: bool) -> Result<(), BalancerError> {
        let b = self.backend_mut(id)?;
        b.live = live;
        b.current = 0;
        let n = self.backends.iter().filter(|b| b.live).count();
        if n > 0 {
            self.rr_cursor %= n;
        } else {
            self.rr_cursor = 0;
        }
        Ok(())
    }

    pub fn note_dispatch(&mut self, id: ServerId) -> Result<(), BalancerError> {
        self.backend_mut(id)?.connections += 1;
        Ok(())
    }

    /// Decrements in-flight count and folds `response_time` into the EWMA;
    /// the first observation initializes it.
    pub fn note_completion(&mut self, id: ServerId, response_time: f64, alpha: f64) -> Result<(), BalancerError> {
        let b = self.backend_mut(id)?;
        if b.connections == 0 {
            return Err(BalancerError::CompletionWithoutDispatch(id));
        }
        b.connections -= 1;
        b.ewma_response = Some(match b.ewma_response {
            None => response_time,
            Some(old) => (1.0 - alpha) * old + alpha * response_time,
        });
        Ok(())
    }

    pub fn note_utilization(&mut self, id: ServerId, sample: f64, alpha: f64) -> Result<(), BalancerError> {
        let b = self.backend_mut(id)?;
        b.ewma_util = (1.0 - alpha) * b.ewma_util + alpha * sample.clamp(0.0, 1.0);
        Ok(())
    }

    pub fn select(&mut self, policy: PolicyTag, req: &Request) -> Result<ServerId, BalancerError> {
        let live: Vec<usize> = (0..self.backends.len()).filter(|&i| self.backends[i].live).collect();
        if live.is_empty() {
            return Err(BalancerError::NoLiveServers);
        }
        let pick = match policy {
            PolicyTag::RoundRobin => {
                let i = live[self.rr_cursor % live.len()];
                self.rr_cursor = (self.rr_cursor + 1) % live.len();
                i
            }
            PolicyTag::WeightedRoundRobin => {
                let total: i64 = live.iter().map(|&i| self.backends[i].weight as i64).sum();
                let mut best = live[0];
                for &i in &live {
                    let b = &mut self.backends[i];
                    b.current += b.weight as i64;
                }
                for &i in &live[1..] {
                    if self.backends[i].current > self.backends[best].current {
                        best = i;
                    }
                }
                self.backends[best].current -= total;
                best
            }
            PolicyTag::LeastConnection => argmin_by(&live, &self.backends, |a, b| a.connections.cmp(&b.connections)),
            PolicyTag::WeightedLeastConnection => argmin_by(&live, &self.backends, |a, b| {
                // c_a / w_a vs c_b / w_b, compared exactly
                (a.connections as u64 * b.weight as u64).cmp(&(b.connections as u64 * a.weight as u64))
            }),
            PolicyTag::Adaptive => argmin_by(&live, &self.backends, |a, b| a.ewma_util.total_cmp(&b.ewma_util)),
            PolicyTag::WeightedResponseTime => argmin_by(&live, &self.backends, |a, b| {
                // unobserved servers rank as zero so they get probed first
                a.ewma_response.unwrap_or(0.0).total_cmp(&b.ewma_response.unwrap_or(0.0))
            }),
            PolicyTag::SourceIpHash => live[hash_index(&req.source_ip.to_be_bytes(), live.len())],
            PolicyTag::UrlHash => live[hash_index(req.url_path.as_bytes(), live.len())],
            PolicyTag::Random => live[self.rng.below(live.len() as u64) as usize],
        };
        Ok(self.backends[pick].id)
    }
}

fn hash_index(key: &[u8], n: usize) -> usize {
    (fnv1a64(key) % n as u64) as usize
}

/// First index (lowest id, since backends are id-sorted) with the minimal key.
fn argmin_by(live: &[usize], backends: &[Backend], cmp: impl Fn(&Backend, &Backend) -> Ordering) -> usize {
    let mut best = live[0];
    for &i in &live[1..] {
        if cmp(&backends[i], &backends[best]) == Ordering::Less {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::RequestType;

    fn req(ip: u32, url: &str) -> Request {
        Request {
            id: 0,
            arrival_time: 0.0,
            rtype: RequestType::Get,
            priority: 1,
            source_ip: ip,
            url_path: url.into(),
            service_demand: 1.0,
            secured: false,
        }
    }

    fn state(weights: &[u32]) -> BalancerState {
        let backends = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| Backend::new(ServerId(i as u32), w))
            .collect();
        BalancerState::new(backends, Stream::new(0, "test"))
    }

    fn run(s: &mut BalancerState, p: PolicyTag, n: usize) -> Vec<u32> {
        (0..n).map(|_| s.select(p, &req(1, "/")).unwrap().0).collect()
    }

    #[test]
    fn round_robin_cycles() {
        let mut s = state(&[1, 1, 1]);
        assert_eq!(run(&mut s, PolicyTag::RoundRobin, 5), vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn smooth_wrr_five_to_one() {
        let mut s = state(&[5, 1]);
        // hand-run counter arithmetic: (5,1)->A(-1,1) (4,2)->A(-2,2) (3,3)->A(-3,3)
        // (2,4)->B(2,-2) (7,-1)->A(1,-1) (6,0)->A(0,0)
        assert_eq!(run(&mut s, PolicyTag::WeightedRoundRobin, 6), vec![0, 0, 0, 1, 0, 0]);
    }

    #[test]
    fn least_connection_argmin() {
        let mut s = state(&[1, 1, 1]);
        for (id, n) in [(0, 2), (2, 1)] {
            for _ in 0..n {
                s.note_dispatch(ServerId(id)).unwrap();
            }
        }
        assert_eq!(s.select(PolicyTag::LeastConnection, &req(0, "/")).unwrap(), ServerId(1));
    }

    #[test]
    fn hashes_are_stable() {
        let mut s = state(&[1, 1, 1, 1]);
        let a = s.select(PolicyTag::SourceIpHash, &req(0x0A000007, "/x")).unwrap();
        let b = s.select(PolicyTag::SourceIpHash, &req(0x0A000007, "/y")).unwrap();
        assert_eq!(a, b);
        let c = s.select(PolicyTag::UrlHash, &req(1, "/svc/03")).unwrap();
        let d = s.select(PolicyTag::UrlHash, &req(2, "/svc/03")).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn content_awareness() {
        for p in PolicyTag::ALL {
            assert_eq!(p.content_aware(), p == PolicyTag::UrlHash);
        }
    }

    #[test]
    fn dispatch_completion_inverse() {
        let mut s = state(&[1]);
        s.note_dispatch(ServerId(0)).unwrap();
        assert_eq!(s.backend(ServerId(0)).unwrap().connections, 1);
        s.note_completion(ServerId(0), 2.0, 0.5).unwrap();
        assert_eq!(s.backend(ServerId(0)).unwrap().connections, 0);
        assert_eq!(s.backend(ServerId(0)).unwrap().ewma_response, Some(2.0));
        assert_eq!(
            s.note_completion(ServerId(0), 1.0, 0.5),
            Err(BalancerError::CompletionWithoutDispatch(ServerId(0)))
        );
        assert_eq!(s.note_dispatch(ServerId(9)), Err(BalancerError::UnknownServer(ServerId(9))));
    }

    #[test]
    fn ewma_arithmetic() {
        let mut s = state(&[1]);
        for _ in 0..3 {
            s.note_dispatch(ServerId(0)).unwrap();
        }
        s.note_completion(ServerId(0), 2.0, 0.5).unwrap();
        s.note_completion(ServerId(0), 4.0, 0.5).unwrap();
        assert_eq!(s.backend(ServerId(0)).unwrap().ewma_response, Some(3.0));
        s.note_completion(ServerId(0), 7.0, 1.0).unwrap();
        assert_eq!(s.backend(ServerId(0)).unwrap().ewma_response, Some(7.0));
    }

    #[test]
    fn empty_live_set() {
        let mut s = state(&[1, 1]);
        s.set_live(ServerId(0), false).unwrap();
        s.set_live(ServerId(1), false).unwrap();
        assert_eq!(s.select(PolicyTag::RoundRobin, &req(0, "/")), Err(BalancerError::NoLiveServers));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyTag::ALL {
            assert_eq!(p.as_str().parse::<PolicyTag>().unwrap(), p);
        }
        assert!("LEAST".parse::<PolicyTag>().is_err());
    }
}
