//! Load-balancer tier: static classification into in-memory FIFO queues,
//! served to agents by pull.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::{Request, RequestType};

/// Index of a queue inside its [`QueueTier`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueueId(pub usize);

impl fmt::Display for QueueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueueError {
    #[error("unknown queue {0}")]
    UnknownQueue(QueueId),
    #[error("duplicate rule rank {0}")]
    DuplicateRank(i64),
    #[error("rule set has no catch-all rule")]
    NoCatchAll,
    #[error("rule with rank {rank} targets unknown queue {queue}")]
    RuleTargetsUnknownQueue { rank: i64, queue: QueueId },
}

/// A rule matches when every predicate it sets holds; a rule with no
/// predicates is a catch-all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRule {
    pub order: i64,
    pub rtype: Option<RequestType>,
    pub priority: Option<u8>,
    pub url_prefix: Option<String>,
    pub queue: QueueId,
}

impl ClassificationRule {
    pub fn catch_all(order: i64, queue: QueueId) -> Self {
        Self {
            order,
            rtype: None,
            priority: None,
            url_prefix: None,
            queue,
        }
    }

    pub fn is_catch_all(&self) -> bool {
        self.rtype.is_none() && self.priority.is_none() && self.url_prefix.is_none()
    }

    pub fn matches(&self, req: &Request) -> bool {
        self.rtype.is_none_or(|t| t == req.rtype)
            && self.priority.is_none_or(|p| p == req.priority)
            && self
                .url_prefix
                .as_deref()
                .is_none_or(|p| req.url_path.starts_with(p))
    }
}

/// Validated rules, kept sorted by rank.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleSet {
    rules: Vec<ClassificationRule>,
}

impl RuleSet {
    pub fn new(mut rules: Vec<ClassificationRule>, queue_count: usize) -> Result<Self, QueueError> {
        rules.sort_by_key(|r| r.order);
        if let Some(w) = rules.windows(2).find(|w| w[0].order == w[1].order) {
            return Err(QueueError::DuplicateRank(w[0].order));
        }
        if let Some(r) = rules.iter().find(|r| r.queue.0 >= queue_count) {
            return Err(QueueError::RuleTargetsUnknownQueue {
                rank: r.order,
                queue: r.queue,
            });
        }
        if !rules.iter().any(ClassificationRule::is_catch_all) {
            return Err(QueueError::NoCatchAll);
        }
        Ok(Self { rules })
    }

    pub fn rules(&self) -> &[ClassificationRule] {
        &self.rules
    }

    /// Queue of the lowest-rank matching rule.
    pub fn classify(&self, req: &Request) -> QueueId {
        self.rules
            .iter()
            .find(|r| r.matches(req))
            .map(|r| r.queue)
            .expect("validated rule set always has a catch-all")
    }
}

pub fn classify(req: &Request, rules: &RuleSet) -> QueueId {
    rules.classify(req)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissionConfig {
    pub ssl_offload_delay: f64,
}

impl Default for AdmissionConfig {
    fn default() -> Self {
        Self {
            ssl_offload_delay: 0.002,
        }
    }
}

/// Time at which the request becomes queueable after SSL offload.
pub fn admit(req: &Request, cfg: &AdmissionConfig, now: f64) -> f64 {
    if req.secured {
        now + cfg.ssl_offload_delay
    } else {
        now
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnqueueOutcome {
    Accepted,
    Overflowed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pulled {
    pub request: Request,
    pub queue: QueueId,
    pub enqueue_time: f64,
    pub wait: f64,
}

#[derive(Clone, Debug)]
pub struct LbQueue {
    pub name: String,
    /// `None` is unbounded.
    pub capacity: Option<usize>,
    entries: VecDeque<(Request, f64)>,
    pub accepted: u64,
    pub pulled: u64,
    pub overflowed: u64,
    pub max_depth: usize,
}

impl LbQueue {
    pub fn new(name: impl Into<String>, capacity: Option<usize>) -> Self {
        Self {
            name: name.into(),
            capacity,
            entries: VecDeque::new(),
            accepted: 0,
            pulled: 0,
            overflowed: 0,
            max_depth: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &(Request, f64)> {
        self.entries.iter()
    }
}

pub const DEFAULT_QUEUE_CAPACITY: usize = 10_000;

#[derive(Clone, Debug, Default)]
pub struct QueueTier {
    queues: Vec<LbQueue>,
    dropped: Vec<u64>,
}

impl QueueTier {
    pub fn new(queues: Vec<LbQueue>) -> Self {
        Self {
            queues,
            dropped: Vec::new(),
        }
    }

    pub fn queue_count(&self) -> usize {
        self.queues.len()
    }

    pub fn queue(&self, id: QueueId) -> Result<&LbQueue, QueueError> {
        self.queues.get(id.0).ok_or(QueueError::UnknownQueue(id))
    }

    pub fn queues(&self) -> &[LbQueue] {
        &self.queues
    }

    /// Ids of requests rejected on overflow, in rejection order.
    pub fn dropped(&self) -> &[u64] {
        &self.dropped
    }

    pub fn enqueue(&mut self, id: QueueId, req: Request, enqueue_time: f64) -> Result<EnqueueOutcome, QueueError> {
        let q = self.queues.get_mut(id.0).ok_or(QueueError::UnknownQueue(id))?;
        if q.capacity.is_some_and(|cap| q.entries.len() >= cap) {
            q.overflowed += 1;
            self.dropped.push(req.id);
            return Ok(EnqueueOutcome::Overflowed);
        }
        debug_assert!(q.entries.back().is_none_or(|(_, t)| *t <= enqueue_time));
        q.entries.push_back((req, enqueue_time));
        q.accepted += 1;
        q.max_depth = q.max_depth.max(q.entries.len());
        Ok(EnqueueOutcome::Accepted)
    }

    /// Takes up to `max_batch` requests, exhausting each subscribed queue in
    /// order before moving to the next.
    pub fn pull(&mut self, subscription: &[QueueId], max_batch: usize, now: f64) -> Result<Vec<Pulled>, QueueError> {
        if let Some(&bad) = subscription.iter().find(|q| q.0 >= self.queues.len()) {
            return Err(QueueError::UnknownQueue(bad));
        }
        let mut out = Vec::new();
        for &qid in subscription {
            let q = &mut self.queues[qid.0];
            while out.len() < max_batch {
                let Some((request, enqueue_time)) = q.entries.pop_front() else {
                    break;
                };
                q.pulled += 1;
                out.push(Pulled {
                    request,
                    queue: qid,
                    enqueue_time,
                    wait: (now - enqueue_time).max(0.0),
                });
            }
            if out.len() == max_batch {
                break;
            }
        }
        Ok(out)
    }

    pub fn depth(&self, id: QueueId) -> Result<usize, QueueError> {
        self.queue(id).map(LbQueue::len)
    }

    pub fn subscribed_depth(&self, subscription: &[QueueId]) -> usize {
        subscription
            .iter()
            .filter_map(|q| self.queues.get(q.0))
            .map(LbQueue::len)
            .sum()
    }

    pub fn total_depth(&self) -> usize {
        self.queues.iter().map(LbQueue::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64, rtype: RequestType) -> Request {
        Request {
            id,
            arrival_time: id as f64,
            rtype,
            priority: rtype.default_priority(),
            source_ip: 1,
            url_path: "/svc/00".into(),
            service_demand: 1.0,
            secured: false,
        }
    }

    fn tier(caps: &[Option<usize>]) -> QueueTier {
        QueueTier::new(caps.iter().enumerate().map(|(i, c)| LbQueue::new(format!("q{i}"), *c)).collect())
    }

    #[test]
    fn single_catch_all() {
        let rules = RuleSet::new(vec![ClassificationRule::catch_all(0, QueueId(0))], 1).unwrap();
        for t in RequestType::ALL {
            assert_eq!(rules.classify(&req(0, t)), QueueId(0));
        }
    }

    #[test]
    fn rank_order_decides() {
        let email = ClassificationRule {
            order: 1,
            rtype: Some(RequestType::Email),
            ..ClassificationRule::catch_all(1, QueueId(2))
        };
        let rules = RuleSet::new(vec![ClassificationRule::catch_all(9, QueueId(0)), email], 3).unwrap();
        assert_eq!(rules.classify(&req(0, RequestType::Email)), QueueId(2));
        assert_eq!(rules.classify(&req(0, RequestType::Get)), QueueId(0));
    }

    #[test]
    fn rule_set_validation() {
        let only_email = ClassificationRule {
            rtype: Some(RequestType::Email),
            ..ClassificationRule::catch_all(1, QueueId(0))
        };
        assert_eq!(RuleSet::new(vec![only_email], 1), Err(QueueError::NoCatchAll));
        assert_eq!(
            RuleSet::new(
                vec![
                    ClassificationRule::catch_all(1, QueueId(0)),
                    ClassificationRule::catch_all(1, QueueId(0))
                ],
                1
            ),
            Err(QueueError::DuplicateRank(1))
        );
        assert!(matches!(
            RuleSet::new(vec![ClassificationRule::catch_all(1, QueueId(4))], 1),
            Err(QueueError::RuleTargetsUnknownQueue { .. })
        ));
    }

    #[test]
    fn admission_delay() {
        let cfg = AdmissionConfig { ssl_offload_delay: 0.002 };
        let mut r = req(0, RequestType::Get);
        assert_eq!(admit(&r, &cfg, 5.0), 5.0);
        r.secured = true;
        assert_eq!(admit(&r, &cfg, 5.0), 5.002);
        assert_eq!(admit(&r, &AdmissionConfig { ssl_offload_delay: 0.0 }, 5.0), 5.0);
    }

    #[test]
    fn capacity_one() {
        let mut t = tier(&[Some(1)]);
        assert_eq!(t.enqueue(QueueId(0), req(0, RequestType::Get), 0.0), Ok(EnqueueOutcome::Accepted));
        assert_eq!(t.enqueue(QueueId(0), req(1, RequestType::Get), 0.0), Ok(EnqueueOutcome::Overflowed));
        assert_eq!(t.dropped(), &[1]);
        assert_eq!(t.queue(QueueId(0)).unwrap().overflowed, 1);
    }

    #[test]
    fn unknown_queue() {
        let mut t = tier(&[None]);
        assert_eq!(
            t.enqueue(QueueId(3), req(0, RequestType::Get), 0.0),
            Err(QueueError::UnknownQueue(QueueId(3)))
        );
        assert_eq!(t.depth(QueueId(1)), Err(QueueError::UnknownQueue(QueueId(1))));
        assert!(t.pull(&[QueueId(0), QueueId(2)], 1, 0.0).is_err());
    }

    #[test]
    fn pull_respects_subscription_then_fifo() {
        let mut t = tier(&[None, None]);
        t.enqueue(QueueId(0), req(0, RequestType::Chat), 1.0).unwrap();
        t.enqueue(QueueId(1), req(1, RequestType::Sync), 1.0).unwrap();
        t.enqueue(QueueId(1), req(2, RequestType::Sync), 2.0).unwrap();
        assert!(t.pull(&[QueueId(0)], 4, 2.0).unwrap().len() == 1);
        t.enqueue(QueueId(0), req(3, RequestType::Chat), 2.0).unwrap();
        let got: Vec<u64> = t.pull(&[QueueId(0), QueueId(1)], 2, 3.0).unwrap().iter().map(|p| p.request.id).collect();
        assert_eq!(got, vec![3, 1]);
    }

    #[test]
    fn empty_pull() {
        let mut t = tier(&[None, None]);
        assert!(t.pull(&[QueueId(0), QueueId(1)], 8, 0.0).unwrap().is_empty());
    }

    #[test]
    fn depth_arithmetic() {
        let mut t = tier(&[None]);
        assert_eq!(t.depth(QueueId(0)), Ok(0));
        for i in 0..3 {
            t.enqueue(QueueId(0), req(i, RequestType::Get), i as f64).unwrap();
        }
        let p = t.pull(&[QueueId(0)], 2, 5.0).unwrap();
        assert_eq!(p[0].wait, 5.0);
        assert_eq!(p[1].wait, 4.0);
        assert_eq!(t.depth(QueueId(0)), Ok(1));
        assert_eq!(t.queue(QueueId(0)).unwrap().max_depth, 3);
    }
}
