//! Credit supervisor: judges pulls against the stipulated time, grants or
//! revokes credits within `[evict_floor, credit_cap]`, trains the agents'
//! action values and evicts servers that sit at the floor too long.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::farm::ServerId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisorConfig {
    /// Longest LB-queue wait a pulled request may have for the pull to qualify.
    pub stipulated_time: f64,
    pub reward_grant: u32,
    pub penalty: u32,
    pub credit_cap: u32,
    pub evict_floor: u32,
    pub initial_credits: u32,
    /// Consecutive ticks at the floor before eviction.
    pub evict_patience: u32,
    pub tick_interval: f64,
    pub q_alpha: f64,
    pub q_gamma: f64,
    pub epsilon_initial: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    /// Service-rate gain per credit.
    pub credit_gain: f64,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            stipulated_time: 5.0,
            reward_grant: 1,
            penalty: 1,
            credit_cap: 20,
            evict_floor: 0,
            initial_credits: 10,
            evict_patience: 5,
            tick_interval: 1.0,
            q_alpha: 0.1,
            q_gamma: 0.9,
            epsilon_initial: 0.5,
            epsilon_decay: 0.99,
            epsilon_floor: 0.2,
            credit_gain: 0.02,
        }
    }
}

impl SupervisorConfig {
    /// All violated invariants as `(field, reason)` pairs.
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut check = |ok: bool, field: &'static str, reason: &str| {
            if !ok {
                v.push((field, reason.to_string()));
            }
        };
        check(self.stipulated_time.is_finite() && self.stipulated_time > 0.0, "stipulated_time", "must be finite and > 0");
        check(self.credit_cap > self.evict_floor, "credit_cap", "must exceed evict_floor");
        check(
            (self.evict_floor..=self.credit_cap).contains(&self.initial_credits),
            "initial_credits",
            "must lie in [evict_floor, credit_cap]",
        );
        check(self.evict_patience >= 1, "evict_patience", "must be at least 1");
        check(self.tick_interval.is_finite() && self.tick_interval > 0.0, "tick_interval", "must be finite and > 0");
        check(self.q_alpha > 0.0 && self.q_alpha <= 1.0, "q_alpha", "must lie in (0, 1]");
        check(self.q_gamma >= 0.0 && self.q_gamma < 1.0, "q_gamma", "must lie in [0, 1)");
        check((0.0..=1.0).contains(&self.epsilon_initial), "epsilon_initial", "must lie in [0, 1]");
        check(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0, "epsilon_decay", "must lie in (0, 1]");
        check(
            (0.0..=1.0).contains(&self.epsilon_floor) && self.epsilon_floor <= self.epsilon_initial,
            "epsilon_floor",
            "must lie in [0, epsilon_initial]",
        );
        check(self.credit_gain.is_finite() && self.credit_gain >= 0.0, "credit_gain", "must be finite and >= 0");
        v
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SupervisorError {
    #[error("server {0} is evicted and cannot be settled")]
    SettleOnEvicted(ServerId),
    #[error("server {0} is not registered with the supervisor")]
    UnknownServer(ServerId),
}

/// A pull qualifies when its oldest request waited no longer than the
/// stipulated time (inclusive). Only pulls of at least one request are judged.
pub fn qualify(batch: usize, max_wait: f64, cfg: &SupervisorConfig) -> bool {
    debug_assert!(batch >= 1, "zero-size pulls are not judged");
    max_wait <= cfg.stipulated_time
}

/// Tabular action values for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub q: Vec<Vec<f64>>,
    pub visits: Vec<Vec<u64>>,
    pub epsilon: f64,
}

impl PolicyState {
    pub fn new(states: usize, actions: usize, epsilon: f64) -> Self {
        Self {
            q: vec![vec![0.0; actions]; states],
            visits: vec![vec![0; actions]; states],
            epsilon,
        }
    }

    pub fn action_count(&self) -> usize {
        self.q.first().map_or(0, Vec::len)
    }

    /// Argmax over actions; ties go to the lowest action index.
    pub fn greedy(&self, state: usize) -> usize {
        let row = &self.q[state];
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn max_value(&self, state: usize) -> f64 {
        self.q[state].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// One-step Q-learning backup of `(state, action)`.
    pub fn q_update(&mut self, state: usize, action: usize, reward: f64, next_state: usize, alpha: f64, gamma: f64) -> f64 {
        let target = reward + gamma * self.max_value(next_state);
        let q = &mut self.q[state][action];
        *q += alpha * (target - *q);
        self.visits[state][action] += 1;
        *q
    }

    pub fn decay_epsilon(&mut self, decay: f64, floor: f64) {
        self.epsilon = (self.epsilon * decay).max(floor);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub credits: u32,
    pub floor_streak: u32,
    pub evicted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eviction {
    pub server: ServerId,
    pub t: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CreditLedger {
    accounts: BTreeMap<ServerId, Account>,
    evictions: Vec<Eviction>,
}

impl CreditLedger {
    pub fn new(servers: impl IntoIterator<Item = ServerId>, initial_credits: u32) -> Self {
        Self {
            accounts: servers
                .into_iter()
                .map(|id| {
                    (
                        id,
                        Account {
                            credits: initial_credits,
                            ..Account::default()
                        },
                    )
                })
                .collect(),
            evictions: Vec::new(),
        }
    }

    pub fn account(&self, id: ServerId) -> Option<&Account> {
        self.accounts.get(&id)
    }

    pub fn credits(&self, id: ServerId) -> Option<u32> {
        self.accounts.get(&id).map(|a| a.credits)
    }

    pub fn evictions(&self) -> &[Eviction] {
        &self.evictions
    }

    /// Applies a grant or penalty, clamped to `[evict_floor, credit_cap]`,
    /// and returns the delta actually applied.
    pub fn settle(&mut self, id: ServerId, qualified: bool, cfg: &SupervisorConfig) -> Result<i64, SupervisorError> {
        let acct = self.accounts.get_mut(&id).ok_or(SupervisorError::UnknownServer(id))?;
        if acct.evicted {
            return Err(SupervisorError::SettleOnEvicted(id));
        }
        let before = acct.credits as i64;
        let after = if qualified {
            (before + cfg.reward_grant as i64).min(cfg.credit_cap as i64)
        } else {
            (before - cfg.penalty as i64).max(cfg.evict_floor as i64)
        };
        acct.credits = after as u32;
        Ok(after - before)
    }

    /// Advances floor streaks and evicts servers whose streak reached the
    /// patience. Returns the servers evicted by this tick, in id order.
    pub fn tick(&mut self, now: f64, cfg: &SupervisorConfig) -> Vec<ServerId> {
        let mut evicted = Vec::new();
        for (&id, acct) in self.accounts.iter_mut().filter(|(_, a)| !a.evicted) {
            if acct.credits == cfg.evict_floor {
                acct.floor_streak += 1;
            } else {
                acct.floor_streak = 0;
            }
            if acct.floor_streak >= cfg.evict_patience {
                acct.evicted = true;
                evicted.push(id);
                self.evictions.push(Eviction { server: id, t: now });
            }
        }
        evicted
    }
}

pub fn settle_credits(ledger: &mut CreditLedger, id: ServerId, qualified: bool, cfg: &SupervisorConfig) -> Result<i64, SupervisorError> {
    ledger.settle(id, qualified, cfg)
}

/// One supervisor tick: streak bookkeeping, evictions and epsilon decay
/// for every agent policy.
pub fn supervisor_tick<'a>(
    ledger: &mut CreditLedger,
    policies: impl IntoIterator<Item = &'a mut PolicyState>,
    cfg: &SupervisorConfig,
    now: f64,
) -> Vec<ServerId> {
    let evicted = ledger.tick(now, cfg);
    for p in policies {
        p.decay_epsilon(cfg.epsilon_decay, cfg.epsilon_floor);
    }
    evicted
}
