//! Pull-based load balancing with a credit-granting reinforcement-learning
//! supervisor, simulated next to classic push balancers.
//!
//! The engine ([`engine::run`]) takes a validated [`ScenarioConfig`] and
//! returns a [`MetricsReport`] together with the full JSON Lines event log.

pub mod balancer;
pub mod engine;
pub mod event_log;
pub mod farm;
pub mod hash;
pub mod metrics;
pub mod queue_tier;
pub mod rng;
pub mod scenario;
pub mod supervisor;
pub mod workload;

pub use balancer::{BalancerState, PolicyTag};
pub use engine::{run, EngineError, RunOutput};
pub use event_log::{Entry, LogRecord};
pub use farm::ServerId;
pub use metrics::{MetricsReport, Summary};
pub use queue_tier::QueueId;
pub use scenario::{normalized_dump, parse_scenario, Mode, ScenarioConfig, ScenarioError};
pub use supervisor::SupervisorConfig;
pub use workload::{Request, RequestType, WorkloadConfig};
