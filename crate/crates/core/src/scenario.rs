//! Scenario files.
//!
//! Scenarios are TOML documents. Every key is optional; omitted keys take
//! the defaults shown by `qlb validate`, which prints the normalized form
//! (all defaults filled in). Parsing the normalized form yields the same
//! configuration. See `docs/scenario.md` for the full key reference.
//!
//! Unknown keys are syntax errors (reported with their line). Semantic
//! problems are collected exhaustively and reported together, each with the
//! path of the offending field.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancer::PolicyTag;
use crate::farm::ServerId;
use crate::queue_tier::{AdmissionConfig, ClassificationRule, QueueId, DEFAULT_QUEUE_CAPACITY};
use crate::supervisor::SupervisorConfig;
use crate::workload::{default_url_paths, ArrivalProcess, DemandDist, RequestType, WorkloadConfig, DEFAULT_URL_PATHS};

/// Pulled-but-unstarted requests a server may hold when not configured.
pub const DEFAULT_BACKLOG_LIMIT: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct QueueSpec {
    pub name: String,
    pub capacity: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerSpec {
    pub id: ServerId,
    pub base_rate: f64,
    pub concurrency: usize,
    pub backlog_limit: usize,
    pub weight: u32,
    pub subscription: Vec<QueueId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultSpec {
    pub time: f64,
    pub server: ServerId,
    pub degrade_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mode {
    PullRl(SupervisorConfig),
    Push(PolicyTag),
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::PullRl(_) => "pull_rl",
            Mode::Push(_) => "push",
        }
    }

    /// `PULL_RL` or the push policy tag.
    pub fn policy_label(&self) -> String {
        match self {
            Mode::PullRl(_) => "PULL_RL".into(),
            Mode::Push(p) => p.as_str().into(),
        }
    }

    /// Parses a comparison label: `PULL_RL` or any push policy tag.
    pub fn from_label(label: &str, supervisor: SupervisorConfig) -> Option<Mode> {
        if label.eq_ignore_ascii_case("PULL_RL") {
            Some(Mode::PullRl(supervisor))
        } else {
            label.parse().ok().map(Mode::Push)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Agent decision period.
    pub agent_epoch: f64,
    pub sample_interval: f64,
    pub ewma_alpha: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            agent_epoch: 0.1,
            sample_interval: 1.0,
            ewma_alpha: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Jsonl,
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: String,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            formats: vec![OutputFormat::Jsonl, OutputFormat::Json, OutputFormat::Csv],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub workload: WorkloadConfig,
    pub queues: Vec<QueueSpec>,
    pub rules: Vec<ClassificationRule>,
    pub admission: AdmissionConfig,
    pub servers: Vec<ServerSpec>,
    pub mode: Mode,
    pub faults: Vec<FaultSpec>,
    pub engine: EngineConfig,
    pub output: OutputConfig,
}

impl ScenarioConfig {
    pub fn seed(&self) -> u64 {
        self.workload.seed
    }

    /// `<name>-<policy>-s<seed>`, shared by every file a run emits.
    pub fn run_id(&self) -> String {
        format!("{}-{}-s{}", self.name, self.mode.policy_label().to_ascii_lowercase(), self.seed())
    }

    pub fn queue_names(&self) -> Vec<String> {
        self.queues.iter().map(|q| q.name.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{} validation error(s):\n{}", .0.len(), .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ScenarioError {
    pub fn field_errors(&self) -> &[FieldError] {
        match self {
            ScenarioError::Invalid(v) => v,
            ScenarioError::Syntax { .. } => &[],
        }
    }
}

// ---------------------------------------------------------------------------
// File representation

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    policy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    workload: Option<RawWorkload>,
    #[serde(skip_serializing_if = "Option::is_none")]
    admission: Option<RawAdmission>,
    #[serde(skip_serializing_if = "Option::is_none")]
    engine: Option<RawEngine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    supervisor: Option<RawSupervisor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<RawOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    queues: Option<Vec<RawQueue>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rules: Option<Vec<RawRule>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    servers: Option<Vec<RawServer>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    faults: Option<Vec<RawFault>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawUrlPaths {
    Count(i64),
    List(Vec<String>),
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    #[serde(skip_serializing_if = "Option::is_none")]
    horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    secured_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_pool: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    url_paths: Option<RawUrlPaths>,
    #[serde(skip_serializing_if = "Option::is_none")]
    arrival: Option<ArrivalProcess>,
    #[serde(skip_serializing_if = "Option::is_none")]
    type_mix: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    demand: Option<BTreeMap<String, DemandDist>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    priority: Option<BTreeMap<String, i64>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdmission {
    #[serde(skip_serializing_if = "Option::is_none")]
    ssl_offload_delay: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEngine {
    #[serde(skip_serializing_if = "Option::is_none")]
    agent_epoch: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_interval: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ewma_alpha: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSupervisor {
    #[serde(skip_serializing_if = "Option::is_none")]
    stipulated_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reward_grant: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    penalty: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    credit_cap: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    evict_floor: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_credits: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    evict_patience: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tick_interval: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon_initial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon_floor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    credit_gain: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    formats: Option<Vec<OutputFormat>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawCapacity {
    Bounded(i64),
    Word(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQueue {
    name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    capacity: Option<RawCapacity>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    order: i64,
    queue: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    rtype: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    priority: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    url_prefix: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawServer {
    id: i64,
    base_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    concurrency: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    backlog_limit: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    subscription: Option<Vec<String>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFault {
    time: f64,
    server: i64,
    degrade_factor: f64,
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Default)]
struct Errors(Vec<FieldError>);

impl Errors {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.0.push(FieldError {
            path: path.into(),
            message: message.into(),
        });
    }
}

fn default_farm() -> Vec<RawServer> {
    [1.0, 2.0, 4.0]
        .iter()
        .enumerate()
        .map(|(i, &r)| RawServer {
            id: i as i64,
            base_rate: r,
            concurrency: None,
            backlog_limit: None,
            weight: None,
            subscription: None,
        })
        .collect()
}

fn to_u32(errs: &mut Errors, path: String, v: i64, min: i64) -> u32 {
    if v < min || v > u32::MAX as i64 {
        errs.push(path, format!("must be an integer in [{min}, {}], got {v}", u32::MAX));
        min.max(0) as u32
    } else {
        v as u32
    }
}

fn type_table<T: Copy>(
    errs: &mut Errors,
    path: &str,
    raw: Option<&BTreeMap<String, T>>,
    defaults: [T; 8],
    allow_default_key: bool,
) -> [T; 8] {
    let mut out = defaults;
    let Some(raw) = raw else { return out };
    if allow_default_key {
        if let Some(d) = raw.get("default") {
            out = [*d; 8];
        }
    }
    for (k, v) in raw {
        if allow_default_key && k == "default" {
            continue;
        }
        match k.parse::<RequestType>() {
            Ok(t) => out[t.index()] = *v,
            Err(e) => errs.push(format!("{path}.{k}"), e.to_string()),
        }
    }
    out
}

fn build(raw: RawScenario) -> Result<ScenarioConfig, ScenarioError> {
    let mut errs = Errors::default();

    let name = raw.name.clone().unwrap_or_else(|| "scenario".into());
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        errs.push("name", "must be nonempty and use only [A-Za-z0-9_-]");
    }

    // workload
    let rw = raw.workload.clone().unwrap_or_default();
    let dflt = WorkloadConfig::default();
    let seed = match rw.seed {
        Some(s) if s < 0 => {
            errs.push("workload.seed", "must be >= 0");
            0
        }
        Some(s) => s as u64,
        None => dflt.seed,
    };
    let url_paths = match &rw.url_paths {
        None => default_url_paths(DEFAULT_URL_PATHS),
        Some(RawUrlPaths::Count(n)) if *n >= 1 => default_url_paths(*n as usize),
        Some(RawUrlPaths::Count(n)) => {
            errs.push("workload.url_paths", format!("path count must be >= 1, got {n}"));
            Vec::new()
        }
        Some(RawUrlPaths::List(l)) => l.clone(),
    };
    let type_mix = {
        let mut mix = dflt.type_mix;
        if let Some(m) = &rw.type_mix {
            // an explicit mix replaces the default wholesale
            mix = type_table(&mut errs, "workload.type_mix", Some(m), [0.0; 8], false);
        }
        mix
    };
    let priorities_raw = type_table(
        &mut errs,
        "workload.priority",
        rw.priority.as_ref(),
        dflt.priorities.map(i64::from),
        false,
    );
    let mut priorities = [0u8; 8];
    for t in RequestType::ALL {
        let p = priorities_raw[t.index()];
        if !(0..=255).contains(&p) {
            errs.push(format!("workload.priority.{t}"), "must be in [0, 255]");
        } else {
            priorities[t.index()] = p as u8;
        }
    }
    let source_pool = match rw.source_pool {
        None => dflt.source_pool,
        Some(n) => to_u32(&mut errs, "workload.source_pool".into(), n, 1),
    };
    let workload = WorkloadConfig {
        horizon: rw.horizon.unwrap_or(dflt.horizon),
        arrival: rw.arrival.unwrap_or(dflt.arrival),
        type_mix,
        demand: type_table(&mut errs, "workload.demand", rw.demand.as_ref(), dflt.demand, true),
        priorities,
        secured_fraction: rw.secured_fraction.unwrap_or(dflt.secured_fraction),
        url_paths,
        source_pool,
        seed,
    };
    for e in workload.validate_all() {
        let crate::workload::WorkloadError::InvalidConfig { field, reason } = e;
        if field == "url_paths" || field == "source_pool" {
            // already reported above with a more specific message
            if errs.0.iter().any(|x| x.path == format!("workload.{field}")) {
                continue;
            }
        }
        errs.push(format!("workload.{field}"), reason);
    }

    // queues and rules
    let raw_queues = raw.queues.clone().unwrap_or_else(|| {
        vec![RawQueue {
            name: "default".into(),
            capacity: None,
        }]
    });
    if raw_queues.is_empty() {
        errs.push("queues", "at least one queue is required");
    }
    let mut queues = Vec::new();
    let mut names = HashSet::new();
    for (i, q) in raw_queues.iter().enumerate() {
        if !names.insert(q.name.clone()) {
            errs.push(format!("queues[{i}].name"), format!("duplicate queue `{}`", q.name));
        }
        let capacity = match &q.capacity {
            None => Some(DEFAULT_QUEUE_CAPACITY),
            Some(RawCapacity::Bounded(n)) if *n >= 1 => Some(*n as usize),
            Some(RawCapacity::Bounded(n)) => {
                errs.push(format!("queues[{i}].capacity"), format!("must be positive, got {n}"));
                None
            }
            Some(RawCapacity::Word(w)) if w == "unbounded" => None,
            Some(RawCapacity::Word(w)) => {
                errs.push(format!("queues[{i}].capacity"), format!("expected an integer or \"unbounded\", got `{w}`"));
                None
            }
        };
        queues.push(QueueSpec {
            name: q.name.clone(),
            capacity,
        });
    }
    let queue_index = |name: &str| queues.iter().position(|q| q.name == name).map(QueueId);

    let raw_rules = raw.rules.clone().unwrap_or_else(|| {
        vec![RawRule {
            order: 0,
            queue: raw_queues.first().map(|q| q.name.clone()).unwrap_or_default(),
            rtype: None,
            priority: None,
            url_prefix: None,
        }]
    });
    let mut rules = Vec::new();
    let mut ranks = HashSet::new();
    for (i, r) in raw_rules.iter().enumerate() {
        let path = format!("rules[{i}]");
        if !ranks.insert(r.order) {
            errs.push(format!("{path}.order"), format!("duplicate rank {}", r.order));
        }
        let queue = match queue_index(&r.queue) {
            Some(q) => q,
            None => {
                errs.push(format!("{path}.queue"), format!("rule (order {}) references unknown queue `{}`", r.order, r.queue));
                QueueId(0)
            }
        };
        let rtype = r.rtype.as_deref().and_then(|s| match s.parse::<RequestType>() {
            Ok(t) => Some(t),
            Err(e) => {
                errs.push(format!("{path}.rtype"), e.to_string());
                None
            }
        });
        let priority = r.priority.and_then(|p| {
            if (0..=255).contains(&p) {
                Some(p as u8)
            } else {
                errs.push(format!("{path}.priority"), "must be in [0, 255]");
                None
            }
        });
        rules.push(ClassificationRule {
            order: r.order,
            rtype,
            priority,
            url_prefix: r.url_prefix.clone(),
            queue,
        });
    }
    if !rules.iter().any(ClassificationRule::is_catch_all) {
        errs.push("rules", "no catch-all rule (a rule with no rtype, priority or url_prefix)");
    }

    // admission
    let admission = AdmissionConfig {
        ssl_offload_delay: raw
            .admission
            .as_ref()
            .and_then(|a| a.ssl_offload_delay)
            .unwrap_or(AdmissionConfig::default().ssl_offload_delay),
    };
    if !(admission.ssl_offload_delay.is_finite() && admission.ssl_offload_delay >= 0.0) {
        errs.push("admission.ssl_offload_delay", "must be finite and >= 0");
    }

    // servers
    let raw_servers = raw.servers.clone().unwrap_or_else(default_farm);
    if raw_servers.is_empty() {
        errs.push("servers", "at least one server is required");
    }
    let all_queues: Vec<QueueId> = (0..queues.len()).map(QueueId).collect();
    let mut servers = Vec::new();
    let mut ids = HashSet::new();
    for (i, s) in raw_servers.iter().enumerate() {
        let path = format!("servers[{i}]");
        let id = ServerId(to_u32(&mut errs, format!("{path}.id"), s.id, 0));
        if !ids.insert(id) {
            errs.push(format!("{path}.id"), format!("duplicate server id {}", s.id));
        }
        if !(s.base_rate.is_finite() && s.base_rate > 0.0) {
            errs.push(format!("{path}.base_rate"), "must be finite and > 0");
        }
        let concurrency = to_u32(&mut errs, format!("{path}.concurrency"), s.concurrency.unwrap_or(1), 1) as usize;
        let backlog_limit = to_u32(&mut errs, format!("{path}.backlog_limit"), s.backlog_limit.unwrap_or(DEFAULT_BACKLOG_LIMIT as i64), 0) as usize;
        let weight = to_u32(
            &mut errs,
            format!("{path}.weight"),
            s.weight.unwrap_or_else(|| (s.base_rate.round() as i64).max(1)),
            1,
        );
        let subscription = match &s.subscription {
            None => all_queues.clone(),
            Some(list) => {
                if list.is_empty() {
                    errs.push(format!("{path}.subscription"), "must name at least one queue");
                }
                list.iter()
                    .filter_map(|n| {
                        let q = queue_index(n);
                        if q.is_none() {
                            errs.push(format!("{path}.subscription"), format!("unknown queue `{n}`"));
                        }
                        q
                    })
                    .collect()
            }
        };
        servers.push(ServerSpec {
            id,
            base_rate: s.base_rate,
            concurrency,
            backlog_limit,
            weight,
            subscription,
        });
    }
    servers.sort_by_key(|s| s.id);

    // mode
    let mode_name = raw.mode.clone().unwrap_or_else(|| "pull_rl".into());
    let mode = match mode_name.as_str() {
        "pull_rl" => {
            if raw.policy.is_some() {
                errs.push("policy", "only valid when mode = \"push\"");
            }
            let sup = supervisor_from_raw(&mut errs, raw.supervisor.clone().unwrap_or_default());
            Mode::PullRl(sup)
        }
        "push" => {
            if raw.supervisor.is_some() {
                errs.push("supervisor", "only valid when mode = \"pull_rl\"");
            }
            match raw.policy.as_deref() {
                None => {
                    errs.push("policy", "push mode requires a policy tag");
                    Mode::Push(PolicyTag::RoundRobin)
                }
                Some(p) => match p.parse::<PolicyTag>() {
                    Ok(tag) => Mode::Push(tag),
                    Err(e) => {
                        errs.push("policy", e.to_string());
                        Mode::Push(PolicyTag::RoundRobin)
                    }
                },
            }
        }
        other => {
            errs.push("mode", format!("expected \"pull_rl\" or \"push\", got `{other}`"));
            Mode::PullRl(SupervisorConfig::default())
        }
    };

    // faults
    let mut faults = Vec::new();
    for (i, f) in raw.faults.clone().unwrap_or_default().iter().enumerate() {
        let path = format!("faults[{i}]");
        if !(f.time.is_finite() && f.time >= 0.0) {
            errs.push(format!("{path}.time"), "must be finite and >= 0");
        }
        if !(f.degrade_factor > 0.0 && f.degrade_factor <= 1.0) {
            errs.push(format!("{path}.degrade_factor"), "must lie in (0, 1]");
        }
        let server = ServerId(to_u32(&mut errs, format!("{path}.server"), f.server, 0));
        if !servers.iter().any(|s| s.id == server) {
            errs.push(format!("{path}.server"), format!("unknown server {}", f.server));
        }
        faults.push(FaultSpec {
            time: f.time,
            server,
            degrade_factor: f.degrade_factor,
        });
    }

    // engine and output
    let re = raw.engine.clone().unwrap_or_default();
    let de = EngineConfig::default();
    let engine = EngineConfig {
        agent_epoch: re.agent_epoch.unwrap_or(de.agent_epoch),
        sample_interval: re.sample_interval.unwrap_or(de.sample_interval),
        ewma_alpha: re.ewma_alpha.unwrap_or(de.ewma_alpha),
    };
    if !(engine.agent_epoch.is_finite() && engine.agent_epoch > 0.0) {
        errs.push("engine.agent_epoch", "must be finite and > 0");
    }
    if !(engine.sample_interval.is_finite() && engine.sample_interval > 0.0) {
        errs.push("engine.sample_interval", "must be finite and > 0");
    }
    if !(engine.ewma_alpha > 0.0 && engine.ewma_alpha <= 1.0) {
        errs.push("engine.ewma_alpha", "must lie in (0, 1]");
    }
    let ro = raw.output.clone().unwrap_or_default();
    let dout = OutputConfig::default();
    let output = OutputConfig {
        dir: ro.dir.unwrap_or(dout.dir),
        formats: ro.formats.unwrap_or(dout.formats),
    };

    if !errs.0.is_empty() {
        return Err(ScenarioError::Invalid(errs.0));
    }
    Ok(ScenarioConfig {
        name,
        workload,
        queues,
        rules,
        admission,
        servers,
        mode,
        faults,
        engine,
        output,
    })
}

fn supervisor_from_raw(errs: &mut Errors, r: RawSupervisor) -> SupervisorConfig {
    let d = SupervisorConfig::default();
    let mut int = |name: &str, v: Option<i64>, dflt: u32, min: i64| match v {
        None => dflt,
        Some(v) => to_u32(errs, format!("supervisor.{name}"), v, min),
    };
    let cfg = SupervisorConfig {
        stipulated_time: r.stipulated_time.unwrap_or(d.stipulated_time),
        reward_grant: int("reward_grant", r.reward_grant, d.reward_grant, 0),
        penalty: int("penalty", r.penalty, d.penalty, 0),
        credit_cap: int("credit_cap", r.credit_cap, d.credit_cap, 1),
        evict_floor: int("evict_floor", r.evict_floor, d.evict_floor, 0),
        initial_credits: int("initial_credits", r.initial_credits, d.initial_credits, 0),
        evict_patience: int("evict_patience", r.evict_patience, d.evict_patience, 1),
        tick_interval: r.tick_interval.unwrap_or(d.tick_interval),
        q_alpha: r.q_alpha.unwrap_or(d.q_alpha),
        q_gamma: r.q_gamma.unwrap_or(d.q_gamma),
        epsilon_initial: r.epsilon_initial.unwrap_or(d.epsilon_initial),
        epsilon_decay: r.epsilon_decay.unwrap_or(d.epsilon_decay),
        epsilon_floor: r.epsilon_floor.unwrap_or(d.epsilon_floor),
        credit_gain: r.credit_gain.unwrap_or(d.credit_gain),
    };
    for (field, reason) in cfg.violations() {
        errs.push(format!("supervisor.{field}"), reason);
    }
    cfg
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Parses and fully validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError::Syntax {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    build(raw)
}

/// Re-validates an in-memory config (e.g. after a seed override).
pub fn validate(cfg: &ScenarioConfig) -> Result<(), ScenarioError> {
    let mut errs = Errors::default();
    if cfg.workload.seed > i64::MAX as u64 {
        errs.push("workload.seed", format!("must be <= {}", i64::MAX));
    }
    if !errs.0.is_empty() {
        return Err(ScenarioError::Invalid(errs.0));
    }
    let reparsed = parse_scenario(&normalized_dump(cfg))?;
    debug_assert_eq!(&reparsed, cfg);
    Ok(())
}

/// The normalized document: every key explicit, defaults filled.
pub fn normalized_dump(cfg: &ScenarioConfig) -> String {
    let w = &cfg.workload;
    let per_type = |f: &dyn Fn(RequestType) -> f64| -> BTreeMap<String, f64> {
        RequestType::ALL.iter().map(|&t| (t.as_str().to_string(), f(t))).collect()
    };
    let raw = RawScenario {
        name: Some(cfg.name.clone()),
        mode: Some(cfg.mode.name().into()),
        policy: match &cfg.mode {
            Mode::Push(p) => Some(p.as_str().into()),
            Mode::PullRl(_) => None,
        },
        workload: Some(RawWorkload {
            horizon: Some(w.horizon),
            seed: Some(w.seed as i64),
            secured_fraction: Some(w.secured_fraction),
            source_pool: Some(w.source_pool as i64),
            url_paths: Some(RawUrlPaths::List(w.url_paths.clone())),
            arrival: Some(w.arrival),
            type_mix: Some(per_type(&|t| w.type_mix[t.index()])),
            demand: Some(RequestType::ALL.iter().map(|&t| (t.as_str().to_string(), w.demand[t.index()])).collect()),
            priority: Some(RequestType::ALL.iter().map(|&t| (t.as_str().to_string(), w.priorities[t.index()] as i64)).collect()),
        }),
        admission: Some(RawAdmission {
            ssl_offload_delay: Some(cfg.admission.ssl_offload_delay),
        }),
        engine: Some(RawEngine {
            agent_epoch: Some(cfg.engine.agent_epoch),
            sample_interval: Some(cfg.engine.sample_interval),
            ewma_alpha: Some(cfg.engine.ewma_alpha),
        }),
        supervisor: match &cfg.mode {
            Mode::PullRl(s) => Some(RawSupervisor {
                stipulated_time: Some(s.stipulated_time),
                reward_grant: Some(s.reward_grant as i64),
                penalty: Some(s.penalty as i64),
                credit_cap: Some(s.credit_cap as i64),
                evict_floor: Some(s.evict_floor as i64),
                initial_credits: Some(s.initial_credits as i64),
                evict_patience: Some(s.evict_patience as i64),
                tick_interval: Some(s.tick_interval),
                q_alpha: Some(s.q_alpha),
                q_gamma: Some(s.q_gamma),
                epsilon_initial: Some(s.epsilon_initial),
                epsilon_decay: Some(s.epsilon_decay),
                epsilon_floor: Some(s.epsilon_floor),
                credit_gain: Some(s.credit_gain),
            }),
            Mode::Push(_) => None,
        },
        output: Some(RawOutput {
            dir: Some(cfg.output.dir.clone()),
            formats: Some(cfg.output.formats.clone()),
        }),
        queues: Some(
            cfg.queues
                .iter()
                .map(|q| RawQueue {
                    name: q.name.clone(),
                    capacity: Some(match q.capacity {
                        Some(c) => RawCapacity::Bounded(c as i64),
                        None => RawCapacity::Word("unbounded".into()),
                    }),
                })
                .collect(),
        ),
        rules: Some(
            cfg.rules
                .iter()
                .map(|r| RawRule {
                    order: r.order,
                    queue: cfg.queues[r.queue.0].name.clone(),
                    rtype: r.rtype.map(|t| t.as_str().into()),
                    priority: r.priority.map(i64::from),
                    url_prefix: r.url_prefix.clone(),
                })
                .collect(),
        ),
        servers: Some(
            cfg.servers
                .iter()
                .map(|s| RawServer {
                    id: s.id.0 as i64,
                    base_rate: s.base_rate,
                    concurrency: Some(s.concurrency as i64),
                    backlog_limit: Some(s.backlog_limit as i64),
                    weight: Some(s.weight as i64),
                    subscription: Some(s.subscription.iter().map(|q| cfg.queues[q.0].name.clone()).collect()),
                })
                .collect(),
        ),
        faults: Some(
            cfg.faults
                .iter()
                .map(|f| RawFault {
                    time: f.time,
                    server: f.server.0 as i64,
                    degrade_factor: f.degrade_factor,
                })
                .collect(),
        ),
    };
    toml::to_string(&raw).expect("scenario serializes to TOML")
}
