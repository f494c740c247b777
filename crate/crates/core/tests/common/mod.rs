//! Helpers shared by the integration tests: an independent replay
//! aggregator over raw JSON log lines, scenario generators and a few
//! brute-force oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use qlb_core::rng::Stream;
use qlb_core::scenario::{parse_scenario, ScenarioConfig};
use serde_json::{json, Value};

/// Rebuilds the metrics report from JSON Lines text without touching the
/// crate's log types. Returns the report as a JSON value.
pub fn replay(jsonl: &str) -> Value {
    let recs: Vec<Value> = jsonl.lines().map(|l| serde_json::from_str(l).expect("valid json line")).collect();
    let header = &recs[0]["detail"];
    assert_eq!(recs[0]["kind"], "run_start");
    let server_ids: Vec<u64> = header["servers"].as_array().unwrap().iter().map(|s| s["id"].as_u64().unwrap()).collect();
    let concurrency: HashMap<u64, f64> = header["servers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| (s["id"].as_u64().unwrap(), s["concurrency"].as_f64().unwrap()))
        .collect();
    let mut credits: HashMap<u64, Option<u64>> = server_ids.iter().map(|&s| (s, header["initial_credits"].as_u64())).collect();
    let queue_names: Vec<String> = header["queues"].as_array().unwrap().iter().map(|q| q.as_str().unwrap().to_string()).collect();
    let mut queue_max = vec![0u64; queue_names.len()];

    let mut arrival: HashMap<u64, f64> = HashMap::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut rt = Vec::new();
    let mut dt = Vec::new();
    let (mut generated, mut completed, mut dropped) = (0u64, 0u64, 0u64);
    let mut assigned: HashMap<u64, u64> = server_ids.iter().map(|&s| (s, 0)).collect();
    let mut busy: HashMap<u64, f64> = server_ids.iter().map(|&s| (s, 0.0)).collect();
    let mut running: BTreeMap<(u64, u64), f64> = BTreeMap::new(); // (request, server) -> start
    let mut evictions = Vec::new();
    let (mut n, mut area, mut last) = (0i64, 0.0f64, 0.0f64);
    let mut end = None;

    for r in &recs {
        let t = r["t"].as_f64().unwrap();
        let server = r["server"].as_u64();
        let request = r["request"].as_u64();
        let d = &r["detail"];
        let mut step = |n: &mut i64, delta: i64| {
            area += *n as f64 * (t - last);
            last = t;
            *n += delta;
        };
        match r["kind"].as_str().unwrap() {
            "arrival" => {
                step(&mut n, 1);
                generated += 1;
                arrival.insert(request.unwrap(), t);
            }
            "enqueue" => {
                let q = d["queue"].as_u64().unwrap() as usize;
                queue_max[q] = queue_max[q].max(d["depth"].as_u64().unwrap());
            }
            "drop" => {
                step(&mut n, -1);
                dropped += 1;
                arrival.remove(&request.unwrap());
            }
            "pull" | "dispatch" => {
                let (s, id) = (server.unwrap(), request.unwrap());
                *assigned.get_mut(&s).unwrap() += 1;
                if seen.insert(id) {
                    if let Some(a) = arrival.get(&id) {
                        dt.push(t - a);
                    }
                }
            }
            "start" => {
                running.insert((request.unwrap(), server.unwrap()), t);
            }
            "complete" => {
                step(&mut n, -1);
                completed += 1;
                let (s, id) = (server.unwrap(), request.unwrap());
                let st = running.remove(&(id, s)).expect("start before complete");
                *busy.get_mut(&s).unwrap() += t - st;
                rt.push(t - arrival.remove(&id).unwrap());
            }
            "settle" => {
                credits.insert(server.unwrap(), d["credits"].as_u64());
            }
            "evict" => {
                let s = server.unwrap();
                let keys: Vec<(u64, u64)> = running.keys().filter(|k| k.1 == s).copied().collect();
                for k in keys {
                    let st = running.remove(&k).unwrap();
                    *busy.get_mut(&s).unwrap() += t - st;
                }
                evictions.push(json!({"server": s, "t": t}));
            }
            "end" => {
                step(&mut n, 0);
                let keys: Vec<(u64, u64)> = running.keys().copied().collect();
                for k in keys {
                    let st = running.remove(&k).unwrap();
                    *busy.get_mut(&k.1).unwrap() += t - st;
                }
                end = Some(t);
            }
            _ => {}
        }
    }

    let horizon = end.unwrap_or_else(|| header["horizon"].as_f64().unwrap());
    let per = |x: f64| if horizon > 0.0 { x / horizon } else { 0.0 };
    let rank = |p: f64, len: usize| (((p * len as f64) / 100.0).ceil() as usize).clamp(1, len) - 1;
    let summary = |xs: &[f64]| {
        if xs.is_empty() {
            return Value::Null;
        }
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        json!({
            "mean": xs.iter().sum::<f64>() / xs.len() as f64,
            "p50": s[rank(50.0, s.len())],
            "p95": s[rank(95.0, s.len())],
            "p99": s[rank(99.0, s.len())],
            "max": s[s.len() - 1],
        })
    };
    let spread = if dt.is_empty() {
        Value::Null
    } else {
        let mut s = dt.clone();
        s.sort_by(f64::total_cmp);
        json!({"mean": dt.iter().sum::<f64>() / dt.len() as f64, "p95": s[rank(95.0, s.len())]})
    };
    let utils: Vec<f64> = server_ids.iter().map(|s| per(busy[s] / concurrency[s])).collect();
    let counts: Vec<f64> = server_ids.iter().map(|s| assigned[s] as f64).collect();
    let jain = |xs: &[f64]| {
        let sum: f64 = xs.iter().sum();
        let sq: f64 = xs.iter().map(|x| x * x).sum();
        if xs.is_empty() || sq == 0.0 {
            Value::Null
        } else {
            json!(sum * sum / (xs.len() as f64 * sq))
        }
    };
    let hi = server_ids.iter().map(|s| assigned[s]).max().unwrap_or(0);
    let lo = server_ids.iter().map(|s| assigned[s]).min().unwrap_or(0);
    json!({
        "run_id": header["run_id"],
        "mode": header["mode"],
        "policy": header["policy"],
        "seed": header["seed"],
        "horizon": horizon,
        "generated": generated,
        "completed": completed,
        "dropped": dropped,
        "throughput": per(completed as f64),
        "response_time": summary(&rt),
        "distribution_time": spread,
        "servers": server_ids.iter().zip(&utils).map(|(s, u)| json!({
            "server": s,
            "assigned": assigned[s],
            "utilization": u,
            "final_credits": credits[s],
        })).collect::<Vec<_>>(),
        "skew": hi - lo,
        "jain": jain(&counts),
        "utilization_jain": jain(&utils),
        "mean_in_system": per(area),
        "evictions": evictions,
        "queues": queue_names.iter().zip(&queue_max).map(|(q, m)| json!({"queue": q, "max_depth": m})).collect::<Vec<_>>(),
    })
}

fn pick<'a, T>(rng: &mut Stream, xs: &'a [T]) -> &'a T {
    &xs[rng.below(xs.len() as u64) as usize]
}

/// A random but valid scenario: mixed modes and policies, several queues,
/// bounded and unbounded capacities, SSL offload, faults.
pub fn random_scenario_text(k: u64) -> String {
    let mut r = Stream::new(k, "test.random-scenario");
    let mut s = String::new();
    let pull = r.uniform() < 0.5;
    s += &format!("name = \"rand{k}\"\n");
    if pull {
        s += "mode = \"pull_rl\"\n";
    } else {
        let p = pick(&mut r, &["RR", "WRR", "LC", "WLC", "ADAPTIVE", "WRT", "IP_HASH", "URL_HASH", "RANDOM"]);
        s += &format!("mode = \"push\"\npolicy = \"{p}\"\n");
    }
    let horizon = 20.0 + 80.0 * r.uniform();
    let rate = 0.5 + 6.0 * r.uniform();
    let arrival = match r.below(3) {
        0 => format!("{{ kind = \"poisson\", rate = {rate} }}"),
        1 => format!("{{ kind = \"deterministic\", interval = {} }}", 1.0 / rate),
        _ => format!(
            "{{ kind = \"bursty\", base_rate = {}, burst_rate = {}, burst_len = 3.0, gap_len = 5.0 }}",
            rate / 2.0,
            rate * 3.0
        ),
    };
    s += &format!(
        "[workload]\nseed = {}\nhorizon = {horizon}\nsecured_fraction = {}\narrival = {arrival}\n",
        r.below(1000),
        r.uniform() * 0.5
    );
    s += &format!("[admission]\nssl_offload_delay = {}\n", r.uniform() * 0.05);
    let nq = 1 + r.below(3) as usize;
    for q in 0..nq {
        let cap = match r.below(3) {
            0 => "\"unbounded\"".to_string(),
            _ => (1 + r.below(30)).to_string(),
        };
        s += &format!("[[queues]]\nname = \"q{q}\"\ncapacity = {cap}\n");
    }
    let types = ["GET", "POST", "PUT", "EMAIL", "UPLOAD", "DOWNLOAD", "CHAT", "SYNC"];
    for (i, q) in (0..nq).skip(1).enumerate() {
        s += &format!("[[rules]]\norder = {i}\nqueue = \"q{q}\"\nrtype = \"{}\"\n", pick(&mut r, &types));
    }
    s += "[[rules]]\norder = 100\nqueue = \"q0\"\n";
    let ns = 1 + r.below(4);
    for id in 0..ns {
        let mut sub: Vec<String> = (0..nq).map(|q| format!("\"q{q}\"")).collect();
        if r.uniform() < 0.5 {
            sub.reverse();
        }
        s += &format!(
            "[[servers]]\nid = {}\nbase_rate = {}\nconcurrency = {}\nbacklog_limit = {}\nsubscription = [{}]\n",
            id * 3,
            0.5 + 4.0 * r.uniform(),
            1 + r.below(3),
            r.below(4),
            sub.join(", ")
        );
    }
    if pull {
        s += &format!(
            "[supervisor]\nstipulated_time = {}\nevict_patience = {}\ninitial_credits = {}\n",
            0.2 + 3.0 * r.uniform(),
            1 + r.below(4),
            r.below(6)
        );
    }
    for _ in 0..r.below(3) {
        s += &format!(
            "[[faults]]\ntime = {}\nserver = {}\ndegrade_factor = {}\n",
            horizon * r.uniform(),
            r.below(ns) * 3,
            0.05 + 0.95 * r.uniform()
        );
    }
    s
}

pub fn random_scenario(k: u64) -> ScenarioConfig {
    let text = random_scenario_text(k);
    parse_scenario(&text).unwrap_or_else(|e| panic!("generated scenario {k} invalid: {e}\n{text}"))
}

/// Heterogeneous 1:2:4 farm at the given fraction of total capacity.
pub fn hetero_farm(load: f64, horizon: f64, mode: &str) -> String {
    format!(
        r#"name = "hetero"
{mode}
[workload]
horizon = {horizon}
secured_fraction = 0.0
arrival = {{ kind = "poisson", rate = {rate} }}
demand = {{ default = {{ kind = "exponential", mean = 1.0 }} }}
[[servers]]
id = 0
base_rate = 1.0
[[servers]]
id = 1
base_rate = 2.0
[[servers]]
id = 2
base_rate = 4.0
"#,
        rate = 7.0 * load
    )
}

/// Server 2 alone serves the mail queue and degrades to 0.1 at t=100.
pub const DEGRADE_SCENARIO: &str = r#"
name = "degrade"
[workload]
horizon = 400.0
secured_fraction = 0.0
arrival = { kind = "poisson", rate = 3.0 }
type_mix = { GET = 0.5, POST = 0.3, EMAIL = 0.2 }
demand = { default = { kind = "exponential", mean = 1.0 } }
[[queues]]
name = "web"
[[queues]]
name = "mail"
[[rules]]
order = 1
queue = "mail"
rtype = "EMAIL"
[[rules]]
order = 10
queue = "web"
[[servers]]
id = 0
base_rate = 4.0
subscription = ["web"]
[[servers]]
id = 1
base_rate = 4.0
subscription = ["web"]
[[servers]]
id = 2
base_rate = 2.0
subscription = ["mail"]
[supervisor]
stipulated_time = 1.5
[[faults]]
time = 100.0
server = 2
degrade_factor = 0.1
"#;

/// Single-server push run with Poisson arrivals and exponential demand.
pub fn mm1(lambda: f64, mu: f64, horizon: f64, seed: u64) -> String {
    format!(
        r#"name = "mm1"
mode = "push"
policy = "RR"
[workload]
seed = {seed}
horizon = {horizon}
secured_fraction = 0.0
arrival = {{ kind = "poisson", rate = {lambda} }}
demand = {{ default = {{ kind = "exponential", mean = 1.0 }} }}
[[servers]]
id = 0
base_rate = {mu}
"#
    )
}

pub fn with_seed(mut cfg: ScenarioConfig, seed: u64) -> ScenarioConfig {
    cfg.workload.seed = seed;
    cfg
}

/// Optimal deterministic policy of a finite MDP by value iteration.
/// `next[s][a]` and `reward[s][a]` describe the transitions.
pub fn value_iteration(next: &[Vec<usize>], reward: &[Vec<f64>], gamma: f64) -> Vec<usize> {
    let n = next.len();
    let mut v = vec![0.0; n];
    for _ in 0..10_000 {
        let nv: Vec<f64> = (0..n)
            .map(|s| (0..next[s].len()).map(|a| reward[s][a] + gamma * v[next[s][a]]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let diff = nv.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = nv;
        if diff < 1e-12 {
            break;
        }
    }
    (0..n)
        .map(|s| {
            let q: Vec<f64> = (0..next[s].len()).map(|a| reward[s][a] + gamma * v[next[s][a]]).collect();
            let mut best = 0;
            for a in 1..q.len() {
                if q[a] > q[best] + 1e-9 {
                    best = a;
                }
            }
            best
        })
        .collect()
}
