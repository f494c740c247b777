//! JSON Lines event log.
//!
//! One object per line with the fixed top-level fields
//! `{t, seq, server, request, kind, detail}`. `seq` numbers records in
//! emission order; `server` and `request` are `null` when not applicable.
//! The first record is always `run_start` (the run header) and the last is
//! `end`, so a log is self-describing and metrics can be replayed from it
//! alone.
//!
//! | kind        | server | request | detail                                          |
//! |-------------|--------|---------|-------------------------------------------------|
//! | `run_start` |        |         | run header: ids, mode, servers, queues          |
//! | `arrival`   |        | ✓       | rtype, priority, secured, demand, source, url   |
//! | `enqueue`   |        | ✓       | queue index, depth after, requeue flag          |
//! | `drop`      |        | ✓       | queue index                                     |
//! | `pull`      | ✓      | ✓       | queue index, wait                               |
//! | `dispatch`  | ✓      | ✓       | `{}`                                            |
//! | `settle`    | ✓      |         | batch, max_wait, qualified, delta, credits      |
//! | `q_update`  | ✓      |         | state, action, reward, next_state, value        |
//! | `start`     | ✓      | ✓       | completes_at                                    |
//! | `complete`  | ✓      | ✓       | `{}`                                            |
//! | `fault`     | ✓      |         | degrade_factor                                  |
//! | `report`    | ✓      |         | agent report for the last tick window           |
//! | `evict`     | ✓      |         | number of reclaimed requests                    |
//! | `sample`    |        |         | conservation counters                           |
//! | `end`       |        |         | `{}`                                            |

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::farm::AgentReport;
use crate::workload::RequestType;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub seq: u64,
    pub server: Option<u32>,
    pub request: Option<u64>,
    #[serde(flatten)]
    pub entry: Entry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub id: u32,
    pub concurrency: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub mode: String,
    pub policy: String,
    pub seed: u64,
    pub horizon: f64,
    pub servers: Vec<ServerInfo>,
    pub queues: Vec<String>,
    /// Starting balance for every server in pull mode.
    pub initial_credits: Option<u32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub generated: u64,
    pub completed: u64,
    pub queued: u64,
    pub in_admission: u64,
    pub backlog: u64,
    pub in_service: u64,
    pub dropped: u64,
}

impl SampleCounts {
    pub fn balanced(&self) -> bool {
        self.generated == self.completed + self.queued + self.in_admission + self.backlog + self.in_service + self.dropped
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Entry {
    RunStart(RunHeader),
    Arrival {
        rtype: RequestType,
        priority: u8,
        secured: bool,
        demand: f64,
        source_ip: u32,
        url_path: String,
    },
    Enqueue {
        queue: usize,
        depth: usize,
        requeue: bool,
    },
    Drop {
        queue: usize,
    },
    Pull {
        queue: usize,
        wait: f64,
    },
    Dispatch {},
    Settle {
        batch: usize,
        max_wait: f64,
        qualified: bool,
        delta: i64,
        credits: u32,
    },
    QUpdate {
        state: usize,
        action: usize,
        reward: f64,
        next_state: usize,
        value: f64,
    },
    Start {
        completes_at: f64,
    },
    Complete {},
    Fault {
        degrade_factor: f64,
    },
    Report(AgentReport),
    Evict {
        reclaimed: usize,
    },
    Sample(SampleCounts),
    End {},
}

impl Entry {
    pub fn kind(&self) -> &'static str {
        match self {
            Entry::RunStart(_) => "run_start",
            Entry::Arrival { .. } => "arrival",
            Entry::Enqueue { .. } => "enqueue",
            Entry::Drop { .. } => "drop",
            Entry::Pull { .. } => "pull",
            Entry::Dispatch {} => "dispatch",
            Entry::Settle { .. } => "settle",
            Entry::QUpdate { .. } => "q_update",
            Entry::Start { .. } => "start",
            Entry::Complete {} => "complete",
            Entry::Fault { .. } => "fault",
            Entry::Report(_) => "report",
            Entry::Evict { .. } => "evict",
            Entry::Sample(_) => "sample",
            Entry::End {} => "end",
        }
    }
}

pub fn write_jsonl<W: Write>(records: &[LogRecord], mut out: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn to_jsonl_string(records: &[LogRecord]) -> String {
    let mut buf = Vec::new();
    write_jsonl(records, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

pub fn read_jsonl<R: BufRead>(input: R) -> io::Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("event log line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
