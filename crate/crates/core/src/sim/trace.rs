//! Simulation timeline and Chrome trace-event export.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::taskgen::TdId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkerClass {
    #[serde(rename = "AIC")]
    Aic,
    #[serde(rename = "AIV")]
    Aiv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "WAIT")]
    Wait,
    #[serde(rename = "EXEC")]
    Exec,
    #[serde(rename = "COMM")]
    Comm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub timestamp_us: f64,
    pub duration_us: f64,
    pub rank: usize,
    pub worker_class: WorkerClass,
    pub worker_index: usize,
    pub td_id: TdId,
    pub phase: Phase,
}

/// Chrome trace-event format: one complete ("X") event per TraceEvent,
/// one lane (pid=rank, tid=class/worker) per simulated worker.
pub fn export_trace(trace: &[TraceEvent]) -> Result<Vec<u8>> {
    let events: Vec<serde_json::Value> = trace
        .iter()
        .map(|e| {
            let class = match e.worker_class {
                WorkerClass::Aic => "AIC",
                WorkerClass::Aiv => "AIV",
            };
            let phase = match e.phase {
                Phase::Wait => "WAIT",
                Phase::Exec => "EXEC",
                Phase::Comm => "COMM",
            };
            json!({
                "name": format!("td{}", e.td_id),
                "cat": phase,
                "ph": "X",
                "ts": e.timestamp_us,
                "dur": e.duration_us,
                "pid": e.rank,
                "tid": format!("{}-{}", class, e.worker_index),
                "args": { "td_id": e.td_id }
            })
        })
        .collect();
    serde_json::to_vec_pretty(&events).map_err(|e| Error::ParseError(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_trace_exports_empty_array() {
        let bytes = export_trace(&[]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v, serde_json::json!([]));
    }

    #[test]
    fn single_event_fields() {
        let ev = TraceEvent {
            timestamp_us: 1.5,
            duration_us: 2.0,
            rank: 0,
            worker_class: WorkerClass::Aiv,
            worker_index: 3,
            td_id: 42,
            phase: Phase::Exec,
        };
        let bytes = export_trace(&[ev]).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v[0]["ph"], "X");
        assert_eq!(v[0]["cat"], "EXEC");
        assert_eq!(v[0]["pid"], 0);
        assert_eq!(v[0]["tid"], "AIV-3");
        assert_eq!(v[0]["args"]["td_id"], 42);
    }
}
