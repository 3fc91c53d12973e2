//! Per-rank simulation metrics derived from the timeline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::TdId;

use super::trace::{Phase, TraceEvent, WorkerClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub start_us: f64,
    pub end_us: f64,
    pub worker_class: WorkerClass,
    pub worker_index: usize,
    pub wait_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub makespan_us: f64,
    pub aic_busy_fraction: f64,
    pub aiv_busy_fraction: f64,
    pub exposed_comm_fraction: f64,
    pub l2_hit_rate: f64,
    pub per_task_records: BTreeMap<TdId, TaskRecord>,
}

pub fn metrics_to_json(per_rank: &[SimMetrics]) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(per_rank).map_err(|e| Error::ParseError(e.to_string()))
}

/// Length of the union of intervals.
pub fn union_len(intervals: &mut Vec<(f64, f64)>) -> f64 {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for &(s, e) in intervals.iter() {
        if e <= s {
            continue;
        }
        match cur {
            None => cur = Some((s, e)),
            Some((cs, ce)) => {
                if s <= ce {
                    cur = Some((cs, ce.max(e)));
                } else {
                    total += ce - cs;
                    cur = Some((s, e));
                }
            }
        }
    }
    if let Some((cs, ce)) = cur {
        total += ce - cs;
    }
    total
}

/// Subtract the union of `cut` from `base`, returning remaining intervals.
pub fn subtract_intervals(base: &[(f64, f64)], cut: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut cuts: Vec<(f64, f64)> = cut.iter().copied().filter(|&(s, e)| e > s).collect();
    cuts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    for &(mut s, e) in base {
        if e <= s {
            continue;
        }
        for &(cs, ce) in &cuts {
            if ce <= s {
                continue;
            }
            if cs >= e {
                break;
            }
            if cs > s {
                out.push((s, cs));
            }
            s = s.max(ce);
            if s >= e {
                break;
            }
        }
        if s < e {
            out.push((s, e));
        }
    }
    out
}

/// A head-of-queue wait observed during simulation.
#[derive(Debug, Clone, Copy)]
pub struct WaitSpan {
    pub rank: usize,
    pub class: WorkerClass,
    pub start: f64,
    pub end: f64,
    pub comm_fed: bool,
}

/// Compute per-rank metrics from the timeline. Busy fractions count time
/// where at least one worker of the class is in EXEC or COMM; exposed
/// communication is head-wait time on comm-fed counters with no
/// same-class activity.
pub fn compute_metrics(
    ranks: usize,
    trace: &[TraceEvent],
    waits: &[WaitSpan],
    records: &BTreeMap<TdId, TaskRecord>,
    hit_rates: &[f64],
) -> Vec<SimMetrics> {
    let mut out = Vec::new();
    for r in 0..ranks {
        let events: Vec<&TraceEvent> = trace.iter().filter(|e| e.rank == r).collect();
        // the rank's timeline starts at t = 0, so makespan is simply the
        // last event's end time
        let makespan = events
            .iter()
            .map(|e| e.timestamp_us + e.duration_us)
            .fold(0.0f64, f64::max);

        let busy_of = |class: WorkerClass| -> Vec<(f64, f64)> {
            events
                .iter()
                .filter(|e| e.worker_class == class && e.phase != Phase::Wait)
                .map(|e| (e.timestamp_us, e.timestamp_us + e.duration_us))
                .collect()
        };
        let mut aic = busy_of(WorkerClass::Aic);
        let mut aiv = busy_of(WorkerClass::Aiv);

        let mut exposed: Vec<(f64, f64)> = Vec::new();
        for class in [WorkerClass::Aic, WorkerClass::Aiv] {
            let class_busy = busy_of(class);
            let comm_waits: Vec<(f64, f64)> = waits
                .iter()
                .filter(|w| w.rank == r && w.class == class && w.comm_fed)
                .map(|w| (w.start, w.end))
                .collect();
            exposed.extend(subtract_intervals(&comm_waits, &class_busy));
        }

        let rank_records: BTreeMap<TdId, TaskRecord> = records
            .iter()
            .filter(|(id, _)| crate::taskgen::rank_of_id(**id) == r)
            .map(|(id, rec)| (*id, *rec))
            .collect();

        let frac = |len: f64| if makespan > 0.0 { (len / makespan).min(1.0) } else { 0.0 };
        out.push(SimMetrics {
            makespan_us: makespan,
            aic_busy_fraction: frac(union_len(&mut aic)),
            aiv_busy_fraction: frac(union_len(&mut aiv)),
            exposed_comm_fraction: frac(union_len(&mut exposed)),
            l2_hit_rate: hit_rates.get(r).copied().unwrap_or(0.0),
            per_task_records: rank_records,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_union_and_subtract() {
        let mut v = vec![(0.0, 2.0), (1.0, 3.0), (5.0, 6.0)];
        assert_eq!(union_len(&mut v), 4.0);
        let rem = subtract_intervals(&[(0.0, 10.0)], &[(2.0, 3.0), (4.0, 5.0)]);
        assert_eq!(rem, vec![(0.0, 2.0), (3.0, 4.0), (5.0, 10.0)]);
        let rem2 = subtract_intervals(&[(1.0, 2.0)], &[(0.0, 5.0)]);
        assert!(rem2.is_empty());
    }

    #[test]
    fn single_busy_worker_fills_class_fraction() {
        let trace = vec![TraceEvent {
            timestamp_us: 0.0,
            duration_us: 10.0,
            rank: 0,
            worker_class: WorkerClass::Aic,
            worker_index: 0,
            td_id: 0,
            phase: Phase::Exec,
        }];
        let m = compute_metrics(1, &trace, &[], &BTreeMap::new(), &[0.0]);
        assert_eq!(m[0].makespan_us, 10.0);
        assert_eq!(m[0].aic_busy_fraction, 1.0);
        assert_eq!(m[0].aiv_busy_fraction, 0.0);
    }
}
