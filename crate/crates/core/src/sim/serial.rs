//! Serial (non-pipelined) baseline: operators run as globally
//! barrier-separated phases. Communication phases behave as blocking
//! collectives; compute phases list-schedule their tasks over the class
//! workers. Per-task dispatch overhead is replaced by one kernel-launch
//! overhead per rank per (sub-)phase.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::Result;
use crate::sched::Ssc;
use crate::taskgen::{global_id, TaskType, TdId, RANK_STRIDE};

use super::cache::LruCache;
use super::cost::CostModel;
use super::engine::SimOutcome;
use super::metrics::{compute_metrics, TaskRecord};
use super::trace::{Phase, TraceEvent, WorkerClass};

pub fn simulate_serial(sscs: &[Ssc], cm: &CostModel) -> Result<SimOutcome> {
    let ranks = sscs.len();
    let mut caches: Vec<LruCache> = vec![LruCache::new(cm.l2_capacity_bytes); ranks];
    let mut trace: Vec<TraceEvent> = Vec::new();
    let mut records: BTreeMap<TdId, TaskRecord> = BTreeMap::new();
    let mut commit_order: Vec<TdId> = Vec::new();
    let mut commit_time: BTreeMap<TdId, f64> = BTreeMap::new();
    let mut start_exec: BTreeMap<TdId, f64> = BTreeMap::new();

    // phases in ascending operator position, shared across ranks
    let mut phases: BTreeSet<usize> = BTreeSet::new();
    for ssc in sscs {
        for td in &ssc.tds {
            phases.insert(td.tiling_data_position);
        }
    }

    // per-rank queue-order local td ids, preserved within each phase
    let queue_order: Vec<Vec<usize>> = sscs
        .iter()
        .map(|ssc| {
            let mut v: Vec<usize> =
                ssc.queues.ctq.iter().map(|&id| id % RANK_STRIDE).collect();
            v.extend(ssc.queues.vtq.iter().map(|&id| id % RANK_STRIDE));
            v
        })
        .collect();

    let mut t = 0.0f64;
    for phase in phases {
        // sub-phase 1: puts, as a blocking collective
        let mut links = vec![t; ranks];
        let mut any_comm = false;
        let mut phase_end = t;
        for r in 0..ranks {
            let puts: Vec<usize> = queue_order[r]
                .iter()
                .copied()
                .filter(|&l| {
                    let td = &sscs[r].tds[l];
                    td.tiling_data_position == phase && td.task_type == TaskType::PutMemSignal
                })
                .collect();
            if puts.is_empty() {
                continue;
            }
            any_comm = true;
            let mut free = t + cm.kernel_launch_overhead;
            for l in puts {
                let td = &sscs[r].tds[l];
                let ci = td.comm.as_ref().expect("put carries comm info");
                let xfer = ci.byte_count as f64 / cm.ingress_bytes_per_microsecond;
                let start = free;
                let end = if ci.dst_rank == r {
                    start + cm.comm_latency_alpha + xfer
                } else {
                    let s = (start + cm.comm_latency_alpha).max(links[ci.dst_rank]);
                    links[ci.dst_rank] = s + xfer;
                    s + xfer
                };
                free = end;
                let gid = global_id(r, l);
                trace.push(TraceEvent {
                    timestamp_us: start,
                    duration_us: end - start,
                    rank: r,
                    worker_class: WorkerClass::Aiv,
                    worker_index: 0,
                    td_id: gid,
                    phase: Phase::Comm,
                });
                start_exec.insert(gid, start);
                commit_order.push(gid);
                commit_time.insert(gid, end);
                records.insert(
                    gid,
                    TaskRecord {
                        start_us: start,
                        end_us: end,
                        worker_class: WorkerClass::Aiv,
                        worker_index: 0,
                        wait_us: 0.0,
                    },
                );
                phase_end = phase_end.max(end);
            }
        }
        if any_comm {
            t = phase_end; // barrier: all transfers land before anyone proceeds
        }

        // sub-phase 2: compute tasks list-scheduled over class workers
        let mut phase_end = t;
        let mut any_compute = false;
        for r in 0..ranks {
            let tasks: Vec<usize> = queue_order[r]
                .iter()
                .copied()
                .filter(|&l| {
                    let td = &sscs[r].tds[l];
                    td.tiling_data_position == phase && td.task_type != TaskType::PutMemSignal
                })
                .collect();
            if tasks.is_empty() {
                continue;
            }
            any_compute = true;
            let class = sscs[r].tds[tasks[0]].task_type.resource_class();
            let wclass = match class {
                crate::graph::ResourceClass::Cube => WorkerClass::Aic,
                crate::graph::ResourceClass::Vector => WorkerClass::Aiv,
            };
            let n = cm.workers(class);
            let mut free = vec![t + cm.kernel_launch_overhead; n];
            for l in tasks {
                let td = &sscs[r].tds[l];
                // earliest-free worker, lowest index on ties
                let (w, _) = free
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
                    .unwrap();
                let start = free[w];
                let mut read_time = 0.0;
                for s in &td.inputs {
                    if s.is_metadata() || s.volume() == 0 {
                        continue;
                    }
                    read_time += caches[r]
                        .access(s, s.volume() * 4, false, cm.l2_read_time_per_byte, cm.hbm_read_time_per_byte)
                        .0;
                }
                for s in &td.outputs {
                    if s.is_metadata() || s.volume() == 0 || s.is_remote() {
                        continue;
                    }
                    caches[r].access(s, s.volume() * 4, true, cm.l2_read_time_per_byte, cm.hbm_read_time_per_byte);
                }
                let end = start + cm.compute_time(td) + read_time;
                free[w] = end;
                let gid = global_id(r, l);
                trace.push(TraceEvent {
                    timestamp_us: start,
                    duration_us: end - start,
                    rank: r,
                    worker_class: wclass,
                    worker_index: w,
                    td_id: gid,
                    phase: Phase::Exec,
                });
                start_exec.insert(gid, start);
                commit_order.push(gid);
                commit_time.insert(gid, end);
                records.insert(
                    gid,
                    TaskRecord {
                        start_us: start,
                        end_us: end,
                        worker_class: wclass,
                        worker_index: w,
                        wait_us: 0.0,
                    },
                );
                phase_end = phase_end.max(end);
            }
        }
        if any_compute {
            t = phase_end; // global barrier between phases
        }
    }

    let hit_rates: Vec<f64> = caches.iter().map(|c| c.hit_rate()).collect();
    let per_rank = compute_metrics(ranks, &trace, &[], &records, &hit_rates);
    Ok(SimOutcome { per_rank, trace, commit_order, commit_time, start_exec })
}
