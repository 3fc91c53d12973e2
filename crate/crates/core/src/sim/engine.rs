//! Deterministic discrete-event simulator of the pipelined runtime:
//! per-rank CTQ/VTQ with in-order head claiming, event counters,
//! one-sided puts over serial destination-ingress links, and an L2
//! cache model.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::error::{Error, Result};
use crate::sched::Ssc;
use crate::taskgen::{global_id, EventId, TaskDescriptor, TaskType, TdId, RANK_STRIDE};

use super::cache::LruCache;
use super::cost::CostModel;
use super::metrics::{compute_metrics, SimMetrics, TaskRecord, WaitSpan};
use super::trace::{Phase, TraceEvent, WorkerClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    Pipelined,
    SerialBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchMode {
    Static,
    Dynamic,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub per_rank: Vec<SimMetrics>,
    pub trace: Vec<TraceEvent>,
    /// Task ids in commit order (the order numeric execution replays).
    pub commit_order: Vec<TdId>,
    pub commit_time: BTreeMap<TdId, f64>,
    pub start_exec: BTreeMap<TdId, f64>,
}

impl SimOutcome {
    pub fn makespan(&self) -> f64 {
        self.per_rank.iter().map(|m| m.makespan_us).fold(0.0, f64::max)
    }
}

pub fn simulate(
    sscs: &[Ssc],
    cm: &CostModel,
    mode: SimMode,
    dispatch: DispatchMode,
) -> Result<SimOutcome> {
    cm.validate()?;
    match mode {
        SimMode::Pipelined => pipelined(sscs, cm, dispatch),
        SimMode::SerialBaseline => super::serial::simulate_serial(sscs, cm),
    }
}

const CTQ: usize = 0;
const VTQ: usize = 1;

fn class_of(c: usize) -> WorkerClass {
    if c == CTQ {
        WorkerClass::Aic
    } else {
        WorkerClass::Aiv
    }
}

#[derive(Debug, Clone)]
enum EvKind {
    TryClaim,
    ClaimDone { td: usize, claim_end: f64 },
    ExecDone { td: usize, exec_start: f64, wait_us: f64 },
    CounterInc { event: EventId },
}

#[derive(Debug, Clone)]
struct Ev {
    time: f64,
    rank: usize,
    class: usize,
    worker: usize,
    seq: u64,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, o: &Self) -> bool {
        self.seq == o.seq
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Ev {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        // min-heap semantics via reversal at push site; ties broken by
        // (time, rank, class, worker, seq)
        self.time
            .total_cmp(&o.time)
            .then(self.rank.cmp(&o.rank))
            .then(self.class.cmp(&o.class))
            .then(self.worker.cmp(&o.worker))
            .then(self.seq.cmp(&o.seq))
    }
}

struct Queue {
    tds: Vec<usize>, // local td indices in order
    head: usize,
    busy: bool,
}

struct Counter {
    threshold: usize,
    value: usize,
    satisfied_at: Option<f64>,
    comm_fed: bool,
    parked: Vec<(usize, usize, usize, usize, f64)>, // rank, class, worker, td, claim_end
}

struct Engine<'a> {
    sscs: &'a [Ssc],
    cm: &'a CostModel,
    overhead: f64,
    heap: BinaryHeap<std::cmp::Reverse<Ev>>,
    seq: u64,
    queues: Vec<[Queue; 2]>,
    idle: Vec<[BTreeSet<usize>; 2]>,
    counters: BTreeMap<EventId, Counter>,
    links: Vec<f64>,
    caches: Vec<LruCache>,
    trace: Vec<TraceEvent>,
    waits: Vec<WaitSpan>,
    records: BTreeMap<TdId, TaskRecord>,
    commit_order: Vec<TdId>,
    commit_time: BTreeMap<TdId, f64>,
    start_exec: BTreeMap<TdId, f64>,
    committed: usize,
    total: usize,
}

fn pipelined(sscs: &[Ssc], cm: &CostModel, dispatch: DispatchMode) -> Result<SimOutcome> {
    let ranks = sscs.len();
    let mut counters: BTreeMap<EventId, Counter> = BTreeMap::new();
    for ssc in sscs {
        for e in &ssc.events {
            counters.insert(
                e.id,
                Counter {
                    threshold: e.threshold,
                    value: e.initial_value.max(0) as usize,
                    satisfied_at: None,
                    comm_fed: false,
                    parked: vec![],
                },
            );
        }
    }
    let mut total = 0;
    for ssc in sscs {
        for td in &ssc.tds {
            total += 1;
            for e in &td.trigger_events {
                let c = counters
                    .get_mut(e)
                    .ok_or_else(|| Error::InvalidGraph(format!("unknown counter {e}")))?;
                if td.task_type == TaskType::PutMemSignal {
                    c.comm_fed = true;
                }
            }
            if let Some(e) = td.dependent_event {
                if !counters.contains_key(&e) {
                    return Err(Error::InvalidGraph(format!("unknown dependent counter {e}")));
                }
            }
        }
    }

    let mut queues = Vec::new();
    let mut idle = Vec::new();
    for ssc in sscs {
        let to_local = |ids: &[TdId]| ids.iter().map(|&id| id % RANK_STRIDE).collect::<Vec<_>>();
        queues.push([
            Queue { tds: to_local(&ssc.queues.ctq), head: 0, busy: false },
            Queue { tds: to_local(&ssc.queues.vtq), head: 0, busy: false },
        ]);
        idle.push([
            (0..cm.aic_workers).collect::<BTreeSet<_>>(),
            (0..cm.aiv_workers).collect::<BTreeSet<_>>(),
        ]);
    }

    let mut eng = Engine {
        sscs,
        cm,
        overhead: cm.dispatch_overhead(dispatch == DispatchMode::Dynamic),
        heap: BinaryHeap::new(),
        seq: 0,
        queues,
        idle,
        counters,
        links: vec![0.0; ranks],
        caches: vec![LruCache::new(cm.l2_capacity_bytes); ranks],
        trace: vec![],
        waits: vec![],
        records: BTreeMap::new(),
        commit_order: vec![],
        commit_time: BTreeMap::new(),
        start_exec: BTreeMap::new(),
        committed: 0,
        total,
    };

    for r in 0..ranks {
        for class in [CTQ, VTQ] {
            eng.push(0.0, r, class, 0, EvKind::TryClaim);
        }
    }
    eng.run()?;

    let hit_rates: Vec<f64> = eng.caches.iter().map(|c| c.hit_rate()).collect();
    let per_rank = compute_metrics(ranks, &eng.trace, &eng.waits, &eng.records, &hit_rates);
    Ok(SimOutcome {
        per_rank,
        trace: eng.trace,
        commit_order: eng.commit_order,
        commit_time: eng.commit_time,
        start_exec: eng.start_exec,
    })
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: f64, rank: usize, class: usize, worker: usize, kind: EvKind) {
        self.seq += 1;
        self.heap.push(std::cmp::Reverse(Ev { time, rank, class, worker, seq: self.seq, kind }));
    }

    fn td(&self, rank: usize, local: usize) -> &TaskDescriptor {
        &self.sscs[rank].tds[local]
    }

    fn run(&mut self) -> Result<()> {
        while let Some(std::cmp::Reverse(ev)) = self.heap.pop() {
            match ev.kind.clone() {
                EvKind::TryClaim => self.try_claim(ev.time, ev.rank, ev.class),
                EvKind::ClaimDone { td, claim_end } => {
                    self.claim_done(ev.time, ev.rank, ev.class, ev.worker, td, claim_end)
                }
                EvKind::ExecDone { td, exec_start, wait_us } => {
                    self.exec_done(ev.time, ev.rank, ev.class, ev.worker, td, exec_start, wait_us)
                }
                EvKind::CounterInc { event } => self.counter_inc(ev.time, event),
            }
        }
        if self.committed != self.total {
            let mut blocked = Vec::new();
            for (r, qs) in self.queues.iter().enumerate() {
                for (ci, q) in qs.iter().enumerate() {
                    if q.head < q.tds.len() {
                        let local = q.tds[q.head];
                        let dep = self.td(r, local).dependent_event;
                        blocked.push(format!(
                            "rank {r} {} head td {} waiting on {:?}",
                            if ci == CTQ { "CTQ" } else { "VTQ" },
                            global_id(r, local),
                            dep
                        ));
                    }
                }
            }
            return Err(Error::Deadlock(format!(
                "{} of {} tasks committed; blocked: [{}]",
                self.committed,
                self.total,
                blocked.join("; ")
            )));
        }
        Ok(())
    }

    fn try_claim(&mut self, t: f64, rank: usize, class: usize) {
        let q = &self.queues[rank][class];
        if q.busy || q.head >= q.tds.len() {
            return;
        }
        let Some(&worker) = self.idle[rank][class].iter().next() else {
            return;
        };
        let td = q.tds[q.head];
        self.idle[rank][class].remove(&worker);
        self.queues[rank][class].busy = true;
        let claim_end = t + self.overhead;
        self.push(claim_end, rank, class, worker, EvKind::ClaimDone { td, claim_end });
    }

    fn claim_done(&mut self, t: f64, rank: usize, class: usize, worker: usize, td: usize, claim_end: f64) {
        let dep = self.td(rank, td).dependent_event;
        match dep {
            None => self.begin_exec(t, rank, class, worker, td, claim_end),
            Some(e) => {
                let c = self.counters.get_mut(&e).expect("counter checked at load");
                if c.value >= c.threshold {
                    self.begin_exec(t, rank, class, worker, td, claim_end);
                } else {
                    c.parked.push((rank, class, worker, td, claim_end));
                }
            }
        }
    }

    fn counter_inc(&mut self, t: f64, event: EventId) {
        let c = self.counters.get_mut(&event).expect("counter exists");
        c.value += 1;
        if c.value >= c.threshold && c.satisfied_at.is_none() {
            c.satisfied_at = Some(t);
            let parked = std::mem::take(&mut c.parked);
            for (rank, class, worker, td, claim_end) in parked {
                self.begin_exec(t, rank, class, worker, td, claim_end);
            }
        }
    }

    fn begin_exec(&mut self, t: f64, rank: usize, class: usize, worker: usize, td_local: usize, claim_end: f64) {
        let gid = global_id(rank, td_local);
        let wait_us = (t - claim_end).max(0.0);
        if wait_us > 0.0 {
            let comm_fed = self
                .td(rank, td_local)
                .dependent_event
                .and_then(|e| self.counters.get(&e))
                .map_or(false, |c| c.comm_fed);
            self.waits.push(WaitSpan {
                rank,
                class: class_of(class),
                start: claim_end,
                end: t,
                comm_fed,
            });
            self.trace.push(TraceEvent {
                timestamp_us: claim_end,
                duration_us: wait_us,
                rank,
                worker_class: class_of(class),
                worker_index: worker,
                td_id: gid,
                phase: Phase::Wait,
            });
        }
        // release the queue head
        self.queues[rank][class].busy = false;
        self.queues[rank][class].head += 1;
        self.push(t, rank, class, worker, EvKind::TryClaim);

        self.start_exec.insert(gid, t);
        let td = self.td(rank, td_local).clone();
        let (end, vis, phase) = if td.task_type == TaskType::PutMemSignal {
            let ci = td.comm.expect("put carries comm info");
            let xfer = ci.byte_count as f64 / self.cm.ingress_bytes_per_microsecond;
            let alpha = self.cm.comm_latency_alpha;
            let end = if ci.dst_rank == rank {
                t + alpha + xfer
            } else {
                let s = (t + alpha).max(self.links[ci.dst_rank]);
                self.links[ci.dst_rank] = s + xfer;
                s + xfer
            };
            (end, end, Phase::Comm)
        } else {
            let mut read_time = 0.0;
            for s in &td.inputs {
                if s.is_metadata() || s.volume() == 0 {
                    continue;
                }
                let bytes = s.volume() * 4;
                read_time += self
                    .caches[rank]
                    .access(s, bytes, false, self.cm.l2_read_time_per_byte, self.cm.hbm_read_time_per_byte)
                    .0;
            }
            let dur = self.cm.compute_time(&td) + read_time;
            for s in &td.outputs {
                if s.is_metadata() || s.volume() == 0 || s.is_remote() {
                    continue;
                }
                let bytes = s.volume() * 4;
                self.caches[rank].access(s, bytes, true, self.cm.l2_read_time_per_byte, self.cm.hbm_read_time_per_byte);
            }
            (t + dur, t + dur, Phase::Exec)
        };

        self.trace.push(TraceEvent {
            timestamp_us: t,
            duration_us: end - t,
            rank,
            worker_class: class_of(class),
            worker_index: worker,
            td_id: gid,
            phase,
        });

        let fire = if td.task_type == TaskType::PutMemSignal { vis + self.cm.signal_delay } else { end };
        for &e in &td.trigger_events {
            self.push(fire, rank, class, worker, EvKind::CounterInc { event: e });
        }
        self.push(end, rank, class, worker, EvKind::ExecDone { td: td_local, exec_start: t, wait_us });
    }

    fn exec_done(
        &mut self,
        t: f64,
        rank: usize,
        class: usize,
        worker: usize,
        td: usize,
        exec_start: f64,
        wait_us: f64,
    ) {
        let gid = global_id(rank, td);
        self.idle[rank][class].insert(worker);
        self.committed += 1;
        self.commit_order.push(gid);
        self.commit_time.insert(gid, t);
        self.records.insert(
            gid,
            TaskRecord {
                start_us: exec_start,
                end_us: t,
                worker_class: class_of(class),
                worker_index: worker,
                wait_us,
            },
        );
        self.push(t, rank, class, worker, EvKind::TryClaim);
    }
}
