//! Queue construction, rank-aware task reordering (RATR), cache-guided
//! GMM interleaving, schedule validation, and SSC serialization.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventCounter;
use crate::graph::OperatorKind;
use crate::taskgen::{global_id, EventId, QueueType, TaskDescriptor, TaskType, TdId, TdMeta};

pub const SSC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSchedule {
    pub ctq: Vec<TdId>,
    pub vtq: Vec<TdId>,
}

/// Static Schedule Configuration for one rank. `events` holds the
/// counters homed on this rank; waiter/trigger relations live in the
/// per-TD fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ssc {
    pub version: u32,
    pub shape_bucket_key: String,
    pub rank_id: usize,
    pub tds: Vec<TaskDescriptor>,
    pub events: Vec<EventCounter>,
    pub queues: QueueSchedule,
    pub tiling_metadata: Vec<String>,
}

/// Baseline queue order: TD generation order (topological operator
/// order, then ascending task index), split by queue type.
pub fn build_queues(rank: usize, tds: &[TaskDescriptor]) -> QueueSchedule {
    let mut ctq = Vec::new();
    let mut vtq = Vec::new();
    for (i, td) in tds.iter().enumerate() {
        let id = global_id(rank, i);
        match td.queue_type {
            QueueType::Ctq => ctq.push(id),
            QueueType::Vtq => vtq.push(id),
        }
    }
    QueueSchedule { ctq, vtq }
}

/// Ring position of a destination rank as seen from `rank`: neighbors
/// first ((rank+1) mod P, (rank+2) mod P, ...), the local rank last.
pub fn ratr_key(rank: usize, dst: usize, p: usize) -> usize {
    if dst == rank {
        p - 1
    } else {
        (dst + p - rank - 1) % p
    }
}

/// Destination visit order for one source rank.
pub fn ratr_order(rank: usize, p: usize) -> Vec<usize> {
    let mut dsts: Vec<usize> = (0..p).collect();
    dsts.sort_by_key(|&d| ratr_key(rank, d, p));
    dsts
}

/// Reorder each contiguous communication phase of the VTQ so destination
/// groups follow the ring order. Non-communication tasks and cross-phase
/// order are unchanged; order within one destination group is preserved.
/// Combine-phase puts are reordered only when `ratr_combine` is set.
pub fn apply_ratr(
    q: &QueueSchedule,
    rank: usize,
    p: usize,
    ratr_combine: bool,
    tds: &[TaskDescriptor],
    meta: &[TdMeta],
) -> QueueSchedule {
    let local = |id: TdId| id % crate::taskgen::RANK_STRIDE;
    let mut vtq = q.vtq.clone();
    let mut i = 0;
    while i < vtq.len() {
        let td = &tds[local(vtq[i])];
        let m = &meta[local(vtq[i])];
        let is_phase_start = td.task_type == TaskType::PutMemSignal;
        if !is_phase_start {
            i += 1;
            continue;
        }
        let op = m.op_id;
        let mut j = i;
        while j < vtq.len() {
            let t = &tds[local(vtq[j])];
            if t.task_type == TaskType::PutMemSignal && meta[local(vtq[j])].op_id == op {
                j += 1;
            } else {
                break;
            }
        }
        let combine_phase = m.kind.is_combine_like();
        if !combine_phase || ratr_combine {
            vtq[i..j].sort_by_key(|&id| ratr_key(rank, tds[local(id)].comm.unwrap().dst_rank, p));
        }
        i = j;
    }
    QueueSchedule { ctq: q.ctq.clone(), vtq }
}

/// Interleave one (producer, consumer) operator pair by tile key within
/// the union span of its queue positions: [A(k0), B(k0), A(k1), ...].
fn interleave_pair(
    queue: &mut [TdId],
    tds: &[TaskDescriptor],
    meta: &[TdMeta],
    ka: OperatorKind,
    kb: OperatorKind,
) -> bool {
    let local = |id: TdId| id % crate::taskgen::RANK_STRIDE;
    let pos: Vec<usize> = (0..queue.len())
        .filter(|&ix| {
            let k = meta[local(queue[ix])].kind;
            k == ka || k == kb
        })
        .collect();
    let mut a: Vec<TdId> =
        pos.iter().map(|&ix| queue[ix]).filter(|&id| meta[local(id)].kind == ka).collect();
    let mut b: Vec<TdId> =
        pos.iter().map(|&ix| queue[ix]).filter(|&id| meta[local(id)].kind == kb).collect();
    if a.is_empty() || a.len() != b.len() {
        return false;
    }
    // tile key: expert index for ragged MoE tiles, task index otherwise
    let key = |id: TdId| {
        let m = &meta[local(id)];
        m.expert.unwrap_or(tds[local(id)].task_index)
    };
    a.sort_by_key(|&id| key(id));
    b.sort_by_key(|&id| key(id));
    let interleaved: Vec<TdId> = a.into_iter().zip(b).flat_map(|(x, y)| [x, y]).collect();
    for (slot, id) in pos.into_iter().zip(interleaved) {
        queue[slot] = id;
    }
    true
}

/// Cache-guided interleaving: alternate independent same-queue operator
/// pairs by tile so the consumer reads the producer's tile while it is
/// still cache-resident. Applies to the two backward GMM pairs (CTQ) and
/// the SwiGLU+Add pair (VTQ). Returns the (possibly unchanged) queue and
/// whether any transform applied.
pub fn apply_gmm_interleaving(
    q: &QueueSchedule,
    tds: &[TaskDescriptor],
    meta: &[TdMeta],
) -> (QueueSchedule, bool) {
    let mut ctq = q.ctq.clone();
    let mut vtq = q.vtq.clone();
    let mut applied = false;
    for (ka, kb) in [
        (OperatorKind::GmmActGrad, OperatorKind::GmmW2Grad),
        (OperatorKind::GmmGateGrad, OperatorKind::GmmW1Grad),
    ] {
        applied |= interleave_pair(&mut ctq, tds, meta, ka, kb);
    }
    applied |= interleave_pair(&mut vtq, tds, meta, OperatorKind::Swiglu, OperatorKind::ElemAdd);
    (QueueSchedule { ctq, vtq }, applied)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadlockWitness {
    pub cycle: Vec<TdId>,
}

/// Union of intra-queue precedence edges and event (producer -> waiter)
/// edges over all ranks must be acyclic.
pub fn validate_schedule(sscs: &[Ssc]) -> std::result::Result<(), DeadlockWitness> {
    let mut succ: BTreeMap<TdId, BTreeSet<TdId>> = BTreeMap::new();
    let mut nodes: BTreeSet<TdId> = BTreeSet::new();
    let mut waiters: BTreeMap<EventId, Vec<TdId>> = BTreeMap::new();

    for ssc in sscs {
        for q in [&ssc.queues.ctq, &ssc.queues.vtq] {
            for w in q.windows(2) {
                succ.entry(w[0]).or_default().insert(w[1]);
            }
            nodes.extend(q.iter().copied());
        }
        for (i, td) in ssc.tds.iter().enumerate() {
            let id = global_id(ssc.rank_id, i);
            nodes.insert(id);
            if let Some(e) = td.dependent_event {
                waiters.entry(e).or_default().push(id);
            }
        }
    }
    for ssc in sscs {
        for (i, td) in ssc.tds.iter().enumerate() {
            let id = global_id(ssc.rank_id, i);
            for e in &td.trigger_events {
                for &w in waiters.get(e).map(|v| v.as_slice()).unwrap_or(&[]) {
                    if w != id {
                        succ.entry(id).or_default().insert(w);
                    }
                }
            }
        }
    }

    // Kahn peel; leftover nodes contain a cycle.
    let mut indeg: BTreeMap<TdId, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    for (_, ss) in &succ {
        for &s in ss {
            *indeg.entry(s).or_insert(0) += 1;
        }
    }
    let mut queue: VecDeque<TdId> =
        indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
    let mut done = 0usize;
    while let Some(n) = queue.pop_front() {
        done += 1;
        if let Some(ss) = succ.get(&n) {
            for &s in ss {
                let d = indeg.get_mut(&s).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push_back(s);
                }
            }
        }
    }
    if done == nodes.len() {
        return Ok(());
    }
    let residual: BTreeSet<TdId> =
        indeg.iter().filter(|(_, &d)| d > 0).map(|(&n, _)| n).collect();
    Err(DeadlockWitness { cycle: shortest_cycle(&residual, &succ) })
}

fn shortest_cycle(nodes: &BTreeSet<TdId>, succ: &BTreeMap<TdId, BTreeSet<TdId>>) -> Vec<TdId> {
    let mut best: Option<Vec<TdId>> = None;
    for &start in nodes {
        let mut parent: BTreeMap<TdId, TdId> = BTreeMap::new();
        let mut visited = BTreeSet::new();
        visited.insert(start);
        let mut q = VecDeque::new();
        q.push_back(start);
        let mut hit = None;
        'bfs: while let Some(u) = q.pop_front() {
            for &v in succ.get(&u).into_iter().flatten() {
                if !nodes.contains(&v) {
                    continue;
                }
                if v == start {
                    hit = Some(u);
                    break 'bfs;
                }
                if visited.insert(v) {
                    parent.insert(v, u);
                    q.push_back(v);
                }
            }
        }
        if let Some(mut u) = hit {
            let mut rev = Vec::new();
            while u != start {
                rev.push(u);
                u = parent[&u];
            }
            rev.reverse();
            let mut path = vec![start];
            path.extend(rev);
            path.push(start);
            if best.as_ref().map_or(true, |b| path.len() < b.len()) {
                best = Some(path);
            }
        }
    }
    best.unwrap_or_default()
}

pub fn serialize_ssc(ssc: &Ssc) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(ssc).map_err(|e| Error::ParseError(e.to_string()))
}

pub fn deserialize_ssc(bytes: &[u8]) -> Result<Ssc> {
    let ssc: Ssc =
        serde_json::from_slice(bytes).map_err(|e| Error::ParseError(e.to_string()))?;
    if ssc.version != SSC_VERSION {
        return Err(Error::VersionError(ssc.version));
    }
    Ok(ssc)
}
