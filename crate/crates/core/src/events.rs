//! Tile-level dependency extraction and event-counter synthesis.
//!
//! Dependencies come from TD slice overlaps; each consumer gets one
//! dependent counter whose threshold equals its distinct-producer count,
//! with counters shared between consumers that have identical producer
//! sets. Counters are homed on the consumer's rank.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Odg;
use crate::taskgen::{global_id, rank_of_id, EventId, TaskDescriptor, TdId, TensorSlice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounter {
    pub id: EventId,
    pub threshold: usize,
    #[serde(default)]
    pub initial_value: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventTable {
    pub counters: BTreeMap<EventId, EventCounter>,
    pub waiter_of: BTreeMap<EventId, BTreeSet<TdId>>,
    pub triggered_by: BTreeMap<EventId, BTreeSet<TdId>>,
}

#[derive(Debug, Clone, Default)]
pub struct TileDependencyGraph {
    pub nodes: Vec<TdId>,
    /// producer -> consumer, labeled with the overlap rectangle.
    pub edges: BTreeMap<(TdId, TdId), TensorSlice>,
}

impl TileDependencyGraph {
    pub fn producers_of(&self) -> BTreeMap<TdId, BTreeSet<TdId>> {
        let mut m: BTreeMap<TdId, BTreeSet<TdId>> = BTreeMap::new();
        for &(p, c) in self.edges.keys() {
            m.entry(c).or_default().insert(p);
        }
        m
    }
}

fn overlap_rect(a: &TensorSlice, b: &TensorSlice) -> TensorSlice {
    let mut offsets = Vec::new();
    let mut extents = Vec::new();
    for d in 0..a.offsets.len() {
        let lo = a.offsets[d].max(b.offsets[d]);
        let hi = (a.offsets[d] + a.extents[d]).min(b.offsets[d] + b.extents[d]);
        offsets.push(lo);
        extents.push(hi.saturating_sub(lo));
    }
    TensorSlice { tensor_id: a.tensor_id, offsets, extents, flags: vec![] }
}

/// Build producer->consumer edges from slice intersections. Tensors are
/// identified per rank; a REMOTE_DST output lives on the comm
/// destination rank. Metadata and empty slices are skipped. A consumer
/// region on a tensor that has producing TDs must be exactly covered by
/// them (producers of one tensor are pairwise disjoint by construction).
pub fn build_tile_deps(
    ranked_tds: &[Vec<TaskDescriptor>],
    graphs: &[Odg],
) -> Result<TileDependencyGraph> {
    let mut producers: BTreeMap<(usize, usize), Vec<(TdId, TensorSlice)>> = BTreeMap::new();
    let mut nodes = Vec::new();
    for (rank, tds) in ranked_tds.iter().enumerate() {
        for (i, td) in tds.iter().enumerate() {
            let id = global_id(rank, i);
            nodes.push(id);
            for o in &td.outputs {
                if o.is_metadata() || o.volume() == 0 {
                    continue;
                }
                let home = if o.is_remote() {
                    td.comm
                        .map(|ci| ci.dst_rank)
                        .ok_or_else(|| Error::SliceError("remote slice without comm info".into()))?
                } else {
                    rank
                };
                producers.entry((home, o.tensor_id)).or_default().push((id, o.clone()));
            }
        }
    }

    let mut edges = BTreeMap::new();
    for (rank, tds) in ranked_tds.iter().enumerate() {
        for (i, td) in tds.iter().enumerate() {
            let id = global_id(rank, i);
            for s in &td.inputs {
                if s.is_metadata() || s.volume() == 0 {
                    continue;
                }
                let Some(ps) = producers.get(&(rank, s.tensor_id)) else {
                    // No producing TD anywhere: must be a graph input.
                    if graphs.get(rank).map_or(false, |g| g.is_graph_input(s.tensor_id)) {
                        continue;
                    }
                    return Err(Error::UncoveredRegion(format!(
                        "tensor {} on rank {rank} read by task {id} has no producers",
                        s.tensor_id
                    )));
                };
                let mut covered = 0usize;
                for (pid, pslice) in ps {
                    if *pid == id {
                        continue;
                    }
                    let v = pslice.intersection_volume(s);
                    if v > 0 {
                        covered += v;
                        edges.entry((*pid, id)).or_insert_with(|| overlap_rect(pslice, s));
                    }
                }
                if covered != s.volume() {
                    return Err(Error::UncoveredRegion(format!(
                        "task {id} reads {:?}+{:?} of tensor {} on rank {rank}: {covered}/{} \
                         elements produced",
                        s.offsets,
                        s.extents,
                        s.tensor_id,
                        s.volume()
                    )));
                }
            }
        }
    }
    Ok(TileDependencyGraph { nodes, edges })
}

/// Synthesize counters and write dependent_event / trigger_events onto
/// the TDs. Under strict_single_trigger, counters sharing a producer are
/// merged (union producers and waiters) until every producer triggers at
/// most one counter.
pub fn assign_events(
    ranked_tds: &mut [Vec<TaskDescriptor>],
    dep: &TileDependencyGraph,
    strict_single_trigger: bool,
) -> Result<EventTable> {
    for tds in ranked_tds.iter_mut() {
        for td in tds.iter_mut() {
            td.dependent_event = None;
            td.trigger_events.clear();
        }
    }

    let producers_of = dep.producers_of();
    // (consumer rank, producer set) -> waiters; dedup by exact equality.
    let mut groups: BTreeMap<(usize, Vec<TdId>), BTreeSet<TdId>> = BTreeMap::new();
    for (&c, ps) in &producers_of {
        let key = (rank_of_id(c), ps.iter().copied().collect::<Vec<_>>());
        groups.entry(key).or_default().insert(c);
    }

    // (producers, waiters) per provisional counter
    let mut sets: Vec<(BTreeSet<TdId>, BTreeSet<TdId>, usize)> = groups
        .into_iter()
        .map(|((rank, ps), waiters)| (ps.into_iter().collect(), waiters, rank))
        .collect();

    if strict_single_trigger {
        // merge to a fixpoint: no producer may trigger two counters
        loop {
            let mut by_producer: BTreeMap<TdId, usize> = BTreeMap::new();
            let mut merge: Option<(usize, usize)> = None;
            'outer: for (i, (ps, _, _)) in sets.iter().enumerate() {
                for &p in ps {
                    if let Some(&j) = by_producer.get(&p) {
                        merge = Some((j, i));
                        break 'outer;
                    }
                    by_producer.insert(p, i);
                }
            }
            match merge {
                None => break,
                Some((a, b)) => {
                    let (ps_b, ws_b, _) = sets.remove(b);
                    sets[a].0.extend(ps_b);
                    sets[a].1.extend(ws_b);
                    // merged counter homes on the smallest waiter's rank
                    sets[a].2 = sets[a].1.iter().map(|&w| rank_of_id(w)).min().unwrap_or(0);
                }
            }
        }
        for (ps, ws, _) in &sets {
            if let Some(&t) = ws.intersection(ps).next() {
                return Err(Error::SelfWait(t));
            }
        }
    }

    // Allocate per-rank counter ids deterministically: sets ordered by
    // their smallest waiter.
    sets.sort_by_key(|(_, ws, _)| *ws.iter().next().unwrap_or(&usize::MAX));
    let mut next_local: BTreeMap<usize, usize> = BTreeMap::new();
    let mut table = EventTable::default();
    let mut dependent: BTreeMap<TdId, EventId> = BTreeMap::new();
    let mut triggers: BTreeMap<TdId, Vec<EventId>> = BTreeMap::new();
    for (ps, ws, rank) in sets {
        let seq = next_local.entry(rank).or_insert(0);
        let id = global_id(rank, *seq);
        *seq += 1;
        table.counters.insert(id, EventCounter { id, threshold: ps.len(), initial_value: 0 });
        table.waiter_of.insert(id, ws.clone());
        table.triggered_by.insert(id, ps.clone());
        for w in ws {
            dependent.insert(w, id);
        }
        for p in ps {
            triggers.entry(p).or_default().push(id);
        }
    }

    for (rank, tds) in ranked_tds.iter_mut().enumerate() {
        for (i, td) in tds.iter_mut().enumerate() {
            let id = global_id(rank, i);
            td.dependent_event = dependent.get(&id).copied();
            if let Some(ts) = triggers.get(&id) {
                td.trigger_events = ts.clone();
            }
        }
    }
    Ok(table)
}

/// Static checker for the counter contract: every tile edge must be
/// covered by a counter path, and every threshold must equal its
/// producer count.
pub fn verify_thresholds(
    ranked_tds: &[Vec<TaskDescriptor>],
    table: &EventTable,
    dep: &TileDependencyGraph,
) -> Vec<String> {
    let mut violations = Vec::new();
    let td_of = |id: TdId| -> Option<&TaskDescriptor> {
        ranked_tds.get(rank_of_id(id)).and_then(|v| v.get(id % crate::taskgen::RANK_STRIDE))
    };

    for (c, counter) in &table.counters {
        let n = table.triggered_by.get(c).map_or(0, |s| s.len());
        if counter.threshold != n {
            violations.push(format!("threshold({c}) = {} != producer count {n}", counter.threshold));
        }
    }
    for &(p, c) in dep.edges.keys() {
        let covered = td_of(p).map_or(false, |ptd| {
            ptd.trigger_events.iter().any(|e| {
                table.waiter_of.get(e).map_or(false, |ws| ws.contains(&c))
            })
        });
        if !covered {
            violations.push(format!("edge ({p} -> {c}) has no counter path"));
        }
    }
    for (rank, tds) in ranked_tds.iter().enumerate() {
        for (i, td) in tds.iter().enumerate() {
            let id = global_id(rank, i);
            if let Some(e) = td.dependent_event {
                if !table.counters.contains_key(&e) {
                    violations.push(format!("task {id} waits on unknown counter {e}"));
                }
                if td.trigger_events.contains(&e) {
                    violations.push(format!("task {id} waits on a counter it triggers"));
                }
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::build_forward_moe_ffn;
    use crate::graph::ShapeConfig;
    use crate::routing::{balanced_plan, PlanLayout};
    use crate::split::{annotate, propagate};
    use crate::taskgen::{fill_config, GenContext, TaskType};

    fn cfg(ep: usize, experts: usize, top_k: usize, rank_id: usize) -> ShapeConfig {
        ShapeConfig {
            seq_len: 4,
            microbatch: 2,
            hidden: 16,
            intermediate: 8,
            top_k,
            total_experts: experts,
            ep_size: ep,
            local_experts: experts / ep,
            rank_id,
        }
    }

    /// Lower the forward graph on every rank (balanced routing).
    fn forward_tds(ep: usize, experts: usize, top_k: usize) -> (Vec<Vec<TaskDescriptor>>, Vec<Odg>) {
        let base = cfg(ep, experts, top_k, 0);
        let plan = balanced_plan(&base).unwrap();
        let layout = PlanLayout::build(&plan).unwrap();
        let mut all = Vec::new();
        let mut graphs = Vec::new();
        for r in 0..ep {
            let c = base.with_rank(r);
            let g = build_forward_moe_ffn(&c).unwrap();
            let g = annotate(&g, &propagate(&g, &c).unwrap()).unwrap();
            let ctx = GenContext { plan: Some((&plan, &layout)) };
            let mut tds = Vec::new();
            for op_id in crate::graph::topological_sort(&g).unwrap() {
                for (td, _) in fill_config(g.op(op_id).unwrap(), &g, &c, &ctx).unwrap() {
                    tds.push(td);
                }
            }
            all.push(tds);
            graphs.push(g);
        }
        (all, graphs)
    }

    #[test]
    fn gmm_waits_on_all_incoming_dispatch_tiles() {
        let ep = 4;
        let (mut tds, graphs) = forward_tds(ep, 8, 2);
        let dep = build_tile_deps(&tds, &graphs).unwrap();
        let table = assign_events(&mut tds, &dep, false).unwrap();
        assert!(verify_thresholds(&tds, &table, &dep).is_empty());

        // each GMM1 tile reads one expert block fed by puts from all ranks
        let producers = dep.producers_of();
        for (rank, rank_tds) in tds.iter().enumerate() {
            for (i, td) in rank_tds.iter().enumerate() {
                if td.task_type == TaskType::Gmm1 {
                    let id = global_id(rank, i);
                    let ps = &producers[&id];
                    assert_eq!(ps.len(), ep, "GMM1 tile should wait on {ep} dispatch puts");
                    let e = td.dependent_event.unwrap();
                    assert_eq!(table.counters[&e].threshold, ep);
                }
            }
        }
    }

    #[test]
    fn shared_counter_for_identical_producer_sets() {
        let (mut tds, graphs) = forward_tds(2, 4, 2);
        let dep = build_tile_deps(&tds, &graphs).unwrap();
        let table = assign_events(&mut tds, &dep, false).unwrap();
        // SwiGLU tile e depends solely on GMM1 tile e; GMM2 on SwiGLU;
        // a Combine put and GmmW-style consumers with the same producer
        // share counters. Check dedup: waiters with equal producer sets
        // share one id.
        let producers = dep.producers_of();
        let mut by_set: BTreeMap<Vec<TdId>, BTreeSet<EventId>> = BTreeMap::new();
        for (rank, rank_tds) in tds.iter().enumerate() {
            for (i, td) in rank_tds.iter().enumerate() {
                let id = global_id(rank, i);
                if let (Some(e), Some(ps)) = (td.dependent_event, producers.get(&id)) {
                    let key = ps.iter().copied().collect::<Vec<_>>();
                    by_set.entry(key).or_default().insert(e);
                }
            }
        }
        // same producer set + same rank home -> exactly one counter; at
        // most ep_size counters per set overall
        for (_, ids) in by_set {
            assert!(ids.len() <= 2);
        }
        assert!(verify_thresholds(&tds, &table, &dep).is_empty());
    }

    #[test]
    fn source_tasks_have_no_dependent_event() {
        let (mut tds, graphs) = forward_tds(2, 4, 1);
        let dep = build_tile_deps(&tds, &graphs).unwrap();
        assign_events(&mut tds, &dep, false).unwrap();
        // dispatch puts read only the graph-input token tensor
        for rank_tds in &tds {
            let first_put =
                rank_tds.iter().find(|td| td.task_type == TaskType::PutMemSignal).unwrap();
            assert!(first_put.dependent_event.is_none());
        }
    }

    #[test]
    fn corrupted_threshold_is_detected() {
        let (mut tds, graphs) = forward_tds(2, 4, 2);
        let dep = build_tile_deps(&tds, &graphs).unwrap();
        let mut table = assign_events(&mut tds, &dep, false).unwrap();
        let k = *table.counters.keys().next().unwrap();
        table.counters.get_mut(&k).unwrap().threshold += 1;
        let v = verify_thresholds(&tds, &table, &dep);
        assert!(v.iter().any(|s| s.contains("threshold")));
    }

    #[test]
    fn dropped_edge_is_detected() {
        let (mut tds, graphs) = forward_tds(2, 4, 2);
        let dep = build_tile_deps(&tds, &graphs).unwrap();
        let table = assign_events(&mut tds, &dep, false).unwrap();
        // drop one producer's trigger list
        'outer: for rank_tds in tds.iter_mut() {
            for td in rank_tds.iter_mut() {
                if !td.trigger_events.is_empty() {
                    td.trigger_events.clear();
                    break 'outer;
                }
            }
        }
        let v = verify_thresholds(&tds, &table, &dep);
        assert!(v.iter().any(|s| s.contains("no counter path")));
    }

    #[test]
    fn strict_mode_merges_counters_and_preserves_edges() {
        let (mut tds, graphs) = forward_tds(4, 8, 2);
        let dep = build_tile_deps(&tds, &graphs).unwrap();
        let table = assign_events(&mut tds, &dep, true).unwrap();
        assert!(verify_thresholds(&tds, &table, &dep).is_empty());
        // single-trigger property: every producer triggers at most one counter
        for rank_tds in &tds {
            for td in rank_tds {
                assert!(td.trigger_events.len() <= 1);
            }
        }
        // thresholds still equal producer counts
        for (c, counter) in &table.counters {
            assert_eq!(counter.threshold, table.triggered_by[c].len());
        }
    }

    #[test]
    fn uncovered_region_is_reported() {
        let (mut tds, graphs) = forward_tds(2, 4, 2);
        // remove one dispatch put: its destination block becomes uncovered
        let pos = tds[0].iter().position(|td| td.task_type == TaskType::PutMemSignal).unwrap();
        tds[0].remove(pos);
        assert!(matches!(build_tile_deps(&tds, &graphs), Err(Error::UncoveredRegion(_))));
    }
}
