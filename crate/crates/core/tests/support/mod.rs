//! Test-only helpers: an independent literal interpreter of the split
//! propagation rules, random graph/schedule generators, and a witness
//! checker for deadlock cycles.

use std::collections::{BTreeMap, BTreeSet};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;

use moeflow_core::events::EventCounter;
use moeflow_core::graph::{
    DTypeTag, Odg, OpId, OperatorKind, ShapeConfig, SplitSpec, TaskNumPolicy, TensorId,
};
use moeflow_core::sched::{build_queues, Ssc, SSC_VERSION};
use moeflow_core::taskgen::{global_id, CommInfo, QueueType, TaskDescriptor, TaskType, TdId};

// ---------------------------------------------------------------------------
// Literal split-propagation interpreter (independent of the library code)
// ---------------------------------------------------------------------------

pub struct LiteralResult {
    pub task_num: BTreeMap<OpId, usize>,
    pub labels: BTreeMap<TensorId, (i64, usize)>,
    pub fallbacks: BTreeSet<OpId>,
}

/// Own topological order: repeatedly emit the smallest-id operator whose
/// inputs are all either graph inputs or outputs of already-emitted ops.
fn literal_topo(g: &Odg) -> Vec<OpId> {
    let producer: BTreeMap<TensorId, OpId> = g
        .operators
        .values()
        .flat_map(|op| op.outputs.iter().map(move |&t| (t, op.id)))
        .collect();
    let mut done: BTreeSet<OpId> = BTreeSet::new();
    let mut order = Vec::new();
    while done.len() < g.operators.len() {
        let next = g
            .operators
            .values()
            .filter(|op| !done.contains(&op.id))
            .find(|op| {
                op.inputs
                    .iter()
                    .all(|t| producer.get(t).map_or(true, |p| done.contains(p)))
            })
            .expect("graph is acyclic")
            .id;
        done.insert(next);
        order.push(next);
    }
    order
}

/// Step-by-step transcription of the propagation rules:
///   1. every tensor starts unsplit: label (-1, 1);
///   2. visit operators topologically;
///   3. an operator is compatible when it declares no split inputs, or
///      when every non-ignored required input is either still unsplit or
///      already split along exactly the required dim;
///   4. compatible operators evaluate their task-count policy; others
///      fall back to a single unsplit task;
///   5. output j gets label (d_j, n) when n > 1 and its declared output
///      dim d_j >= 0, else (-1, n).
pub fn literal_propagate(g: &Odg, c: &ShapeConfig) -> LiteralResult {
    let mut labels: BTreeMap<TensorId, (i64, usize)> = BTreeMap::new();
    for &t in g.tensors.keys() {
        labels.insert(t, (-1, 1));
    }
    let mut task_num = BTreeMap::new();
    let mut fallbacks = BTreeSet::new();

    for op_id in literal_topo(g) {
        let op = &g.operators[&op_id];
        let mut ok = true;
        if let Some(required) = &op.spec.split_inputs {
            for &(i, d) in required {
                if op.spec.ignored_input_indices.contains(&i) {
                    continue;
                }
                match op.inputs.get(i).map(|t| labels[t]) {
                    Some((_, 1)) => {}                      // unsplit: free to split
                    Some((sd, _)) if sd == d as i64 => {}   // already split as required
                    _ => ok = false,
                }
            }
        }
        let n = if ok {
            match &op.spec.task_num_policy {
                TaskNumPolicy::Fixed(n) => *n,
                TaskNumPolicy::PerDestRank => c.ep_size,
                TaskNumPolicy::PerExpertBlock(block) => {
                    let rows = g.tensors[&op.inputs[0]].shape[0];
                    rows / block
                }
                TaskNumPolicy::InheritInputSplit => {
                    let (i, _) = op
                        .spec
                        .split_inputs
                        .as_ref()
                        .unwrap()
                        .iter()
                        .find(|(i, _)| !op.spec.ignored_input_indices.contains(i))
                        .unwrap();
                    labels[&op.inputs[*i]].1
                }
            }
        } else {
            fallbacks.insert(op_id);
            1
        };
        task_num.insert(op_id, n);
        for (j, &t) in op.outputs.iter().enumerate() {
            let d = op.spec.split_output_dims.get(j).copied().unwrap_or(-1);
            labels.insert(t, if n > 1 && d >= 0 { (d, n) } else { (-1, n) });
        }
    }
    LiteralResult { task_num, labels, fallbacks }
}

// ---------------------------------------------------------------------------
// Random operator graphs for propagation fuzzing
// ---------------------------------------------------------------------------

pub fn random_shape_config(rng: &mut StdRng) -> ShapeConfig {
    let ep = rng.gen_range(1..=4);
    ShapeConfig {
        seq_len: 8,
        microbatch: 1,
        hidden: 16,
        intermediate: 8,
        top_k: 1,
        total_experts: ep,
        ep_size: ep,
        local_experts: 1,
        rank_id: 0,
    }
}

const KINDS: [OperatorKind; 6] = [
    OperatorKind::Gmm1,
    OperatorKind::Gmm2,
    OperatorKind::Swiglu,
    OperatorKind::ElemAdd,
    OperatorKind::GmmActGrad,
    OperatorKind::SwigluGrad,
];

/// Random acyclic operator graph with a mix of policies, split
/// requirements, and ignored inputs, so both the compatible path and the
/// unsplit fallback are exercised.
pub fn random_odg(rng: &mut StdRng) -> (Odg, ShapeConfig) {
    let c = random_shape_config(rng);
    let mut g = Odg::new(c.clone());
    let rows_choices = [4usize, 8, 12, 16];
    let n_inputs = rng.gen_range(2..=4);
    let mut tensors: Vec<TensorId> = (0..n_inputs)
        .map(|i| {
            let rows = rows_choices[rng.gen_range(0..rows_choices.len())];
            let cols = if rng.gen_bool(0.5) { 4 } else { 8 };
            g.add_tensor(&format!("in{i}"), vec![rows, cols], DTypeTag::F32)
        })
        .collect();

    let n_ops = rng.gen_range(3..=10);
    for k in 0..n_ops {
        let n_in = rng.gen_range(1..=2.min(tensors.len()));
        let mut inputs = Vec::new();
        for _ in 0..n_in {
            inputs.push(tensors[rng.gen_range(0..tensors.len())]);
        }
        let rows = rows_choices[rng.gen_range(0..rows_choices.len())];
        let out = g.add_tensor(&format!("t{k}"), vec![rows, 4], DTypeTag::F32);

        // split requirements on a random subset of inputs
        let split_inputs: Option<Vec<(usize, usize)>> = if rng.gen_bool(0.7) {
            let mut reqs: Vec<(usize, usize)> = Vec::new();
            for i in 0..inputs.len() {
                if rng.gen_bool(0.8) {
                    reqs.push((i, rng.gen_range(0..2)));
                }
            }
            if reqs.is_empty() {
                None
            } else {
                Some(reqs)
            }
        } else {
            None
        };
        let ignored: BTreeSet<usize> = match &split_inputs {
            Some(reqs) if reqs.len() > 1 => reqs
                .iter()
                .skip(1) // keep the first requirement live
                .filter(|_| rng.gen_bool(0.25))
                .map(|&(i, _)| i)
                .collect(),
            _ => BTreeSet::new(),
        };

        let policy = match rng.gen_range(0..4) {
            0 => TaskNumPolicy::Fixed(rng.gen_range(1..=4)),
            1 => TaskNumPolicy::PerDestRank,
            2 => {
                let rows = g.tensor(inputs[0]).unwrap().shape[0];
                let divisors: Vec<usize> = (1..=rows).filter(|b| rows % b == 0).collect();
                TaskNumPolicy::PerExpertBlock(divisors[rng.gen_range(0..divisors.len())])
            }
            _ if split_inputs.is_some() => TaskNumPolicy::InheritInputSplit,
            _ => TaskNumPolicy::Fixed(2),
        };
        let split_output_dims = vec![[-1i64, 0, 1][rng.gen_range(0..3)]];
        let mut spec = match &split_inputs {
            Some(reqs) => SplitSpec::inherit(reqs.clone(), policy, split_output_dims),
            None => SplitSpec::origin(policy, split_output_dims),
        };
        if !ignored.is_empty() {
            spec = spec.with_ignored(ignored);
        }
        let kind = KINDS[rng.gen_range(0..KINDS.len())];
        g.add_operator(kind, inputs, vec![out], spec);
        tensors.push(out);
    }
    (g, c)
}

// ---------------------------------------------------------------------------
// Random schedulable SSC sets and constructed deadlock cycles
// ---------------------------------------------------------------------------

fn fuzz_td(task_type: TaskType, pos: usize, comm: Option<CommInfo>) -> TaskDescriptor {
    TaskDescriptor {
        task_type,
        queue_type: task_type.queue_type(),
        dependent_event: None,
        trigger_events: vec![],
        inputs: vec![],
        outputs: vec![],
        task_index: 0,
        task_split_num: 1,
        task_split_value: 1,
        tiling_data_position: pos,
        comm,
    }
}

/// Random multi-rank schedule whose union of queue-precedence and counter
/// edges is acyclic by construction: tasks are created along a global
/// order; queue order follows it and counter producers are always
/// earlier in it.
pub fn random_dag_sscs(rng: &mut StdRng) -> Vec<Ssc> {
    let ranks = rng.gen_range(1..=4);
    let per_rank = rng.gen_range(3..=12);
    // global creation order over (rank, local) pairs
    let mut slots: Vec<(usize, usize)> = (0..ranks)
        .flat_map(|r| (0..per_rank).map(move |i| (r, i)))
        .collect();
    slots.shuffle(rng);
    let order_of: BTreeMap<(usize, usize), usize> =
        slots.iter().enumerate().map(|(k, &s)| (s, k)).collect();

    let compute_types = [TaskType::Gmm1, TaskType::Swiglu, TaskType::ElemAdd, TaskType::Gmm2];
    let mut tds: Vec<Vec<TaskDescriptor>> = (0..ranks)
        .map(|_r| {
            (0..per_rank)
                .map(|i| {
                    if rng.gen_bool(0.2) && ranks > 1 {
                        let dst = rng.gen_range(0..ranks);
                        fuzz_td(
                            TaskType::PutMemSignal,
                            i,
                            Some(CommInfo { dst_rank: dst, dst_tensor_id: 0, byte_count: 256 }),
                        )
                    } else {
                        let t = compute_types[rng.gen_range(0..compute_types.len())];
                        fuzz_td(t, i, None)
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();

    // counter edges: waiters depend on strictly earlier tasks
    let mut events: Vec<Vec<EventCounter>> = vec![vec![]; ranks];
    let mut next_counter = vec![0usize; ranks];
    for &(r, i) in &slots {
        let my_order = order_of[&(r, i)];
        if my_order == 0 || !rng.gen_bool(0.5) {
            continue;
        }
        let n_prod = rng.gen_range(1..=3.min(my_order));
        let mut producers = BTreeSet::new();
        for _ in 0..n_prod {
            producers.insert(slots[rng.gen_range(0..my_order)]);
        }
        let eid = global_id(r, next_counter[r]);
        next_counter[r] += 1;
        events[r].push(EventCounter { id: eid, threshold: producers.len(), initial_value: 0 });
        tds[r][i].dependent_event = Some(eid);
        for (pr, pi) in producers {
            tds[pr][pi].trigger_events.push(eid);
        }
    }

    // queue order follows the global creation order
    (0..ranks)
        .map(|r| {
            let mut by_order: Vec<usize> = (0..per_rank).collect();
            by_order.sort_by_key(|&i| order_of[&(r, i)]);
            let mut ctq = Vec::new();
            let mut vtq = Vec::new();
            for &i in &by_order {
                match tds[r][i].queue_type {
                    QueueType::Ctq => ctq.push(global_id(r, i)),
                    QueueType::Vtq => vtq.push(global_id(r, i)),
                }
            }
            Ssc {
                version: SSC_VERSION,
                shape_bucket_key: "fuzz".into(),
                rank_id: r,
                tds: tds[r].clone(),
                events: events[r].clone(),
                queues: moeflow_core::sched::QueueSchedule { ctq, vtq },
                tiling_metadata: vec![],
            }
        })
        .collect()
}

/// A schedule whose counters form a dependency ring over `len` tasks
/// spread across queues (and across ranks when `ranks > 1`).
pub fn cyclic_sscs(ranks: usize, len: usize, seed_offset: usize) -> Vec<Ssc> {
    assert!(len >= 2);
    let compute_types = [TaskType::Gmm1, TaskType::Swiglu, TaskType::ElemAdd, TaskType::Gmm2];
    let mut tds: Vec<Vec<TaskDescriptor>> = vec![vec![]; ranks];
    let mut members = Vec::new();
    for k in 0..len {
        let r = (k + seed_offset) % ranks;
        let t = compute_types[(k + seed_offset) % compute_types.len()];
        let i = tds[r].len();
        tds[r].push(fuzz_td(t, i, None));
        members.push((r, i));
    }
    // counter c_k homed where its waiter lives; task k waits on c_k,
    // task (k+1) % len triggers it
    let mut events: Vec<Vec<EventCounter>> = vec![vec![]; ranks];
    for k in 0..len {
        let (wr, wi) = members[k];
        let (tr, ti) = members[(k + 1) % len];
        let eid = global_id(wr, events[wr].len());
        events[wr].push(EventCounter { id: eid, threshold: 1, initial_value: 0 });
        tds[wr][wi].dependent_event = Some(eid);
        tds[tr][ti].trigger_events.push(eid);
    }
    (0..ranks)
        .map(|r| Ssc {
            version: SSC_VERSION,
            shape_bucket_key: "cycle".into(),
            rank_id: r,
            queues: build_queues(r, &tds[r]),
            tds: tds[r].clone(),
            events: events[r].clone(),
            tiling_metadata: vec![],
        })
        .collect()
}

/// True when `cycle` is a closed walk in the union of queue-precedence
/// and counter (producer -> waiter) edges of `sscs`.
pub fn witness_is_real_cycle(sscs: &[Ssc], cycle: &[TdId]) -> bool {
    if cycle.len() < 3 || cycle.first() != cycle.last() {
        return false;
    }
    let mut edges: BTreeSet<(TdId, TdId)> = BTreeSet::new();
    let mut waiters: BTreeMap<usize, Vec<TdId>> = BTreeMap::new();
    for ssc in sscs {
        for q in [&ssc.queues.ctq, &ssc.queues.vtq] {
            for w in q.windows(2) {
                edges.insert((w[0], w[1]));
            }
        }
        for (i, td) in ssc.tds.iter().enumerate() {
            if let Some(e) = td.dependent_event {
                waiters.entry(e).or_default().push(global_id(ssc.rank_id, i));
            }
        }
    }
    for ssc in sscs {
        for (i, td) in ssc.tds.iter().enumerate() {
            let id = global_id(ssc.rank_id, i);
            for e in &td.trigger_events {
                for &w in waiters.get(e).into_iter().flatten() {
                    edges.insert((id, w));
                }
            }
        }
    }
    cycle.windows(2).all(|w| edges.contains(&(w[0], w[1])))
}

// ---------------------------------------------------------------------------
// Small combinatorics
// ---------------------------------------------------------------------------

/// All permutations of `items` (Heap's algorithm).
pub fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    fn rec<T: Clone>(v: &mut Vec<T>, k: usize, out: &mut Vec<Vec<T>>) {
        if k <= 1 {
            out.push(v.clone());
            return;
        }
        for i in 0..k {
            rec(v, k - 1, out);
            if k % 2 == 0 {
                v.swap(i, k - 1);
            } else {
                v.swap(0, k - 1);
            }
        }
    }
    let mut v = items.to_vec();
    let mut out = Vec::new();
    let k = v.len();
    rec(&mut v, k, &mut out);
    out
}
