//! Reusable benchmark scenarios: cache-interleave chains, overhead-only
//! workloads, uniform all-to-all rounds, and overlap configurations.
//! Shared by the CLI bench suites and the acceptance checks.

use crate::compile::{compile_chain, CompileOptions, Compiled};
use crate::error::Result;
use crate::sched::{build_queues, ratr_order, Ssc, SSC_VERSION};
use crate::sim::cost::CostModel;
use crate::taskgen::{CommInfo, QueueType, TaskDescriptor, TaskType};

/// SwiGLU+Add chain compiled with or without pair interleaving.
pub fn chain_scenario(m: usize, hidden_in: usize, block: usize, interleave: bool) -> Result<Compiled> {
    let opts = CompileOptions { interleave, ..CompileOptions::default() };
    compile_chain(m, hidden_in, Some(block), &opts)
}

/// Cost model for the cache benchmark: one vector worker (so queue order
/// is the access order) and an L2 sized to hold ~1/6 of the working set
/// at the largest M.
pub fn cache_cost_model(largest_m: usize, hidden_in: usize) -> CostModel {
    // bytes read per pass: h (m x hidden_in) + a + bias (m x hidden_in/2 each)
    let working_set = largest_m * hidden_in * 4 + largest_m * hidden_in * 4;
    CostModel {
        aiv_workers: 1,
        l2_capacity_bytes: working_set / 6,
        ..CostModel::default()
    }
}

/// Cost model for the overhead benchmark: near-zero compute so dispatch
/// overhead dominates.
pub fn overhead_cost_model() -> CostModel {
    let mut cm = CostModel::default();
    for kc in cm.compute.values_mut() {
        kc.fixed_us = 0.0;
        kc.per_element_us = 0.0;
    }
    cm.l2_read_time_per_byte = 0.0;
    cm.hbm_read_time_per_byte = 0.0;
    cm
}

/// Destination visit order for one source rank in an all-to-all round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DestOrder {
    /// Ascending destination rank (the naive order).
    Naive,
    /// Ring rotation (the RATR order).
    Ratr,
    /// Every rank visits destinations by the same relative offset
    /// permutation: rank r sends to (r + perm[i]) mod P at step i.
    RelativePerm(Vec<usize>),
}

/// One uniform all-to-all round: every rank puts `bytes` to every other
/// rank (self excluded), destinations visited per `order`. One vector
/// worker per rank serializes each rank's sends.
pub fn alltoall_sscs(p: usize, bytes: usize, order: &DestOrder) -> Vec<Ssc> {
    let mut sscs = Vec::with_capacity(p);
    for rank in 0..p {
        let dsts: Vec<usize> = match order {
            DestOrder::Naive => (0..p).filter(|&d| d != rank).collect(),
            DestOrder::Ratr => ratr_order(rank, p).into_iter().filter(|&d| d != rank).collect(),
            DestOrder::RelativePerm(perm) => {
                perm.iter().map(|&off| (rank + off) % p).filter(|&d| d != rank).collect()
            }
        };
        let tds: Vec<TaskDescriptor> = dsts
            .iter()
            .enumerate()
            .map(|(i, &d)| TaskDescriptor {
                task_type: TaskType::PutMemSignal,
                queue_type: QueueType::Vtq,
                dependent_event: None,
                trigger_events: vec![],
                inputs: vec![],
                outputs: vec![],
                task_index: i,
                task_split_num: dsts.len(),
                task_split_value: 1,
                tiling_data_position: 0,
                comm: Some(CommInfo { dst_rank: d, dst_tensor_id: 0, byte_count: bytes }),
            })
            .collect();
        let queues = build_queues(rank, &tds);
        sscs.push(Ssc {
            version: SSC_VERSION,
            shape_bucket_key: format!("a2a-p{p}"),
            rank_id: rank,
            tds,
            events: vec![],
            queues,
            tiling_metadata: vec!["op0:alltoall".into()],
        });
    }
    sscs
}

/// Cost model for the all-to-all benchmark: a single vector worker and
/// negligible per-task overhead so link contention dominates.
pub fn alltoall_cost_model() -> CostModel {
    CostModel { aiv_workers: 1, dispatch_overhead_static: 0.0, ..CostModel::default() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, DispatchMode, SimMode};

    #[test]
    fn chain_interleaving_changes_vtq_order() {
        let plain = chain_scenario(4096, 512, 1024, false).unwrap();
        let inter = chain_scenario(4096, 512, 1024, true).unwrap();
        assert_ne!(plain.ranks[0].ssc.queues.vtq, inter.ranks[0].ssc.queues.vtq);
        // interleaved queue alternates the pair
        let meta = &inter.ranks[0].meta;
        let kinds: Vec<_> = inter.ranks[0]
            .ssc
            .queues
            .vtq
            .iter()
            .map(|&id| meta[id % crate::taskgen::RANK_STRIDE].kind)
            .collect();
        for pair in kinds.chunks(2) {
            assert_eq!(pair[0], crate::graph::OperatorKind::Swiglu);
            assert_eq!(pair[1], crate::graph::OperatorKind::ElemAdd);
        }
    }

    #[test]
    fn alltoall_orders_agree_on_work_but_not_order() {
        for p in 2..=5 {
            let naive = alltoall_sscs(p, 1 << 16, &DestOrder::Naive);
            let ratr = alltoall_sscs(p, 1 << 16, &DestOrder::Ratr);
            let cm = alltoall_cost_model();
            let a = simulate(&naive, &cm, SimMode::Pipelined, DispatchMode::Static).unwrap();
            let b = simulate(&ratr, &cm, SimMode::Pipelined, DispatchMode::Static).unwrap();
            assert_eq!(a.commit_order.len(), p * (p - 1));
            assert_eq!(b.commit_order.len(), p * (p - 1));
            // ring order is never slower under the serial-ingress model
            assert!(b.makespan() <= a.makespan() + 1e-9, "p={p}");
            if p >= 3 {
                assert!(b.makespan() < a.makespan(), "p={p} expected strict win");
            }
        }
    }
}
