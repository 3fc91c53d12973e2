//! End-to-end compilation: per-rank graphs -> split propagation -> task
//! generation -> event synthesis -> queue scheduling -> SSC.

use serde::{Deserialize, Serialize};

use crate::builders::{build_backward_moe_ffn_with_rows, build_forward_moe_ffn_with_rows};
use crate::error::{Error, Result};
use crate::events::{assign_events, build_tile_deps, verify_thresholds, EventTable, TileDependencyGraph};
use crate::graph::{topological_sort, Odg, OpId, ShapeConfig};
use crate::routing::{PlanLayout, RoutingPlan};
use crate::sched::{
    apply_gmm_interleaving, apply_ratr, build_queues, validate_schedule, Ssc, SSC_VERSION,
};
use crate::split::{annotate, propagate};
use crate::taskgen::{fill_config, GenContext, TaskDescriptor, TdMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOptions {
    pub strict_single_trigger: bool,
    pub ratr: bool,
    pub ratr_combine: bool,
    pub interleave: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { strict_single_trigger: false, ratr: true, ratr_combine: true, interleave: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MoeGraphKind {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RankReport {
    pub rank_id: usize,
    pub task_count: usize,
    pub event_count: usize,
    pub ctq_len: usize,
    pub vtq_len: usize,
    pub fallback_ops: Vec<OpId>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CompileReport {
    pub ranks: Vec<RankReport>,
}

#[derive(Debug, Clone)]
pub struct CompiledRank {
    pub ssc: Ssc,
    pub meta: Vec<TdMeta>,
    pub graph: Odg,
    pub config: ShapeConfig,
}

#[derive(Debug, Clone)]
pub struct Compiled {
    pub ranks: Vec<CompiledRank>,
    pub dep: TileDependencyGraph,
    pub table: EventTable,
    pub report: CompileReport,
}

impl Compiled {
    pub fn sscs(&self) -> Vec<Ssc> {
        self.ranks.iter().map(|r| r.ssc.clone()).collect()
    }
}

/// Compile a set of per-rank annotated-or-raw graphs (graphs[r] must
/// carry rank_id r in its shape_config). `plan` is required when any
/// graph contains communication operators.
pub fn compile_graphs(
    graphs: Vec<Odg>,
    plan: Option<&RoutingPlan>,
    bucket_key: &str,
    opts: &CompileOptions,
) -> Result<Compiled> {
    let layout = plan.map(PlanLayout::build).transpose()?;
    let mut annotated = Vec::new();
    let mut all_tds: Vec<Vec<TaskDescriptor>> = Vec::new();
    let mut all_meta: Vec<Vec<TdMeta>> = Vec::new();
    let mut fallbacks: Vec<Vec<OpId>> = Vec::new();

    for (r, g) in graphs.into_iter().enumerate() {
        let c = g.shape_config.clone();
        if c.rank_id != r {
            return Err(Error::ConfigError(format!(
                "graph {r} carries rank_id {}; expected {r}",
                c.rank_id
            )));
        }
        let res = propagate(&g, &c)?;
        fallbacks.push(res.fallback_ops.iter().copied().collect());
        let ag = annotate(&g, &res)?;
        let ctx = GenContext { plan: plan.zip(layout.as_ref()) };
        let mut tds = Vec::new();
        let mut meta = Vec::new();
        for op_id in topological_sort(&ag)? {
            for (td, m) in fill_config(ag.op(op_id)?, &ag, &c, &ctx)? {
                tds.push(td);
                meta.push(m);
            }
        }
        all_tds.push(tds);
        all_meta.push(meta);
        annotated.push(ag);
    }

    let dep = build_tile_deps(&all_tds, &annotated)?;
    let table = assign_events(&mut all_tds, &dep, opts.strict_single_trigger)?;
    let violations = verify_thresholds(&all_tds, &table, &dep);
    if !violations.is_empty() {
        return Err(Error::InvalidGraph(format!(
            "event synthesis produced inconsistent thresholds: {}",
            violations.join("; ")
        )));
    }

    let mut ranks = Vec::new();
    let mut report = CompileReport::default();
    for (r, (tds, meta)) in all_tds.into_iter().zip(all_meta).enumerate() {
        let g = &annotated[r];
        let c = g.shape_config.clone();
        let mut queues = build_queues(r, &tds);
        if opts.ratr {
            queues = apply_ratr(&queues, r, c.ep_size, opts.ratr_combine, &tds, &meta);
        }
        if opts.interleave {
            queues = apply_gmm_interleaving(&queues, &tds, &meta).0;
        }
        let events = table
            .counters
            .values()
            .filter(|e| crate::taskgen::rank_of_id(e.id) == r)
            .copied()
            .collect::<Vec<_>>();
        let tiling_metadata = g
            .operators
            .values()
            .map(|op| format!("op{}:{:?}", op.id, op.kind))
            .collect::<Vec<_>>();
        report.ranks.push(RankReport {
            rank_id: r,
            task_count: tds.len(),
            event_count: events.len(),
            ctq_len: queues.ctq.len(),
            vtq_len: queues.vtq.len(),
            fallback_ops: fallbacks[r].clone(),
        });
        ranks.push(CompiledRank {
            ssc: Ssc {
                version: SSC_VERSION,
                shape_bucket_key: bucket_key.to_string(),
                rank_id: r,
                tds,
                events,
                queues,
                tiling_metadata,
            },
            meta,
            graph: annotated[r].clone(),
            config: c,
        });
    }

    let compiled = Compiled { ranks, dep, table, report };
    if let Err(w) = validate_schedule(&compiled.sscs()) {
        return Err(Error::Deadlock(format!("compiled schedule has a cycle: {:?}", w.cycle)));
    }
    Ok(compiled)
}

/// Compile the forward or backward MoE-FFN for every rank of a plan.
pub fn compile_moe(
    kind: MoeGraphKind,
    base: &ShapeConfig,
    plan: &RoutingPlan,
    opts: &CompileOptions,
) -> Result<Compiled> {
    base.validate()?;
    if !plan.matches(base) {
        return Err(Error::RoutingError("plan does not match shape config".into()));
    }
    let layout = PlanLayout::build(plan)?;
    let mut graphs = Vec::new();
    for r in 0..base.ep_size {
        let c = base.with_rank(r);
        let rows = layout.recv_rows[r];
        let g = match kind {
            MoeGraphKind::Forward => build_forward_moe_ffn_with_rows(&c, rows)?,
            MoeGraphKind::Backward => build_backward_moe_ffn_with_rows(&c, rows)?,
        };
        graphs.push(g);
    }
    let key = format!(
        "{}-ep{}-t{}-h{}-i{}-e{}-k{}",
        match kind {
            MoeGraphKind::Forward => "fwd",
            MoeGraphKind::Backward => "bwd",
        },
        base.ep_size,
        base.tokens(),
        base.hidden,
        base.intermediate,
        base.total_experts,
        base.top_k
    );
    compile_graphs(graphs, Some(plan), &key, opts)
}

/// Compile the single-rank SwiGLU+Add microbenchmark chain.
pub fn compile_chain(
    m: usize,
    hidden_in: usize,
    block: Option<usize>,
    opts: &CompileOptions,
) -> Result<Compiled> {
    let g = match block {
        Some(b) => crate::builders::build_swiglu_add_chain_with_block(m, hidden_in, b)?,
        None => crate::builders::build_swiglu_add_chain(m, hidden_in)?,
    };
    let key = format!("chain-m{m}-h{hidden_in}");
    compile_graphs(vec![g], None, &key, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::balanced_plan;
    use crate::taskgen::TaskType;

    fn cfg(ep: usize, experts: usize, top_k: usize) -> ShapeConfig {
        ShapeConfig {
            seq_len: 4,
            microbatch: 2,
            hidden: 16,
            intermediate: 8,
            top_k,
            total_experts: experts,
            ep_size: ep,
            local_experts: experts / ep,
            rank_id: 0,
        }
    }

    #[test]
    fn forward_compiles_all_ranks() {
        let c = cfg(4, 8, 2);
        let plan = balanced_plan(&c).unwrap();
        let compiled = compile_moe(MoeGraphKind::Forward, &c, &plan, &Default::default()).unwrap();
        assert_eq!(compiled.ranks.len(), 4);
        for r in &compiled.ranks {
            assert!(r.ssc.queues.ctq.len() > 0);
            assert!(r.ssc.queues.vtq.len() > 0);
            // vtq begins with dispatch puts, ctq begins with GMM1
            let local = |id: usize| id % crate::taskgen::RANK_STRIDE;
            assert_eq!(r.ssc.tds[local(r.ssc.queues.vtq[0])].task_type, TaskType::PutMemSignal);
            assert_eq!(r.ssc.tds[local(r.ssc.queues.ctq[0])].task_type, TaskType::Gmm1);
        }
    }

    #[test]
    fn compile_is_deterministic() {
        let c = cfg(2, 4, 2);
        let plan = balanced_plan(&c).unwrap();
        let a = compile_moe(MoeGraphKind::Forward, &c, &plan, &Default::default()).unwrap();
        let b = compile_moe(MoeGraphKind::Forward, &c, &plan, &Default::default()).unwrap();
        for (x, y) in a.ranks.iter().zip(&b.ranks) {
            assert_eq!(
                crate::sched::serialize_ssc(&x.ssc).unwrap(),
                crate::sched::serialize_ssc(&y.ssc).unwrap()
            );
        }
    }

    #[test]
    fn ratr_changes_only_comm_group_order() {
        let c = cfg(4, 8, 2);
        let plan = balanced_plan(&c).unwrap();
        let on = compile_moe(MoeGraphKind::Forward, &c, &plan, &Default::default()).unwrap();
        let off = compile_moe(
            MoeGraphKind::Forward,
            &c,
            &plan,
            &CompileOptions { ratr: false, ..Default::default() },
        )
        .unwrap();
        for (a, b) in on.ranks.iter().zip(&off.ranks) {
            assert_eq!(a.ssc.queues.ctq, b.ssc.queues.ctq);
            assert_eq!(a.ssc.tds, b.ssc.tds);
            let mut sa = a.ssc.queues.vtq.clone();
            let mut sb = b.ssc.queues.vtq.clone();
            sa.sort();
            sb.sort();
            assert_eq!(sa, sb, "same multiset of vtq tasks");
            // for the last rank the ring order coincides with ascending
            // destination order, so the queues match there
            if a.ssc.rank_id != c.ep_size - 1 {
                assert_ne!(a.ssc.queues.vtq, b.ssc.queues.vtq, "order differs for rank {}", a.ssc.rank_id);
            }
        }
    }

    #[test]
    fn backward_ctq_is_interleaved_by_expert() {
        let c = cfg(2, 8, 2);
        let plan = balanced_plan(&c).unwrap();
        let compiled = compile_moe(MoeGraphKind::Backward, &c, &plan, &Default::default()).unwrap();
        let r = &compiled.ranks[0];
        let local = |id: usize| id % crate::taskgen::RANK_STRIDE;
        let kinds: Vec<_> =
            r.ssc.queues.ctq.iter().map(|&id| r.meta[local(id)].kind).collect();
        use crate::graph::OperatorKind as K;
        let e = c.local_experts;
        // first pair segment: ActGrad, W2Grad alternating
        for i in 0..e {
            assert_eq!(kinds[2 * i], K::GmmActGrad);
            assert_eq!(kinds[2 * i + 1], K::GmmW2Grad);
        }
        // experts paired up
        let experts: Vec<_> =
            r.ssc.queues.ctq.iter().map(|&id| r.meta[local(id)].expert.unwrap()).collect();
        for i in 0..e {
            assert_eq!(experts[2 * i], experts[2 * i + 1]);
        }
    }

    #[test]
    fn chain_compiles_without_plan() {
        let compiled = compile_chain(2048, 4096, Some(1024), &Default::default()).unwrap();
        assert_eq!(compiled.ranks.len(), 1);
        let ssc = &compiled.ranks[0].ssc;
        assert!(ssc.queues.ctq.is_empty());
        assert_eq!(ssc.queues.vtq.len(), 4);
    }

    #[test]
    fn interleaving_is_noop_on_forward() {
        let c = cfg(2, 4, 2);
        let plan = balanced_plan(&c).unwrap();
        let compiled = compile_moe(MoeGraphKind::Forward, &c, &plan, &Default::default()).unwrap();
        let r = &compiled.ranks[0];
        let (q2, applied) = apply_gmm_interleaving(&r.ssc.queues, &r.ssc.tds, &r.meta);
        assert!(!applied);
        assert_eq!(q2, r.ssc.queues);
    }
}
