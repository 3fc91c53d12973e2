//! Split propagation: topological traversal applying each operator's
//! SplitSpec, computing task counts and writing split labels onto output
//! tensors, with unsplit fallback on incompatibility.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Odg, OpId, ShapeConfig, TaskNumPolicy, TensorId, topological_sort};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationResult {
    pub task_num_by_op: BTreeMap<OpId, usize>,
    pub labels_by_tensor: BTreeMap<TensorId, (i64, usize)>,
    pub fallback_ops: BTreeSet<OpId>,
    /// Structural fingerprint of the source graph, for annotate pairing.
    pub graph_fingerprint: u64,
}

/// Fingerprint over operator/tensor structure (not labels), so a result
/// can be matched to the graph it was computed from.
pub fn graph_fingerprint(g: &Odg) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for t in g.tensors.values() {
        (t.id, &t.name, &t.shape).hash(&mut h);
    }
    for op in g.operators.values() {
        (op.id, op.kind as u8, &op.inputs, &op.outputs).hash(&mut h);
        op.spec.split_inputs.hash(&mut h);
        op.spec.split_output_dims.hash(&mut h);
    }
    h.finish()
}

/// Evaluate a task-count policy for one operator against the current labels.
fn eval_policy(
    g: &Odg,
    op: OpId,
    labels: &BTreeMap<TensorId, (i64, usize)>,
    c: &ShapeConfig,
) -> Result<usize> {
    let node = g.op(op)?;
    let n = match &node.spec.task_num_policy {
        TaskNumPolicy::Fixed(n) => *n,
        TaskNumPolicy::PerDestRank => c.ep_size,
        TaskNumPolicy::PerExpertBlock(rows_per_tile) => {
            let t = node.inputs.first().copied().ok_or(Error::SplitPolicyError {
                op,
                msg: "PerExpertBlock requires at least one input".into(),
            })?;
            let rows = g.tensor(t)?.shape.first().copied().unwrap_or(0);
            if *rows_per_tile == 0 || rows % rows_per_tile != 0 {
                return Err(Error::SplitPolicyError {
                    op,
                    msg: format!("rows {rows} not divisible by block {rows_per_tile}"),
                });
            }
            rows / rows_per_tile
        }
        TaskNumPolicy::InheritInputSplit => {
            let si = node.spec.split_inputs.as_ref().ok_or(Error::SplitPolicyError {
                op,
                msg: "InheritInputSplit requires split_inputs".into(),
            })?;
            let (i, _) = si
                .iter()
                .find(|(i, _)| !node.spec.ignored_input_indices.contains(i))
                .ok_or(Error::SplitPolicyError {
                    op,
                    msg: "InheritInputSplit has no non-ignored split input".into(),
                })?;
            let t = node.inputs.get(*i).copied().ok_or(Error::SplitPolicyError {
                op,
                msg: format!("split input index {i} out of range"),
            })?;
            labels.get(&t).map(|&(_, n)| n).unwrap_or(1)
        }
    };
    if n == 0 {
        return Err(Error::SplitPolicyError { op, msg: "policy yielded zero tasks".into() });
    }
    Ok(n)
}

/// Algorithm 1: initialize every tensor to (-1, 1); visit operators in
/// topological order; operators without split_inputs, or whose required
/// input labels all match, get task_num_fn(C) tasks; mismatches fall back
/// to one unsplit task. Outputs are labeled (dim, n) when n > 1 and the
/// output's declared split dim is >= 0, else (-1, n).
pub fn propagate(g: &Odg, c: &ShapeConfig) -> Result<PropagationResult> {
    let order = topological_sort(g)?;
    let mut labels: BTreeMap<TensorId, (i64, usize)> =
        g.tensors.keys().map(|&t| (t, (-1i64, 1usize))).collect();
    let mut task_num_by_op = BTreeMap::new();
    let mut fallback_ops = BTreeSet::new();

    for op_id in order {
        let op = g.op(op_id)?;
        let compatible = match &op.spec.split_inputs {
            None => true,
            Some(si) => si.iter().all(|&(i, d)| {
                if op.spec.ignored_input_indices.contains(&i) {
                    return true;
                }
                // an unsplit input is vacuously splittable along any dim;
                // only a conflicting existing split forces the fallback
                op.inputs
                    .get(i)
                    .and_then(|t| labels.get(t))
                    .map_or(false, |&(sd, sn)| sn == 1 || sd == d as i64)
            }),
        };
        let n = if compatible {
            eval_policy(g, op_id, &labels, c)?
        } else {
            fallback_ops.insert(op_id);
            1
        };
        task_num_by_op.insert(op_id, n);
        for (j, &t) in op.outputs.iter().enumerate() {
            let d = op.spec.split_output_dims.get(j).copied().unwrap_or(-1);
            let label = if n > 1 && d >= 0 { (d, n) } else { (-1, n) };
            labels.insert(t, label);
        }
    }

    Ok(PropagationResult {
        task_num_by_op,
        labels_by_tensor: labels,
        fallback_ops,
        graph_fingerprint: graph_fingerprint(g),
    })
}

/// Materialize a propagation result into a new graph; the original is
/// unmodified.
pub fn annotate(g: &Odg, r: &PropagationResult) -> Result<Odg> {
    if r.graph_fingerprint != graph_fingerprint(g)
        || r.task_num_by_op.len() != g.operators.len()
        || r.labels_by_tensor.len() != g.tensors.len()
    {
        return Err(Error::StaleResultError);
    }
    let mut out = g.clone();
    for (op_id, n) in &r.task_num_by_op {
        out.operators
            .get_mut(op_id)
            .ok_or(Error::StaleResultError)?
            .task_num = Some(*n);
    }
    for (t, &(d, n)) in &r.labels_by_tensor {
        let tn = out.tensors.get_mut(t).ok_or(Error::StaleResultError)?;
        tn.split_dim = d;
        tn.split_num = n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builders::{
        build_backward_moe_ffn, build_forward_moe_ffn, build_swiglu_add_chain_with_block,
    };
    use crate::graph::{DTypeTag, OperatorKind, SplitSpec};

    fn cfg(ep: usize, experts: usize) -> ShapeConfig {
        ShapeConfig {
            seq_len: 8,
            microbatch: 2,
            hidden: 32,
            intermediate: 16,
            top_k: 2,
            total_experts: experts,
            ep_size: ep,
            local_experts: experts / ep,
            rank_id: 0,
        }
    }

    #[test]
    fn forward_propagation_labels() {
        let c = cfg(4, 8);
        let g = build_forward_moe_ffn(&c).unwrap();
        let r = propagate(&g, &c).unwrap();
        let dispatch = g.find_op(OperatorKind::Dispatch).unwrap();
        assert_eq!(r.task_num_by_op[&dispatch.id], 4);
        let routed = dispatch.outputs[0];
        assert_eq!(r.labels_by_tensor[&routed], (0, 4));
        // GMM1 sees a dim-0 label and tiles per local expert
        let gmm1 = g.find_op(OperatorKind::Gmm1).unwrap();
        assert_eq!(r.task_num_by_op[&gmm1.id], c.local_experts);
        // SwiGLU and GMM2 inherit / re-tile to the same count
        let swiglu = g.find_op(OperatorKind::Swiglu).unwrap();
        assert_eq!(r.task_num_by_op[&swiglu.id], c.local_experts);
        // Combine inherits from GMM2 output, metadata ignored
        let combine = g.find_op(OperatorKind::Combine).unwrap();
        assert_eq!(r.task_num_by_op[&combine.id], c.local_experts);
        assert!(r.fallback_ops.is_empty());
    }

    #[test]
    fn backward_propagation_no_fallback() {
        let c = cfg(2, 4);
        let g = build_backward_moe_ffn(&c).unwrap();
        let r = propagate(&g, &c).unwrap();
        assert!(r.fallback_ops.is_empty());
        for kind in [
            OperatorKind::GmmActGrad,
            OperatorKind::GmmW2Grad,
            OperatorKind::GmmGateGrad,
            OperatorKind::GmmW1Grad,
        ] {
            let op = g.find_op(kind).unwrap();
            assert_eq!(r.task_num_by_op[&op.id], c.local_experts);
        }
    }

    #[test]
    fn mismatched_dim_falls_back() {
        // GMM1-like op whose input carries split_dim 1 but spec requires (0,0)
        let c = cfg(1, 1);
        let mut g = Odg::new(c.clone());
        let t_in = g.add_tensor("in", vec![8, 8], DTypeTag::F32);
        let t_mid = g.add_tensor("mid", vec![8, 8], DTypeTag::F32);
        let t_w = g.add_tensor("w", vec![1, 8, 8], DTypeTag::F32);
        let t_out = g.add_tensor("out", vec![8, 8], DTypeTag::F32);
        // origin splits along dim 1
        g.add_operator(
            OperatorKind::ElemAdd,
            vec![t_in, t_in],
            vec![t_mid],
            SplitSpec::origin(TaskNumPolicy::Fixed(2), vec![1]),
        );
        g.add_operator(
            OperatorKind::Gmm1,
            vec![t_mid, t_w],
            vec![t_out],
            SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::Fixed(2), vec![0]),
        );
        let r = propagate(&g, &c).unwrap();
        assert_eq!(r.task_num_by_op[&1], 1);
        assert!(r.fallback_ops.contains(&1));
        assert_eq!(r.labels_by_tensor[&t_out], (-1, 1));
    }

    #[test]
    fn fixed_one_policy_unsplit() {
        let c = cfg(1, 1);
        let mut g = Odg::new(c.clone());
        let a = g.add_tensor("a", vec![4, 4], DTypeTag::F32);
        let b = g.add_tensor("b", vec![4, 4], DTypeTag::F32);
        g.add_operator(
            OperatorKind::Swiglu,
            vec![a],
            vec![b],
            SplitSpec::origin(TaskNumPolicy::Fixed(1), vec![0]),
        );
        // b shape: SwiGLU halves columns; use 4 -> 2 to keep validation happy
        g.tensors.get_mut(&b).unwrap().shape = vec![4, 2];
        let r = propagate(&g, &c).unwrap();
        assert_eq!(r.task_num_by_op[&0], 1);
        assert_eq!(r.labels_by_tensor[&b], (-1, 1));
    }

    #[test]
    fn per_expert_block_divisibility() {
        let g = build_swiglu_add_chain_with_block(4096, 4096, 1024).unwrap();
        let c = g.shape_config.clone();
        let r = propagate(&g, &c).unwrap();
        assert_eq!(r.task_num_by_op[&0], 4);
        assert_eq!(r.task_num_by_op[&1], 4);

        let bad = build_swiglu_add_chain_with_block(4096, 4096, 1000);
        assert!(bad.is_err() || propagate(bad.as_ref().unwrap(), &c).is_err());
    }

    #[test]
    fn annotate_then_repropagate_is_fixpoint() {
        let c = cfg(4, 8);
        let g = build_forward_moe_ffn(&c).unwrap();
        let r = propagate(&g, &c).unwrap();
        let ag = annotate(&g, &r).unwrap();
        let r2 = propagate(&ag, &c).unwrap();
        assert_eq!(r, r2);
        // annotation is materialized
        let gmm2 = ag.find_op(OperatorKind::Gmm2).unwrap();
        assert_eq!(gmm2.task_num, Some(c.local_experts));
        let out = ag.tensor(gmm2.outputs[0]).unwrap();
        assert_eq!((out.split_dim, out.split_num), (0, c.local_experts));
        // original untouched
        assert!(g.find_op(OperatorKind::Gmm2).unwrap().task_num.is_none());
    }

    #[test]
    fn annotate_rejects_foreign_result() {
        let c = cfg(4, 8);
        let g = build_forward_moe_ffn(&c).unwrap();
        let other = build_backward_moe_ffn(&c).unwrap();
        let r = propagate(&other, &c).unwrap();
        assert!(matches!(annotate(&g, &r), Err(Error::StaleResultError)));
    }

    #[test]
    fn downstream_compatibility_invariant() {
        let c = cfg(4, 8);
        for g in [build_forward_moe_ffn(&c).unwrap(), build_backward_moe_ffn(&c).unwrap()] {
            let r = propagate(&g, &c).unwrap();
            for op in g.operators.values() {
                if r.fallback_ops.contains(&op.id) {
                    continue;
                }
                if let Some(si) = &op.spec.split_inputs {
                    for &(i, d) in si {
                        if op.spec.ignored_input_indices.contains(&i) {
                            continue;
                        }
                        let t = op.inputs[i];
                        assert_eq!(r.labels_by_tensor[&t].0, d as i64);
                    }
                }
            }
        }
    }
}
