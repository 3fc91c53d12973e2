//! F32 taskflow executor: replays compiled TDs in simulator commit order.
//! Every handler touches memory only through its TD's input/output
//! slices, so the footprint matches the dependency analysis exactly.

use std::collections::BTreeMap;

use crate::compile::Compiled;
use crate::error::{Error, Result};
use crate::graph::OperatorKind;
use crate::routing::RoutingPlan;
use crate::taskgen::{rank_of_id, TaskDescriptor, TaskType, TdId, TdMeta, RANK_STRIDE};

use super::oracle::{ForwardState, MoeWeights};
use super::TensorBuffer;

/// One rank's tensors, keyed by tensor id.
#[derive(Debug, Clone)]
pub struct RankBuffers {
    pub tensors: BTreeMap<usize, TensorBuffer<f32>>,
}

impl RankBuffers {
    pub fn by_name(&self, compiled: &Compiled, rank: usize, name: &str) -> Option<&TensorBuffer<f32>> {
        let t = compiled.ranks[rank].graph.tensor_by_name(name)?;
        self.tensors.get(&t.id)
    }
}

/// Zero-initialized buffers matching each rank's graph tensors.
pub fn alloc_buffers(compiled: &Compiled) -> Vec<RankBuffers> {
    compiled
        .ranks
        .iter()
        .map(|r| {
            let tensors = r
                .graph
                .tensors
                .values()
                .map(|t| (t.id, TensorBuffer::zeros(t.id, t.shape.clone())))
                .collect();
            RankBuffers { tensors }
        })
        .collect()
}

fn fill_by_name(
    compiled: &Compiled,
    buffers: &mut [RankBuffers],
    rank: usize,
    name: &str,
    data: &[f32],
) -> Result<()> {
    let t = compiled.ranks[rank]
        .graph
        .tensor_by_name(name)
        .ok_or_else(|| Error::InvalidGraph(format!("rank {rank} has no tensor {name}")))?;
    let buf = buffers[rank].tensors.get_mut(&t.id).expect("allocated");
    if buf.data.len() != data.len() {
        return Err(Error::ShapeError(format!(
            "{name} on rank {rank}: {} values for {} slots",
            data.len(),
            buf.data.len()
        )));
    }
    buf.data.copy_from_slice(data);
    Ok(())
}

fn group_metadata(group_list: &[usize], total_experts: usize, rank: usize, local: usize) -> (Vec<f32>, Vec<f32>) {
    // offsets/sizes per global expert; experts on other ranks get zeros
    let mut offsets = vec![0.0f32; total_experts];
    let mut sizes = vec![0.0f32; total_experts];
    let mut start = 0usize;
    for (le, &end) in group_list.iter().enumerate() {
        offsets[rank * local + le] = start as f32;
        sizes[rank * local + le] = (end - start) as f32;
        start = end;
    }
    (offsets, sizes)
}

fn expert_weight_values(w: &[Vec<f64>], plan: &RoutingPlan, rank: usize) -> Vec<f32> {
    (0..plan.local_experts)
        .flat_map(|le| w[rank * plan.local_experts + le].iter().map(|&v| v as f32))
        .collect()
}

/// Seed the forward graph's external inputs: per-rank tokens, per-rank
/// expert weights, and group-offset metadata.
pub fn init_forward_inputs(
    compiled: &Compiled,
    buffers: &mut [RankBuffers],
    plan: &RoutingPlan,
    x: &[f64],
    w: &MoeWeights,
) -> Result<()> {
    let layout = crate::routing::PlanLayout::build(plan)?;
    for rank in 0..compiled.ranks.len() {
        let c = &compiled.ranks[rank].config;
        let t = plan.tokens_per_rank;
        let mine: Vec<f32> =
            x[rank * t * c.hidden..(rank + 1) * t * c.hidden].iter().map(|&v| v as f32).collect();
        fill_by_name(compiled, buffers, rank, "t_x", &mine)?;
        fill_by_name(compiled, buffers, rank, "t_w1", &expert_weight_values(&w.w1, plan, rank))?;
        fill_by_name(compiled, buffers, rank, "t_w2", &expert_weight_values(&w.w2, plan, rank))?;
        let (off, siz) =
            group_metadata(&layout.group_list[rank], plan.total_experts, rank, plan.local_experts);
        fill_by_name(compiled, buffers, rank, "t_offsets", &off)?;
        fill_by_name(compiled, buffers, rank, "t_sizes", &siz)?;
    }
    Ok(())
}

/// Seed the backward graph's external inputs: upstream gradient, expert
/// weights, and the forward activations the gradient GMMs consume.
pub fn init_backward_inputs(
    compiled: &Compiled,
    buffers: &mut [RankBuffers],
    plan: &RoutingPlan,
    dy: &[f64],
    w: &MoeWeights,
    fwd: &ForwardState,
) -> Result<()> {
    let layout = crate::routing::PlanLayout::build(plan)?;
    for rank in 0..compiled.ranks.len() {
        let c = &compiled.ranks[rank].config;
        let t = plan.tokens_per_rank;
        let mine: Vec<f32> =
            dy[rank * t * c.hidden..(rank + 1) * t * c.hidden].iter().map(|&v| v as f32).collect();
        fill_by_name(compiled, buffers, rank, "t_dy", &mine)?;
        fill_by_name(compiled, buffers, rank, "t_w1", &expert_weight_values(&w.w1, plan, rank))?;
        fill_by_name(compiled, buffers, rank, "t_w2", &expert_weight_values(&w.w2, plan, rank))?;
        let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        fill_by_name(compiled, buffers, rank, "t_xr", &to_f32(&fwd.xr[rank]))?;
        fill_by_name(compiled, buffers, rank, "t_h1", &to_f32(&fwd.h1[rank]))?;
        fill_by_name(compiled, buffers, rank, "t_a", &to_f32(&fwd.a[rank]))?;
        let (off, siz) =
            group_metadata(&layout.group_list[rank], plan.total_experts, rank, plan.local_experts);
        fill_by_name(compiled, buffers, rank, "t_boffsets", &off)?;
        fill_by_name(compiled, buffers, rank, "t_bsizes", &siz)?;
    }
    Ok(())
}

fn sigmoid32(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Routing weight of each row carried by a put, in slice order, when the
/// operator scales on send (Combine staging and BwdDispatch); None for
/// unscaled copies.
fn put_row_weights(
    meta: &TdMeta,
    plan: &RoutingPlan,
    layout: &crate::routing::PlanLayout,
) -> Option<Vec<f32>> {
    if !matches!(meta.kind, OperatorKind::Combine | OperatorKind::BwdDispatch) {
        return None;
    }
    let seg_key = meta.segment.expect("put carries its segment");
    // the token-owner rank is the segment's src for both directions
    let owner = seg_key.0;
    let seg = &layout.segments[&seg_key];
    Some(
        seg.entries
            .iter()
            .map(|&(tok, j)| plan.choices[plan.global_token(owner, tok)][j].1 as f32)
            .collect(),
    )
}

fn handle_put(
    td: &TaskDescriptor,
    meta: &TdMeta,
    rank: usize,
    plan: &RoutingPlan,
    layout: &crate::routing::PlanLayout,
    buffers: &mut [RankBuffers],
) -> Result<()> {
    let ci = td.comm.as_ref().ok_or_else(|| Error::InvalidGraph("put without comm info".into()))?;
    // gather source rows in slice order
    let mut rows: Vec<f32> = Vec::new();
    for s in &td.inputs {
        if s.is_metadata() {
            continue;
        }
        let buf = buffers[rank]
            .tensors
            .get(&s.tensor_id)
            .ok_or_else(|| Error::InvalidGraph(format!("missing tensor {}", s.tensor_id)))?;
        rows.extend(buf.read_slice(s));
    }
    if let Some(weights) = put_row_weights(meta, plan, layout) {
        let cols = rows.len() / weights.len();
        for (r, w) in weights.iter().enumerate() {
            for v in &mut rows[r * cols..(r + 1) * cols] {
                *v *= w;
            }
        }
    }
    let out = &td.outputs[0];
    let dst = buffers[ci.dst_rank]
        .tensors
        .get_mut(&ci.dst_tensor_id)
        .ok_or_else(|| Error::InvalidGraph(format!("missing dst tensor {}", ci.dst_tensor_id)))?;
    dst.write_slice(out, &rows);
    Ok(())
}

fn handle_compute(td: &TaskDescriptor, rank: usize, buffers: &mut [RankBuffers]) -> Result<()> {
    let read = |buffers: &[RankBuffers], i: usize| -> Vec<f32> {
        let s = &td.inputs[i];
        buffers[rank].tensors[&s.tensor_id].read_slice(s)
    };
    let data_inputs: Vec<usize> =
        (0..td.inputs.len()).filter(|&i| !td.inputs[i].is_metadata()).collect();

    let out = match td.task_type {
        TaskType::Gmm1 | TaskType::Gmm2 | TaskType::GmmActGrad | TaskType::GmmGateGrad => {
            // one 2-d data slice, one [1, K, N] weight slice; forward GMMs
            // compute x.W, activation-gradient GMMs compute g.W^T
            let transposed =
                matches!(td.task_type, TaskType::GmmActGrad | TaskType::GmmGateGrad);
            let wi = *data_inputs
                .iter()
                .find(|&&i| td.inputs[i].extents.len() == 3)
                .ok_or_else(|| Error::InvalidGraph("GMM task without weight input".into()))?;
            let xi = *data_inputs
                .iter()
                .find(|&&i| td.inputs[i].extents.len() == 2)
                .ok_or_else(|| Error::InvalidGraph("GMM task without data input".into()))?;
            let w = read(buffers, wi);
            let x = read(buffers, xi);
            let (k, n) = (td.inputs[wi].extents[1], td.inputs[wi].extents[2]);
            let rows = td.inputs[xi].extents[0];
            let cols = td.inputs[xi].extents[1];
            let mut y;
            if !transposed && cols == k {
                y = vec![0.0f32; rows * n];
                for r in 0..rows {
                    for kk in 0..k {
                        let xv = x[r * k + kk];
                        for c in 0..n {
                            y[r * n + c] += xv * w[kk * n + c];
                        }
                    }
                }
            } else if transposed && cols == n {
                y = vec![0.0f32; rows * k];
                for r in 0..rows {
                    for kk in 0..k {
                        let mut acc = 0.0f32;
                        for c in 0..n {
                            acc += x[r * n + c] * w[kk * n + c];
                        }
                        y[r * k + kk] = acc;
                    }
                }
            } else {
                return Err(Error::ShapeError(format!(
                    "GMM task data cols {cols} match neither K={k} nor N={n}"
                )));
            }
            y
        }
        TaskType::GmmW2Grad | TaskType::GmmW1Grad => {
            // inputs: [grad rows x N, activation rows x K] -> dW [1, K, N]
            let g = read(buffers, data_inputs[0]);
            let a = read(buffers, data_inputs[1]);
            let rows = td.inputs[data_inputs[0]].extents[0];
            let n = td.inputs[data_inputs[0]].extents[1];
            let k = td.inputs[data_inputs[1]].extents[1];
            let mut dw = vec![0.0f32; k * n];
            for r in 0..rows {
                for kk in 0..k {
                    let av = a[r * k + kk];
                    for c in 0..n {
                        dw[kk * n + c] += av * g[r * n + c];
                    }
                }
            }
            dw
        }
        TaskType::Swiglu => {
            let h = read(buffers, data_inputs[0]);
            let cols = td.inputs[data_inputs[0]].extents[1];
            let half = cols / 2;
            let rows = td.inputs[data_inputs[0]].extents[0];
            let mut a = vec![0.0f32; rows * half];
            for r in 0..rows {
                for c in 0..half {
                    let g = h[r * cols + c];
                    let u = h[r * cols + half + c];
                    a[r * half + c] = g * sigmoid32(g) * u;
                }
            }
            a
        }
        TaskType::SwigluGrad => {
            // inputs: [h rows x 2I, da rows x I]
            let h = read(buffers, data_inputs[0]);
            let da = read(buffers, data_inputs[1]);
            let cols = td.inputs[data_inputs[0]].extents[1];
            let half = cols / 2;
            let rows = td.inputs[data_inputs[0]].extents[0];
            let mut dh = vec![0.0f32; rows * cols];
            for r in 0..rows {
                for c in 0..half {
                    let g = h[r * cols + c];
                    let u = h[r * cols + half + c];
                    let s = sigmoid32(g);
                    let d = da[r * half + c];
                    dh[r * cols + c] = d * u * s * (1.0 + g * (1.0 - s));
                    dh[r * cols + half + c] = d * g * s;
                }
            }
            dh
        }
        TaskType::ElemAdd => {
            let a = read(buffers, data_inputs[0]);
            let b = read(buffers, data_inputs[1]);
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        }
        TaskType::CombineReduce => {
            // plain sum of the staged top-k slices, in slot order
            let mut acc: Option<Vec<f32>> = None;
            for &i in &data_inputs {
                let v = read(buffers, i);
                match &mut acc {
                    None => acc = Some(v),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&v) {
                            *x += y;
                        }
                    }
                }
            }
            acc.ok_or_else(|| Error::InvalidGraph("reduce without inputs".into()))?
        }
        TaskType::PutMemSignal => unreachable!("handled separately"),
    };

    let s = &td.outputs[0];
    buffers[rank]
        .tensors
        .get_mut(&s.tensor_id)
        .ok_or_else(|| Error::InvalidGraph(format!("missing output tensor {}", s.tensor_id)))?
        .write_slice(s, &out);
    Ok(())
}

/// Execute every TD in `commit_order` (a simulator commit order covering
/// all TDs exactly once), mutating `buffers` in place.
pub fn taskflow_execute(
    compiled: &Compiled,
    plan: &RoutingPlan,
    commit_order: &[TdId],
    buffers: &mut [RankBuffers],
) -> Result<()> {
    let total: usize = compiled.ranks.iter().map(|r| r.ssc.tds.len()).sum();
    if commit_order.len() != total {
        return Err(Error::InvalidGraph(format!(
            "commit order covers {} of {} tasks",
            commit_order.len(),
            total
        )));
    }
    let layout = crate::routing::PlanLayout::build(plan)?;
    for &id in commit_order {
        let rank = rank_of_id(id);
        let local = id % RANK_STRIDE;
        let td = &compiled.ranks[rank].ssc.tds[local];
        let meta = &compiled.ranks[rank].meta[local];
        if td.task_type == TaskType::PutMemSignal {
            handle_put(td, meta, rank, plan, &layout, buffers)?;
        } else {
            handle_compute(td, rank, buffers)?;
        }
    }
    Ok(())
}
