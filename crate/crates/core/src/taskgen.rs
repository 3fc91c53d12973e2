//! FillConfig: lowering annotated operators into tile-level Task
//! Descriptors — slices, queue routing, communication segments.


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Odg, OperatorKind, OperatorNode, OpId, ResourceClass, ShapeConfig, TensorId, TensorNode};
use crate::routing::{PlanLayout, RoutingPlan};

/// Global task id: rank * RANK_STRIDE + position in the rank's TD array.
pub type TdId = usize;
/// Global event id: rank * RANK_STRIDE + local counter index.
pub type EventId = usize;
/// Id-space stride between ranks; task/event counts stay far below this.
pub const RANK_STRIDE: usize = 1 << 20;

pub fn global_id(rank: usize, local: usize) -> usize {
    rank * RANK_STRIDE + local
}

pub fn rank_of_id(id: usize) -> usize {
    id / RANK_STRIDE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SliceFlag {
    #[serde(rename = "REMOTE_DST")]
    RemoteDst,
    #[serde(rename = "METADATA")]
    Metadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSlice {
    pub tensor_id: TensorId,
    pub offsets: Vec<usize>,
    pub extents: Vec<usize>,
    pub flags: Vec<SliceFlag>,
}

impl TensorSlice {
    pub fn full(t: &TensorNode) -> TensorSlice {
        TensorSlice {
            tensor_id: t.id,
            offsets: vec![0; t.shape.len()],
            extents: t.shape.clone(),
            flags: vec![],
        }
    }

    pub fn with_flag(mut self, f: SliceFlag) -> TensorSlice {
        self.flags.push(f);
        self
    }

    pub fn is_metadata(&self) -> bool {
        self.flags.contains(&SliceFlag::Metadata)
    }

    pub fn is_remote(&self) -> bool {
        self.flags.contains(&SliceFlag::RemoteDst)
    }

    pub fn volume(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn check_bounds(&self, t: &TensorNode) -> Result<()> {
        if self.offsets.len() != t.shape.len() || self.extents.len() != t.shape.len() {
            return Err(Error::SliceError(format!(
                "slice rank mismatch on tensor {}: {:?}/{:?} vs {:?}",
                t.id, self.offsets, self.extents, t.shape
            )));
        }
        for d in 0..t.shape.len() {
            if self.offsets[d] + self.extents[d] > t.shape[d] {
                return Err(Error::SliceError(format!(
                    "slice out of bounds on tensor {} dim {d}: {}+{} > {}",
                    t.id, self.offsets[d], self.extents[d], t.shape[d]
                )));
            }
        }
        Ok(())
    }

    /// Rectangle intersection volume (0 when disjoint).
    pub fn intersection_volume(&self, other: &TensorSlice) -> usize {
        if self.tensor_id != other.tensor_id {
            return 0;
        }
        let mut vol = 1usize;
        for d in 0..self.offsets.len().min(other.offsets.len()) {
            let lo = self.offsets[d].max(other.offsets[d]);
            let hi = (self.offsets[d] + self.extents[d]).min(other.offsets[d] + other.extents[d]);
            if hi <= lo {
                return 0;
            }
            vol *= hi - lo;
        }
        vol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskType {
    #[serde(rename = "GMM1")]
    Gmm1,
    #[serde(rename = "SwiGLU")]
    Swiglu,
    #[serde(rename = "GMM2")]
    Gmm2,
    GmmActGrad,
    GmmW2Grad,
    #[serde(rename = "SwiGLUGrad")]
    SwigluGrad,
    GmmGateGrad,
    GmmW1Grad,
    ElemAdd,
    PutMemSignal,
    /// Per-token weighted/unweighted reduction of staged combine tiles.
    CombineReduce,
}

impl TaskType {
    pub fn from_compute_kind(k: OperatorKind) -> Option<TaskType> {
        match k {
            OperatorKind::Gmm1 => Some(TaskType::Gmm1),
            OperatorKind::Swiglu => Some(TaskType::Swiglu),
            OperatorKind::Gmm2 => Some(TaskType::Gmm2),
            OperatorKind::GmmActGrad => Some(TaskType::GmmActGrad),
            OperatorKind::GmmW2Grad => Some(TaskType::GmmW2Grad),
            OperatorKind::SwigluGrad => Some(TaskType::SwigluGrad),
            OperatorKind::GmmGateGrad => Some(TaskType::GmmGateGrad),
            OperatorKind::GmmW1Grad => Some(TaskType::GmmW1Grad),
            OperatorKind::ElemAdd => Some(TaskType::ElemAdd),
            _ => None,
        }
    }

    pub fn resource_class(self) -> ResourceClass {
        match self {
            TaskType::Gmm1
            | TaskType::Gmm2
            | TaskType::GmmActGrad
            | TaskType::GmmW2Grad
            | TaskType::GmmGateGrad
            | TaskType::GmmW1Grad => ResourceClass::Cube,
            _ => ResourceClass::Vector,
        }
    }

    pub fn queue_type(self) -> QueueType {
        match self.resource_class() {
            ResourceClass::Cube => QueueType::Ctq,
            ResourceClass::Vector => QueueType::Vtq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueType {
    #[serde(rename = "CTQ")]
    Ctq,
    #[serde(rename = "VTQ")]
    Vtq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommInfo {
    pub dst_rank: usize,
    pub dst_tensor_id: TensorId,
    pub byte_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDescriptor {
    pub task_type: TaskType,
    pub queue_type: QueueType,
    pub dependent_event: Option<EventId>,
    pub trigger_events: Vec<EventId>,
    pub inputs: Vec<TensorSlice>,
    pub outputs: Vec<TensorSlice>,
    pub task_index: usize,
    pub task_split_num: usize,
    pub task_split_value: usize,
    pub tiling_data_position: usize,
    pub comm: Option<CommInfo>,
}

// Table-3 serialization: a single trigger serializes as `trigger_event`,
// multiple as `trigger_events`.
#[derive(Serialize, Deserialize)]
struct TdWire {
    task_type: TaskType,
    queue_type: QueueType,
    dependent_event: Option<EventId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    trigger_event: Option<EventId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    trigger_events: Option<Vec<EventId>>,
    inputs: Vec<TensorSlice>,
    outputs: Vec<TensorSlice>,
    task_index: usize,
    task_split_num: usize,
    task_split_value: usize,
    tiling_data_position: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    comm: Option<CommInfo>,
}

impl Serialize for TaskDescriptor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (one, many) = match self.trigger_events.len() {
            1 => (Some(self.trigger_events[0]), None),
            0 => (None, Some(vec![])),
            _ => (None, Some(self.trigger_events.clone())),
        };
        TdWire {
            task_type: self.task_type,
            queue_type: self.queue_type,
            dependent_event: self.dependent_event,
            trigger_event: one,
            trigger_events: many,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            task_index: self.task_index,
            task_split_num: self.task_split_num,
            task_split_value: self.task_split_value,
            tiling_data_position: self.tiling_data_position,
            comm: self.comm,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TaskDescriptor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = TdWire::deserialize(d)?;
        let trigger_events = match (w.trigger_event, w.trigger_events) {
            (Some(e), None) => vec![e],
            (None, Some(es)) => es,
            (None, None) => vec![],
            (Some(_), Some(_)) => {
                return Err(serde::de::Error::custom(
                    "both trigger_event and trigger_events present",
                ))
            }
        };
        Ok(TaskDescriptor {
            task_type: w.task_type,
            queue_type: w.queue_type,
            dependent_event: w.dependent_event,
            trigger_events,
            inputs: w.inputs,
            outputs: w.outputs,
            task_index: w.task_index,
            task_split_num: w.task_split_num,
            task_split_value: w.task_split_value,
            tiling_data_position: w.tiling_data_position,
            comm: w.comm,
        })
    }
}

/// Compile-time companion data for a TD (not serialized): which operator
/// produced it and, for MoE tasks, which expert / segment / token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TdMeta {
    pub op_id: OpId,
    pub kind: OperatorKind,
    pub expert: Option<usize>,
    /// (src_rank, dst_rank, local_expert) for PutMemSignal tasks.
    pub segment: Option<(usize, usize, usize)>,
    /// Local token index for CombineReduce tasks.
    pub token: Option<usize>,
}

/// Tile range derivation per Table 3: offset = task_index * value along
/// the split dim, full extent elsewhere. dim < 0 is the unsplit identity.
pub fn derive_slice(
    task_index: usize,
    task_split_num: usize,
    task_split_value: usize,
    tensor: &TensorNode,
    split_dim: i64,
) -> Result<TensorSlice> {
    if split_dim < 0 {
        return Ok(TensorSlice::full(tensor));
    }
    let d = split_dim as usize;
    if d >= tensor.shape.len() {
        return Err(Error::SliceError(format!(
            "split dim {d} out of range for tensor {}",
            tensor.id
        )));
    }
    if task_index >= task_split_num {
        return Err(Error::SliceError(format!(
            "task_index {task_index} >= task_split_num {task_split_num}"
        )));
    }
    if task_split_num * task_split_value != tensor.shape[d] {
        return Err(Error::SliceError(format!(
            "{task_split_num} x {task_split_value} != extent {} on tensor {}",
            tensor.shape[d], tensor.id
        )));
    }
    let mut s = TensorSlice::full(tensor);
    s.offsets[d] = task_index * task_split_value;
    s.extents[d] = task_split_value;
    Ok(s)
}

fn row_slice(t: &TensorNode, start: usize, len: usize) -> TensorSlice {
    let mut s = TensorSlice::full(t);
    s.offsets[0] = start;
    s.extents[0] = len;
    s
}

fn expert_slice(t: &TensorNode, e: usize) -> TensorSlice {
    let mut s = TensorSlice::full(t);
    s.offsets[0] = e;
    s.extents[0] = 1;
    s
}

/// Lowering context. `plan` is required for communication operators and
/// enables ragged per-expert tiling for MoE compute operators.
pub struct GenContext<'a> {
    pub plan: Option<(&'a RoutingPlan, &'a PlanLayout)>,
}

impl<'a> GenContext<'a> {
    pub fn none() -> GenContext<'static> {
        GenContext { plan: None }
    }
}

/// Operator-specific FillConfig: one TD per tile task for compute
/// operators; PutMemSignal (and CombineReduce) descriptors for
/// communication operators.
pub fn fill_config(
    op: &OperatorNode,
    g: &Odg,
    c: &ShapeConfig,
    ctx: &GenContext,
) -> Result<Vec<(TaskDescriptor, TdMeta)>> {
    let n = op.task_num.ok_or(Error::PropagationMissing(op.id))?;
    if op.kind.is_comm() {
        let (plan, layout) = ctx.plan.ok_or_else(|| {
            Error::RoutingError(format!("operator {} requires a routing plan", op.id))
        })?;
        comm_fill(op, g, c, plan, layout)
    } else {
        compute_fill(op, g, c, n, ctx)
    }
}

fn compute_fill(
    op: &OperatorNode,
    g: &Odg,
    c: &ShapeConfig,
    n: usize,
    ctx: &GenContext,
) -> Result<Vec<(TaskDescriptor, TdMeta)>> {
    let task_type = TaskType::from_compute_kind(op.kind)
        .ok_or_else(|| Error::InvalidGraph(format!("operator {} is not a compute op", op.id)))?;

    // Ragged per-expert tiling applies when the plan is present and this
    // operator tiles one task per local expert over the received rows.
    let ragged_bounds: Option<Vec<(usize, usize)>> = match ctx.plan {
        Some((_, layout)) if n == c.local_experts && !op.inputs.is_empty() => {
            let rows = g.tensor(op.inputs[0])?.shape[0];
            let gl = &layout.group_list[c.rank_id];
            if *gl.last().unwrap_or(&0) == rows && gl.len() == n {
                let mut prev = 0;
                Some(
                    gl.iter()
                        .map(|&end| {
                            let b = (prev, end - prev);
                            prev = end;
                            b
                        })
                        .collect(),
                )
            } else {
                None
            }
        }
        _ => None,
    };

    let split_dim: i64 = if let Some(si) = &op.spec.split_inputs {
        si.iter()
            .find(|(i, _)| !op.spec.ignored_input_indices.contains(i))
            .map(|&(_, d)| d as i64)
            .unwrap_or(0)
    } else {
        op.spec.split_output_dims.first().copied().unwrap_or(0).max(0)
    };

    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (inputs, outputs, split_value, expert) = match &ragged_bounds {
            Some(bounds) => {
                let (start, len) = bounds[k];
                let mut inputs = Vec::new();
                for (i, &tid) in op.inputs.iter().enumerate() {
                    let t = g.tensor(tid)?;
                    let s = if op.spec.ignored_input_indices.contains(&i) {
                        TensorSlice::full(t).with_flag(SliceFlag::Metadata)
                    } else if t.shape.len() == 3 {
                        expert_slice(t, k) // grouped weight: expert k's matrix
                    } else {
                        row_slice(t, start, len)
                    };
                    inputs.push(s);
                }
                let mut outputs = Vec::new();
                for &tid in &op.outputs {
                    let t = g.tensor(tid)?;
                    let s = if t.shape.len() == 3 { expert_slice(t, k) } else { row_slice(t, start, len) };
                    outputs.push(s);
                }
                (inputs, outputs, len.max(1), Some(k))
            }
            None => {
                // Uniform tiling: slice along split_dim where the extent
                // divides evenly; other tensors get full slices.
                let mut inputs = Vec::new();
                for (i, &tid) in op.inputs.iter().enumerate() {
                    let t = g.tensor(tid)?;
                    let s = if op.spec.ignored_input_indices.contains(&i) {
                        TensorSlice::full(t).with_flag(SliceFlag::Metadata)
                    } else if n > 1
                        && split_dim >= 0
                        && (split_dim as usize) < t.shape.len()
                        && t.shape[split_dim as usize] % n == 0
                        && sliced_input(op, i, split_dim)
                    {
                        derive_slice(k, n, t.shape[split_dim as usize] / n, t, split_dim)?
                    } else {
                        TensorSlice::full(t)
                    };
                    inputs.push(s);
                }
                let mut outputs = Vec::new();
                let mut split_value = 0;
                for (j, &tid) in op.outputs.iter().enumerate() {
                    let t = g.tensor(tid)?;
                    let d = op.spec.split_output_dims.get(j).copied().unwrap_or(-1);
                    let s = if n > 1 && d >= 0 {
                        let dd = d as usize;
                        if t.shape[dd] % n != 0 {
                            return Err(Error::SliceError(format!(
                                "output extent {} of tensor {} not divisible by {n}",
                                t.shape[dd], t.id
                            )));
                        }
                        let v = t.shape[dd] / n;
                        if j == 0 {
                            split_value = v;
                        }
                        derive_slice(k, n, v, t, d)?
                    } else {
                        if j == 0 {
                            split_value = t.shape.first().copied().unwrap_or(1);
                        }
                        TensorSlice::full(t)
                    };
                    outputs.push(s);
                }
                (inputs, outputs, split_value.max(1), None)
            }
        };

        for (s, &tid) in inputs.iter().chain(outputs.iter()).zip(
            op.inputs.iter().chain(op.outputs.iter()),
        ) {
            s.check_bounds(g.tensor(tid)?)?;
        }

        out.push((
            TaskDescriptor {
                task_type,
                queue_type: task_type.queue_type(),
                dependent_event: None,
                trigger_events: vec![],
                inputs,
                outputs,
                task_index: k,
                task_split_num: n,
                task_split_value: split_value,
                tiling_data_position: op.id,
                comm: None,
            },
            TdMeta { op_id: op.id, kind: op.kind, expert, segment: None, token: None },
        ));
    }
    Ok(out)
}

fn comm_fill(
    op: &OperatorNode,
    g: &Odg,
    c: &ShapeConfig,
    plan: &RoutingPlan,
    layout: &PlanLayout,
) -> Result<Vec<(TaskDescriptor, TdMeta)>> {
    if !plan.matches(c) {
        return Err(Error::RoutingError("plan does not match shape config".into()));
    }
    let rank = c.rank_id;
    let p = c.ep_size;
    let width = g.tensor(op.outputs[0])?.dtype.width_bytes();
    let mut tds: Vec<(TaskDescriptor, TdMeta)> = Vec::new();

    match op.kind {
        // Dispatch-style: this rank sends its token rows to the rank
        // owning each selected expert; one put per (dst, local expert).
        OperatorKind::Dispatch | OperatorKind::BwdDispatch => {
            let src_t = g.tensor(op.inputs[0])?;
            let dst_t = g.tensor(op.outputs[0])?;
            let hid = src_t.shape[1];
            for d in 0..p {
                for le in 0..plan.local_experts {
                    let seg = match layout.segments.get(&(rank, d, le)) {
                        Some(s) if !s.entries.is_empty() => s,
                        _ => continue,
                    };
                    let inputs: Vec<TensorSlice> =
                        seg.entries.iter().map(|&(tok, _)| row_slice(src_t, tok, 1)).collect();
                    let out = row_slice(dst_t, seg.dst_row_start, seg.entries.len())
                        .with_flag(SliceFlag::RemoteDst);
                    let bytes = seg.entries.len() * hid * width;
                    tds.push((
                        TaskDescriptor {
                            task_type: TaskType::PutMemSignal,
                            queue_type: QueueType::Vtq,
                            dependent_event: None,
                            trigger_events: vec![],
                            inputs,
                            outputs: vec![out],
                            task_index: 0, // renumbered below
                            task_split_num: 0,
                            task_split_value: seg.entries.len(),
                            tiling_data_position: op.id,
                            comm: Some(CommInfo {
                                dst_rank: d,
                                dst_tensor_id: dst_t.id,
                                byte_count: bytes,
                            }),
                        },
                        TdMeta {
                            op_id: op.id,
                            kind: op.kind,
                            expert: Some(le),
                            segment: Some((rank, d, le)),
                            token: None,
                        },
                    ));
                }
            }
        }
        // Combine-style: return each received segment to its source
        // rank's staging buffer, then reduce staged slots per token.
        OperatorKind::Combine | OperatorKind::BwdCombine => {
            let data_t = g.tensor(op.inputs[0])?;
            let token_t = g.tensor(op.outputs[0])?;
            let stage_t = g.tensor(op.outputs[1])?;
            let hid = data_t.shape[1];
            for s in 0..p {
                for le in 0..plan.local_experts {
                    let seg = match layout.segments.get(&(s, rank, le)) {
                        Some(x) if !x.entries.is_empty() => x,
                        _ => continue,
                    };
                    let input = row_slice(data_t, seg.dst_row_start, seg.entries.len());
                    let out = row_slice(stage_t, seg.stage_slot_start, seg.entries.len())
                        .with_flag(SliceFlag::RemoteDst);
                    let bytes = seg.entries.len() * hid * width;
                    tds.push((
                        TaskDescriptor {
                            task_type: TaskType::PutMemSignal,
                            queue_type: QueueType::Vtq,
                            dependent_event: None,
                            trigger_events: vec![],
                            inputs: vec![input],
                            outputs: vec![out],
                            task_index: 0,
                            task_split_num: 0,
                            task_split_value: seg.entries.len(),
                            tiling_data_position: op.id,
                            comm: Some(CommInfo {
                                dst_rank: s,
                                dst_tensor_id: stage_t.id,
                                byte_count: bytes,
                            }),
                        },
                        TdMeta {
                            op_id: op.id,
                            kind: op.kind,
                            expert: Some(le),
                            segment: Some((s, rank, le)),
                            token: None,
                        },
                    ));
                }
            }
            // Per-token reductions over this rank's own staging buffer.
            let meta_slices: Vec<TensorSlice> = op
                .spec
                .ignored_input_indices
                .iter()
                .filter_map(|&i| op.inputs.get(i))
                .map(|&tid| {
                    g.tensor(tid).map(|t| TensorSlice::full(t).with_flag(SliceFlag::Metadata))
                })
                .collect::<Result<_>>()?;
            let t_local = plan.tokens_per_rank;
            for tok in 0..t_local {
                let mut inputs: Vec<TensorSlice> = (0..plan.top_k)
                    .map(|j| row_slice(stage_t, layout.slot_of[rank][&(tok, j)], 1))
                    .collect();
                inputs.extend(meta_slices.iter().cloned());
                tds.push((
                    TaskDescriptor {
                        task_type: TaskType::CombineReduce,
                        queue_type: QueueType::Vtq,
                        dependent_event: None,
                        trigger_events: vec![],
                        inputs,
                        outputs: vec![row_slice(token_t, tok, 1)],
                        task_index: 0,
                        task_split_num: 0,
                        task_split_value: 1,
                        tiling_data_position: op.id,
                        comm: None,
                    },
                    TdMeta {
                        op_id: op.id,
                        kind: op.kind,
                        expert: None,
                        segment: None,
                        token: Some(tok),
                    },
                ));
            }
        }
        _ => unreachable!("comm_fill called on non-comm operator"),
    }

    // Renumber task_index / task_split_num per phase (puts, then reduces).
    let n_puts = tds.iter().filter(|(td, _)| td.task_type == TaskType::PutMemSignal).count();
    let n_reds = tds.len() - n_puts;
    let (mut pi, mut ri) = (0, 0);
    for (td, _) in &mut tds {
        if td.task_type == TaskType::PutMemSignal {
            td.task_index = pi;
            td.task_split_num = n_puts;
            pi += 1;
        } else {
            td.task_index = ri;
            td.task_split_num = n_reds;
            ri += 1;
        }
    }
    for (td, _) in &tds {
        if let Some(ci) = td.comm {
            if ci.byte_count == 0 {
                return Err(Error::SliceError("zero-byte communication task".into()));
            }
        }
    }
    Ok(tds)
}

/// Should uniform tiling slice input `i` along `d`? Yes when the spec
/// names it, or when the input shares the split tensor's extent on `d`
/// (elementwise companions like ElemAdd's second operand).
fn sliced_input(op: &OperatorNode, i: usize, d: i64) -> bool {
    if let Some(si) = &op.spec.split_inputs {
        if si.iter().any(|&(ix, dim)| ix == i && dim as i64 == d) {
            return true;
        }
    }
    // companion heuristic: 2-d data inputs follow the row split
    !op.kind.is_gmm_family() || i == 0
}

/// GMM tile legality: the task may split only token/expert row
/// dimensions; weight inputs must keep reduction (K) and output (N)
/// dimensions whole.
pub fn gmm_task_legality(td: &TaskDescriptor, op: &OperatorNode, g: &Odg) -> Result<()> {
    if !op.kind.is_gmm_family() {
        return Ok(());
    }
    for s in &td.inputs {
        let t = g.tensor(s.tensor_id)?;
        if t.shape.len() == 3 {
            // grouped weight [experts, K, N]: inner dims must be whole
            if s.extents[1] != t.shape[1] || s.extents[2] != t.shape[2] {
                return Err(Error::SliceError(format!(
                    "reduction dimension partitioned on weight tensor {}",
                    t.id
                )));
            }
        } else if s.extents.len() == 2 && s.extents[1] != t.shape[1] {
            return Err(Error::SliceError(format!(
                "non-row dimension partitioned on tensor {}",
                t.id
            )));
        }
    }
    Ok(())
}
