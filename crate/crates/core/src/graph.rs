//! Operator Dependency Graph (ODG): operators, tensor edges, split specs.
//!
//! The ODG is the scheduling IR. Operators carry a [`SplitSpec`] declaring
//! the legal tiling; tensors carry split labels written by propagation.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TensorId = usize;
pub type OpId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DTypeTag {
    F32,
    F64,
}

impl DTypeTag {
    pub fn width_bytes(self) -> usize {
        match self {
            DTypeTag::F32 => 4,
            DTypeTag::F64 => 8,
        }
    }
}

/// A tensor edge in the ODG. `split_dim == -1` means unsplit; propagation
/// writes `(split_dim, split_num)` labels onto producer outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorNode {
    pub id: TensorId,
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DTypeTag,
    pub split_dim: i64,
    pub split_num: usize,
}

impl TensorNode {
    pub fn new(id: TensorId, name: &str, shape: Vec<usize>, dtype: DTypeTag) -> Self {
        TensorNode { id, name: name.to_string(), shape, dtype, split_dim: -1, split_num: 1 }
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OperatorKind {
    Dispatch,
    #[serde(rename = "GMM1")]
    Gmm1,
    #[serde(rename = "SwiGLU")]
    Swiglu,
    #[serde(rename = "GMM2")]
    Gmm2,
    Combine,
    BwdDispatch,
    GmmActGrad,
    GmmW2Grad,
    #[serde(rename = "SwiGLUGrad")]
    SwigluGrad,
    GmmGateGrad,
    GmmW1Grad,
    BwdCombine,
    ElemAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResourceClass {
    Cube,
    Vector,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 13] = [
        OperatorKind::Dispatch,
        OperatorKind::Gmm1,
        OperatorKind::Swiglu,
        OperatorKind::Gmm2,
        OperatorKind::Combine,
        OperatorKind::BwdDispatch,
        OperatorKind::GmmActGrad,
        OperatorKind::GmmW2Grad,
        OperatorKind::SwigluGrad,
        OperatorKind::GmmGateGrad,
        OperatorKind::GmmW1Grad,
        OperatorKind::BwdCombine,
        OperatorKind::ElemAdd,
    ];

    /// GMM-family kinds run on Cube; everything else on Vector.
    pub fn resource_class(self) -> ResourceClass {
        if self.is_gmm_family() {
            ResourceClass::Cube
        } else {
            ResourceClass::Vector
        }
    }

    pub fn is_gmm_family(self) -> bool {
        matches!(
            self,
            OperatorKind::Gmm1
                | OperatorKind::Gmm2
                | OperatorKind::GmmActGrad
                | OperatorKind::GmmW2Grad
                | OperatorKind::GmmGateGrad
                | OperatorKind::GmmW1Grad
        )
    }

    /// Communication operators lower to `put_mem_signal` tasks.
    pub fn is_comm(self) -> bool {
        matches!(
            self,
            OperatorKind::Dispatch
                | OperatorKind::Combine
                | OperatorKind::BwdDispatch
                | OperatorKind::BwdCombine
        )
    }

    /// Combine-style operators additionally scatter-accumulate received
    /// tiles back into per-token rows.
    pub fn is_combine_like(self) -> bool {
        matches!(self, OperatorKind::Combine | OperatorKind::BwdCombine)
    }
}

/// Declarative encoding of the per-operator task-count function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskNumPolicy {
    Fixed(usize),
    PerDestRank,
    PerExpertBlock(usize),
    InheritInputSplit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// `(input_index, dim)` pairs the operator requires on its inputs.
    /// `None` marks a partitioning origin (e.g. Dispatch).
    pub split_inputs: Option<Vec<(usize, usize)>>,
    /// One entry per output; -1 means "do not propagate" on that output.
    pub split_output_dims: Vec<i64>,
    pub task_num_policy: TaskNumPolicy,
    /// Metadata inputs skipped during split checking (e.g. Combine offsets).
    pub ignored_input_indices: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn origin(policy: TaskNumPolicy, split_output_dims: Vec<i64>) -> Self {
        SplitSpec {
            split_inputs: None,
            split_output_dims,
            task_num_policy: policy,
            ignored_input_indices: BTreeSet::new(),
        }
    }

    pub fn inherit(
        split_inputs: Vec<(usize, usize)>,
        policy: TaskNumPolicy,
        split_output_dims: Vec<i64>,
    ) -> Self {
        SplitSpec {
            split_inputs: Some(split_inputs),
            split_output_dims,
            task_num_policy: policy,
            ignored_input_indices: BTreeSet::new(),
        }
    }

    pub fn with_ignored(mut self, ignored: impl IntoIterator<Item = usize>) -> Self {
        self.ignored_input_indices = ignored.into_iter().collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub id: OpId,
    pub kind: OperatorKind,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub spec: SplitSpec,
    /// Filled by split propagation via `annotate`.
    pub task_num: Option<usize>,
}

/// Shape and parallel configuration for one rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub seq_len: usize,
    pub microbatch: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub top_k: usize,
    pub total_experts: usize,
    pub ep_size: usize,
    pub local_experts: usize,
    pub rank_id: usize,
}

impl ShapeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0
            || self.microbatch == 0
            || self.hidden == 0
            || self.intermediate == 0
            || self.top_k == 0
            || self.total_experts == 0
            || self.ep_size == 0
            || self.local_experts == 0
        {
            return Err(Error::ConfigError("all shape fields must be positive".into()));
        }
        if self.total_experts != self.ep_size * self.local_experts {
            return Err(Error::ConfigError(format!(
                "total_experts {} != ep_size {} * local_experts {}",
                self.total_experts, self.ep_size, self.local_experts
            )));
        }
        if self.top_k > self.total_experts {
            return Err(Error::ConfigError(format!(
                "top_k {} > total_experts {}",
                self.top_k, self.total_experts
            )));
        }
        if self.rank_id >= self.ep_size {
            return Err(Error::ConfigError(format!(
                "rank_id {} out of range for ep_size {}",
                self.rank_id, self.ep_size
            )));
        }
        Ok(())
    }

    /// Local token count on one rank.
    pub fn tokens(&self) -> usize {
        self.seq_len * self.microbatch
    }

    pub fn with_rank(&self, rank_id: usize) -> ShapeConfig {
        ShapeConfig { rank_id, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Odg {
    pub tensors: BTreeMap<TensorId, TensorNode>,
    pub operators: BTreeMap<OpId, OperatorNode>,
    pub shape_config: ShapeConfig,
}

impl Odg {
    pub fn new(shape_config: ShapeConfig) -> Self {
        Odg { tensors: BTreeMap::new(), operators: BTreeMap::new(), shape_config }
    }

    pub fn add_tensor(&mut self, name: &str, shape: Vec<usize>, dtype: DTypeTag) -> TensorId {
        let id = self.tensors.len();
        self.tensors.insert(id, TensorNode::new(id, name, shape, dtype));
        id
    }

    pub fn add_operator(
        &mut self,
        kind: OperatorKind,
        inputs: Vec<TensorId>,
        outputs: Vec<TensorId>,
        spec: SplitSpec,
    ) -> OpId {
        let id = self.operators.len();
        self.operators.insert(id, OperatorNode { id, kind, inputs, outputs, spec, task_num: None });
        id
    }

    pub fn tensor(&self, id: TensorId) -> Result<&TensorNode> {
        self.tensors.get(&id).ok_or(Error::DanglingReference(id))
    }

    pub fn op(&self, id: OpId) -> Result<&OperatorNode> {
        self.operators.get(&id).ok_or(Error::InvalidGraph(format!("unknown operator {id}")))
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&TensorNode> {
        self.tensors.values().find(|t| t.name == name)
    }

    /// Operator producing a tensor, if any. Graph inputs have no producer.
    pub fn producer_of(&self, tensor: TensorId) -> Option<OpId> {
        self.operators.values().find(|op| op.outputs.contains(&tensor)).map(|op| op.id)
    }

    pub fn consumers_of(&self, tensor: TensorId) -> Vec<OpId> {
        self.operators
            .values()
            .filter(|op| op.inputs.contains(&tensor))
            .map(|op| op.id)
            .collect()
    }

    pub fn is_graph_input(&self, tensor: TensorId) -> bool {
        self.producer_of(tensor).is_none()
    }

    /// Operator-to-operator dependency edges via shared tensors.
    /// An operator consuming a tensor it also produces (intra-operator
    /// staging) does not form an edge.
    pub fn op_edges(&self) -> Vec<(OpId, OpId)> {
        let mut edges = BTreeSet::new();
        for op in self.operators.values() {
            for &t in &op.inputs {
                if let Some(p) = self.producer_of(t) {
                    if p != op.id {
                        edges.insert((p, op.id));
                    }
                }
            }
        }
        edges.into_iter().collect()
    }

    pub fn find_op(&self, kind: OperatorKind) -> Option<&OperatorNode> {
        self.operators.values().find(|o| o.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DanglingReference { op: OpId, tensor: TensorId },
    MultipleProducers { tensor: TensorId, producers: Vec<OpId> },
    DuplicateOutput { op: OpId, tensor: TensorId },
    CyclicGraph { witness: Vec<OpId> },
    ShapeMismatch { op: OpId, msg: String },
    SplitSpecOutOfRange { op: OpId, msg: String },
    /// A tensor labeled (-1, n) with n > 1 consumed by an operator that
    /// requires a partition label: the consumer will fall back (flagged,
    /// not rejected).
    UnlabeledMultiTaskInput { op: OpId, tensor: TensorId },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DanglingReference { op, tensor } => {
                write!(f, "operator {op} references unknown tensor {tensor}")
            }
            Violation::MultipleProducers { tensor, producers } => {
                write!(f, "multiple producers for tensor {tensor}: {producers:?}")
            }
            Violation::DuplicateOutput { op, tensor } => {
                write!(f, "operator {op} lists output tensor {tensor} twice")
            }
            Violation::CyclicGraph { witness } => write!(f, "cycle through operators {witness:?}"),
            Violation::ShapeMismatch { op, msg } => write!(f, "operator {op}: {msg}"),
            Violation::SplitSpecOutOfRange { op, msg } => write!(f, "operator {op}: {msg}"),
            Violation::UnlabeledMultiTaskInput { op, tensor } => {
                write!(f, "operator {op} consumes multi-task unlabeled tensor {tensor}")
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Structural validation: single producer, acyclicity, split-spec ranges,
/// and per-kind shape consistency.
pub fn validate_graph(g: &Odg) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut producers: BTreeMap<TensorId, Vec<OpId>> = BTreeMap::new();
    for op in g.operators.values() {
        for &t in op.inputs.iter().chain(op.outputs.iter()) {
            if !g.tensors.contains_key(&t) {
                report.violations.push(Violation::DanglingReference { op: op.id, tensor: t });
            }
        }
        let mut seen = HashSet::new();
        for &t in &op.outputs {
            if !seen.insert(t) {
                report.violations.push(Violation::DuplicateOutput { op: op.id, tensor: t });
            }
            producers.entry(t).or_default().push(op.id);
        }
    }
    for (tensor, ps) in &producers {
        if ps.len() > 1 {
            report
                .violations
                .push(Violation::MultipleProducers { tensor: *tensor, producers: ps.clone() });
        }
    }

    if let Err(Error::CyclicGraph(witness)) = topological_sort(g) {
        report.violations.push(Violation::CyclicGraph { witness });
    }

    for op in g.operators.values() {
        check_split_spec(g, op, &mut report);
        check_shapes(g, op, &mut report);
        // Post-propagation flag for Alg. 1's (-1, n>1) else-branch outputs.
        if let Some(si) = &op.spec.split_inputs {
            for &(i, _) in si {
                if op.spec.ignored_input_indices.contains(&i) {
                    continue;
                }
                if let Some(&t) = op.inputs.get(i) {
                    if let Ok(tn) = g.tensor(t) {
                        if tn.split_num > 1 && tn.split_dim < 0 {
                            report
                                .violations
                                .push(Violation::UnlabeledMultiTaskInput { op: op.id, tensor: t });
                        }
                    }
                }
            }
        }
    }

    report
}

fn check_split_spec(g: &Odg, op: &OperatorNode, report: &mut ValidationReport) {
    if let Some(si) = &op.spec.split_inputs {
        for &(i, d) in si {
            if op.spec.ignored_input_indices.contains(&i) {
                continue;
            }
            match op.inputs.get(i) {
                None => report.violations.push(Violation::SplitSpecOutOfRange {
                    op: op.id,
                    msg: format!("split_inputs references input index {i} of {}", op.inputs.len()),
                }),
                Some(&t) => {
                    if let Ok(tn) = g.tensor(t) {
                        if d >= tn.rank() {
                            report.violations.push(Violation::SplitSpecOutOfRange {
                                op: op.id,
                                msg: format!("split dim {d} out of range for tensor {t}"),
                            });
                        }
                    }
                }
            }
        }
    }
    if op.spec.split_output_dims.len() != op.outputs.len() {
        report.violations.push(Violation::SplitSpecOutOfRange {
            op: op.id,
            msg: format!(
                "split_output_dims has {} entries for {} outputs",
                op.spec.split_output_dims.len(),
                op.outputs.len()
            ),
        });
    }
}

fn check_shapes(g: &Odg, op: &OperatorNode, report: &mut ValidationReport) {
    let shape = |t: TensorId| g.tensor(t).map(|tn| tn.shape.clone());
    let mut fail = |msg: String| report.violations.push(Violation::ShapeMismatch { op: op.id, msg });

    let get = |ids: &[TensorId]| -> Option<Vec<Vec<usize>>> {
        ids.iter().map(|&t| shape(t).ok()).collect()
    };
    let (ins, outs) = match (get(&op.inputs), get(&op.outputs)) {
        (Some(i), Some(o)) => (i, o),
        _ => return, // dangling refs already reported
    };

    match op.kind {
        OperatorKind::Gmm1 | OperatorKind::Gmm2 => {
            // [r, k] x [e, k, n] -> [r, n]
            if ins.len() < 2 || outs.is_empty() {
                return fail("GMM needs data + weight inputs and one output".into());
            }
            let (d, w, o) = (&ins[0], &ins[1], &outs[0]);
            if d.len() != 2 || w.len() != 3 || o.len() != 2 {
                return fail("GMM expects 2-d data, 3-d weight, 2-d output".into());
            }
            if d[1] != w[1] || o[1] != w[2] || o[0] != d[0] {
                fail(format!("GMM shapes inconsistent: data {d:?} weight {w:?} out {o:?}"));
            }
        }
        OperatorKind::GmmActGrad | OperatorKind::GmmGateGrad => {
            // [r, n] x [e, k, n] -> [r, k] (multiply by transposed weight)
            if ins.len() < 2 || outs.is_empty() {
                return fail("GMM grad needs data + weight inputs and one output".into());
            }
            let (d, w, o) = (&ins[0], &ins[1], &outs[0]);
            if d.len() != 2 || w.len() != 3 || o.len() != 2 {
                return fail("GMM grad expects 2-d data, 3-d weight, 2-d output".into());
            }
            if d[1] != w[2] || o[1] != w[1] || o[0] != d[0] {
                fail(format!("GMM grad shapes inconsistent: data {d:?} weight {w:?} out {o:?}"));
            }
        }
        OperatorKind::GmmW2Grad | OperatorKind::GmmW1Grad => {
            // [r, n] x [r, k] -> [e, k, n]
            if ins.len() < 2 || outs.is_empty() {
                return fail("weight grad needs two row inputs and one output".into());
            }
            let (d, a, o) = (&ins[0], &ins[1], &outs[0]);
            if d.len() != 2 || a.len() != 2 || o.len() != 3 {
                return fail("weight grad expects two 2-d inputs and a 3-d output".into());
            }
            if d[0] != a[0] || o[1] != a[1] || o[2] != d[1] {
                fail(format!("weight grad shapes inconsistent: {d:?} {a:?} -> {o:?}"));
            }
        }
        OperatorKind::Swiglu => {
            let (i, o) = (&ins[0], &outs[0]);
            if i[i.len() - 1] % 2 != 0 || o[o.len() - 1] * 2 != i[i.len() - 1] || i[0] != o[0] {
                fail(format!("SwiGLU shapes inconsistent: {i:?} -> {o:?}"));
            }
        }
        OperatorKind::SwigluGrad => {
            if ins.len() < 2 || outs.is_empty() {
                return fail("SwiGLUGrad needs (h, da) inputs".into());
            }
            let (h, da, o) = (&ins[0], &ins[1], &outs[0]);
            if h[1] != 2 * da[1] || o != h || h[0] != da[0] {
                fail(format!("SwiGLUGrad shapes inconsistent: {h:?}, {da:?} -> {o:?}"));
            }
        }
        OperatorKind::ElemAdd => {
            if ins.len() < 2 || ins[0] != ins[1] || outs[0] != ins[0] {
                fail(format!("ElemAdd shapes must all match: {ins:?} -> {outs:?}"));
            }
        }
        OperatorKind::Dispatch | OperatorKind::BwdDispatch => {
            if ins.is_empty() || outs.is_empty() {
                return fail("dispatch needs token input and routed output".into());
            }
            let (i, o) = (&ins[0], &outs[0]);
            if i.len() != 2 || o.len() != 2 || i[1] != o[1] {
                fail(format!("dispatch column mismatch: {i:?} -> {o:?}"));
            }
        }
        OperatorKind::Combine | OperatorKind::BwdCombine => {
            if ins.is_empty() || outs.is_empty() {
                return fail("combine needs routed input and token output".into());
            }
            let (i, o) = (&ins[0], &outs[0]);
            if i.len() != 2 || o.len() != 2 || i[1] != o[1] {
                fail(format!("combine column mismatch: {i:?} -> {o:?}"));
            }
        }
    }
}

/// Deterministic topological order; ties broken by ascending operator id.
pub fn topological_sort(g: &Odg) -> Result<Vec<OpId>> {
    let edges = g.op_edges();
    let mut indeg: BTreeMap<OpId, usize> = g.operators.keys().map(|&id| (id, 0)).collect();
    let mut succ: BTreeMap<OpId, Vec<OpId>> = BTreeMap::new();
    for &(a, b) in &edges {
        *indeg.get_mut(&b).unwrap() += 1;
        succ.entry(a).or_default().push(b);
    }
    // min-heap on operator id
    let mut ready: BinaryHeap<std::cmp::Reverse<OpId>> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| std::cmp::Reverse(id))
        .collect();
    let mut order = Vec::with_capacity(g.operators.len());
    while let Some(std::cmp::Reverse(id)) = ready.pop() {
        order.push(id);
        if let Some(ss) = succ.get(&id) {
            for &s in ss {
                let d = indeg.get_mut(&s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(std::cmp::Reverse(s));
                }
            }
        }
    }
    if order.len() != g.operators.len() {
        let remaining: BTreeSet<OpId> =
            indeg.iter().filter(|(_, &d)| d > 0).map(|(&id, _)| id).collect();
        return Err(Error::CyclicGraph(find_cycle_witness(&remaining, &succ)));
    }
    Ok(order)
}

/// Shortest cycle inside the non-peelable residual subgraph.
fn find_cycle_witness(nodes: &BTreeSet<OpId>, succ: &BTreeMap<OpId, Vec<OpId>>) -> Vec<OpId> {
    let mut best: Option<Vec<OpId>> = None;
    for &start in nodes {
        // BFS from start back to start within `nodes`
        let mut parent: BTreeMap<OpId, OpId> = BTreeMap::new();
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(start);
        let mut found = None;
        let mut visited = BTreeSet::new();
        visited.insert(start);
        'bfs: while let Some(u) = queue.pop_front() {
            for &v in succ.get(&u).into_iter().flatten() {
                if !nodes.contains(&v) {
                    continue;
                }
                if v == start {
                    found = Some(u);
                    break 'bfs;
                }
                if visited.insert(v) {
                    parent.insert(v, u);
                    queue.push_back(v);
                }
            }
        }
        if let Some(mut u) = found {
            let mut path = vec![start];
            let mut rev = Vec::new();
            while u != start {
                rev.push(u);
                u = parent[&u];
            }
            rev.reverse();
            path.extend(rev);
            path.push(start);
            if best.as_ref().map_or(true, |b| path.len() < b.len()) {
                best = Some(path);
            }
        }
    }
    best.unwrap_or_default()
}

/// JSON serialization of an ODG; deserialization re-validates.
pub fn odg_to_json(g: &Odg) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(g).map_err(|e| Error::ParseError(e.to_string()))
}

pub fn odg_from_json(bytes: &[u8]) -> Result<Odg> {
    let g: Odg = serde_json::from_slice(bytes).map_err(|e| Error::ParseError(e.to_string()))?;
    let report = validate_graph(&g);
    let hard = report
        .violations
        .iter()
        .filter(|v| !matches!(v, Violation::UnlabeledMultiTaskInput { .. }))
        .collect::<Vec<_>>();
    if !hard.is_empty() {
        return Err(Error::InvalidGraph(
            hard.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
        ));
    }
    Ok(g)
}
