//! Validated constructors for the forward / backward MoE-FFN graphs and
//! the SwiGLU+Add microbenchmark chain.
//!
//! Tensor naming convention: `t_<name>`; all activation tensors are F32.
//! Combine-style operators carry a staging output (`*_cstage`) that
//! receives remote tiles before the per-token reduction.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{
    DTypeTag, Odg, OperatorKind, ShapeConfig, SplitSpec, TaskNumPolicy, validate_graph,
};

fn finish(g: Odg) -> Result<Odg> {
    let report = validate_graph(&g);
    if !report.is_ok() {
        return Err(Error::InvalidGraph(
            report.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
        ));
    }
    Ok(g)
}

/// Forward MoE-FFN: Dispatch -> GMM1 -> SwiGLU -> GMM2 -> Combine.
///
/// Assumes balanced routing: this rank receives tokens() * top_k rows.
pub fn build_forward_moe_ffn(c: &ShapeConfig) -> Result<Odg> {
    build_forward_moe_ffn_with_rows(c, c.tokens() * c.top_k)
}

/// Forward graph with an explicit received-row count (natural routing).
pub fn build_forward_moe_ffn_with_rows(c: &ShapeConfig, recv_rows: usize) -> Result<Odg> {
    c.validate()?;
    if recv_rows == 0 {
        return Err(Error::ConfigError(
            "rank receives zero routed rows; such plans are not compilable".into(),
        ));
    }
    let (t, h, i) = (c.tokens(), c.hidden, c.intermediate);
    let (e, k) = (c.local_experts, c.top_k);
    let f32t = DTypeTag::F32;

    let mut g = Odg::new(c.clone());
    let t_x = g.add_tensor("t_x", vec![t, h], f32t);
    let t_xr = g.add_tensor("t_xr", vec![recv_rows, h], f32t);
    let t_offsets = g.add_tensor("t_offsets", vec![c.total_experts], f32t);
    let t_sizes = g.add_tensor("t_sizes", vec![c.total_experts], f32t);
    let t_w1 = g.add_tensor("t_w1", vec![e, h, 2 * i], f32t);
    let t_h1 = g.add_tensor("t_h1", vec![recv_rows, 2 * i], f32t);
    let t_a = g.add_tensor("t_a", vec![recv_rows, i], f32t);
    let t_w2 = g.add_tensor("t_w2", vec![e, i, h], f32t);
    let t_z = g.add_tensor("t_z", vec![recv_rows, h], f32t);
    let t_y = g.add_tensor("t_y", vec![t, h], f32t);
    let t_cstage = g.add_tensor("t_cstage", vec![t * k, h], f32t);

    g.add_operator(
        OperatorKind::Dispatch,
        vec![t_x],
        vec![t_xr, t_offsets, t_sizes],
        SplitSpec::origin(TaskNumPolicy::PerDestRank, vec![0, -1, -1]),
    );
    g.add_operator(
        OperatorKind::Gmm1,
        vec![t_xr, t_w1],
        vec![t_h1],
        SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::Fixed(e), vec![0]),
    );
    g.add_operator(
        OperatorKind::Swiglu,
        vec![t_h1],
        vec![t_a],
        SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::InheritInputSplit, vec![0]),
    );
    g.add_operator(
        OperatorKind::Gmm2,
        vec![t_a, t_w2],
        vec![t_z],
        SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::Fixed(e), vec![0]),
    );
    g.add_operator(
        OperatorKind::Combine,
        vec![t_z, t_offsets, t_sizes],
        vec![t_y, t_cstage],
        SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::InheritInputSplit, vec![-1, -1])
            .with_ignored([1usize, 2]),
    );
    finish(g)
}

/// Backward MoE-FFN: BwdDispatch feeds GmmActGrad and GmmW2Grad;
/// GmmActGrad -> SwiGLUGrad -> {GmmGateGrad, GmmW1Grad};
/// GmmGateGrad -> BwdCombine. GmmW2Grad / GmmW1Grad are gradient sinks.
pub fn build_backward_moe_ffn(c: &ShapeConfig) -> Result<Odg> {
    build_backward_moe_ffn_with_rows(c, c.tokens() * c.top_k)
}

pub fn build_backward_moe_ffn_with_rows(c: &ShapeConfig, recv_rows: usize) -> Result<Odg> {
    c.validate()?;
    if recv_rows == 0 {
        return Err(Error::ConfigError(
            "rank receives zero routed rows; such plans are not compilable".into(),
        ));
    }
    let (t, h, i) = (c.tokens(), c.hidden, c.intermediate);
    let (e, k) = (c.local_experts, c.top_k);
    let f32t = DTypeTag::F32;

    let mut g = Odg::new(c.clone());
    let t_dy = g.add_tensor("t_dy", vec![t, h], f32t);
    let t_dz = g.add_tensor("t_dz", vec![recv_rows, h], f32t);
    let t_boffsets = g.add_tensor("t_boffsets", vec![c.total_experts], f32t);
    let t_bsizes = g.add_tensor("t_bsizes", vec![c.total_experts], f32t);
    let t_w2 = g.add_tensor("t_w2", vec![e, i, h], f32t);
    let t_da = g.add_tensor("t_da", vec![recv_rows, i], f32t);
    let t_a = g.add_tensor("t_a", vec![recv_rows, i], f32t);
    let t_dw2 = g.add_tensor("t_dw2", vec![e, i, h], f32t);
    let t_h1 = g.add_tensor("t_h1", vec![recv_rows, 2 * i], f32t);
    let t_dh1 = g.add_tensor("t_dh1", vec![recv_rows, 2 * i], f32t);
    let t_w1 = g.add_tensor("t_w1", vec![e, h, 2 * i], f32t);
    let t_dxr = g.add_tensor("t_dxr", vec![recv_rows, h], f32t);
    let t_xr = g.add_tensor("t_xr", vec![recv_rows, h], f32t);
    let t_dw1 = g.add_tensor("t_dw1", vec![e, h, 2 * i], f32t);
    let t_dx = g.add_tensor("t_dx", vec![t, h], f32t);
    let t_bstage = g.add_tensor("t_bstage", vec![t * k, h], f32t);

    g.add_operator(
        OperatorKind::BwdDispatch,
        vec![t_dy],
        vec![t_dz, t_boffsets, t_bsizes],
        SplitSpec::origin(TaskNumPolicy::PerDestRank, vec![0, -1, -1]),
    );
    g.add_operator(
        OperatorKind::GmmActGrad,
        vec![t_dz, t_w2],
        vec![t_da],
        SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::Fixed(e), vec![0]),
    );
    g.add_operator(
        OperatorKind::GmmW2Grad,
        vec![t_dz, t_a],
        vec![t_dw2],
        SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::Fixed(e), vec![0]),
    );
    g.add_operator(
        OperatorKind::SwigluGrad,
        vec![t_h1, t_da],
        vec![t_dh1],
        SplitSpec::inherit(vec![(1, 0)], TaskNumPolicy::InheritInputSplit, vec![0]),
    );
    g.add_operator(
        OperatorKind::GmmGateGrad,
        vec![t_dh1, t_w1],
        vec![t_dxr],
        SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::Fixed(e), vec![0]),
    );
    g.add_operator(
        OperatorKind::GmmW1Grad,
        vec![t_dh1, t_xr],
        vec![t_dw1],
        SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::Fixed(e), vec![0]),
    );
    g.add_operator(
        OperatorKind::BwdCombine,
        vec![t_dxr, t_boffsets, t_bsizes],
        vec![t_dx, t_bstage],
        SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::InheritInputSplit, vec![-1, -1])
            .with_ignored([1usize, 2]),
    );
    finish(g)
}

/// Two-operator SwiGLU -> ElemAdd microbenchmark chain.
/// SwiGLU input is m x hidden_in; ElemAdd operates on m x (hidden_in / 2).
pub fn build_swiglu_add_chain(m: usize, hidden_in: usize) -> Result<Odg> {
    let block = if m % 1024 == 0 { 1024 } else { 1 };
    build_swiglu_add_chain_with_block(m, hidden_in, block)
}

pub fn build_swiglu_add_chain_with_block(m: usize, hidden_in: usize, block: usize) -> Result<Odg> {
    if m == 0 {
        return Err(Error::ConfigError("m must be >= 1".into()));
    }
    if hidden_in % 2 != 0 {
        return Err(Error::ConfigError(format!("hidden_in {hidden_in} must be even")));
    }
    if block == 0 || m % block != 0 {
        return Err(Error::ConfigError(format!("block {block} must divide m {m}")));
    }
    let half = hidden_in / 2;
    // Shape fields beyond m / hidden are placeholders: the chain is
    // single-rank and expert-free.
    let c = ShapeConfig {
        seq_len: m,
        microbatch: 1,
        hidden: hidden_in,
        intermediate: half,
        top_k: 1,
        total_experts: 1,
        ep_size: 1,
        local_experts: 1,
        rank_id: 0,
    };
    let f32t = DTypeTag::F32;
    let mut g = Odg::new(c);
    let t_h = g.add_tensor("t_h", vec![m, hidden_in], f32t);
    let t_a = g.add_tensor("t_a", vec![m, half], f32t);
    let t_bias = g.add_tensor("t_bias", vec![m, half], f32t);
    let t_out = g.add_tensor("t_out", vec![m, half], f32t);

    g.add_operator(
        OperatorKind::Swiglu,
        vec![t_h],
        vec![t_a],
        SplitSpec {
            split_inputs: None,
            split_output_dims: vec![0],
            task_num_policy: TaskNumPolicy::PerExpertBlock(block),
            ignored_input_indices: BTreeSet::new(),
        },
    );
    g.add_operator(
        OperatorKind::ElemAdd,
        vec![t_a, t_bias],
        vec![t_out],
        SplitSpec::inherit(vec![(0, 0)], TaskNumPolicy::InheritInputSplit, vec![0]),
    );
    finish(g)
}
