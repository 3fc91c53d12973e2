//! Shared fixtures for the criterion benches.

use moeflow_core::compile::{compile_moe, Compiled, CompileOptions, MoeGraphKind};
use moeflow_core::graph::ShapeConfig;
use moeflow_core::routing::{balanced_plan, RoutingPlan};

pub fn bench_config(ep: usize) -> ShapeConfig {
    ShapeConfig {
        seq_len: 32,
        microbatch: 1,
        hidden: 64,
        intermediate: 32,
        top_k: 2,
        total_experts: 2 * ep,
        ep_size: ep,
        local_experts: 2,
        rank_id: 0,
    }
}

pub fn bench_compiled(ep: usize, kind: MoeGraphKind) -> (Compiled, RoutingPlan) {
    let cfg = bench_config(ep);
    let plan = balanced_plan(&cfg).expect("valid config");
    let compiled = compile_moe(kind, &cfg, &plan, &CompileOptions::default()).expect("compiles");
    (compiled, plan)
}
